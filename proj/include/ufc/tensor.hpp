#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace ufc {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename T>
using ArrayX = Eigen::Array<T, Eigen::Dynamic, 1>;
template <typename T>
using MatrixR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
struct TensorData {
  Shape shape;
  ArrayX<T> v;
  bool requires_grad = false;
  bool leaf = true;
  ArrayX<T> grad;  // allocated iff requires_grad on a leaf
};

// Dense row-major tensor, shared-handle semantics. Values are immutable once
// an op has consumed the tensor; only leaf parameters are updated in place
// between tape lifetimes.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s) { return filled(std::move(s), T(0)); }

  static Tensor full(Shape s, T value) { return filled(std::move(s), value); }

  static Tensor scalar(T value) { return filled(Shape{1}, value); }

  static Tensor from(Shape s, ArrayX<T> values) {
    if (values.size() != numel(s))
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(s));
    auto d = std::make_shared<TensorData<T>>();
    d->shape = std::move(s);
    d->v = std::move(values);
    return Tensor(std::move(d));
  }

  static Tensor from(Shape s, const std::vector<T>& values) {
    ArrayX<T> a(static_cast<Index>(values.size()));
    for (Index i = 0; i < a.size(); ++i) a[i] = values[static_cast<std::size_t>(i)];
    return from(std::move(s), std::move(a));
  }

  template <typename F>
  static Tensor generate(Shape s, F&& fill) {
    ArrayX<T> a(numel(s));
    for (Index i = 0; i < a.size(); ++i) a[i] = static_cast<T>(fill());
    return from(std::move(s), std::move(a));
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  Index dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
  Index size() const { return d_->v.size(); }

  const ArrayX<T>& array() const { return d_->v; }
  ArrayX<T>& array() { return d_->v; }

  T item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return d_->v[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  bool leaf() const { return d_->leaf; }

  Tensor& set_requires_grad(bool b) {
    if (!d_->leaf) throw std::logic_error("set_requires_grad: only valid on leaf tensors");
    d_->requires_grad = b;
    if (b && d_->grad.size() != d_->v.size()) d_->grad = ArrayX<T>::Zero(d_->v.size());
    return *this;
  }

  const ArrayX<T>& grad() const {
    if (!d_->requires_grad || !d_->leaf) throw std::logic_error("grad: tensor does not hold a gradient");
    return d_->grad;
  }

  void zero_grad() {
    if (d_->requires_grad) d_->grad.setZero();
  }

  /// Detached value copy (constant leaf, no grad).
  Tensor detach() const { return from(shape(), ArrayX<T>(d_->v)); }

  TensorData<T>* node() const { return d_.get(); }
  const std::shared_ptr<TensorData<T>>& handle() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData<T>> d) : d_(std::move(d)) {}

  static Tensor filled(Shape s, T value) {
    auto d = std::make_shared<TensorData<T>>();
    d->v = ArrayX<T>::Constant(numel(s), value);
    d->shape = std::move(s);
    return Tensor(std::move(d));
  }

  std::shared_ptr<TensorData<T>> d_;
};

// Scratch gradients used during one backward traversal. Leaf gradients
// accumulate into the persistent per-tensor buffer; intermediate gradients
// live only in the scratch map, so a second backward call adds exactly one
// more copy of the gradient to every leaf.
template <typename T>
class GradStore {
 public:
  const ArrayX<T>* find(const TensorData<T>* n) const {
    auto it = scratch_.find(n);
    return it == scratch_.end() ? nullptr : &it->second;
  }

  template <typename E>
  void add(const std::shared_ptr<TensorData<T>>& n, const E& expr) {
    if (!n->requires_grad) return;
    if (n->leaf) {
      n->grad += expr;
    } else {
      auto [it, inserted] = scratch_.try_emplace(n.get());
      if (inserted) it->second = ArrayX<T>::Zero(n->v.size());
      it->second += expr;
    }
  }

  void seed(const std::shared_ptr<TensorData<T>>& n) {
    if (n->leaf) {
      if (n->requires_grad) n->grad += ArrayX<T>::Ones(n->v.size());
    } else {
      scratch_[n.get()] = ArrayX<T>::Ones(n->v.size());
    }
  }

 private:
  std::unordered_map<const TensorData<T>*, ArrayX<T>> scratch_;
};

// Ordered record of executed ops. Constructing a Tape makes it current for
// the thread; ops record themselves while any input requires grad. backward
// replays entries in exact reverse execution order.
template <typename T>
class Tape {
 public:
  using BackFn = std::function<void(GradStore<T>&, const ArrayX<T>&)>;

  Tape() : prev_(current_ref()) { current_ref() = this; }
  ~Tape() { current_ref() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_ref(); }

  void record(std::shared_ptr<TensorData<T>> out, BackFn fn) {
    entries_.push_back(Entry{std::move(out), std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }

  void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss has shape " + shape_str(loss.shape()) + ", expected scalar");
    GradStore<T> grads;
    grads.seed(loss.handle());
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      const ArrayX<T>* gout = grads.find(it->out.get());
      if (gout == nullptr) continue;  // not on the path to the loss
      it->back(grads, *gout);
    }
  }

 private:
  struct Entry {
    std::shared_ptr<TensorData<T>> out;
    BackFn back;
  };

  static Tape*& current_ref() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  std::vector<Entry> entries_;
  Tape* prev_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* t = Tape<T>::current();
  if (t == nullptr) throw std::logic_error("backward: no active tape");
  t->backward(loss);
}

}  // namespace ufc
