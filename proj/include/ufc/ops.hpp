#pragma once

#include "ufc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace ufc {

struct ValueError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <typename T>
void ensure_finite(const char* op, const ArrayX<T>& v) {
  if (!v.isFinite().all()) throw NonFiniteError(std::string(op) + ": non-finite values in result");
}

template <typename T>
Tensor<T> result(const char* op, Shape s, ArrayX<T> v) {
  ensure_finite<T>(op, v);
  return Tensor<T>::from(std::move(s), std::move(v));
}

template <typename T, typename... Ins>
Tape<T>* recording(const Ins&... ins) {
  Tape<T>* t = Tape<T>::current();
  if (t == nullptr) return nullptr;
  const bool any = (ins.requires_grad() || ...);
  return any ? t : nullptr;
}

template <typename T>
void mark_output(Tensor<T>& out) {
  out.node()->requires_grad = true;
  out.node()->leaf = false;
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops. Shapes must match exactly; the only broadcasting in
// the op set is scalar-tensor.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> out = detail::result<T>("add", a.shape(), a.array() + b.array());
  if (auto* tape = detail::recording<T>(a, b)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle(), bn = b.handle()](GradStore<T>& g, const ArrayX<T>& go) {
      g.add(an, go);
      g.add(bn, go);
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  Tensor<T> out = detail::result<T>("sub", a.shape(), a.array() - b.array());
  if (auto* tape = detail::recording<T>(a, b)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle(), bn = b.handle()](GradStore<T>& g, const ArrayX<T>& go) {
      g.add(an, go);
      g.add(bn, -go);
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> out = detail::result<T>("mul", a.shape(), a.array() * b.array());
  if (auto* tape = detail::recording<T>(a, b)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle(), bn = b.handle()](GradStore<T>& g, const ArrayX<T>& go) {
      if (an->requires_grad) g.add(an, go * bn->v);
      if (bn->requires_grad) g.add(bn, go * an->v);
    });
  }
  return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("div", a, b);
  if ((b.array() == T(0)).any()) throw ValueError("div: division by zero");
  Tensor<T> out = detail::result<T>("div", a.shape(), a.array() / b.array());
  if (auto* tape = detail::recording<T>(a, b)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle(), bn = b.handle()](GradStore<T>& g, const ArrayX<T>& go) {
      if (an->requires_grad) g.add(an, go / bn->v);
      if (bn->requires_grad) g.add(bn, -go * an->v / (bn->v * bn->v));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scalar-tensor ops.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, T s) {
  Tensor<T> out = detail::result<T>("add", a.shape(), a.array() + s);
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle()](GradStore<T>& g, const ArrayX<T>& go) { g.add(an, go); });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, T s) {
  Tensor<T> out = detail::result<T>("mul", a.shape(), a.array() * s);
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle(), s](GradStore<T>& g, const ArrayX<T>& go) { g.add(an, go * s); });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, T s) { return add(a, -s); }

template <typename T>
Tensor<T> sub(T s, const Tensor<T>& a) {
  Tensor<T> out = detail::result<T>("sub", a.shape(), s - a.array());
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle()](GradStore<T>& g, const ArrayX<T>& go) { g.add(an, -go); });
  }
  return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, T s) {
  if (s == T(0)) throw ValueError("div: division by zero");
  Tensor<T> out = detail::result<T>("div", a.shape(), a.array() / s);
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle(), s](GradStore<T>& g, const ArrayX<T>& go) { g.add(an, go / s); });
  }
  return out;
}

template <typename T>
Tensor<T> div(T s, const Tensor<T>& a) {
  if ((a.array() == T(0)).any()) throw ValueError("div: division by zero");
  Tensor<T> out = detail::result<T>("div", a.shape(), s / a.array());
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle(), s](GradStore<T>& g, const ArrayX<T>& go) {
      g.add(an, -go * s / (an->v * an->v));
    });
  }
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) { return mul(a, T(-1)); }

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T s) { return add(a, s); }
template <typename T> Tensor<T> operator+(T s, const Tensor<T>& a) { return add(a, s); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, T s) { return sub(a, s); }
template <typename T> Tensor<T> operator-(T s, const Tensor<T>& a) { return sub(s, a); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul(a, s); }
template <typename T> Tensor<T> operator*(T s, const Tensor<T>& a) { return mul(a, s); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, T s) { return div(a, s); }
template <typename T> Tensor<T> operator/(T s, const Tensor<T>& a) { return div(s, a); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out = detail::result<T>("relu", a.shape(), a.array().max(T(0)));
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle()](GradStore<T>& g, const ArrayX<T>& go) {
      g.add(an, go * (an->v > T(0)).template cast<T>());
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  // Evaluated piecewise so neither tail overflows exp.
  ArrayX<T> v(a.size());
  for (Index i = 0; i < v.size(); ++i) {
    const T x = a.array()[i];
    v[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  }
  Tensor<T> out = detail::result<T>("sigmoid", a.shape(), std::move(v));
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle(), on = out.handle()](GradStore<T>& g, const ArrayX<T>& go) {
      g.add(an, go * on->v * (T(1) - on->v));
    });
  }
  return out;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  Tensor<T> out = detail::result<T>("exp", a.shape(), a.array().exp());
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle(), on = out.handle()](GradStore<T>& g, const ArrayX<T>& go) {
      g.add(an, go * on->v);
    });
  }
  return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  Tensor<T> out = detail::result<T>("log", a.shape(), a.array().log());
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle()](GradStore<T>& g, const ArrayX<T>& go) {
      g.add(an, go / an->v);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = detail::result<T>("sum", Shape{1}, ArrayX<T>::Constant(1, a.array().sum()));
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle()](GradStore<T>& g, const ArrayX<T>& go) {
      g.add(an, ArrayX<T>::Constant(an->v.size(), go[0]));
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const T n = static_cast<T>(a.size());
  Tensor<T> out = detail::result<T>("mean", Shape{1}, ArrayX<T>::Constant(1, a.array().sum() / n));
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle(), n](GradStore<T>& g, const ArrayX<T>& go) {
      g.add(an, ArrayX<T>::Constant(an->v.size(), go[0] / n));
    });
  }
  return out;
}

/// Sum along the last axis. A rank-1 input reduces to the scalar sum.
template <typename T>
Tensor<T> sum_last(const Tensor<T>& a) {
  if (a.rank() < 1) throw ShapeError("sum_last: rank-0 input");
  const Index m = a.dim(a.rank() - 1);
  const Index rows = a.size() / m;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = Shape{1};
  ArrayX<T> v(rows);
  for (Index r = 0; r < rows; ++r) v[r] = a.array().segment(r * m, m).sum();
  Tensor<T> out = detail::result<T>("sum_last", std::move(out_shape), std::move(v));
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle(), rows, m](GradStore<T>& g, const ArrayX<T>& go) {
      ArrayX<T> gx(rows * m);
      for (Index r = 0; r < rows; ++r) gx.segment(r * m, m).setConstant(go[r]);
      g.add(an, gx);
    });
  }
  return out;
}

/// L2 norm along the last axis, sqrt(sum(x^2) + 1e-12).
template <typename T>
Tensor<T> l2norm_last(const Tensor<T>& a) {
  if (a.rank() < 1) throw ShapeError("l2norm_last: rank-0 input");
  const Index m = a.dim(a.rank() - 1);
  const Index rows = a.size() / m;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = Shape{1};
  ArrayX<T> v(rows);
  for (Index r = 0; r < rows; ++r) v[r] = std::sqrt(a.array().segment(r * m, m).square().sum() + T(1e-12));
  Tensor<T> out = detail::result<T>("l2norm_last", std::move(out_shape), std::move(v));
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle(), on = out.handle(), rows, m](GradStore<T>& g, const ArrayX<T>& go) {
      ArrayX<T> gx(rows * m);
      for (Index r = 0; r < rows; ++r)
        gx.segment(r * m, m) = an->v.segment(r * m, m) * (go[r] / on->v[r]);
      g.add(an, gx);
    });
  }
  return out;
}

/// Rows scaled to unit L2 norm (norm stabilized as in l2norm_last).
template <typename T>
Tensor<T> l2normalize_last(const Tensor<T>& a) {
  if (a.rank() < 1) throw ShapeError("l2normalize_last: rank-0 input");
  const Index m = a.dim(a.rank() - 1);
  const Index rows = a.size() / m;
  ArrayX<T> norms(rows);
  ArrayX<T> v(a.size());
  for (Index r = 0; r < rows; ++r) {
    norms[r] = std::sqrt(a.array().segment(r * m, m).square().sum() + T(1e-12));
    v.segment(r * m, m) = a.array().segment(r * m, m) / norms[r];
  }
  Tensor<T> out = detail::result<T>("l2normalize_last", a.shape(), std::move(v));
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle(), norms, rows, m](GradStore<T>& g, const ArrayX<T>& go) {
      ArrayX<T> gx(rows * m);
      for (Index r = 0; r < rows; ++r) {
        const auto x = an->v.segment(r * m, m);
        const auto gr = go.segment(r * m, m);
        const T r1 = norms[r];
        const T dot = (gr * x).sum();
        gx.segment(r * m, m) = gr / r1 - x * (dot / (r1 * r1 * r1));
      }
      g.add(an, gx);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra and layout.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Eigen::Map<const MatrixR<T>> A(a.array().data(), m, k), B(b.array().data(), k, n);
  MatrixR<T> C = A * B;
  ArrayX<T> v = Eigen::Map<const ArrayX<T>>(C.data(), m * n);
  Tensor<T> out = detail::result<T>("matmul", Shape{m, n}, std::move(v));
  if (auto* tape = detail::recording<T>(a, b)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle(), bn = b.handle(), m, k, n](GradStore<T>& g, const ArrayX<T>& go) {
      Eigen::Map<const MatrixR<T>> G(go.data(), m, n);
      Eigen::Map<const MatrixR<T>> A2(an->v.data(), m, k), B2(bn->v.data(), k, n);
      if (an->requires_grad) {
        MatrixR<T> GA = G * B2.transpose();
        g.add(an, Eigen::Map<const ArrayX<T>>(GA.data(), m * k));
      }
      if (bn->requires_grad) {
        MatrixR<T> GB = A2.transpose() * G;
        g.add(bn, Eigen::Map<const ArrayX<T>>(GB.data(), k * n));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expects rank-2, got " + shape_str(a.shape()));
  const Index m = a.dim(0), n = a.dim(1);
  ArrayX<T> v(m * n);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) v[j * m + i] = a.array()[i * n + j];
  Tensor<T> out = detail::result<T>("transpose", Shape{n, m}, std::move(v));
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    tape->record(out.handle(), [an = a.handle(), m, n](GradStore<T>& g, const ArrayX<T>& go) {
      ArrayX<T> gx(m * n);
      for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < n; ++j) gx[i * n + j] = go[j * m + i];
      g.add(an, gx);
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
  if (numel(s) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(s));
  Tensor<T> out = detail::result<T>("reshape", std::move(s), ArrayX<T>(a.array()));
  if (auto* tape = detail::recording<T>(a)) {
    detail::mark_output(out);
    // Row-major flat layout is unchanged, so the gradient passes through as is.
    tape->record(out.handle(), [an = a.handle()](GradStore<T>& g, const ArrayX<T>& go) { g.add(an, go); });
  }
  return out;
}

/// Row-wise bias: [n,d] plus [d] added to every row.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& m, const Tensor<T>& v) {
  if (m.rank() != 2 || v.rank() != 1 || m.dim(1) != v.dim(0))
    throw ShapeError("add_rowvec: incompatible shapes " + shape_str(m.shape()) + " and " + shape_str(v.shape()));
  const Index rows = m.dim(0), d = m.dim(1);
  ArrayX<T> out_v(m.size());
  for (Index r = 0; r < rows; ++r) out_v.segment(r * d, d) = m.array().segment(r * d, d) + v.array();
  Tensor<T> out = detail::result<T>("add_rowvec", m.shape(), std::move(out_v));
  if (auto* tape = detail::recording<T>(m, v)) {
    detail::mark_output(out);
    tape->record(out.handle(), [mn = m.handle(), vn = v.handle(), rows, d](GradStore<T>& g, const ArrayX<T>& go) {
      g.add(mn, go);
      if (vn->requires_grad) {
        ArrayX<T> gv = ArrayX<T>::Zero(d);
        for (Index r = 0; r < rows; ++r) gv += go.segment(r * d, d);
        g.add(vn, gv);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ValueError("concat: no inputs");
  const int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range");
  Shape out_shape = parts[0].shape();
  Index axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != axis && p.dim(i) != out_shape[static_cast<std::size_t>(i)])
        throw ShapeError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = axis_total;

  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= out_shape[static_cast<std::size_t>(i)];

  ArrayX<T> v(numel(out_shape));
  Index axis_off = 0;
  for (const auto& p : parts) {
    const Index pa = p.dim(axis);
    for (Index o = 0; o < outer; ++o)
      v.segment((o * axis_total + axis_off) * inner, pa * inner) = p.array().segment(o * pa * inner, pa * inner);
    axis_off += pa;
  }
  Tensor<T> out = detail::result<T>("concat", std::move(out_shape), std::move(v));

  bool any_grad = false;
  for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
  if (Tape<T>* tape = Tape<T>::current(); tape != nullptr && any_grad) {
    detail::mark_output(out);
    std::vector<std::shared_ptr<TensorData<T>>> handles;
    std::vector<Index> widths;
    for (const auto& p : parts) {
      handles.push_back(p.handle());
      widths.push_back(p.dim(axis));
    }
    tape->record(out.handle(), [handles, widths, outer, inner, axis_total](GradStore<T>& g, const ArrayX<T>& go) {
      Index axis_off = 0;
      for (std::size_t i = 0; i < handles.size(); ++i) {
        const Index pa = widths[i];
        if (handles[i]->requires_grad) {
          ArrayX<T> gp(outer * pa * inner);
          for (Index o = 0; o < outer; ++o)
            gp.segment(o * pa * inner, pa * inner) = go.segment((o * axis_total + axis_off) * inner, pa * inner);
          g.add(handles[i], gp);
        }
        axis_off += pa;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image ops, NCHW layout.
// ---------------------------------------------------------------------------

namespace detail {

inline void require_rank(const char* op, int rank, const Shape& s, int want) {
  if (rank != want)
    throw ShapeError(std::string(op) + ": expects rank-" + std::to_string(want) + ", got " + shape_str(s));
}

// Gathers conv patches of x[n] into a [Ho*Wo, Ci*KH*KW] matrix, zero padding.
template <typename T>
void im2col(const ArrayX<T>& x, Index n, Index Ci, Index H, Index W, Index KH, Index KW, Index stride,
            Index pad, Index Ho, Index Wo, MatrixR<T>& patches) {
  const Index base = n * Ci * H * W;
  for (Index oh = 0; oh < Ho; ++oh) {
    for (Index ow = 0; ow < Wo; ++ow) {
      const Index row = oh * Wo + ow;
      Index col = 0;
      for (Index ci = 0; ci < Ci; ++ci) {
        for (Index kh = 0; kh < KH; ++kh) {
          const Index ih = oh * stride + kh - pad;
          for (Index kw = 0; kw < KW; ++kw, ++col) {
            const Index iw = ow * stride + kw - pad;
            patches(row, col) = (ih >= 0 && ih < H && iw >= 0 && iw < W)
                                    ? x[base + (ci * H + ih) * W + iw]
                                    : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add of a patch-gradient matrix back into the input gradient.
template <typename T>
void col2im_add(const MatrixR<T>& gpatches, Index n, Index Ci, Index H, Index W, Index KH, Index KW,
                Index stride, Index pad, Index Ho, Index Wo, ArrayX<T>& gx) {
  const Index base = n * Ci * H * W;
  for (Index oh = 0; oh < Ho; ++oh) {
    for (Index ow = 0; ow < Wo; ++ow) {
      const Index row = oh * Wo + ow;
      Index col = 0;
      for (Index ci = 0; ci < Ci; ++ci) {
        for (Index kh = 0; kh < KH; ++kh) {
          const Index ih = oh * stride + kh - pad;
          for (Index kw = 0; kw < KW; ++kw, ++col) {
            const Index iw = ow * stride + kw - pad;
            if (ih >= 0 && ih < H && iw >= 0 && iw < W) gx[base + (ci * H + ih) * W + iw] += gpatches(row, col);
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution of x [N,Ci,H,W] with w [Co,Ci,KH,KW] and bias b [Co].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Index stride, Index pad) {
  detail::require_rank("conv2d", x.rank(), x.shape(), 4);
  detail::require_rank("conv2d", w.rank(), w.shape(), 4);
  if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
  if (pad < 0) throw ValueError("conv2d: negative padding");
  const Index N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index Co = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  if (w.dim(1) != Ci)
    throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  if (b.rank() != 1 || b.dim(0) != Co)
    throw ShapeError("conv2d: bias shape " + shape_str(b.shape()) + " for " + std::to_string(Co) + " filters");
  const Index Ho = (H + 2 * pad - KH) / stride + 1;
  const Index Wo = (W + 2 * pad - KW) / stride + 1;
  if (H + 2 * pad < KH || W + 2 * pad < KW) throw ShapeError("conv2d: kernel larger than padded input");

  Eigen::Map<const MatrixR<T>> Wmat(w.array().data(), Co, Ci * KH * KW);
  ArrayX<T> v(N * Co * Ho * Wo);
  MatrixR<T> patches(Ho * Wo, Ci * KH * KW);
  for (Index n = 0; n < N; ++n) {
    detail::im2col(x.array(), n, Ci, H, W, KH, KW, stride, pad, Ho, Wo, patches);
    MatrixR<T> O = patches * Wmat.transpose();  // [Ho*Wo, Co]
    for (Index co = 0; co < Co; ++co)
      for (Index p = 0; p < Ho * Wo; ++p) v[((n * Co + co) * Ho * Wo) + p] = O(p, co) + b.array()[co];
  }
  Tensor<T> out = detail::result<T>("conv2d", Shape{N, Co, Ho, Wo}, std::move(v));

  if (auto* tape = detail::recording<T>(x, w, b)) {
    detail::mark_output(out);
    tape->record(out.handle(), [xn = x.handle(), wn = w.handle(), bn = b.handle(), N, Ci, H, W, Co, KH, KW,
                                stride, pad, Ho, Wo](GradStore<T>& g, const ArrayX<T>& go) {
      Eigen::Map<const MatrixR<T>> Wmat(wn->v.data(), Co, Ci * KH * KW);
      MatrixR<T> patches(Ho * Wo, Ci * KH * KW);
      MatrixR<T> Gw = MatrixR<T>::Zero(Co, Ci * KH * KW);
      ArrayX<T> gx;
      if (xn->requires_grad) gx = ArrayX<T>::Zero(xn->v.size());
      MatrixR<T> Gmat(Ho * Wo, Co);
      for (Index n = 0; n < N; ++n) {
        for (Index co = 0; co < Co; ++co)
          for (Index p = 0; p < Ho * Wo; ++p) Gmat(p, co) = go[(n * Co + co) * Ho * Wo + p];
        if (wn->requires_grad || xn->requires_grad) {
          if (wn->requires_grad) {
            detail::im2col(xn->v, n, Ci, H, W, KH, KW, stride, pad, Ho, Wo, patches);
            Gw.noalias() += Gmat.transpose() * patches;
          }
          if (xn->requires_grad) {
            MatrixR<T> GP = Gmat * Wmat;  // [Ho*Wo, Ci*KH*KW]
            detail::col2im_add(GP, n, Ci, H, W, KH, KW, stride, pad, Ho, Wo, gx);
          }
        }
      }
      if (xn->requires_grad) g.add(xn, gx);
      if (wn->requires_grad) g.add(wn, Eigen::Map<const ArrayX<T>>(Gw.data(), Gw.size()));
      if (bn->requires_grad) {
        ArrayX<T> gb = ArrayX<T>::Zero(Co);
        for (Index n = 0; n < N; ++n)
          for (Index co = 0; co < Co; ++co) gb[co] += go.segment((n * Co + co) * Ho * Wo, Ho * Wo).sum();
        g.add(bn, gb);
      }
    });
  }
  return out;
}

/// Transposed 2-D convolution of x [N,Ci,H,W] with w [Ci,Co,KH,KW], bias [Co].
/// Output is [N,Co,(H-1)*stride+KH,(W-1)*stride+KW].
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Index stride) {
  detail::require_rank("conv_transpose2d", x.rank(), x.shape(), 4);
  detail::require_rank("conv_transpose2d", w.rank(), w.shape(), 4);
  if (stride < 1) throw ValueError("conv_transpose2d: stride must be >= 1");
  const Index N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index Co = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  if (w.dim(0) != Ci)
    throw ShapeError("conv_transpose2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  if (b.rank() != 1 || b.dim(0) != Co)
    throw ShapeError("conv_transpose2d: bias shape " + shape_str(b.shape()) + " for " + std::to_string(Co) + " filters");
  const Index Ho = (H - 1) * stride + KH;
  const Index Wo = (W - 1) * stride + KW;

  ArrayX<T> v(N * Co * Ho * Wo);
  for (Index n = 0; n < N; ++n)
    for (Index co = 0; co < Co; ++co) v.segment((n * Co + co) * Ho * Wo, Ho * Wo).setConstant(b.array()[co]);
  for (Index n = 0; n < N; ++n)
    for (Index ci = 0; ci < Ci; ++ci)
      for (Index h = 0; h < H; ++h)
        for (Index iw = 0; iw < W; ++iw) {
          const T xv = x.array()[((n * Ci + ci) * H + h) * W + iw];
          for (Index co = 0; co < Co; ++co)
            for (Index kh = 0; kh < KH; ++kh)
              for (Index kw = 0; kw < KW; ++kw)
                v[((n * Co + co) * Ho + h * stride + kh) * Wo + iw * stride + kw] +=
                    xv * w.array()[((ci * Co + co) * KH + kh) * KW + kw];
        }
  Tensor<T> out = detail::result<T>("conv_transpose2d", Shape{N, Co, Ho, Wo}, std::move(v));

  if (auto* tape = detail::recording<T>(x, w, b)) {
    detail::mark_output(out);
    tape->record(out.handle(), [xn = x.handle(), wn = w.handle(), bn = b.handle(), N, Ci, H, W, Co, KH, KW,
                                stride, Ho, Wo](GradStore<T>& g, const ArrayX<T>& go) {
      if (xn->requires_grad) {
        ArrayX<T> gx = ArrayX<T>::Zero(xn->v.size());
        for (Index n = 0; n < N; ++n)
          for (Index ci = 0; ci < Ci; ++ci)
            for (Index h = 0; h < H; ++h)
              for (Index iw = 0; iw < W; ++iw) {
                T acc = T(0);
                for (Index co = 0; co < Co; ++co)
                  for (Index kh = 0; kh < KH; ++kh)
                    for (Index kw = 0; kw < KW; ++kw)
                      acc += go[((n * Co + co) * Ho + h * stride + kh) * Wo + iw * stride + kw] *
                             wn->v[((ci * Co + co) * KH + kh) * KW + kw];
                gx[((n * Ci + ci) * H + h) * W + iw] = acc;
              }
        g.add(xn, gx);
      }
      if (wn->requires_grad) {
        ArrayX<T> gw = ArrayX<T>::Zero(wn->v.size());
        for (Index n = 0; n < N; ++n)
          for (Index ci = 0; ci < Ci; ++ci)
            for (Index h = 0; h < H; ++h)
              for (Index iw = 0; iw < W; ++iw) {
                const T xv = xn->v[((n * Ci + ci) * H + h) * W + iw];
                for (Index co = 0; co < Co; ++co)
                  for (Index kh = 0; kh < KH; ++kh)
                    for (Index kw = 0; kw < KW; ++kw)
                      gw[((ci * Co + co) * KH + kh) * KW + kw] +=
                          xv * go[((n * Co + co) * Ho + h * stride + kh) * Wo + iw * stride + kw];
              }
        g.add(wn, gw);
      }
      if (bn->requires_grad) {
        ArrayX<T> gb = ArrayX<T>::Zero(Co);
        for (Index n = 0; n < N; ++n)
          for (Index co = 0; co < Co; ++co) gb[co] += go.segment((n * Co + co) * Ho * Wo, Ho * Wo).sum();
        g.add(bn, gb);
      }
    });
  }
  return out;
}

/// 2x2 max pooling with stride 2. H and W must be even.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  detail::require_rank("maxpool2", x.rank(), x.shape(), 4);
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0)
    throw ShapeError("maxpool2: spatial dims must be even, got " + shape_str(x.shape()));
  const Index Ho = H / 2, Wo = W / 2;
  ArrayX<T> v(N * C * Ho * Wo);
  std::vector<Index> argmax(static_cast<std::size_t>(N * C * Ho * Wo));
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      for (Index oh = 0; oh < Ho; ++oh)
        for (Index ow = 0; ow < Wo; ++ow) {
          const Index base = ((n * C + c) * H + oh * 2) * W + ow * 2;
          Index best = base;
          T bv = x.array()[base];
          for (const Index cand : {base + 1, base + W, base + W + 1}) {
            if (x.array()[cand] > bv) {
              bv = x.array()[cand];
              best = cand;
            }
          }
          const Index o = ((n * C + c) * Ho + oh) * Wo + ow;
          v[o] = bv;
          argmax[static_cast<std::size_t>(o)] = best;
        }
  Tensor<T> out = detail::result<T>("maxpool2", Shape{N, C, Ho, Wo}, std::move(v));
  if (auto* tape = detail::recording<T>(x)) {
    detail::mark_output(out);
    tape->record(out.handle(), [xn = x.handle(), argmax = std::move(argmax)](GradStore<T>& g, const ArrayX<T>& go) {
      ArrayX<T> gx = ArrayX<T>::Zero(xn->v.size());
      for (Index o = 0; o < go.size(); ++o) gx[argmax[static_cast<std::size_t>(o)]] += go[o];
      g.add(xn, gx);
    });
  }
  return out;
}

/// Mean over the spatial dims: [N,C,H,W] -> [N,C].
template <typename T>
Tensor<T> spatial_mean(const Tensor<T>& x) {
  detail::require_rank("spatial_mean", x.rank(), x.shape(), 4);
  const Index N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  ArrayX<T> v(N * C);
  for (Index i = 0; i < N * C; ++i) v[i] = x.array().segment(i * HW, HW).sum() / static_cast<T>(HW);
  Tensor<T> out = detail::result<T>("spatial_mean", Shape{N, C}, std::move(v));
  if (auto* tape = detail::recording<T>(x)) {
    detail::mark_output(out);
    tape->record(out.handle(), [xn = x.handle(), HW](GradStore<T>& g, const ArrayX<T>& go) {
      ArrayX<T> gx(go.size() * HW);
      for (Index i = 0; i < go.size(); ++i) gx.segment(i * HW, HW).setConstant(go[i] / static_cast<T>(HW));
      g.add(xn, gx);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel-axis softmax family, used by the segmentation losses.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fn>
void for_each_pixel(Index N, Index K, Index H, Index W, Fn&& fn) {
  const Index HW = H * W;
  for (Index n = 0; n < N; ++n)
    for (Index p = 0; p < HW; ++p) fn(n * K * HW + p, HW);  // base index of k=0, stride HW over k
}

}  // namespace detail

/// Channel-axis log-softmax of logits [N,K,H,W], max-shifted per pixel.
template <typename T>
Tensor<T> log_softmax_channels(const Tensor<T>& x) {
  detail::require_rank("log_softmax_channels", x.rank(), x.shape(), 4);
  const Index N = x.dim(0), K = x.dim(1), H = x.dim(2), W = x.dim(3);
  ArrayX<T> v(x.size());
  detail::for_each_pixel<T>(N, K, H, W, [&](Index base, Index stride) {
    T m = x.array()[base];
    for (Index k = 1; k < K; ++k) m = std::max(m, x.array()[base + k * stride]);
    T s = T(0);
    for (Index k = 0; k < K; ++k) s += std::exp(x.array()[base + k * stride] - m);
    const T lse = m + std::log(s);
    for (Index k = 0; k < K; ++k) v[base + k * stride] = x.array()[base + k * stride] - lse;
  });
  Tensor<T> out = detail::result<T>("log_softmax_channels", x.shape(), std::move(v));
  if (auto* tape = detail::recording<T>(x)) {
    detail::mark_output(out);
    tape->record(out.handle(), [xn = x.handle(), on = out.handle(), N, K, H, W](GradStore<T>& g, const ArrayX<T>& go) {
      ArrayX<T> gx(go.size());
      detail::for_each_pixel<T>(N, K, H, W, [&](Index base, Index stride) {
        T gsum = T(0);
        for (Index k = 0; k < K; ++k) gsum += go[base + k * stride];
        for (Index k = 0; k < K; ++k)
          gx[base + k * stride] = go[base + k * stride] - std::exp(on->v[base + k * stride]) * gsum;
      });
      g.add(xn, gx);
    });
  }
  return out;
}

/// Channel-axis softmax of logits [N,K,H,W].
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  detail::require_rank("softmax_channels", x.rank(), x.shape(), 4);
  const Index N = x.dim(0), K = x.dim(1), H = x.dim(2), W = x.dim(3);
  ArrayX<T> v(x.size());
  detail::for_each_pixel<T>(N, K, H, W, [&](Index base, Index stride) {
    T m = x.array()[base];
    for (Index k = 1; k < K; ++k) m = std::max(m, x.array()[base + k * stride]);
    T s = T(0);
    for (Index k = 0; k < K; ++k) {
      const T e = std::exp(x.array()[base + k * stride] - m);
      v[base + k * stride] = e;
      s += e;
    }
    for (Index k = 0; k < K; ++k) v[base + k * stride] /= s;
  });
  Tensor<T> out = detail::result<T>("softmax_channels", x.shape(), std::move(v));
  if (auto* tape = detail::recording<T>(x)) {
    detail::mark_output(out);
    tape->record(out.handle(), [xn = x.handle(), on = out.handle(), N, K, H, W](GradStore<T>& g, const ArrayX<T>& go) {
      ArrayX<T> gx(go.size());
      detail::for_each_pixel<T>(N, K, H, W, [&](Index base, Index stride) {
        T dot = T(0);
        for (Index k = 0; k < K; ++k) dot += go[base + k * stride] * on->v[base + k * stride];
        for (Index k = 0; k < K; ++k)
          gx[base + k * stride] = on->v[base + k * stride] * (go[base + k * stride] - dot);
      });
      g.add(xn, gx);
    });
  }
  return out;
}

/// Per-channel sum over batch and space: [N,K,H,W] -> [K].
template <typename T>
Tensor<T> channel_sum(const Tensor<T>& x) {
  detail::require_rank("channel_sum", x.rank(), x.shape(), 4);
  const Index N = x.dim(0), K = x.dim(1), HW = x.dim(2) * x.dim(3);
  ArrayX<T> v = ArrayX<T>::Zero(K);
  for (Index n = 0; n < N; ++n)
    for (Index k = 0; k < K; ++k) v[k] += x.array().segment((n * K + k) * HW, HW).sum();
  Tensor<T> out = detail::result<T>("channel_sum", Shape{K}, std::move(v));
  if (auto* tape = detail::recording<T>(x)) {
    detail::mark_output(out);
    tape->record(out.handle(), [xn = x.handle(), N, K, HW](GradStore<T>& g, const ArrayX<T>& go) {
      ArrayX<T> gx(N * K * HW);
      for (Index n = 0; n < N; ++n)
        for (Index k = 0; k < K; ++k) gx.segment((n * K + k) * HW, HW).setConstant(go[k]);
      g.add(xn, gx);
    });
  }
  return out;
}

}  // namespace ufc
