#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "stgrit/tensor.hpp"

#if defined(STGRIT_HAVE_MVEC) && defined(__AVX2__)
#include <immintrin.h>
extern "C" {
__m256d _ZGVdN4v_exp(__m256d);
#if defined(__AVX512F__)
__m512d _ZGVeN8v_exp(__m512d);
#endif
}
#endif

namespace stgrit {

namespace kernels {

inline void exp_contiguous(const double* src, double* dst, std::size_t n) {
  std::size_t i = 0;
#if defined(STGRIT_HAVE_MVEC) && defined(__AVX2__)
#if defined(__AVX512F__)
  for (; i + 8 <= n; i += 8)
    _mm512_storeu_pd(dst + i, _ZGVeN8v_exp(_mm512_loadu_pd(src + i)));
#endif
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(dst + i, _ZGVdN4v_exp(_mm256_loadu_pd(src + i)));
#endif
  for (; i < n; ++i) dst[i] = std::exp(src[i]);
}

// max over a contiguous range; four lanes break the dependence chain (max is
// exact selection, so lane order cannot change the result)
inline double max_contiguous(const double* src, std::size_t n) {
  double m0 = src[0], m1 = src[0], m2 = src[0], m3 = src[0];
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    m0 = std::max(m0, src[i]);
    m1 = std::max(m1, src[i + 1]);
    m2 = std::max(m2, src[i + 2]);
    m3 = std::max(m3, src[i + 3]);
  }
  for (; i < n; ++i) m0 = std::max(m0, src[i]);
  return std::max(std::max(m0, m1), std::max(m2, m3));
}

// dst = exp(src - shift), returning the sum of dst (fixed four-lane order)
inline double exp_shift_sum(const double* src, double* dst, std::size_t n, double shift) {
  for (std::size_t i = 0; i < n; ++i) dst[i] = src[i] - shift;
  exp_contiguous(dst, dst, n);
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += dst[i];
    s1 += dst[i + 1];
    s2 += dst[i + 2];
    s3 += dst[i + 3];
  }
  for (; i < n; ++i) s0 += dst[i];
  return (s0 + s1) + (s2 + s3);
}

// dot product with the same fixed four-lane accumulation
inline double dot_contiguous(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// Attention head widths are tiny (d_k is 4 at the default configuration), so
// the hot matrix kernels dispatch small dimensions to constant-trip-count
// loops the compiler can unroll and vectorize.
template <class Fn>
inline bool dispatch_small(std::size_t v, Fn&& fn) {
  switch (v) {
    case 1: fn(std::integral_constant<std::size_t, 1>{}); return true;
    case 2: fn(std::integral_constant<std::size_t, 2>{}); return true;
    case 3: fn(std::integral_constant<std::size_t, 3>{}); return true;
    case 4: fn(std::integral_constant<std::size_t, 4>{}); return true;
    case 5: fn(std::integral_constant<std::size_t, 5>{}); return true;
    case 6: fn(std::integral_constant<std::size_t, 6>{}); return true;
    case 8: fn(std::integral_constant<std::size_t, 8>{}); return true;
    default: return false;
  }
}

template <std::size_t N>
inline void matmul_acc_small_n(const double* a, const double* b, double* c, std::size_t m,
                               std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * N;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = arow[t];
      const double* brow = b + t * N;
      for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

template <std::size_t K>
inline void matmul_acc_small_k(const double* a, const double* b, double* c, std::size_t m,
                               std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * K;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      double sum = crow[j];
      for (std::size_t t = 0; t < K; ++t) sum += arow[t] * b[t * n + j];
      crow[j] = sum;
    }
  }
}

// C(m×n) += A(m×k) · B(k×n)
inline void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                       std::size_t n) {
  if (n <= 8 && dispatch_small(n, [&](auto nc) { matmul_acc_small_n<nc()>(a, b, c, m, k); }))
    return;
  if (k <= 8 && dispatch_small(k, [&](auto kc) { matmul_acc_small_k<kc()>(a, b, c, m, n); }))
    return;
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = arow[t];
      const double* brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <std::size_t N>
inline void matmul_nt_acc_small_n(const double* a, const double* b, double* c, std::size_t m,
                                  std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * N;
    double* crow = c + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const double* brow = b + t * N;
      double sum = 0.0;
      for (std::size_t j = 0; j < N; ++j) sum += arow[j] * brow[j];
      crow[t] += sum;
    }
  }
}

// C(m×k) += A(m×n) · Bᵀ where B is (k×n); contraction runs over n
inline void matmul_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                          std::size_t k) {
  if (n <= 8 && dispatch_small(n, [&](auto nc) { matmul_nt_acc_small_n<nc()>(a, b, c, m, k); }))
    return;
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::size_t t = 0; t < k; ++t) crow[t] += dot_contiguous(arow, b + t * n, n);
  }
}

template <std::size_t N>
inline void matmul_tn_acc_small_n(const double* a, const double* b, double* c, std::size_t m,
                                  std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * N;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = arow[t];
      double* crow = c + t * N;
      for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(k×n) += Aᵀ · B where A is (m×k), B is (m×n)
inline void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                          std::size_t n) {
  if (n <= 8 && dispatch_small(n, [&](auto nc) { matmul_tn_acc_small_n<nc()>(a, b, c, m, k); }))
    return;
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = arow[t];
      double* crow = c + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Visits every element of a permuted view: fn(out_flat, in_flat) in row-major
// order of the output.
template <class Fn>
inline void permute_iterate(const Shape& in_shape, const std::vector<std::size_t>& perm, Fn&& fn) {
  const std::size_t nd = in_shape.size();
  std::vector<std::size_t> in_stride(nd, 1);
  for (std::size_t i = nd - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * in_shape[i];
  std::vector<std::size_t> out_extent(nd), map_stride(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    out_extent[i] = in_shape[perm[i]];
    map_stride[i] = in_stride[perm[i]];
  }
  const std::size_t total = shape_numel(in_shape);
  std::vector<std::size_t> counter(nd, 0);
  std::size_t in_flat = 0;
  for (std::size_t out_flat = 0; out_flat < total; ++out_flat) {
    fn(out_flat, in_flat);
    for (std::size_t ax = nd; ax-- > 0;) {
      ++counter[ax];
      in_flat += map_stride[ax];
      if (counter[ax] < out_extent[ax]) break;
      in_flat -= map_stride[ax] * out_extent[ax];
      counter[ax] = 0;
    }
  }
}

}  // namespace kernels

namespace detail {

inline bool recording(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->needs_grad()) return true;
  return false;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Splits a shape at `axis` into (outer, len, inner) extents.
struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const char* op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  }
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise suite
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  Tensor result = Tensor::from_op("add", a.shape(), std::move(out), /*checked=*/false);
  if (detail::recording({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = result.node();
    Tape::active()->record("add", {an, bn}, on, [an, bn, on] {
      const auto& g = on->grad;
      if (an->needs_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
      }
      if (bn->needs_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i];
      }
    });
  }
  return result;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  Tensor result = Tensor::from_op("sub", a.shape(), std::move(out), /*checked=*/false);
  if (detail::recording({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = result.node();
    Tape::active()->record("sub", {an, bn}, on, [an, bn, on] {
      const auto& g = on->grad;
      if (an->needs_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
      }
      if (bn->needs_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] -= g[i];
      }
    });
  }
  return result;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tensor result = Tensor::from_op("mul", a.shape(), std::move(out), /*checked=*/false);
  if (detail::recording({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = result.node();
    Tape::active()->record("mul", {an, bn}, on, [an, bn, on] {
      const auto& g = on->grad;
      if (an->needs_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bn->value[i];
      }
      if (bn->needs_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * an->value[i];
      }
    });
  }
  return result;
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  if (!std::isfinite(c)) throw NumericsError("mul_scalar: non-finite scalar");
  std::vector<double> out(a.size());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  Tensor result = Tensor::from_op("mul_scalar", a.shape(), std::move(out), /*checked=*/false);
  if (detail::recording({&a})) {
    auto an = a.node();
    auto on = result.node();
    Tape::active()->record("mul_scalar", {an}, on, [an, on, c] {
      if (!an->needs_grad) return;
      an->ensure_grad();
      const auto& g = on->grad;
      for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * c;
    });
  }
  return result;
}

/// Broadcast-adds a length-d vector over the trailing axis of x.
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (v.ndim() != 1) throw ShapeError("add_rowvec: v must be 1-D");
  const std::size_t d = x.shape().back();
  if (v.size() != d) {
    throw ShapeError("add_rowvec: trailing extent " + std::to_string(d) + " vs vector length " +
                     std::to_string(v.size()));
  }
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  const auto& xv = x.value();
  const auto& vv = v.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] + vv[j];
  Tensor result = Tensor::from_op("add_rowvec", x.shape(), std::move(out), /*checked=*/false);
  if (detail::recording({&x, &v})) {
    auto xn = x.node(), vn = v.node(), on = result.node();
    Tape::active()->record("add_rowvec", {xn, vn}, on, [xn, vn, on, rows, d] {
      const auto& g = on->grad;
      if (xn->needs_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
      }
      if (vn->needs_grad) {
        vn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) vn->grad[j] += g[r * d + j];
      }
    });
  }
  return result;
}

/// Rectified linear unit; the subgradient at 0 is taken as 0.
inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  Tensor result = Tensor::from_op("relu", x.shape(), std::move(out), /*checked=*/true);
  if (detail::recording({&x})) {
    auto xn = x.node();
    auto on = result.node();
    Tape::active()->record("relu", {xn}, on, [xn, on] {
      if (!xn->needs_grad) return;
      xn->ensure_grad();
      const auto& g = on->grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xn->value[i] > 0.0) xn->grad[i] += g[i];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  }
  Tensor result = Tensor::from_op("reshape", std::move(new_shape), x.value(), /*checked=*/true);
  if (detail::recording({&x})) {
    auto xn = x.node();
    auto on = result.node();
    Tape::active()->record("reshape", {xn}, on, [xn, on] {
      if (!xn->needs_grad) return;
      xn->ensure_grad();
      const auto& g = on->grad;
      for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
    });
  }
  return result;
}

/// Permutes axes; the 2-argument form with an empty perm swaps a 2-D tensor.
inline Tensor transpose(const Tensor& x, std::vector<std::size_t> perm = {}) {
  const Shape& s = x.shape();
  const std::size_t nd = s.size();
  if (perm.empty()) {
    if (nd != 2) throw ShapeError("transpose: implicit permutation requires a 2-D tensor");
    perm = {1, 0};
  }
  if (perm.size() != nd) throw ShapeError("transpose: permutation rank mismatch");
  std::vector<bool> seen(nd, false);
  for (std::size_t p : perm) {
    if (p >= nd || seen[p]) throw ShapeError("transpose: invalid axis permutation");
    seen[p] = true;
  }
  Shape out_shape(nd);
  for (std::size_t i = 0; i < nd; ++i) out_shape[i] = s[perm[i]];
  std::vector<double> out(x.size());
  const double* src = x.value().data();
  kernels::permute_iterate(s, perm,
                           [&](std::size_t out_flat, std::size_t in_flat) { out[out_flat] = src[in_flat]; });
  Tensor result = Tensor::from_op("transpose", std::move(out_shape), std::move(out), /*checked=*/true);
  if (detail::recording({&x})) {
    auto xn = x.node();
    auto on = result.node();
    Shape in_shape = s;
    Tape::active()->record("transpose", {xn}, on, [xn, on, in_shape, perm] {
      if (!xn->needs_grad) return;
      xn->ensure_grad();
      const double* g = on->grad.data();
      double* xg = xn->grad.data();
      kernels::permute_iterate(in_shape, perm,
                               [&](std::size_t out_flat, std::size_t in_flat) { xg[in_flat] += g[out_flat]; });
    });
  }
  return result;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  std::size_t axis_total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw ShapeError("concat: extent mismatch off the concat axis: " + shape_str(first) +
                         " vs " + shape_str(s));
      }
    }
    axis_total += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = axis_total;
  const auto sp = detail::split_axis("concat", out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;  // element offset along the concat axis
  for (const Tensor& p : parts) {
    const std::size_t len = p.shape()[axis];
    const double* src = p.value().data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      double* dst = out.data() + (o * axis_total + offset) * sp.inner;
      std::copy(src + o * len * sp.inner, src + (o + 1) * len * sp.inner, dst);
    }
    offset += len;
  }
  Tensor result = Tensor::from_op("concat", std::move(out_shape), std::move(out), /*checked=*/true);
  bool any_grad = false;
  for (const Tensor& p : parts) any_grad = any_grad || p.needs_grad();
  if (Tape::active() != nullptr && any_grad) {
    std::vector<std::shared_ptr<detail::TensorNode>> nodes;
    std::vector<std::size_t> lens;
    for (const Tensor& p : parts) {
      nodes.push_back(p.node());
      lens.push_back(p.shape()[axis]);
    }
    auto on = result.node();
    Tape::active()->record("concat", {nodes.begin(), nodes.end()}, on,
                           [nodes, lens, on, sp, axis_total] {
                             const double* g = on->grad.data();
                             std::size_t offset = 0;
                             for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
                               const std::size_t len = lens[pi];
                               auto& node = *nodes[pi];
                               if (node.needs_grad) {
                                 node.ensure_grad();
                                 double* dst = node.grad.data();
                                 for (std::size_t o = 0; o < sp.outer; ++o) {
                                   const double* gsl = g + (o * axis_total + offset) * sp.inner;
                                   double* dsl = dst + o * len * sp.inner;
                                   for (std::size_t i = 0; i < len * sp.inner; ++i) dsl[i] += gsl[i];
                                 }
                               }
                               offset += len;
                             }
                           });
  }
  return result;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

/// Arithmetic mean over one axis; the axis is removed from the shape.
inline Tensor mean(const Tensor& x, std::size_t axis) {
  const auto sp = detail::split_axis("mean", x.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.ndim(); ++i)
    if (i != axis) out_shape.push_back(x.shape()[i]);
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t t = 0; t < sp.len; ++t)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += xv[(o * sp.len + t) * sp.inner + i];
  const double inv = 1.0 / static_cast<double>(sp.len);
  for (double& v : out) v *= inv;
  Tensor result = Tensor::from_op("mean", std::move(out_shape), std::move(out), /*checked=*/false);
  if (detail::recording({&x})) {
    auto xn = x.node();
    auto on = result.node();
    Tape::active()->record("mean", {xn}, on, [xn, on, sp, inv] {
      if (!xn->needs_grad) return;
      xn->ensure_grad();
      const auto& g = on->grad;
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t t = 0; t < sp.len; ++t)
          for (std::size_t i = 0; i < sp.inner; ++i)
            xn->grad[(o * sp.len + t) * sp.inner + i] += g[o * sp.inner + i] * inv;
    });
  }
  return result;
}

/// Scalar mean over every element.
inline Tensor mean_all(const Tensor& x) {
  const auto& xv = x.value();
  double acc = 0.0;
  for (double v : xv) acc += v;
  const double inv = 1.0 / static_cast<double>(xv.size());
  std::vector<double> out{acc * inv};
  Tensor result = Tensor::from_op("mean_all", {1}, std::move(out), /*checked=*/false);
  if (detail::recording({&x})) {
    auto xn = x.node();
    auto on = result.node();
    Tape::active()->record("mean_all", {xn}, on, [xn, on, inv] {
      if (!xn->needs_grad) return;
      xn->ensure_grad();
      const double g = on->grad[0] * inv;
      for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) {
    throw ShapeError("matmul: expects 2-D inputs, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  kernels::matmul_acc(a.value().data(), b.value().data(), out.data(), m, k, n);
  Tensor result = Tensor::from_op("matmul", {m, n}, std::move(out), /*checked=*/false);
  if (detail::recording({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = result.node();
    Tape::active()->record("matmul", {an, bn}, on, [an, bn, on, m, k, n] {
      const double* g = on->grad.data();
      if (an->needs_grad) {
        an->ensure_grad();
        kernels::matmul_nt_acc(g, bn->value.data(), an->grad.data(), m, n, k);
      }
      if (bn->needs_grad) {
        bn->ensure_grad();
        kernels::matmul_tn_acc(an->value.data(), g, bn->grad.data(), m, k, n);
      }
    });
  }
  return result;
}

/// Batched matrix product over matching leading batch axes: [B,m,k]·[B,k,n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3) {
    throw ShapeError("bmm: expects 3-D inputs, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t batch = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
  if (b.extent(0) != batch || b.extent(1) != k) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    kernels::matmul_acc(a.value().data() + bi * m * k, b.value().data() + bi * k * n,
                        out.data() + bi * m * n, m, k, n);
  }
  Tensor result = Tensor::from_op("bmm", {batch, m, n}, std::move(out), /*checked=*/false);
  if (detail::recording({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = result.node();
    Tape::active()->record("bmm", {an, bn}, on, [an, bn, on, batch, m, k, n] {
      const double* g = on->grad.data();
      if (an->needs_grad) {
        an->ensure_grad();
        for (std::size_t bi = 0; bi < batch; ++bi)
          kernels::matmul_nt_acc(g + bi * m * n, bn->value.data() + bi * k * n,
                                 an->grad.data() + bi * m * k, m, n, k);
      }
      if (bn->needs_grad) {
        bn->ensure_grad();
        for (std::size_t bi = 0; bi < batch; ++bi)
          kernels::matmul_tn_acc(an->value.data() + bi * m * k, g + bi * m * n,
                                 bn->grad.data() + bi * k * n, m, k, n);
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// normalization and regularization
// ---------------------------------------------------------------------------

/// Exp-normalizes along `axis` with max-subtraction; slices sum to 1.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto sp = detail::split_axis("softmax", x.shape(), axis);
  std::vector<double> out(x.size());
  const auto& xv = x.value();
  if (sp.inner == 1) {
    // contiguous slices: vectorized exp
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const double* row = xv.data() + o * sp.len;
      double* orow = out.data() + o * sp.len;
      const double mx = kernels::max_contiguous(row, sp.len);
      const double inv = 1.0 / kernels::exp_shift_sum(row, orow, sp.len, mx);
      for (std::size_t t = 0; t < sp.len; ++t) orow[t] *= inv;
    }
  } else {
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        double mx = xv[base];
        for (std::size_t t = 1; t < sp.len; ++t)
          mx = std::max(mx, xv[base + t * sp.inner]);
        double sum = 0.0;
        for (std::size_t t = 0; t < sp.len; ++t) {
          const double e = std::exp(xv[base + t * sp.inner] - mx);
          out[base + t * sp.inner] = e;
          sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::size_t t = 0; t < sp.len; ++t) out[base + t * sp.inner] *= inv;
      }
    }
  }
  Tensor result = Tensor::from_op("softmax", x.shape(), std::move(out), /*checked=*/true);
  if (detail::recording({&x})) {
    auto xn = x.node();
    auto on = result.node();
    Tape::active()->record("softmax", {xn}, on, [xn, on, sp] {
      if (!xn->needs_grad) return;
      xn->ensure_grad();
      const auto& y = on->value;
      const auto& g = on->grad;
      double* xg = xn->grad.data();
      if (sp.inner == 1) {
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const std::size_t base = o * sp.len;
          const double dot = kernels::dot_contiguous(g.data() + base, y.data() + base, sp.len);
          for (std::size_t t = 0; t < sp.len; ++t)
            xg[base + t] += y[base + t] * (g[base + t] - dot);
        }
      } else {
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            double dot = 0.0;
            for (std::size_t t = 0; t < sp.len; ++t) {
              const std::size_t idx = base + t * sp.inner;
              dot += g[idx] * y[idx];
            }
            for (std::size_t t = 0; t < sp.len; ++t) {
              const std::size_t idx = base + t * sp.inner;
              xg[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
      }
    });
  }
  return result;
}

/// Standardizes each trailing-axis vector, then applies the gamma/beta affine
/// map. gamma and beta are 1-D with length equal to the trailing extent.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-8) {
  const std::size_t h = x.shape().back();
  if (gamma.ndim() != 1 || beta.ndim() != 1 || gamma.size() != h || beta.size() != h) {
    throw ShapeError("layer_norm: gamma/beta must be 1-D of length " + std::to_string(h));
  }
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / h;
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  std::vector<double> out(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * h;
    double mu = 0.0;
    for (std::size_t j = 0; j < h; ++j) mu += row[j];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      const double d = row[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(h);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < h; ++j) {
      const double xh = (row[j] - mu) * inv;
      (*xhat)[r * h + j] = xh;
      out[r * h + j] = gv[j] * xh + bv[j];
    }
  }
  Tensor result = Tensor::from_op("layer_norm", x.shape(), std::move(out), /*checked=*/false);
  if (detail::recording({&x, &gamma, &beta})) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = result.node();
    Tape::active()->record("layer_norm", {xn, gn, bn}, on, [xn, gn, bn, on, xhat, inv_std, rows,
                                                            h] {
      const auto& g = on->grad;
      if (bn->needs_grad) {
        bn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < h; ++j) bn->grad[j] += g[r * h + j];
      }
      if (gn->needs_grad) {
        gn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < h; ++j) gn->grad[j] += g[r * h + j] * (*xhat)[r * h + j];
      }
      if (xn->needs_grad) {
        xn->ensure_grad();
        const double invh = 1.0 / static_cast<double>(h);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < h; ++j) {
            const double dxh = g[r * h + j] * gn->value[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * (*xhat)[r * h + j];
          }
          const double inv = (*inv_std)[r];
          for (std::size_t j = 0; j < h; ++j) {
            const double dxh = g[r * h + j] * gn->value[j];
            xn->grad[r * h + j] +=
                inv * (dxh - invh * sum_dxhat - (*xhat)[r * h + j] * invh * sum_dxhat_xhat);
          }
        }
      }
    });
  }
  return result;
}

/// Inverted dropout: zeroes elements with probability `rate` in training mode
/// and scales survivors by 1/(1-rate), so evaluation is exactly the identity.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout: rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  const double scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> out(x.size());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = rng.uniform() < rate ? 0.0 : scale;
    (*mask)[i] = m;
    out[i] = xv[i] * m;
  }
  Tensor result = Tensor::from_op("dropout", x.shape(), std::move(out), /*checked=*/false);
  if (detail::recording({&x})) {
    auto xn = x.node();
    auto on = result.node();
    Tape::active()->record("dropout", {xn}, on, [xn, on, mask] {
      if (!xn->needs_grad) return;
      xn->ensure_grad();
      const auto& g = on->grad;
      for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i] * (*mask)[i];
    });
  }
  return result;
}

}  // namespace stgrit
