#pragma once

#include <vector>

#include "tensor.hpp"

namespace moelab::ops {

// Matrix product. Supports (M,K)@(K,N), (B,M,K)@(B,K,N) and (B,M,K)@(K,N).
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise binary ops with right-aligned broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double c);

// Rows of `table` selected by token id; errors on out-of-range ids.
Tensor embedding(const Tensor& table, const std::vector<int64_t>& ids);

Tensor index_select(const Tensor& x, int axis, const std::vector<int64_t>& idx);

// out has extent `out_extent` along `axis`; out[..., idx[i], ...] += x[..., i, ...].
// Duplicate indices accumulate in index order.
Tensor scatter_add(const Tensor& x, int axis, const std::vector<int64_t>& idx,
                   int64_t out_extent);

// Per-row gather on the last axis: x (..., E), idx rows*k entries -> (..., k).
Tensor gather_last(const Tensor& x, const std::vector<int64_t>& idx, int64_t k);

Tensor softmax(const Tensor& x);   // last axis
Tensor logsumexp(const Tensor& x); // last axis, axis removed

Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor rsqrt(const Tensor& x, double eps = 0.0); // (x + eps)^(-1/2)
Tensor square(const Tensor& x);

Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t end);
Tensor transpose(const Tensor& x, int a0, int a1);
Tensor reshape(const Tensor& x, Shape shape);

// Inverted dropout with a counter-based stream; identity when !train or p == 0.
Tensor dropout(const Tensor& x, double p, bool train, const rng::Stream& stream);

// Mean cross-entropy of logits (N,V) against targets (size N); rows whose
// target equals ignore_index contribute nothing.
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets,
                     int64_t ignore_index = -1);

// out = value where mask != 0 else x; mask broadcasts against x, carries no grad.
Tensor masked_fill(const Tensor& x, const Tensor& mask, double value);

// Rotary embedding on interleaved pairs of the last axis of x (..., L, hd):
// pair (x[2i], x[2i+1]) at position p rotates by angle p * base^(-2i/hd).
Tensor rope(const Tensor& x, const std::vector<int64_t>& positions, double base);

// Per-group matrix product: rows [offsets[e], offsets[e+1]) of x (R,K) are
// multiplied by w[e] from the stacked weight (E,K,N). offsets has E+1 entries,
// ascending, with offsets[E] == R.
Tensor grouped_matmul(const Tensor& x, const Tensor& w,
                      const std::vector<int64_t>& offsets);

} // namespace moelab::ops

namespace moelab {

inline Tensor operator+(const Tensor& a, const Tensor& b) { return ops::add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return ops::sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return ops::mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return ops::scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return ops::scale(a, c); }

} // namespace moelab
