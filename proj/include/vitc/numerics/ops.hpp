#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "vitc/numerics/autograd.hpp"

namespace vitc::nn {

// GELU tanh-approximation constant sqrt(2/pi).
inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;

// [m,k] x [k,n] -> [m,n].
Var matmul(const Var& a, const Var& b);
// x[m,k] * w[k,n] + bias[n].
Var linear(const Var& x, const Var& w, const Var& bias);

Var add(const Var& a, const Var& b);
// x[r*t, c] + y[t, c] with y tiled over the leading r groups (bias rows,
// positional embedding over a batch).
Var add_tiled(const Var& x, const Var& y);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, float s);
Var sum(const Var& x);
// Euclidean norm of all elements, as a scalar.
Var l2_norm(const Var& x);

// Normalizes over the last axis, then applies gamma/beta.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-6f);
Var gelu(const Var& x);
// Softmax along the last axis.
Var softmax(const Var& x);

// Scaled dot-product attention over `batch` sequences of `tokens` rows each.
// q,k: [batch*tokens, heads*dq]; v: [batch*tokens, heads*dv].
// Output [batch*tokens, heads*dv]; scores are scaled by 1/sqrt(dq).
Var attention(const Var& q, const Var& k, const Var& v, int64_t batch, int64_t tokens, int64_t heads);

// Per-head right multiplication: x[r, heads*d] by m[heads, d, d].
Var head_matmul(const Var& x, const Var& m);

Var gather_rows(const Var& x, std::vector<int64_t> index);
// Places column j of x[r, k] into column index[j] of a zero [r, width] result.
Var scatter_cols(const Var& x, std::vector<int64_t> index, int64_t width);
Var concat_cols(const Var& a, const Var& b);
// Prepends one row per sequence: spatial[batch*m, c], token[1 or batch, c]
// -> [batch*(m+1), c].
Var prepend_token(const Var& spatial, const Var& token, int64_t batch);
// Mean over each group of `tokens` rows: [batch*tokens, c] -> [batch, c].
Var mean_pool(const Var& x, int64_t batch);

// Mean cross-entropy of logits[b, k] against integer labels.
Var cross_entropy(const Var& logits, std::span<const int32_t> labels);

}  // namespace vitc::nn
