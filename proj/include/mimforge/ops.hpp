#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mimforge/prng.hpp"
#include "mimforge/tensor.hpp"

// Differentiable operations. Every function records a node on the graph
// when grad mode is on and any input requires grad. Shapes never broadcast
// except where a function says so (scalar scaling, row-wise bias, tiling).
namespace mimforge::ops {

// --- linear algebra --------------------------------------------------------

/// [m,k] x [k,n] -> [m,n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x[..., in] * w[in, out] + b[out]. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x);

// --- element-wise ----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Adds bias[cols] to every row of x.
template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& x, const Tensor<T>& bias);

/// Adds table row (r mod P) to row r of x, where table is [P, cols].
template <typename T>
Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& table);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);

/// x times a one-element tensor.
template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& factor);

/// Row r of x multiplied by the constant factors[r].
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, std::span<const T> factors);

template <typename T>
Tensor<T> exp(const Tensor<T>& x);

/// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// --- shape -----------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Rows [begin, end) along the first axis.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::int64_t begin, std::int64_t end);

/// Concatenation along the first axis; trailing extents must agree.
template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts);

/// Rows of the 2-D view of x picked by index, result [n, cols].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::int64_t> rows);

/// Rows flagged in `replace` are substituted by `token` [cols]; the gradient
/// of a replaced row flows to the token only.
template <typename T>
Tensor<T> replace_rows(const Tensor<T>& x, std::span<const std::uint8_t> replace,
                       const Tensor<T>& token);

/// x is [batch*seq, C]; inserts `token` [C] before each sequence.
template <typename T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token, std::int64_t batch);

/// x is [batch*seq, C]; mean of rows [begin, seq) of every sequence -> [batch, C].
template <typename T>
Tensor<T> mean_pool(const Tensor<T>& x, std::int64_t batch, std::int64_t begin);

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int64_t> ids);

/// [B,3,H,W] -> [B*grid, 3*p*p], patches row-major over the grid, values
/// ordered (channel, dy, dx) inside a patch.
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::int64_t patch);

// --- normalisation / reductions -------------------------------------------

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);

/// Population-variance layer norm over the last axis. gamma/beta may be undefined.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    double eps = 1e-6);

/// x / max(||x||, eps) per row.
template <typename T>
Tensor<T> l2_normalize_lastdim(const Tensor<T>& x, double eps = 1e-12);

/// Per-row cosine a.b / (max(|a|,eps) * max(|b|,eps)); rows where either
/// operand is exactly zero give 0. Result shape [rows].
template <typename T>
Tensor<T> cosine_rows(const Tensor<T>& a, const Tensor<T>& b, double eps = 1e-8);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Mean softmax cross-entropy of logits [N, C] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> labels);

// --- stochastic ------------------------------------------------------------

/// Constant mask with entries 0 (prob p) or 1/(1-p).
template <typename T>
Tensor<T> dropout_mask(const Shape& shape, double p, Prng& rng);

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Prng& rng, bool training);

// --- attention -------------------------------------------------------------

/// Multi-head self-attention core. qkv is [batch*seq, 3C] laid out as
/// (q | k | v), each split into `heads` contiguous chunks; output [batch*seq, C]
/// is softmax(q k^T / sqrt(C/heads)) v per sequence and head.
template <typename T>
Tensor<T> attention(const Tensor<T>& qkv, std::int64_t batch, std::int64_t heads);

}  // namespace mimforge::ops
