#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "storygen/random.hpp"
#include "storygen/tensor.hpp"

// Differentiable primitives. Every op records a backward rule when grad mode is
// on and at least one input requires grad; gradients accumulate additively.

namespace storygen {

using TokenId = std::int32_t;

/// a[m x k] * b[k x n].
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// Rank-2 transpose.
template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a);

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> subtract(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// Adds a length-C vector to every row of an R x C tensor.
template <typename Scalar>
Tensor<Scalar> add_bias(const Tensor<Scalar>& a, const Tensor<Scalar>& bias);

/// Elementwise product.
template <typename Scalar>
Tensor<Scalar> multiply(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor);

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x);

/// Gated linear unit over the last axis: first half times sigmoid(second half).
template <typename Scalar>
Tensor<Scalar> glu(const Tensor<Scalar>& x);

/// Numerically stable softmax along `axis` (max-subtracted). Non-finite input
/// raises NumericError.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, std::size_t axis);

/// Row-wise softmax of a rank-2 tensor restricted to entries whose mask byte
/// is nonzero; masked entries get exactly zero weight and zero gradient.
/// Every row needs at least one unmasked entry.
template <typename Scalar>
Tensor<Scalar> masked_softmax(const Tensor<Scalar>& x, std::span<const std::uint8_t> mask);

inline constexpr double kLayerNormEpsilon = 1e-5;

/// (x - mean) / sqrt(var + 1e-5) * gain + bias over the last axis.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                          const Tensor<Scalar>& bias);

/// 1-D convolution over time. input[T x Cin], kernel[w x Cin x Cout], bias[Cout].
/// The input is zero-padded by `left_pad` frames before and `right_pad` after;
/// output length is T + left_pad + right_pad - w + 1.
template <typename Scalar>
Tensor<Scalar> conv1d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      const Tensor<Scalar>& bias, std::size_t left_pad, std::size_t right_pad);

/// Causal convolution: output[t] sees only input rows <= t.
template <typename Scalar>
Tensor<Scalar> conv1d_causal(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                             const Tensor<Scalar>& bias);

/// Length-preserving convolution with the window centered on t.
template <typename Scalar>
Tensor<Scalar> conv1d_centered(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                               const Tensor<Scalar>& bias);

/// Concatenates rank-2 tensors along axis 0 (rows) or 1 (columns). Rank-1
/// inputs are treated as single rows.
template <typename Scalar>
Tensor<Scalar> concat(std::span<const Tensor<Scalar>> parts, std::size_t axis);

template <typename Scalar>
Tensor<Scalar> concat(std::initializer_list<Tensor<Scalar>> parts, std::size_t axis)
{
    std::vector<Tensor<Scalar>> v(parts);
    return concat<Scalar>(std::span<const Tensor<Scalar>>(v), axis);
}

/// Gathers rows of x (rank 2) into a new [indices.size() x C] tensor.
template <typename Scalar>
Tensor<Scalar> select_rows(const Tensor<Scalar>& x, std::span<const std::size_t> indices);

/// Rows [begin, end) of x.
template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& x, std::size_t begin, std::size_t end);

/// Table lookup: output[t] = table[ids[t]]. Out-of-range ids raise BoundsError.
template <typename Scalar>
Tensor<Scalar> embed(std::span<const TokenId> ids, const Tensor<Scalar>& table);

/// Inverted dropout: in train mode keeps each unit with probability 1-p and
/// scales kept units by 1/(1-p); identity otherwise.
template <typename Scalar>
Tensor<Scalar> dropout(const Tensor<Scalar>& x, double p, bool train, Rng* rng);

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x);

enum class Reduction { mean, sum };

/// Negative log-likelihood of `targets` under softmax(logits) row by row.
/// Rows with mask == 0 are excluded. With Reduction::mean the sum is divided
/// by the number of unmasked rows (0 when there are none).
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const TokenId> targets,
                             std::span<const std::uint8_t> mask, Reduction reduction);

/// Row-wise log-softmax without gradient tracking (inference helper).
template <typename Scalar>
RowMatrix<Scalar> log_softmax_rows(const Tensor<Scalar>& logits);

}  // namespace storygen
