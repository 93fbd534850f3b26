#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "storygen/ops.hpp"
#include "storygen/random.hpp"
#include "storygen/tensor.hpp"

namespace storygen {

template <typename Scalar>
struct NamedTensor {
    std::string name;
    Tensor<Scalar> tensor;
};

template <typename Scalar>
using ParameterList = std::vector<NamedTensor<Scalar>>;

/// Per-call settings for stochastic layers.
struct ForwardContext {
    bool train = false;
    Rng* rng = nullptr;
};

struct ConvBlockSpec {
    std::size_t in_width = 0;
    std::size_t out_width = 0;
    std::size_t kernel_width = 1;
    double dropout = 0.0;

    void validate() const;
    bool operator==(const ConvBlockSpec&) const = default;
};

struct EmbeddingSpec {
    std::size_t vocab_size = 0;
    std::size_t embed_dim = 0;
    std::size_t max_positions = 1024;
};

namespace init {

/// Uniform in +-sqrt(1/fan_in).
template <typename Scalar>
Tensor<Scalar> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng);

/// Normal(0, 0.1), used for embedding tables.
template <typename Scalar>
Tensor<Scalar> embedding_normal(Shape shape, Rng& rng);

}  // namespace init

/// y = x W + b with W stored as [in x out].
template <typename Scalar>
struct Linear {
    Tensor<Scalar> weight;
    Tensor<Scalar> bias;

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng);

    std::size_t in_features() const { return weight.dim(0); }
    std::size_t out_features() const { return weight.dim(1); }

    Tensor<Scalar> operator()(const Tensor<Scalar>& x) const;
    void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

/// Token table plus learned position table, summed.
template <typename Scalar>
struct Embedding {
    EmbeddingSpec spec;
    Tensor<Scalar> tokens;     // [vocab x embed_dim]
    Tensor<Scalar> positions;  // [max_positions x embed_dim]

    Embedding() = default;
    Embedding(EmbeddingSpec spec, Rng& rng);

    /// output[t] = tokens[ids[t]] + positions[first_position + t].
    Tensor<Scalar> operator()(std::span<const TokenId> ids, std::size_t first_position = 0) const;
    void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

template <typename Scalar>
Tensor<Scalar> embed_sequence(std::span<const TokenId> ids, const Embedding<Scalar>& embedding)
{
    return embedding(ids);
}

/// Convolution producing 2*out channels, GLU, then a sqrt(0.5)-scaled residual.
/// The residual passes through a learned projection when widths differ.
/// Dropout is applied to the block input in train mode.
template <typename Scalar>
struct ConvGluBlock {
    ConvBlockSpec spec;
    bool causal = true;
    Tensor<Scalar> kernel;  // [w x in x 2*out]
    Tensor<Scalar> bias;    // [2*out]
    bool has_projection = false;
    Linear<Scalar> projection;

    ConvGluBlock() = default;
    ConvGluBlock(ConvBlockSpec spec, bool causal, Rng& rng);

    Tensor<Scalar> operator()(const Tensor<Scalar>& x, const ForwardContext& ctx) const;

    /// Output row for the newest position given the block's input history
    /// (inference only). `history` holds the most recent input rows, oldest
    /// first; fewer than kernel_width rows means the sequence start is inside
    /// the window.
    Tensor<Scalar> step(const Tensor<Scalar>& history) const;

    void collect(ParameterList<Scalar>& out, const std::string& prefix) const;

private:
    Tensor<Scalar> residual(const Tensor<Scalar>& gated, const Tensor<Scalar>& x) const;
};

/// Bottleneck softmax head: d -> out_embed_dim -> vocab, purely linear.
template <typename Scalar>
struct OutputProjection {
    Linear<Scalar> bottleneck;
    Linear<Scalar> vocab;

    OutputProjection() = default;
    OutputProjection(std::size_t model_dim, std::size_t out_embed_dim, std::size_t vocab_size, Rng& rng);

    Tensor<Scalar> operator()(const Tensor<Scalar>& h) const { return vocab(bottleneck(h)); }
    void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

}  // namespace storygen
