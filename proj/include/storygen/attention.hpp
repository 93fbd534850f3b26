#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "storygen/layers.hpp"

namespace storygen {

/// Rows of h kept when sampling every `stride`-th position backwards from the
/// last one, returned in ascending order together with their original indices.
template <typename Scalar>
struct Downsampled {
    Tensor<Scalar> rows;
    std::vector<std::size_t> kept;
};

template <typename Scalar>
Downsampled<Scalar> downsample_stride(const Tensor<Scalar>& h, std::size_t stride);

/// Positions kept by downsample_stride for a sequence of `length` rows.
std::vector<std::size_t> stride_positions(std::size_t length, std::size_t stride);

/// Query t may attend to key position j iff j < t and (t - 1 - j) % stride == 0.
inline bool stride_allows(std::size_t query, std::size_t key, std::size_t stride)
{
    return key < query && (query - 1 - key) % stride == 0;
}

struct HeadConfig {
    std::size_t head_index = 1;  // 1-based
    std::size_t stride = 1;
    std::size_t model_dim = 0;
    std::size_t head_dim = 0;

    void validate() const;
};

struct AttentionOptions {
    bool scale_logits = false;  // divide logits by sqrt(head_dim)
    std::size_t projector_depth = 1;
};

/// Weights per query over [sentinel, position 0, position 1, ...].
struct AttentionMap {
    std::size_t stride = 1;
    Eigen::MatrixXd weights;  // queries x (1 + positions)

    std::size_t queries() const { return static_cast<std::size_t>(weights.rows()); }
    double sentinel(std::size_t t) const { return weights(t, 0); }
    double at(std::size_t t, std::size_t position) const { return weights(t, position + 1); }

    /// One line per query: "t<TAB>w_sentinel w_0 w_1 ...".
    std::string to_text() const;
};

/// Stack of GLU dense layers: model_dim -> 2*head_dim -> head_dim, then
/// head_dim -> 2*head_dim -> head_dim for each extra level of depth.
template <typename Scalar>
struct GatedProjector {
    std::vector<Linear<Scalar>> layers;

    GatedProjector() = default;
    GatedProjector(std::size_t in, std::size_t out, std::size_t depth, Rng& rng);

    Tensor<Scalar> operator()(const Tensor<Scalar>& x) const;
    void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

/// Projected keys and values seen so far by one head during decoding.
template <typename Scalar>
struct HeadCache {
    std::vector<Tensor<Scalar>> keys;    // one [1 x head_dim] row per position
    std::vector<Tensor<Scalar>> values;
};

template <typename Scalar>
struct SelfAttentionHead {
    HeadConfig config;
    AttentionOptions options;
    GatedProjector<Scalar> query;
    GatedProjector<Scalar> key;
    GatedProjector<Scalar> value;
    Linear<Scalar> output;

    SelfAttentionHead() = default;
    SelfAttentionHead(HeadConfig config, AttentionOptions options, Rng& rng);

    /// h[T x d] -> [T x head_dim]. Fills `map` when given.
    Tensor<Scalar> operator()(const Tensor<Scalar>& h, AttentionMap* map = nullptr) const;

    /// Output row for the newest position h_row[1 x d]; appends its key and
    /// value to the cache afterwards.
    Tensor<Scalar> step(const Tensor<Scalar>& h_row, HeadCache<Scalar>& cache, AttentionMap* map = nullptr) const;

    /// Attends projected queries at positions first_query.. over projected
    /// keys/values at positions 0..N-1, with the sentinel slot prepended.
    Tensor<Scalar> attend(const Tensor<Scalar>& queries, std::size_t first_query, const Tensor<Scalar>& keys,
                          const Tensor<Scalar>& values, AttentionMap* map) const;

    void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

template <typename Scalar>
struct MultiHeadCache {
    std::vector<HeadCache<Scalar>> heads;
};

/// Heads with stride 1..H, concatenated, merged by a shared Linear, added to h.
template <typename Scalar>
struct MultiHeadSelfAttention {
    std::vector<SelfAttentionHead<Scalar>> heads;
    Linear<Scalar> merge;

    MultiHeadSelfAttention() = default;
    MultiHeadSelfAttention(std::size_t model_dim, std::size_t num_heads, AttentionOptions options, Rng& rng);

    std::size_t num_heads() const { return heads.size(); }

    Tensor<Scalar> operator()(const Tensor<Scalar>& h, std::vector<AttentionMap>* maps = nullptr) const;
    Tensor<Scalar> step(const Tensor<Scalar>& h_row, MultiHeadCache<Scalar>& cache,
                        std::vector<AttentionMap>* maps = nullptr) const;
    MultiHeadCache<Scalar> make_cache() const { return {std::vector<HeadCache<Scalar>>(heads.size())}; }

    void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

/// Dot-product attention from decoder states onto encoder outputs.
/// ctx = softmax(in_proj(dec_h) enc_out^T) enc_values; result = dec_h + out_proj(ctx).
template <typename Scalar>
struct EncoderDecoderAttention {
    Linear<Scalar> in_proj;   // dec_dim -> enc_dim
    Linear<Scalar> out_proj;  // enc_dim -> dec_dim

    EncoderDecoderAttention() = default;
    EncoderDecoderAttention(std::size_t dec_dim, std::size_t enc_dim, Rng& rng);

    /// enc_values is the encoder output plus the source embedding.
    Tensor<Scalar> operator()(const Tensor<Scalar>& dec_h, const Tensor<Scalar>& enc_out,
                              const Tensor<Scalar>& enc_values, Eigen::MatrixXd* weights = nullptr) const;

    void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

}  // namespace storygen
