#include "storygen/attention.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace storygen {

std::vector<std::size_t> stride_positions(std::size_t length, std::size_t stride)
{
    if (stride == 0) throw ConfigError("downsample stride must be >= 1");
    std::vector<std::size_t> kept;
    for (std::size_t back = 0; back < length; back += stride) kept.push_back(length - 1 - back);
    std::reverse(kept.begin(), kept.end());
    return kept;
}

template <typename Scalar>
Downsampled<Scalar> downsample_stride(const Tensor<Scalar>& h, std::size_t stride)
{
    if (h.rank() != 2) throw ShapeError("downsample_stride: expected rank 2, got " + to_string(h.shape()));
    auto kept = stride_positions(h.dim(0), stride);
    auto rows = select_rows(h, std::span<const std::size_t>(kept));
    return {std::move(rows), std::move(kept)};
}

void HeadConfig::validate() const
{
    if (head_index == 0) throw ConfigError("head index is 1-based");
    if (stride == 0) throw ConfigError("head stride must be >= 1");
    if (model_dim == 0 || head_dim == 0) throw ConfigError("head widths must be >= 1");
}

std::string AttentionMap::to_text() const
{
    std::ostringstream out;
    out << std::setprecision(9);
    for (Eigen::Index t = 0; t < weights.rows(); ++t) {
        out << t << '\t';
        for (Eigen::Index j = 0; j < weights.cols(); ++j) {
            if (j) out << ' ';
            out << weights(t, j);
        }
        out << '\n';
    }
    return out.str();
}

template <typename Scalar>
GatedProjector<Scalar>::GatedProjector(std::size_t in, std::size_t out, std::size_t depth, Rng& rng)
{
    if (depth == 0) throw ConfigError("gated projector depth must be >= 1");
    layers.emplace_back(in, 2 * out, rng);
    for (std::size_t i = 1; i < depth; ++i) layers.emplace_back(out, 2 * out, rng);
}

template <typename Scalar>
Tensor<Scalar> GatedProjector<Scalar>::operator()(const Tensor<Scalar>& x) const
{
    Tensor<Scalar> y = x;
    for (const auto& layer : layers) y = glu(layer(y));
    return y;
}

template <typename Scalar>
void GatedProjector<Scalar>::collect(ParameterList<Scalar>& out, const std::string& prefix) const
{
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(out, prefix + "." + std::to_string(i));
}

template <typename Scalar>
SelfAttentionHead<Scalar>::SelfAttentionHead(HeadConfig cfg, AttentionOptions opts, Rng& rng)
    : config(cfg),
      options(opts),
      query(cfg.model_dim, cfg.head_dim, opts.projector_depth, rng),
      key(cfg.model_dim, cfg.head_dim, opts.projector_depth, rng),
      value(cfg.model_dim, cfg.head_dim, opts.projector_depth, rng),
      output(cfg.head_dim, cfg.head_dim, rng)
{
    cfg.validate();
}

template <typename Scalar>
Tensor<Scalar> SelfAttentionHead<Scalar>::attend(const Tensor<Scalar>& queries, std::size_t first_query,
                                                 const Tensor<Scalar>& keys, const Tensor<Scalar>& values,
                                                 AttentionMap* map) const
{
    const std::size_t n = queries.dim(0);
    const std::size_t positions = keys.dim(0);
    const std::size_t slots = positions + 1;

    const auto sentinel_key = key(Tensor<Scalar>::zeros({1, config.model_dim}));
    const auto all_keys = concat<Scalar>({sentinel_key, keys}, 0);
    const auto all_values = concat<Scalar>({Tensor<Scalar>::zeros({1, config.head_dim}), values}, 0);

    auto scores = matmul(queries, transpose(all_keys));
    if (options.scale_logits) {
        scores = scale(scores, static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(config.head_dim))));
    }

    std::vector<std::uint8_t> mask(n * slots, 0);
    for (std::size_t i = 0; i < n; ++i) {
        mask[i * slots] = 1;
        for (std::size_t j = 0; j < positions; ++j) {
            mask[i * slots + 1 + j] = stride_allows(first_query + i, j, config.stride) ? 1 : 0;
        }
    }
    const auto weights = masked_softmax(scores, std::span<const std::uint8_t>(mask));

    if (map) {
        map->stride = config.stride;
        map->weights = weights.mat().template cast<double>();
    }
    return output(matmul(weights, all_values));
}

template <typename Scalar>
Tensor<Scalar> SelfAttentionHead<Scalar>::operator()(const Tensor<Scalar>& h, AttentionMap* map) const
{
    if (h.rank() != 2 || h.dim(1) != config.model_dim || h.dim(0) == 0) {
        throw ShapeError("attention head expects [T x " + std::to_string(config.model_dim) + "] with T >= 1, got " +
                         to_string(h.shape()));
    }
    return attend(query(h), 0, key(h), value(h), map);
}

template <typename Scalar>
Tensor<Scalar> SelfAttentionHead<Scalar>::step(const Tensor<Scalar>& h_row, HeadCache<Scalar>& cache,
                                               AttentionMap* map) const
{
    if (h_row.rank() != 2 || h_row.dim(0) != 1 || h_row.dim(1) != config.model_dim) {
        throw ShapeError("attention step expects [1 x " + std::to_string(config.model_dim) + "], got " +
                         to_string(h_row.shape()));
    }
    const std::size_t t = cache.keys.size();
    Tensor<Scalar> keys({0, config.head_dim});
    Tensor<Scalar> values({0, config.head_dim});
    if (t > 0) {
        keys = concat<Scalar>(std::span<const Tensor<Scalar>>(cache.keys), 0);
        values = concat<Scalar>(std::span<const Tensor<Scalar>>(cache.values), 0);
    }
    auto out = attend(query(h_row), t, keys, values, map);
    cache.keys.push_back(key(h_row));
    cache.values.push_back(value(h_row));
    return out;
}

template <typename Scalar>
void SelfAttentionHead<Scalar>::collect(ParameterList<Scalar>& out, const std::string& prefix) const
{
    query.collect(out, prefix + ".q");
    key.collect(out, prefix + ".k");
    value.collect(out, prefix + ".v");
    output.collect(out, prefix + ".out");
}

template <typename Scalar>
MultiHeadSelfAttention<Scalar>::MultiHeadSelfAttention(std::size_t model_dim, std::size_t num_heads,
                                                       AttentionOptions options, Rng& rng)
{
    if (num_heads == 0 || model_dim % num_heads != 0) {
        throw ConfigError("model width " + std::to_string(model_dim) + " is not divisible by " +
                          std::to_string(num_heads) + " heads");
    }
    const std::size_t head_dim = model_dim / num_heads;
    for (std::size_t i = 1; i <= num_heads; ++i) {
        heads.emplace_back(HeadConfig{i, i, model_dim, head_dim}, options, rng);
    }
    merge = Linear<Scalar>(model_dim, model_dim, rng);
}

template <typename Scalar>
Tensor<Scalar> MultiHeadSelfAttention<Scalar>::operator()(const Tensor<Scalar>& h,
                                                          std::vector<AttentionMap>* maps) const
{
    if (maps) maps->assign(heads.size(), {});
    std::vector<Tensor<Scalar>> outs;
    outs.reserve(heads.size());
    for (std::size_t i = 0; i < heads.size(); ++i) outs.push_back(heads[i](h, maps ? &(*maps)[i] : nullptr));
    const auto joined = outs.size() == 1 ? outs[0] : concat<Scalar>(std::span<const Tensor<Scalar>>(outs), 1);
    return add(h, merge(joined));
}

template <typename Scalar>
Tensor<Scalar> MultiHeadSelfAttention<Scalar>::step(const Tensor<Scalar>& h_row, MultiHeadCache<Scalar>& cache,
                                                    std::vector<AttentionMap>* maps) const
{
    if (cache.heads.size() != heads.size()) throw UsageError("attention cache does not match head count");
    if (maps) maps->assign(heads.size(), {});
    std::vector<Tensor<Scalar>> outs;
    outs.reserve(heads.size());
    for (std::size_t i = 0; i < heads.size(); ++i) {
        outs.push_back(heads[i].step(h_row, cache.heads[i], maps ? &(*maps)[i] : nullptr));
    }
    const auto joined = outs.size() == 1 ? outs[0] : concat<Scalar>(std::span<const Tensor<Scalar>>(outs), 1);
    return add(h_row, merge(joined));
}

template <typename Scalar>
void MultiHeadSelfAttention<Scalar>::collect(ParameterList<Scalar>& out, const std::string& prefix) const
{
    for (std::size_t i = 0; i < heads.size(); ++i) heads[i].collect(out, prefix + ".head" + std::to_string(i + 1));
    merge.collect(out, prefix + ".merge");
}

template <typename Scalar>
EncoderDecoderAttention<Scalar>::EncoderDecoderAttention(std::size_t dec_dim, std::size_t enc_dim, Rng& rng)
    : in_proj(dec_dim, enc_dim, rng), out_proj(enc_dim, dec_dim, rng)
{
}

template <typename Scalar>
Tensor<Scalar> EncoderDecoderAttention<Scalar>::operator()(const Tensor<Scalar>& dec_h, const Tensor<Scalar>& enc_out,
                                                           const Tensor<Scalar>& enc_values,
                                                           Eigen::MatrixXd* weights) const
{
    if (enc_out.rank() != 2 || enc_out.dim(0) == 0) {
        throw UsageError("encoder-decoder attention needs a nonempty source, got " + to_string(enc_out.shape()));
    }
    if (enc_values.shape() != enc_out.shape()) {
        throw ShapeError("encoder values " + to_string(enc_values.shape()) + " do not match outputs " +
                         to_string(enc_out.shape()));
    }
    const auto scores = matmul(in_proj(dec_h), transpose(enc_out));
    const auto attn = softmax(scores, 1);
    if (weights) *weights = attn.mat().template cast<double>();
    return add(dec_h, out_proj(matmul(attn, enc_values)));
}

template <typename Scalar>
void EncoderDecoderAttention<Scalar>::collect(ParameterList<Scalar>& out, const std::string& prefix) const
{
    in_proj.collect(out, prefix + ".in");
    out_proj.collect(out, prefix + ".out");
}

template Downsampled<float> downsample_stride(const Tensor<float>&, std::size_t);
template Downsampled<double> downsample_stride(const Tensor<double>&, std::size_t);
template struct GatedProjector<float>;
template struct GatedProjector<double>;
template struct SelfAttentionHead<float>;
template struct SelfAttentionHead<double>;
template struct MultiHeadSelfAttention<float>;
template struct MultiHeadSelfAttention<double>;
template struct EncoderDecoderAttention<float>;
template struct EncoderDecoderAttention<double>;

}  // namespace storygen
