#include "storygen/layers.hpp"

#include <algorithm>
#include <cmath>

namespace storygen {

void ConvBlockSpec::validate() const
{
    if (in_width == 0 || out_width == 0) throw ConfigError("conv block widths must be >= 1");
    if (kernel_width == 0) throw ConfigError("conv block kernel width must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("conv block dropout must be in [0, 1)");
}

namespace init {

template <typename Scalar>
Tensor<Scalar> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng)
{
    const double bound = std::sqrt(1.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    Tensor<Scalar> t(std::move(shape), true);
    for (auto& v : t.mutable_data()) v = static_cast<Scalar>(rng.uniform(-bound, bound));
    return t;
}

template <typename Scalar>
Tensor<Scalar> embedding_normal(Shape shape, Rng& rng)
{
    Tensor<Scalar> t(std::move(shape), true);
    for (auto& v : t.mutable_data()) v = static_cast<Scalar>(rng.normal(0.0, 0.1));
    return t;
}

}  // namespace init

template <typename Scalar>
Linear<Scalar>::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(init::fan_in_uniform<Scalar>({in, out}, in, rng)), bias(Shape{out}, true)
{
}

template <typename Scalar>
Tensor<Scalar> Linear<Scalar>::operator()(const Tensor<Scalar>& x) const
{
    return add_bias(matmul(x, weight), bias);
}

template <typename Scalar>
void Linear<Scalar>::collect(ParameterList<Scalar>& out, const std::string& prefix) const
{
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

template <typename Scalar>
Embedding<Scalar>::Embedding(EmbeddingSpec s, Rng& rng)
    : spec(s),
      tokens(init::embedding_normal<Scalar>({s.vocab_size, s.embed_dim}, rng)),
      positions(init::embedding_normal<Scalar>({s.max_positions, s.embed_dim}, rng))
{
    if (s.vocab_size == 0 || s.embed_dim == 0) throw ConfigError("embedding needs vocab and width >= 1");
}

template <typename Scalar>
Tensor<Scalar> Embedding<Scalar>::operator()(std::span<const TokenId> ids, std::size_t first_position) const
{
    if (first_position + ids.size() > spec.max_positions) {
        throw BoundsError("embedding: position " + std::to_string(first_position + ids.size() - 1) +
                          " exceeds max_positions " + std::to_string(spec.max_positions));
    }
    auto tok = embed(ids, tokens);
    auto pos = slice_rows(positions, first_position, first_position + ids.size());
    return add(tok, pos);
}

template <typename Scalar>
void Embedding<Scalar>::collect(ParameterList<Scalar>& out, const std::string& prefix) const
{
    out.push_back({prefix + ".tokens", tokens});
    out.push_back({prefix + ".positions", positions});
}

template <typename Scalar>
ConvGluBlock<Scalar>::ConvGluBlock(ConvBlockSpec s, bool is_causal, Rng& rng)
    : spec(s),
      causal(is_causal),
      kernel(init::fan_in_uniform<Scalar>({s.kernel_width, s.in_width, 2 * s.out_width},
                                          s.kernel_width * s.in_width, rng)),
      bias(Shape{2 * s.out_width}, true),
      has_projection(s.in_width != s.out_width)
{
    s.validate();
    if (has_projection) projection = Linear<Scalar>(s.in_width, s.out_width, rng);
}

template <typename Scalar>
Tensor<Scalar> ConvGluBlock<Scalar>::residual(const Tensor<Scalar>& gated, const Tensor<Scalar>& x) const
{
    static const Scalar kHalfRoot = static_cast<Scalar>(std::sqrt(0.5));
    const Tensor<Scalar> skip = has_projection ? projection(x) : x;
    return scale(add(gated, skip), kHalfRoot);
}

template <typename Scalar>
Tensor<Scalar> ConvGluBlock<Scalar>::operator()(const Tensor<Scalar>& x, const ForwardContext& ctx) const
{
    if (x.rank() != 2 || x.dim(1) != spec.in_width) {
        throw ShapeError("conv block expects [T x " + std::to_string(spec.in_width) + "], got " +
                         to_string(x.shape()));
    }
    const auto dropped = dropout(x, spec.dropout, ctx.train, ctx.rng);
    const auto conv = causal ? conv1d_causal(dropped, kernel, bias) : conv1d_centered(dropped, kernel, bias);
    return residual(glu(conv), x);
}

template <typename Scalar>
Tensor<Scalar> ConvGluBlock<Scalar>::step(const Tensor<Scalar>& history) const
{
    if (history.rank() != 2 || history.dim(1) != spec.in_width || history.dim(0) == 0 ||
        history.dim(0) > spec.kernel_width) {
        throw ShapeError("conv block step: bad history " + to_string(history.shape()));
    }
    if (!causal) throw UsageError("conv block step: only causal blocks decode incrementally");
    const std::size_t missing = spec.kernel_width - history.dim(0);
    const auto window = conv1d(history, kernel, bias, missing, 0);
    const auto last = slice_rows(history, history.dim(0) - 1, history.dim(0));
    return residual(glu(window), last);
}

template <typename Scalar>
void ConvGluBlock<Scalar>::collect(ParameterList<Scalar>& out, const std::string& prefix) const
{
    out.push_back({prefix + ".kernel", kernel});
    out.push_back({prefix + ".bias", bias});
    if (has_projection) projection.collect(out, prefix + ".projection");
}

template <typename Scalar>
OutputProjection<Scalar>::OutputProjection(std::size_t model_dim, std::size_t out_embed_dim,
                                           std::size_t vocab_size, Rng& rng)
    : bottleneck(model_dim, out_embed_dim, rng), vocab(out_embed_dim, vocab_size, rng)
{
}

template <typename Scalar>
void OutputProjection<Scalar>::collect(ParameterList<Scalar>& out, const std::string& prefix) const
{
    bottleneck.collect(out, prefix + ".bottleneck");
    vocab.collect(out, prefix + ".vocab");
}

template Tensor<float> init::fan_in_uniform<float>(Shape, std::size_t, Rng&);
template Tensor<double> init::fan_in_uniform<double>(Shape, std::size_t, Rng&);
template Tensor<float> init::embedding_normal<float>(Shape, Rng&);
template Tensor<double> init::embedding_normal<double>(Shape, Rng&);

template struct Linear<float>;
template struct Linear<double>;
template struct Embedding<float>;
template struct Embedding<double>;
template struct ConvGluBlock<float>;
template struct ConvGluBlock<double>;
template struct OutputProjection<float>;
template struct OutputProjection<double>;

}  // namespace storygen
