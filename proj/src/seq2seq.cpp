#include "storygen/seq2seq.hpp"

#include <cmath>
#include <limits>

namespace storygen {

template <typename Scalar>
ConvEncoder<Scalar>::ConvEncoder(const ModelSpec& spec, Rng& rng)
    : embedding({spec.prompt_vocab_size, spec.embed_dim, spec.max_positions}, rng),
      in_proj(spec.embed_dim, spec.encoder_blocks.front().in_width, rng)
{
    for (const auto& b : spec.encoder_blocks) blocks.emplace_back(b, false, rng);
    out_proj = Linear<Scalar>(spec.encoder_blocks.back().out_width, spec.embed_dim, rng);
}

template <typename Scalar>
EncoderOutput<Scalar> ConvEncoder<Scalar>::operator()(std::span<const TokenId> prompt, const ForwardContext& ctx) const
{
    const auto embedded = embedding(prompt);
    auto x = in_proj(embedded);
    for (const auto& block : blocks) x = block(x, ctx);
    auto out = out_proj(x);
    auto values = add(out, embedded);
    return {std::move(out), std::move(values)};
}

template <typename Scalar>
void ConvEncoder<Scalar>::collect(ParameterList<Scalar>& out, const std::string& prefix) const
{
    embedding.collect(out, prefix + ".embed");
    in_proj.collect(out, prefix + ".in");
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, prefix + ".conv" + std::to_string(i));
    out_proj.collect(out, prefix + ".out");
}

template <typename Scalar>
void DecoderLayer<Scalar>::collect(ParameterList<Scalar>& out, const std::string& prefix) const
{
    conv.collect(out, prefix + ".conv");
    if (has_cross) cross.collect(out, prefix + ".cross");
    if (has_self) self.collect(out, prefix + ".self");
}

template <typename Scalar>
ConvSeq2Seq<Scalar>::ConvSeq2Seq(ModelSpec spec, bool with_output_head) : spec_(std::move(spec)), with_head_(with_output_head)
{
    spec_.validate();
    Rng rng(spec_.init_seed);
    const bool seq2seq = spec_.mode == ModelMode::seq2seq;
    if (seq2seq) encoder_ = ConvEncoder<Scalar>(spec_, rng);
    embedding_ = Embedding<Scalar>({spec_.story_vocab_size, spec_.embed_dim, spec_.max_positions}, rng);
    in_proj_ = Linear<Scalar>(spec_.embed_dim, spec_.decoder_blocks.front().in_width, rng);
    const AttentionOptions options{spec_.scale_attention, spec_.projector_depth};
    for (std::size_t l = 0; l < spec_.decoder_blocks.size(); ++l) {
        const auto& block = spec_.decoder_blocks[l];
        DecoderLayer<Scalar> layer;
        layer.conv = ConvGluBlock<Scalar>(block, true, rng);
        layer.has_cross = seq2seq;
        if (seq2seq) layer.cross = EncoderDecoderAttention<Scalar>(block.out_width, spec_.embed_dim, rng);
        layer.has_self = spec_.has_self_attention(l);
        if (layer.has_self) {
            layer.self = MultiHeadSelfAttention<Scalar>(block.out_width, spec_.self_attention_heads, options, rng);
        }
        layers_.push_back(std::move(layer));
    }
    if (with_head_) {
        head_ = OutputProjection<Scalar>(spec_.decoder_width(), spec_.out_embed_dim, spec_.story_vocab_size, rng);
    }
}

template <typename Scalar>
void ConvSeq2Seq<Scalar>::check_prompt(std::span<const TokenId> prompt) const
{
    if (spec_.mode == ModelMode::seq2seq && prompt.empty()) throw UsageError("seq2seq model needs a nonempty prompt");
}

template <typename Scalar>
EncoderOutput<Scalar> ConvSeq2Seq<Scalar>::encode(std::span<const TokenId> prompt, const ForwardContext& ctx) const
{
    if (spec_.mode != ModelMode::seq2seq) return {};
    check_prompt(prompt);
    return encoder_(prompt, ctx);
}

template <typename Scalar>
Tensor<Scalar> ConvSeq2Seq<Scalar>::hidden_from(const EncoderOutput<Scalar>* encoded, std::span<const TokenId> input,
                                                const ForwardContext& ctx, AttentionTrace* trace) const
{
    if (input.empty()) throw UsageError("decoder input is empty");
    if (spec_.mode == ModelMode::seq2seq && !encoded) throw UsageError("seq2seq decoder needs encoder output");
    if (trace) {
        trace->self.assign(layers_.size(), {});
        trace->cross.assign(layers_.size(), {});
    }
    auto x = in_proj_(embedding_(input));
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& layer = layers_[l];
        x = layer.conv(x, ctx);
        if (layer.has_cross) x = layer.cross(x, encoded->out, encoded->values, trace ? &trace->cross[l] : nullptr);
        if (layer.has_self) x = layer.self(x, trace ? &trace->self[l] : nullptr);
    }
    return x;
}

template <typename Scalar>
Tensor<Scalar> ConvSeq2Seq<Scalar>::hidden(std::span<const TokenId> prompt, std::span<const TokenId> input,
                                           const ForwardContext& ctx, AttentionTrace* trace) const
{
    if (spec_.mode == ModelMode::lm) return hidden_from(nullptr, input, ctx, trace);
    const auto encoded = encode(prompt, ctx);
    return hidden_from(&encoded, input, ctx, trace);
}

template <typename Scalar>
Tensor<Scalar> ConvSeq2Seq<Scalar>::forward(std::span<const TokenId> prompt, std::span<const TokenId> input,
                                            const ForwardContext& ctx) const
{
    if (!with_head_) throw UsageError("model was built without an output head");
    return head_(hidden(prompt, input, ctx));
}

template <typename Scalar>
DecodeState<Scalar> ConvSeq2Seq<Scalar>::start(std::span<const TokenId> prompt) const
{
    NoGradGuard no_grad;
    DecodeState<Scalar> state;
    state.encoded = encode(prompt);
    state.conv_history.resize(layers_.size());
    for (const auto& layer : layers_) {
        state.attention.push_back(layer.has_self ? layer.self.make_cache() : MultiHeadCache<Scalar>{});
    }
    return state;
}

template <typename Scalar>
Tensor<Scalar> ConvSeq2Seq<Scalar>::step_hidden(DecodeState<Scalar>& state, TokenId next) const
{
    if (state.position >= spec_.max_positions) {
        throw LengthError("decode position " + std::to_string(state.position) + " reaches max_positions " +
                          std::to_string(spec_.max_positions));
    }
    NoGradGuard no_grad;
    const TokenId ids[1] = {next};
    auto x = in_proj_(embedding_(ids, state.position));
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& layer = layers_[l];
        auto& history = state.conv_history[l];
        history.push_back(x);
        if (history.size() > layer.conv.spec.kernel_width) history.erase(history.begin());
        x = layer.conv.step(concat<Scalar>(std::span<const Tensor<Scalar>>(history), 0));
        if (layer.has_cross) x = layer.cross(x, state.encoded.out, state.encoded.values);
        if (layer.has_self) x = layer.self.step(x, state.attention[l]);
    }
    state.tokens.push_back(next);
    ++state.position;
    return x;
}

template <typename Scalar>
Eigen::VectorXd ConvSeq2Seq<Scalar>::step(DecodeState<Scalar>& state, TokenId next) const
{
    if (!with_head_) throw UsageError("model was built without an output head");
    const auto h = step_hidden(state, next);
    NoGradGuard no_grad;
    const auto logits = head_(h);
    return logits.mat().row(0).transpose().template cast<double>();
}

namespace {

template <typename Scalar>
class ConvSession : public DecodeSession {
public:
    ConvSession(const ConvSeq2Seq<Scalar>& model, DecodeState<Scalar> state) : model_(model), state_(std::move(state)) {}
    Eigen::VectorXd step(TokenId next) override { return model_.step(state_, next); }
    std::size_t position() const override { return state_.position; }

private:
    const ConvSeq2Seq<Scalar>& model_;
    DecodeState<Scalar> state_;
};

}  // namespace

template <typename Scalar>
std::unique_ptr<DecodeSession> ConvSeq2Seq<Scalar>::begin(std::span<const TokenId> prompt) const
{
    return std::make_unique<ConvSession<Scalar>>(*this, start(prompt));
}

template <typename Scalar>
ParameterList<Scalar> ConvSeq2Seq<Scalar>::parameters() const
{
    ParameterList<Scalar> out;
    if (spec_.mode == ModelMode::seq2seq) encoder_.collect(out, "encoder");
    embedding_.collect(out, "decoder.embed");
    in_proj_.collect(out, "decoder.in");
    for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l].collect(out, "decoder.layer" + std::to_string(l));
    if (with_head_) head_.collect(out, "head");
    return out;
}

template <typename Scalar>
std::vector<double> token_log_probs(const SequenceModel<Scalar>& model, std::span<const TokenId> prompt,
                                    std::span<const TokenId> story)
{
    if (story.empty()) return {};
    std::vector<TokenId> input{special::begin_of_sequence};
    input.insert(input.end(), story.begin(), story.end() - 1);
    NoGradGuard no_grad;
    const auto logp = log_softmax_rows(model.forward(prompt, input, {}));
    std::vector<double> out(story.size());
    for (std::size_t t = 0; t < story.size(); ++t) {
        if (story[t] < 0 || static_cast<std::size_t>(story[t]) >= model.vocab_size()) {
            throw BoundsError("story token " + std::to_string(story[t]) + " outside vocabulary");
        }
        out[t] = static_cast<double>(logp(t, story[t]));
    }
    return out;
}

template <typename Scalar>
double score_sequence(const SequenceModel<Scalar>& model, std::span<const TokenId> prompt,
                      std::span<const TokenId> story)
{
    double total = 0.0;
    for (double lp : token_log_probs(model, prompt, story)) total += lp;
    return total;
}

Eigen::VectorXd ensemble_logits(const std::vector<Eigen::VectorXd>& member_logits, std::vector<double> weights)
{
    if (member_logits.empty()) throw UsageError("ensemble needs at least one member");
    if (weights.empty()) weights.assign(member_logits.size(), 1.0);
    if (weights.size() != member_logits.size()) throw ConfigError("ensemble weight count does not match members");
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw ConfigError("ensemble weights must be non-negative");
        total += w;
    }
    if (total <= 0.0) throw ConfigError("ensemble weights sum to zero");

    const Eigen::Index v = member_logits.front().size();
    Eigen::VectorXd mix = Eigen::VectorXd::Zero(v);
    for (std::size_t m = 0; m < member_logits.size(); ++m) {
        const auto& z = member_logits[m];
        if (z.size() != v) throw ShapeError("ensemble members disagree on vocabulary size");
        Eigen::VectorXd p = (z.array() - z.maxCoeff()).exp();
        mix += (weights[m] / total) * (p / p.sum());
    }
    constexpr double floor = std::numeric_limits<double>::min();
    return mix.array().max(floor).log();
}

template <typename Scalar>
Ensemble<Scalar>::Ensemble(std::vector<const SequenceModel<Scalar>*> members, std::vector<double> weights)
    : members_(std::move(members)), weights_(std::move(weights))
{
    if (members_.empty()) throw UsageError("ensemble needs at least one member");
    for (const auto* m : members_) {
        if (m->vocab_size() != members_.front()->vocab_size()) {
            throw ShapeError("ensemble members disagree on vocabulary size");
        }
    }
    if (!weights_.empty() && weights_.size() != members_.size()) {
        throw ConfigError("ensemble weight count does not match members");
    }
}

template <typename Scalar>
std::size_t Ensemble<Scalar>::max_positions() const
{
    std::size_t out = members_.front()->max_positions();
    for (const auto* m : members_) out = std::min(out, m->max_positions());
    return out;
}

template <typename Scalar>
Tensor<Scalar> Ensemble<Scalar>::forward(std::span<const TokenId> prompt, std::span<const TokenId> input,
                                         const ForwardContext& ctx) const
{
    NoGradGuard no_grad;
    std::vector<Tensor<Scalar>> per_member;
    for (const auto* m : members_) per_member.push_back(m->forward(prompt, input, ctx));
    Tensor<Scalar> out(per_member.front().shape());
    auto Y = out.mutable_mat();
    std::vector<Eigen::VectorXd> rows(members_.size());
    for (Eigen::Index t = 0; t < Y.rows(); ++t) {
        for (std::size_t m = 0; m < members_.size(); ++m) {
            rows[m] = per_member[m].mat().row(t).transpose().template cast<double>();
        }
        Y.row(t) = ensemble_logits(rows, weights_).transpose().template cast<Scalar>();
    }
    return out;
}

namespace {

class EnsembleSession : public DecodeSession {
public:
    EnsembleSession(std::vector<std::unique_ptr<DecodeSession>> sessions, std::vector<double> weights)
        : sessions_(std::move(sessions)), weights_(std::move(weights))
    {
    }

    Eigen::VectorXd step(TokenId next) override
    {
        std::vector<Eigen::VectorXd> logits;
        for (auto& s : sessions_) logits.push_back(s->step(next));
        return ensemble_logits(logits, weights_);
    }

    std::size_t position() const override { return sessions_.front()->position(); }

private:
    std::vector<std::unique_ptr<DecodeSession>> sessions_;
    std::vector<double> weights_;
};

}  // namespace

template <typename Scalar>
std::unique_ptr<DecodeSession> Ensemble<Scalar>::begin(std::span<const TokenId> prompt) const
{
    std::vector<std::unique_ptr<DecodeSession>> sessions;
    for (const auto* m : members_) sessions.push_back(m->begin(prompt));
    return std::make_unique<EnsembleSession>(std::move(sessions), weights_);
}

#define STORYGEN_INSTANTIATE_SEQ2SEQ(S)                                                                       \
    template struct ConvEncoder<S>;                                                                           \
    template struct DecoderLayer<S>;                                                                          \
    template class ConvSeq2Seq<S>;                                                                            \
    template class Ensemble<S>;                                                                               \
    template double score_sequence(const SequenceModel<S>&, std::span<const TokenId>, std::span<const TokenId>); \
    template std::vector<double> token_log_probs(const SequenceModel<S>&, std::span<const TokenId>,            \
                                                 std::span<const TokenId>);

STORYGEN_INSTANTIATE_SEQ2SEQ(float)
STORYGEN_INSTANTIATE_SEQ2SEQ(double)

}  // namespace storygen
