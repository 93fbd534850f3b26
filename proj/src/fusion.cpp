#include "storygen/fusion.hpp"

#include <filesystem>
#include <sstream>

namespace storygen {

template <typename Scalar>
FusionHead<Scalar>::FusionHead(std::size_t train_w, std::size_t pre_w, std::size_t out_embed_dim,
                               std::size_t vocab_size, std::size_t post_layers, Rng& rng)
    : train_width(train_w), pre_width(pre_w)
{
    if (post_layers == 0) throw ConfigError("fusion needs at least one post layer");
    const std::size_t cat = train_w + pre_w;
    gate = Linear<Scalar>(cat, cat, rng);
    for (std::size_t i = 0; i < post_layers; ++i) {
        const std::size_t out = i + 1 == post_layers ? out_embed_dim : cat;
        post.emplace_back(cat, 2 * out, rng);
        auto gain = Tensor<Scalar>::full({out}, Scalar(1));
        gain.set_requires_grad(true);
        gains.push_back(gain);
        biases.push_back(Tensor<Scalar>({out}, true));
    }
    output = Linear<Scalar>(out_embed_dim, vocab_size, rng);
}

template <typename Scalar>
Tensor<Scalar> FusionHead<Scalar>::gated(const Tensor<Scalar>& h_train, const Tensor<Scalar>& h_pre,
                                        Eigen::MatrixXd* gates) const
{
    if (h_train.rank() != 2 || h_pre.rank() != 2 || h_train.dim(1) != train_width || h_pre.dim(1) != pre_width ||
        h_train.dim(0) != h_pre.dim(0)) {
        throw ShapeError("fusion expects [T x " + std::to_string(train_width) + "] and [T x " +
                         std::to_string(pre_width) + "], got " + to_string(h_train.shape()) + " and " +
                         to_string(h_pre.shape()));
    }
    const auto c = concat<Scalar>({h_train, h_pre}, 1);
    const auto g = sigmoid(gate(c));
    if (gates) *gates = g.mat().template cast<double>();
    return multiply(g, c);
}

template <typename Scalar>
Tensor<Scalar> FusionHead<Scalar>::fuse(const Tensor<Scalar>& h_train, const Tensor<Scalar>& h_pre,
                                        Eigen::MatrixXd* gates) const
{
    auto h = gated(h_train, h_pre, gates);
    for (std::size_t i = 0; i < post.size(); ++i) h = layer_norm(glu(post[i](h)), gains[i], biases[i]);
    return h;
}

template <typename Scalar>
void FusionHead<Scalar>::collect(ParameterList<Scalar>& out, const std::string& prefix) const
{
    gate.collect(out, prefix + ".gate");
    for (std::size_t i = 0; i < post.size(); ++i) {
        post[i].collect(out, prefix + ".post" + std::to_string(i));
        out.push_back({prefix + ".post" + std::to_string(i) + ".norm_gain", gains[i]});
        out.push_back({prefix + ".post" + std::to_string(i) + ".norm_bias", biases[i]});
    }
    output.collect(out, prefix + ".output");
}

namespace {

ModelSpec checked_trainable(const ModelSpec& pretrained, ModelSpec trainable)
{
    if (pretrained.mode != ModelMode::seq2seq || trainable.mode != ModelMode::seq2seq) {
        throw ConfigError("fusion combines two seq2seq models");
    }
    if (trainable.prompt_vocab_size == 0) trainable.prompt_vocab_size = pretrained.prompt_vocab_size;
    if (trainable.story_vocab_size == 0) trainable.story_vocab_size = pretrained.story_vocab_size;
    if (trainable.prompt_vocab_size != pretrained.prompt_vocab_size ||
        trainable.story_vocab_size != pretrained.story_vocab_size) {
        throw ConfigError("fusion models must share prompt and story vocabularies");
    }
    return trainable;
}

}  // namespace

template <typename Scalar>
FusionModel<Scalar>::FusionModel(std::shared_ptr<ConvSeq2Seq<Scalar>> pretrained, FusionSpec spec)
    : pretrained_(std::move(pretrained)),
      spec_{checked_trainable(pretrained_->spec(), spec.trainable), spec.post_layers},
      trainable_(spec_.trainable, false)
{
    for (auto& p : pretrained_->parameters()) {
        auto t = p.tensor;
        t.set_requires_grad(false);
        t.clear_grad();
    }
    Rng rng(Rng::mix(spec_.trainable.init_seed, 0x66757369ULL));
    head_ = FusionHead<Scalar>(spec_.trainable.decoder_width(), pretrained_->spec().decoder_width(),
                               spec_.trainable.out_embed_dim, vocab_size(), spec_.post_layers, rng);
}

template <typename Scalar>
std::size_t FusionModel<Scalar>::max_positions() const
{
    return std::min(pretrained_->max_positions(), trainable_.max_positions());
}

template <typename Scalar>
Tensor<Scalar> FusionModel<Scalar>::forward(std::span<const TokenId> prompt, std::span<const TokenId> input,
                                            const ForwardContext& ctx, Eigen::MatrixXd* gates) const
{
    Tensor<Scalar> h_pre;
    {
        NoGradGuard frozen;
        h_pre = pretrained_->hidden(prompt, input, {});
    }
    const auto h_train = trainable_.hidden(prompt, input, ctx);
    return head_(h_train, h_pre, gates);
}

template <typename Scalar>
Tensor<Scalar> FusionModel<Scalar>::forward(std::span<const TokenId> prompt, std::span<const TokenId> input,
                                            const ForwardContext& ctx) const
{
    return forward(prompt, input, ctx, nullptr);
}

namespace {

template <typename Scalar>
class FusionSession : public DecodeSession {
public:
    FusionSession(const FusionModel<Scalar>& model, std::span<const TokenId> prompt)
        : model_(model), pre_(model.pretrained().start(prompt)), train_(model.trainable().start(prompt))
    {
    }

    Eigen::VectorXd step(TokenId next) override
    {
        const auto h_pre = model_.pretrained().step_hidden(pre_, next);
        const auto h_train = model_.trainable().step_hidden(train_, next);
        NoGradGuard no_grad;
        const auto logits = model_.head()(h_train, h_pre);
        return logits.mat().row(0).transpose().template cast<double>();
    }

    std::size_t position() const override { return train_.position; }

private:
    const FusionModel<Scalar>& model_;
    DecodeState<Scalar> pre_;
    DecodeState<Scalar> train_;
};

}  // namespace

template <typename Scalar>
std::unique_ptr<DecodeSession> FusionModel<Scalar>::begin(std::span<const TokenId> prompt) const
{
    return std::make_unique<FusionSession<Scalar>>(*this, prompt);
}

template <typename Scalar>
ParameterList<Scalar> FusionModel<Scalar>::parameters() const
{
    auto out = trainable_.parameters();
    head_.collect(out, "fusion");
    return out;
}

template <typename Scalar>
std::vector<std::pair<double, double>> FusionModel<Scalar>::gate_trace(std::span<const TokenId> prompt,
                                                                       std::span<const TokenId> story) const
{
    if (story.empty()) return {};
    std::vector<TokenId> input{special::begin_of_sequence};
    input.insert(input.end(), story.begin(), story.end() - 1);
    NoGradGuard no_grad;
    Eigen::MatrixXd gates;
    forward(prompt, input, {}, &gates);
    const auto d1 = static_cast<Eigen::Index>(head_.train_width);
    const auto d2 = static_cast<Eigen::Index>(head_.pre_width);
    std::vector<std::pair<double, double>> trace;
    for (Eigen::Index t = 0; t < gates.rows(); ++t) {
        trace.emplace_back(gates.row(t).head(d1).mean(), gates.row(t).tail(d2).mean());
    }
    return trace;
}

std::string format_gate_trace(const std::vector<std::pair<double, double>>& trace)
{
    std::ostringstream out;
    out.precision(6);
    out << "position\ttrainable\tpretrained\n";
    for (std::size_t t = 0; t < trace.size(); ++t) out << t << '\t' << trace[t].first << '\t' << trace[t].second << '\n';
    return out.str();
}

bool is_fusion_checkpoint(const Checkpoint& checkpoint)
{
    return checkpoint.manifest.get_or("kind", "") == "fusion";
}

void store_fusion(Checkpoint& checkpoint, const FusionModel<float>& model, const std::string& pretrained_path)
{
    checkpoint.manifest.set("format_version", std::to_string(kCheckpointFormatVersion));
    checkpoint.manifest.set("kind", "fusion");
    checkpoint.manifest.set("fusion.post_layers", std::to_string(model.spec().post_layers));
    checkpoint.manifest.set("pretrained_path", std::filesystem::absolute(pretrained_path).string());
    checkpoint.manifest.set("pretrained_hash", hex64(file_hash(pretrained_path)));
    store_model_spec(checkpoint, model.spec().trainable);
    store_parameters(checkpoint, model.parameters(), "model.");
}

std::unique_ptr<FusionModel<float>> load_fusion(const Checkpoint& checkpoint, const std::string& pretrained_override)
{
    if (!is_fusion_checkpoint(checkpoint)) throw DataError("checkpoint is not a fusion model");
    const std::string path =
        pretrained_override.empty() ? checkpoint.manifest.get_or("pretrained_path", "") : pretrained_override;
    if (path.empty()) throw DataError("fusion checkpoint does not name its pretrained model");
    if (!std::filesystem::exists(path)) throw DataError("pretrained checkpoint not found: " + path);
    const std::string expected = checkpoint.manifest.get_or("pretrained_hash", "");
    if (hex64(file_hash(path)) != expected) {
        throw DataError("pretrained checkpoint " + path + " does not match recorded hash " + expected);
    }
    std::shared_ptr<ConvSeq2Seq<float>> pretrained = load_model(load_checkpoint(path));
    FusionSpec spec{stored_model_spec(checkpoint), parse_size(checkpoint.manifest.get("fusion.post_layers"), "post_layers")};
    auto model = std::make_unique<FusionModel<float>>(pretrained, spec);
    restore_parameters(checkpoint, model->parameters(), "model.");
    return model;
}

LoadedModel load_sequence_model(const std::string& path)
{
    LoadedModel out;
    out.checkpoint = load_checkpoint(path);
    if (is_fusion_checkpoint(out.checkpoint)) {
        out.model = load_fusion(out.checkpoint);
        return out;
    }
    auto model = load_model(out.checkpoint);
    out.mode = model->spec().mode;
    out.model = std::move(model);
    return out;
}

template struct FusionHead<float>;
template struct FusionHead<double>;
template class FusionModel<float>;
template class FusionModel<double>;

}  // namespace storygen
