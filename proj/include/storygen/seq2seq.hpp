#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "storygen/attention.hpp"
#include "storygen/layers.hpp"
#include "storygen/model_spec.hpp"
#include "storygen/special_tokens.hpp"

namespace storygen {

/// One incremental decoding stream. Each step feeds the next input token and
/// returns unnormalized scores for the token after it.
class DecodeSession {
public:
    virtual ~DecodeSession() = default;
    virtual Eigen::VectorXd step(TokenId next) = 0;
    virtual std::size_t position() const = 0;
};

/// Anything that maps (prompt, decoder input) to next-token logits.
/// For language models the prompt is ignored.
template <typename Scalar>
class SequenceModel {
public:
    virtual ~SequenceModel() = default;

    virtual std::size_t vocab_size() const = 0;
    virtual std::size_t max_positions() const = 0;

    /// logits[t] scores the token following input[t].
    virtual Tensor<Scalar> forward(std::span<const TokenId> prompt, std::span<const TokenId> input,
                                   const ForwardContext& ctx) const = 0;

    virtual std::unique_ptr<DecodeSession> begin(std::span<const TokenId> prompt) const = 0;

    /// Parameters an optimizer may update.
    virtual ParameterList<Scalar> parameters() const = 0;
};

template <typename Scalar>
struct EncoderOutput {
    Tensor<Scalar> out;     // [Te x embed_dim]
    Tensor<Scalar> values;  // out + source embedding
};

/// Source embedding -> width projection -> centered conv blocks -> back to embed_dim.
template <typename Scalar>
struct ConvEncoder {
    Embedding<Scalar> embedding;
    Linear<Scalar> in_proj;
    std::vector<ConvGluBlock<Scalar>> blocks;
    Linear<Scalar> out_proj;

    ConvEncoder() = default;
    ConvEncoder(const ModelSpec& spec, Rng& rng);

    EncoderOutput<Scalar> operator()(std::span<const TokenId> prompt, const ForwardContext& ctx) const;
    void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

/// Causal conv block, then encoder-decoder attention (seq2seq only), then
/// optional multi-head self-attention.
template <typename Scalar>
struct DecoderLayer {
    ConvGluBlock<Scalar> conv;
    bool has_cross = false;
    EncoderDecoderAttention<Scalar> cross;
    bool has_self = false;
    MultiHeadSelfAttention<Scalar> self;

    void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

/// Per-sequence cache for incremental decoding.
template <typename Scalar>
struct DecodeState {
    EncoderOutput<Scalar> encoded;
    std::vector<std::vector<Tensor<Scalar>>> conv_history;  // per layer, newest last
    std::vector<MultiHeadCache<Scalar>> attention;
    std::vector<TokenId> tokens;
    std::size_t position = 0;
};

/// Attention maps gathered during a forward pass, per decoder layer.
struct AttentionTrace {
    std::vector<std::vector<AttentionMap>> self;  // [layer][head]
    std::vector<Eigen::MatrixXd> cross;           // [layer]
};

/// Gated convolutional LM (mode lm) or conv seq2seq story model (mode seq2seq),
/// both with decoder self-attention.
template <typename Scalar>
class ConvSeq2Seq : public SequenceModel<Scalar> {
public:
    ConvSeq2Seq(ModelSpec spec, bool with_output_head = true);

    const ModelSpec& spec() const { return spec_; }
    bool has_output_head() const { return with_head_; }

    std::size_t vocab_size() const override { return spec_.story_vocab_size; }
    std::size_t max_positions() const override { return spec_.max_positions; }

    EncoderOutput<Scalar> encode(std::span<const TokenId> prompt, const ForwardContext& ctx = {}) const;

    /// Final decoder hidden states [T x decoder_width], before the output head.
    Tensor<Scalar> hidden(std::span<const TokenId> prompt, std::span<const TokenId> input,
                          const ForwardContext& ctx, AttentionTrace* trace = nullptr) const;
    Tensor<Scalar> hidden_from(const EncoderOutput<Scalar>* encoded, std::span<const TokenId> input,
                               const ForwardContext& ctx, AttentionTrace* trace = nullptr) const;

    Tensor<Scalar> forward(std::span<const TokenId> prompt, std::span<const TokenId> input,
                           const ForwardContext& ctx) const override;

    DecodeState<Scalar> start(std::span<const TokenId> prompt) const;
    /// Hidden row [1 x decoder_width] for `next`, advancing the state.
    Tensor<Scalar> step_hidden(DecodeState<Scalar>& state, TokenId next) const;
    Eigen::VectorXd step(DecodeState<Scalar>& state, TokenId next) const;
    std::unique_ptr<DecodeSession> begin(std::span<const TokenId> prompt) const override;

    ParameterList<Scalar> parameters() const override;

    const ConvEncoder<Scalar>& encoder() const { return encoder_; }
    const Embedding<Scalar>& embedding() const { return embedding_; }
    const Linear<Scalar>& input_projection() const { return in_proj_; }
    const std::vector<DecoderLayer<Scalar>>& layers() const { return layers_; }
    const OutputProjection<Scalar>& head() const { return head_; }

private:
    void check_prompt(std::span<const TokenId> prompt) const;

    ModelSpec spec_;
    bool with_head_ = true;
    ConvEncoder<Scalar> encoder_;
    Embedding<Scalar> embedding_;
    Linear<Scalar> in_proj_;
    std::vector<DecoderLayer<Scalar>> layers_;
    OutputProjection<Scalar> head_;
};

/// Σ_t log p(story[t] | story[<t], prompt) in nats. The decoder input is the
/// story shifted right behind begin_of_sequence.
template <typename Scalar>
double score_sequence(const SequenceModel<Scalar>& model, std::span<const TokenId> prompt,
                      std::span<const TokenId> story);

/// Per-token log-probabilities of `story` (same convention as score_sequence).
template <typename Scalar>
std::vector<double> token_log_probs(const SequenceModel<Scalar>& model, std::span<const TokenId> prompt,
                                    std::span<const TokenId> story);

/// log of the weighted mean of the members' softmax distributions.
/// Weights are normalized; empty weights mean equal weighting.
Eigen::VectorXd ensemble_logits(const std::vector<Eigen::VectorXd>& member_logits, std::vector<double> weights = {});

/// Probability-space average of several models sharing one vocabulary.
/// Inference only: forward() records no gradients.
template <typename Scalar>
class Ensemble : public SequenceModel<Scalar> {
public:
    Ensemble(std::vector<const SequenceModel<Scalar>*> members, std::vector<double> weights = {});

    std::size_t vocab_size() const override { return members_.front()->vocab_size(); }
    std::size_t max_positions() const override;
    Tensor<Scalar> forward(std::span<const TokenId> prompt, std::span<const TokenId> input,
                           const ForwardContext& ctx) const override;
    std::unique_ptr<DecodeSession> begin(std::span<const TokenId> prompt) const override;
    ParameterList<Scalar> parameters() const override { return {}; }

private:
    std::vector<const SequenceModel<Scalar>*> members_;
    std::vector<double> weights_;
};

}  // namespace storygen
