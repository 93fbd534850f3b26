#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "storygen/checkpoint.hpp"
#include "storygen/seq2seq.hpp"

namespace storygen {

struct FusionSpec {
    ModelSpec trainable;  // decoder of this model supplies h_train
    std::size_t post_layers = 2;
};

/// Gate over the concatenated hidden states followed by GLU dense layers,
/// each layer-normalized, and the vocabulary projection.
///   c = [h_train; h_pre], g = sigmoid(W c + b), h = g * c
template <typename Scalar>
struct FusionHead {
    Linear<Scalar> gate;                 // cat -> cat
    std::vector<Linear<Scalar>> post;    // cat -> 2*cat, ..., cat -> 2*out_embed
    std::vector<Tensor<Scalar>> gains;
    std::vector<Tensor<Scalar>> biases;
    Linear<Scalar> output;               // out_embed -> vocab

    FusionHead() = default;
    FusionHead(std::size_t train_width, std::size_t pre_width, std::size_t out_embed_dim, std::size_t vocab_size,
               std::size_t post_layers, Rng& rng);

    std::size_t train_width = 0;
    std::size_t pre_width = 0;

    /// g * c, before the post layers. `gates` receives g when given.
    Tensor<Scalar> gated(const Tensor<Scalar>& h_train, const Tensor<Scalar>& h_pre, Eigen::MatrixXd* gates = nullptr) const;

    /// Fused hidden state after the post layers. `gates` receives g when given.
    Tensor<Scalar> fuse(const Tensor<Scalar>& h_train, const Tensor<Scalar>& h_pre, Eigen::MatrixXd* gates = nullptr) const;
    Tensor<Scalar> operator()(const Tensor<Scalar>& h_train, const Tensor<Scalar>& h_pre,
                              Eigen::MatrixXd* gates = nullptr) const
    {
        return output(fuse(h_train, h_pre, gates));
    }

    void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

/// Trainable seq2seq fused with a frozen pretrained one. Only the trainable
/// decoder and the fusion head receive gradients.
template <typename Scalar>
class FusionModel : public SequenceModel<Scalar> {
public:
    FusionModel(std::shared_ptr<ConvSeq2Seq<Scalar>> pretrained, FusionSpec spec);

    const FusionSpec& spec() const { return spec_; }
    const ConvSeq2Seq<Scalar>& pretrained() const { return *pretrained_; }
    const ConvSeq2Seq<Scalar>& trainable() const { return trainable_; }
    const FusionHead<Scalar>& head() const { return head_; }

    std::size_t vocab_size() const override { return pretrained_->vocab_size(); }
    std::size_t max_positions() const override;

    Tensor<Scalar> forward(std::span<const TokenId> prompt, std::span<const TokenId> input,
                           const ForwardContext& ctx) const override;
    Tensor<Scalar> forward(std::span<const TokenId> prompt, std::span<const TokenId> input, const ForwardContext& ctx,
                           Eigen::MatrixXd* gates) const;

    std::unique_ptr<DecodeSession> begin(std::span<const TokenId> prompt) const override;
    ParameterList<Scalar> parameters() const override;

    /// Per story position: mean gate over the trainable half and over the
    /// pretrained half, for the decoder input built from `story`.
    std::vector<std::pair<double, double>> gate_trace(std::span<const TokenId> prompt,
                                                      std::span<const TokenId> story) const;

private:
    std::shared_ptr<ConvSeq2Seq<Scalar>> pretrained_;
    FusionSpec spec_;
    ConvSeq2Seq<Scalar> trainable_;
    FusionHead<Scalar> head_;
};

/// Two tab-separated columns with a header: trainable, pretrained.
std::string format_gate_trace(const std::vector<std::pair<double, double>>& trace);

/// Fusion checkpoints carry the trainable spec, the post-layer count, and the
/// pretrained checkpoint's path and FNV-1a hash.
void store_fusion(Checkpoint& checkpoint, const FusionModel<float>& model, const std::string& pretrained_path);

/// Loads the pretrained model from the recorded path (or `pretrained_override`)
/// and refuses it if its hash differs from the recorded one.
std::unique_ptr<FusionModel<float>> load_fusion(const Checkpoint& checkpoint, const std::string& pretrained_override = "");

bool is_fusion_checkpoint(const Checkpoint& checkpoint);

struct LoadedModel {
    Checkpoint checkpoint;
    std::unique_ptr<SequenceModel<float>> model;
    ModelMode mode = ModelMode::seq2seq;  // fusion models count as seq2seq
};

/// Plain or fusion model, whichever the checkpoint holds.
LoadedModel load_sequence_model(const std::string& path);

}  // namespace storygen
