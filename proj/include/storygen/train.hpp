#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "storygen/checkpoint.hpp"
#include "storygen/data.hpp"
#include "storygen/seq2seq.hpp"

namespace storygen {

/// Mean negative log-likelihood (nats) over positions with mask == 1.
template <typename Scalar>
Tensor<Scalar> cross_entropy_loss(const Tensor<Scalar>& logits, std::span<const TokenId> targets,
                                  std::span<const std::uint8_t> mask)
{
    return cross_entropy(logits, targets, mask, Reduction::mean);
}

struct OptimizerConfig {
    double learning_rate = 0.25;
    double momentum = 0.99;
    double weight_decay = 0.0;
    double clip_norm = 0.1;  // 0 disables clipping

    void validate() const;
};

/// Nesterov momentum with global-norm clipping.
///   g += decay * p; if |g| > clip: g *= clip / |g|
///   v = mu v - lr g; p += mu v - lr g
template <typename Scalar>
class NesterovOptimizer {
public:
    struct StepReport {
        double grad_norm = 0.0;  // after decay, before clipping
        double scale = 1.0;      // clipping factor applied to g
    };

    NesterovOptimizer(ParameterList<Scalar> params, OptimizerConfig config);

    const OptimizerConfig& config() const { return config_; }
    double learning_rate() const { return config_.learning_rate; }
    void set_learning_rate(double lr) { config_.learning_rate = lr; }

    /// Parameters without a gradient take g = 0. Non-finite gradients raise
    /// NumericError naming the parameter; nothing is updated in that case.
    StepReport step();
    void zero_grad();

    const ParameterList<Scalar>& parameters() const { return params_; }
    const std::vector<std::vector<Scalar>>& velocity() const { return velocity_; }

    /// Velocity buffers as "<prefix><parameter name>" tensors.
    void store(Checkpoint& checkpoint, const std::string& prefix = "optim.") const;
    void restore(const Checkpoint& checkpoint, const std::string& prefix = "optim.");

private:
    ParameterList<Scalar> params_;
    OptimizerConfig config_;
    std::vector<std::vector<Scalar>> velocity_;
};

/// Global L2 norm of the gradients currently held by `params`.
template <typename Scalar>
double gradient_norm(const ParameterList<Scalar>& params);

/// One training sequence. The decoder input is begin_of_sequence followed
/// by target[0..n-2].
struct Example {
    Ids prompt;
    Ids target;
};

Ids decoder_input(std::span<const TokenId> target);

/// lm: target = prompt + end_of_prompt, no conditioning.
/// seq2seq/fusion: prompt ids -> story ids + end_of_document.
std::vector<Example> make_examples(const std::vector<StoryPair>& pairs, ModelMode mode, const Vocabulary& prompt_vocab,
                                   const Vocabulary& story_vocab);

struct NllTotal {
    double nll = 0.0;
    std::size_t tokens = 0;

    double mean() const { return tokens ? nll / static_cast<double>(tokens) : 0.0; }
};

NllTotal corpus_nll(const SequenceModel<float>& model, const std::vector<Example>& examples);

/// exp(mean per-token NLL), padding excluded.
double perplexity(const SequenceModel<float>& model, const std::vector<Example>& examples);

struct TrainConfig {
    std::size_t batch_tokens = 4000;
    std::size_t max_updates = 1000;
    std::size_t valid_interval = 100;
    std::uint64_t seed = 1;
    double plateau_factor = 0.1;
    double min_learning_rate = 1e-5;
    double stop_below_valid_loss = 0.0;  // stop once validation loss falls below; 0 never stops
    std::string checkpoint_dir;  // empty: no files
    std::string log_path;        // empty: no metric log

    void validate() const;
};

struct MetricRecord {
    std::size_t step = 0;
    std::string split;
    double loss = 0.0;
    double perplexity = 0.0;
    double learning_rate = 0.0;
    double wall_time = 0.0;
};

/// "step\tsplit\tloss\tperplexity\tlr\twall_time" with a header line.
std::string format_metric_header();
std::string format_metric(const MetricRecord& record);

struct TrainResult {
    std::size_t steps = 0;
    double learning_rate = 0.0;
    double best_valid_loss = 0.0;  // infinity when never validated
    std::vector<double> step_losses;
    std::vector<MetricRecord> records;
};

/// Writes the model's own description (spec and parameters) into a checkpoint.
using ModelWriter = std::function<void(Checkpoint&)>;

/// Token-budget batching over a per-epoch seeded shuffle, Nesterov updates,
/// validation every valid_interval updates with learning-rate shrink on
/// plateau. Checkpoints go to <dir>/last.ckpt and <dir>/best.ckpt and carry
/// the optimizer velocity and loop position; `resume` continues such a run.
class Trainer {
public:
    Trainer(SequenceModel<float>& model, ModelWriter writer, TrainConfig config, OptimizerConfig optimizer);

    /// Restores optimizer state and loop position from a checkpoint written
    /// by this class. The model parameters must already be loaded.
    void resume(const Checkpoint& checkpoint);

    TrainResult run(const std::vector<Example>& train, const std::vector<Example>& valid = {});

    std::size_t step() const { return step_; }
    const NesterovOptimizer<float>& optimizer() const { return optimizer_; }

    /// Mean loss over one batch without updating anything (train-mode dropout
    /// seeded as for the given update).
    double batch_loss(const std::vector<Example>& examples, const Batch& batch, std::size_t update) const;

private:
    std::vector<Batch> epoch_batches(const std::vector<Example>& train, std::size_t epoch) const;
    Tensor<float> loss_tensor(const std::vector<Example>& examples, const Batch& batch, std::size_t update) const;
    void save(const std::string& name) const;
    void log(const MetricRecord& record);

    SequenceModel<float>& model_;
    ModelWriter writer_;
    TrainConfig config_;
    NesterovOptimizer<float> optimizer_;

    std::size_t step_ = 0;
    std::size_t epoch_ = 0;
    std::size_t batch_in_epoch_ = 0;
    double best_valid_ = 0.0;
    bool has_best_ = false;
    bool resumed_ = false;
};

}  // namespace storygen
