#include "storygen/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace storygen {

namespace {

constexpr std::uint64_t kShuffleStream = 0x73687566666c65ULL;
constexpr std::uint64_t kDropoutStream = 0x64726f706f7574ULL;

}  // namespace

void OptimizerConfig::validate() const
{
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
    if (clip_norm < 0.0) throw ConfigError("clip norm must be >= 0");
}

template <typename Scalar>
double gradient_norm(const ParameterList<Scalar>& params)
{
    double sq = 0.0;
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (Scalar g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(sq);
}

template <typename Scalar>
NesterovOptimizer<Scalar>::NesterovOptimizer(ParameterList<Scalar> params, OptimizerConfig config)
    : params_(std::move(params)), config_(config)
{
    config_.validate();
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), Scalar(0));
}

template <typename Scalar>
typename NesterovOptimizer<Scalar>::StepReport NesterovOptimizer<Scalar>::step()
{
    std::vector<std::vector<double>> grads(params_.size());
    double sq = 0.0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto& t = params_[i].tensor;
        const auto values = t.data();
        auto& g = grads[i];
        g.assign(values.size(), 0.0);
        if (t.has_grad()) {
            const auto raw = t.grad();
            for (std::size_t k = 0; k < g.size(); ++k) g[k] = static_cast<double>(raw[k]);
        }
        for (std::size_t k = 0; k < g.size(); ++k) {
            if (!std::isfinite(g[k])) {
                throw NumericError("non-finite gradient in " + params_[i].name + " at element " + std::to_string(k));
            }
            if (config_.weight_decay != 0.0) g[k] += config_.weight_decay * static_cast<double>(values[k]);
            sq += g[k] * g[k];
        }
    }

    StepReport report;
    report.grad_norm = std::sqrt(sq);
    if (!std::isfinite(report.grad_norm)) throw NumericError("gradient norm overflowed");
    if (config_.clip_norm > 0.0 && report.grad_norm > config_.clip_norm) {
        report.scale = config_.clip_norm / report.grad_norm;
    }

    const double lr = config_.learning_rate;
    const double mu = config_.momentum;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto values = params_[i].tensor.node().data.data();
        auto& v = velocity_[i];
        const auto& g = grads[i];
        for (std::size_t k = 0; k < g.size(); ++k) {
            const double gk = report.scale == 1.0 ? g[k] : g[k] * report.scale;
            const double vk = mu * static_cast<double>(v[k]) - lr * gk;
            v[k] = static_cast<Scalar>(vk);
            values[k] = static_cast<Scalar>(static_cast<double>(values[k]) + mu * vk - lr * gk);
        }
    }
    return report;
}

template <typename Scalar>
void NesterovOptimizer<Scalar>::zero_grad()
{
    for (const auto& p : params_) p.tensor.zero_grad();
}

template <typename Scalar>
void NesterovOptimizer<Scalar>::store(Checkpoint& checkpoint, const std::string& prefix) const
{
    for (std::size_t i = 0; i < params_.size(); ++i) {
        checkpoint.tensors.push_back({prefix + params_[i].name, params_[i].tensor.shape(),
                                      std::vector<float>(velocity_[i].begin(), velocity_[i].end())});
    }
}

template <typename Scalar>
void NesterovOptimizer<Scalar>::restore(const Checkpoint& checkpoint, const std::string& prefix)
{
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto* stored = checkpoint.find(prefix + params_[i].name);
        if (!stored) throw DataError("checkpoint has no optimizer state for " + params_[i].name);
        if (stored->shape != params_[i].tensor.shape()) {
            throw DataError("optimizer state for " + params_[i].name + " has shape " + to_string(stored->shape) +
                            ", expected " + to_string(params_[i].tensor.shape()));
        }
        velocity_[i].assign(stored->data.begin(), stored->data.end());
    }
}

Ids decoder_input(std::span<const TokenId> target)
{
    Ids input;
    if (target.empty()) return input;
    input.reserve(target.size());
    input.push_back(special::begin_of_sequence);
    input.insert(input.end(), target.begin(), target.end() - 1);
    return input;
}

std::vector<Example> make_examples(const std::vector<StoryPair>& pairs, ModelMode mode, const Vocabulary& prompt_vocab,
                                   const Vocabulary& story_vocab)
{
    std::vector<Example> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) {
        if (mode == ModelMode::lm) {
            out.push_back({{}, encode_prompt_lm(p.prompt, story_vocab)});
        } else {
            out.push_back({encode(p.prompt, prompt_vocab), encode_story(p.story, story_vocab)});
        }
    }
    return out;
}

NllTotal corpus_nll(const SequenceModel<float>& model, const std::vector<Example>& examples)
{
    NoGradGuard no_grad;
    NllTotal total;
    for (const auto& ex : examples) {
        if (ex.target.empty()) continue;
        const auto input = decoder_input(ex.target);
        const auto logits = model.forward(ex.prompt, input, {});
        const Eigen::MatrixXd m = logits.mat().template cast<double>();
        for (Eigen::Index t = 0; t < m.rows(); ++t) {
            const auto target = ex.target[static_cast<std::size_t>(t)];
            if (target < 0 || target >= m.cols()) {
                throw BoundsError("target id " + std::to_string(target) + " outside vocabulary of " +
                                  std::to_string(m.cols()));
            }
            const double peak = m.row(t).maxCoeff();
            const double lse = peak + std::log((m.row(t).array() - peak).exp().sum());
            total.nll += lse - m(t, target);
        }
        total.tokens += ex.target.size();
    }
    return total;
}

double perplexity(const SequenceModel<float>& model, const std::vector<Example>& examples)
{
    return std::exp(corpus_nll(model, examples).mean());
}

void TrainConfig::validate() const
{
    if (batch_tokens == 0) throw ConfigError("batch_tokens must be >= 1");
    if (valid_interval == 0) throw ConfigError("valid_interval must be >= 1");
    if (!(plateau_factor > 0.0 && plateau_factor <= 1.0)) throw ConfigError("plateau_factor must be in (0, 1]");
    if (min_learning_rate < 0.0) throw ConfigError("min_learning_rate must be >= 0");
    if (!(stop_below_valid_loss >= 0.0)) throw ConfigError("stop_below_valid_loss must be >= 0");
}

std::string format_metric_header() { return "step\tsplit\tloss\tperplexity\tlr\twall_time\n"; }

std::string format_metric(const MetricRecord& r)
{
    std::ostringstream out;
    out << r.step << '\t' << r.split << '\t' << format_double(r.loss) << '\t' << format_double(r.perplexity) << '\t'
        << format_double(r.learning_rate) << '\t';
    out.setf(std::ios::fixed);
    out.precision(3);
    out << r.wall_time << '\n';
    return out.str();
}

Trainer::Trainer(SequenceModel<float>& model, ModelWriter writer, TrainConfig config, OptimizerConfig optimizer)
    : model_(model), writer_(std::move(writer)), config_(std::move(config)), optimizer_(model.parameters(), optimizer)
{
    config_.validate();
}

void Trainer::resume(const Checkpoint& checkpoint)
{
    const auto& m = checkpoint.manifest;
    if (!m.contains("train.step")) throw DataError("checkpoint carries no training state");
    const auto seed = parse_u64(m.get("train.seed"), "train.seed");
    if (seed != config_.seed) {
        throw ConfigError("resume seed " + std::to_string(config_.seed) + " differs from the checkpoint's " +
                          std::to_string(seed));
    }
    optimizer_.restore(checkpoint);
    optimizer_.set_learning_rate(parse_double(m.get("train.lr"), "train.lr"));
    step_ = parse_size(m.get("train.step"), "train.step");
    epoch_ = parse_size(m.get("train.epoch"), "train.epoch");
    batch_in_epoch_ = parse_size(m.get("train.batch"), "train.batch");
    has_best_ = m.get("train.best_valid") != "none";
    best_valid_ = has_best_ ? parse_double(m.get("train.best_valid"), "train.best_valid") : 0.0;
    resumed_ = true;
}

std::vector<Batch> Trainer::epoch_batches(const std::vector<Example>& train, std::size_t epoch) const
{
    std::vector<Ids> targets;
    targets.reserve(train.size());
    for (const auto& ex : train) targets.push_back(ex.target);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(Rng::mix(config_.seed, kShuffleStream), epoch);
    shuffle(order, rng);
    return make_batches(targets, config_.batch_tokens, order);
}

Tensor<float> Trainer::loss_tensor(const std::vector<Example>& examples, const Batch& batch, std::size_t update) const
{
    Rng rng(Rng::mix(config_.seed, kDropoutStream), update);
    const ForwardContext ctx{true, &rng};
    std::size_t tokens = 0;
    Tensor<float> total;
    bool first = true;
    for (std::size_t idx : batch.examples) {
        const auto& ex = examples[idx];
        if (ex.target.empty()) continue;
        const auto input = decoder_input(ex.target);
        const auto logits = model_.forward(ex.prompt, input, ctx);
        const std::vector<std::uint8_t> mask(ex.target.size(), 1);
        auto nll = cross_entropy(logits, std::span<const TokenId>(ex.target), std::span<const std::uint8_t>(mask),
                                 Reduction::sum);
        total = first ? nll : add(total, nll);
        first = false;
        tokens += ex.target.size();
    }
    if (first) throw DataError("training batch has no target tokens");
    return scale(total, 1.0f / static_cast<float>(tokens));
}

double Trainer::batch_loss(const std::vector<Example>& examples, const Batch& batch, std::size_t update) const
{
    NoGradGuard no_grad;
    return static_cast<double>(loss_tensor(examples, batch, update).item());
}

void Trainer::save(const std::string& name) const
{
    if (config_.checkpoint_dir.empty()) return;
    Checkpoint ck;
    writer_(ck);
    optimizer_.store(ck);
    ck.manifest.set("train.step", std::to_string(step_));
    ck.manifest.set("train.epoch", std::to_string(epoch_));
    ck.manifest.set("train.batch", std::to_string(batch_in_epoch_));
    ck.manifest.set("train.lr", format_double(optimizer_.learning_rate()));
    ck.manifest.set("train.seed", std::to_string(config_.seed));
    ck.manifest.set("train.best_valid", has_best_ ? format_double(best_valid_) : "none");
    std::filesystem::create_directories(config_.checkpoint_dir);
    save_checkpoint((std::filesystem::path(config_.checkpoint_dir) / name).string(), ck);
}

void Trainer::log(const MetricRecord& record)
{
    if (config_.log_path.empty()) return;
    std::ofstream out(config_.log_path, std::ios::app);
    if (!out) throw DataError("cannot append to metric log " + config_.log_path);
    out << format_metric(record);
}

TrainResult Trainer::run(const std::vector<Example>& train, const std::vector<Example>& valid)
{
    if (train.empty()) throw DataError("training set is empty");
    const auto started = std::chrono::steady_clock::now();
    const auto elapsed = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    };

    if (!resumed_) {
        if (!config_.log_path.empty()) {
            if (auto parent = std::filesystem::path(config_.log_path).parent_path(); !parent.empty()) {
                std::filesystem::create_directories(parent);
            }
            std::ofstream out(config_.log_path, std::ios::trunc);
            if (!out) throw DataError("cannot write metric log " + config_.log_path);
            out << format_metric_header();
        }
        save("last.ckpt");
    }

    TrainResult result;
    auto batches = epoch_batches(train, epoch_);
    double interval_nll = 0.0;
    std::size_t interval_tokens = 0;

    while (step_ < config_.max_updates) {
        if (batch_in_epoch_ >= batches.size()) {
            ++epoch_;
            batch_in_epoch_ = 0;
            batches = epoch_batches(train, epoch_);
        }
        const Batch& batch = batches[batch_in_epoch_];

        optimizer_.zero_grad();
        const auto loss = loss_tensor(train, batch, step_);
        const double value = static_cast<double>(loss.item());
        if (!std::isfinite(value)) {
            ComputationRecord<float>::current().clear();
            throw NumericError("training loss became non-finite at update " + std::to_string(step_ + 1));
        }
        backward(loss);
        optimizer_.step();
        ++step_;
        ++batch_in_epoch_;

        std::size_t tokens = 0;
        for (auto len : batch.lengths) tokens += len;
        result.step_losses.push_back(value);
        interval_nll += value * static_cast<double>(tokens);
        interval_tokens += tokens;

        if (step_ % config_.valid_interval != 0 && step_ != config_.max_updates) continue;

        const double train_loss = interval_nll / static_cast<double>(interval_tokens);
        MetricRecord rec{step_, "train", train_loss, std::exp(train_loss), optimizer_.learning_rate(), elapsed()};
        result.records.push_back(rec);
        log(rec);
        interval_nll = 0.0;
        interval_tokens = 0;

        bool reached = false;
        if (!valid.empty()) {
            const double valid_loss = corpus_nll(model_, valid).mean();
            reached = valid_loss < config_.stop_below_valid_loss;
            MetricRecord vrec{step_, "valid", valid_loss, std::exp(valid_loss), optimizer_.learning_rate(), elapsed()};
            result.records.push_back(vrec);
            log(vrec);
            if (!has_best_ || valid_loss < best_valid_) {
                has_best_ = true;
                best_valid_ = valid_loss;
                save("best.ckpt");
            } else {
                optimizer_.set_learning_rate(
                    std::max(config_.min_learning_rate, optimizer_.learning_rate() * config_.plateau_factor));
            }
        }
        save("last.ckpt");
        if (reached) break;
    }

    result.steps = step_;
    result.learning_rate = optimizer_.learning_rate();
    result.best_valid_loss = has_best_ ? best_valid_ : std::numeric_limits<double>::infinity();
    return result;
}

template double gradient_norm(const ParameterList<float>&);
template double gradient_norm(const ParameterList<double>&);
template class NesterovOptimizer<float>;
template class NesterovOptimizer<double>;

}  // namespace storygen
