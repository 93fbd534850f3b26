#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "storygen/data.hpp"
#include "storygen/random.hpp"
#include "storygen/seq2seq.hpp"

namespace storygen {

struct SamplerConfig {
    std::size_t k = 10;
    double temperature = 0.8;
    std::size_t max_tokens = 150;
    std::set<TokenId> banned{special::unknown};
    std::set<TokenId> stop_ids;
    std::uint64_t seed = 1;
    std::size_t min_tokens = 0;  // stop tokens are banned until this many tokens exist

    void validate() const;
};

/// Renormalized top-k distribution: ids in descending probability (lower id
/// first on ties) with their probabilities. `extra_banned` joins cfg.banned.
std::vector<std::pair<TokenId, double>> top_k_distribution(const Eigen::VectorXd& logits, const SamplerConfig& cfg,
                                                           std::span<const TokenId> extra_banned = {});

/// One draw from top_k_distribution using a single uniform from `rng`.
TokenId top_k_sample(const Eigen::VectorXd& logits, const SamplerConfig& cfg, Rng& rng,
                     std::span<const TokenId> extra_banned = {});

struct Sample {
    Ids tokens;              // stop token stripped
    bool truncated = false;  // length cap reached before a stop token
};

/// Samples from a prompt language model until end_of_prompt (or a stop id).
Sample generate_prompt(const SequenceModel<float>& lm, const SamplerConfig& cfg, Rng& rng);

/// Samples a story for `prompt` until end_of_document (or a stop id); at most
/// cfg.max_tokens tokens. An empty prompt is a UsageError.
Sample generate_story(std::span<const TokenId> prompt, const SequenceModel<float>& model, const SamplerConfig& cfg,
                      Rng& rng);

enum class Stage : std::uint64_t { prompt = 0x70726f6d7074ULL, story = 0x73746f7279ULL };

/// Generator for one stage of a hierarchical run with the given seed.
Rng stage_rng(std::uint64_t seed, Stage stage);

struct StorySample {
    std::uint64_t seed = 0;
    Ids prompt;  // in the story model's prompt vocabulary
    Ids story;
    bool prompt_truncated = false;
    bool story_truncated = false;
};

/// Maps prompt-LM ids to story-model prompt ids (identity when empty).
using PromptBridge = std::function<Ids(std::span<const TokenId>)>;

PromptBridge vocabulary_bridge(const Vocabulary& from, const Vocabulary& to);

/// Prompt from `lm` (at least one token), then a story from `story_model`.
/// Stage generators come from stage_rng(cfg.seed, ...).
StorySample hierarchical_generate(const SequenceModel<float>& lm, const SequenceModel<float>& story_model,
                                  const SamplerConfig& cfg, const PromptBridge& bridge = {});

/// Seed of the i-th job in a batch run with base seed `seed`.
std::uint64_t job_seed(std::uint64_t seed, std::size_t index);

/// Runs `count` jobs on up to `workers` threads; results keep job order.
std::vector<StorySample> run_jobs(std::size_t count, std::size_t workers,
                                  const std::function<StorySample(std::size_t)>& job);

/// Prompt and story blocks separated by "---" lines, newlines rendered.
std::string format_text_blocks(const std::vector<StorySample>& samples, const Vocabulary& prompt_vocab,
                               const Vocabulary& story_vocab);

/// One "seed<TAB>prompt<TAB>story" line per sample, tokens space-separated.
std::string format_records(const std::vector<StorySample>& samples, const Vocabulary& prompt_vocab,
                           const Vocabulary& story_vocab);

/// Parses format_records output.
std::vector<StorySample> parse_records(std::string_view text, const Vocabulary& prompt_vocab,
                                       const Vocabulary& story_vocab);

}  // namespace storygen
