#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "storygen/data.hpp"
#include "storygen/seq2seq.hpp"
#include "storygen/train.hpp"

namespace storygen {

/// Total log-likelihood of a story given a prompt; larger is better.
using PairScorer = std::function<double(std::span<const TokenId> prompt, std::span<const TokenId> story)>;

PairScorer model_scorer(const SequenceModel<float>& model);

inline constexpr std::size_t kRankingCandidates = 10;

struct RankingResult {
    std::vector<std::size_t> ranks;  // 1 = true prompt strictly best
    double accuracy = 0.0;
};

/// Scores each of the first n_stories examples under its own prompt and 9
/// distinct distractor prompts drawn with Rng(seed, story index). A tie with
/// any distractor ranks the true prompt below it.
RankingResult prompt_ranking(const PairScorer& scorer, const std::vector<Example>& pairs, std::uint64_t seed,
                             std::size_t n_stories = 1000, std::size_t workers = 1);

/// The 9 distractor prompt indices prompt_ranking uses for story `index`.
std::vector<std::size_t> ranking_distractors(const std::vector<Example>& pairs, std::size_t index, std::uint64_t seed);

inline constexpr std::size_t kRetrievedStoryTokens = 150;

/// TF-IDF over prompt terms with idf = ln(N / (1 + df)) + 1 and
/// L2-normalized raw-count vectors.
class TfidfIndex {
public:
    TfidfIndex() = default;
    TfidfIndex(const std::vector<Tokens>& prompts, const std::vector<Tokens>& stories);

    std::size_t size() const { return prompts_.size(); }
    bool empty() const { return prompts_.empty(); }
    const std::vector<std::string>& terms() const { return terms_; }
    double idf(const std::string& term) const;  // 0 for unseen terms
    const Tokens& prompt(std::size_t i) const { return prompts_.at(i); }
    const Tokens& story(std::size_t i) const { return stories_.at(i); }

    /// Unit-norm tf-idf vector of `query` over the index terms (empty when
    /// no term is known).
    std::vector<std::pair<std::size_t, double>> vectorize(const Tokens& query) const;
    double similarity(const Tokens& query, std::size_t document) const;
    /// Dot product of a vectorize() result with a stored document vector.
    double dot(const std::vector<std::pair<std::size_t, double>>& query, std::size_t document) const;

    /// Binary file: "storygen-tfidf 1" header, term/prompt/story lines, then
    /// the dense [documents x terms] little-endian float32 matrix.
    void save(const std::string& path) const;
    static TfidfIndex load(const std::string& path);

private:
    std::vector<std::string> terms_;
    std::unordered_map<std::string, std::size_t> term_index_;
    std::vector<double> idf_;
    std::vector<Tokens> prompts_;
    std::vector<Tokens> stories_;
    std::vector<std::vector<std::pair<std::size_t, float>>> vectors_;  // sparse rows, unit norm
};

struct Retrieved {
    std::size_t document = 0;
    double similarity = 0.0;
    Tokens prompt;
    Tokens story;  // at most 150 tokens
};

/// Top k documents by cosine similarity, ties in corpus order.
std::vector<Retrieved> knn_retrieve(const TfidfIndex& index, const Tokens& query, std::size_t k);

/// Mean similarity at each rank 1..k over the queries.
std::vector<double> knn_curve(const TfidfIndex& index, const std::vector<Tokens>& queries, std::size_t k);

/// Longest contiguous run shared by a story and any corpus story, answered
/// with a suffix automaton over the whole corpus.
class CopyIndex {
public:
    explicit CopyIndex(const std::vector<Ids>& corpus);

    std::size_t longest_run(std::span<const TokenId> story) const;
    bool empty() const { return empty_; }

private:
    struct State {
        std::size_t length = 0;
        long link = -1;
        std::map<TokenId, std::size_t> next;
    };
    void extend(TokenId token);

    std::vector<State> states_;
    std::size_t last_ = 0;
    bool empty_ = true;
};

std::size_t copy_overlap(std::span<const TokenId> story, const CopyIndex& index);
std::size_t copy_overlap(std::span<const TokenId> story, const std::vector<Ids>& corpus);

/// Longest common (not necessarily contiguous) subsequence against each
/// corpus story, quadratic time.
std::size_t copy_overlap_subsequence(std::span<const TokenId> story, const std::vector<Ids>& corpus);

struct CopyStats {
    double mean_overlap = 0.0;
    double mean_length = 0.0;
    std::size_t stories = 0;
};

CopyStats copy_stats(const std::vector<Ids>& stories, const CopyIndex& index);

struct PairingStory {
    std::string model;
    std::string prompt;
    std::string story;
};

struct PairingTriple {
    std::string model;
    std::array<std::string, 3> prompts;
    std::array<std::string, 3> stories;
    std::array<std::size_t, 3> answer;  // answer[s] = prompt index of story s
};

struct PairingExport {
    std::vector<PairingTriple> triples;
    std::string task;  // shown to judges
    std::string key;   // hidden answers
};

/// Takes the first n_per_model stories of each model (n divisible by 3),
/// groups them into seeded-random triples and shuffles the stories inside
/// each triple.
PairingExport pairing_task_export(const std::vector<PairingStory>& stories, std::size_t n_per_model, std::uint64_t seed);

/// Reads a task file and its key back into triples.
std::vector<PairingTriple> parse_pairing_task(std::string_view task, std::string_view key);

/// Named blocks of key = value lines.
///   [perplexity]
///   valid = 12.5
class EvalReport {
public:
    void set(const std::string& block, const std::string& key, const std::string& value);
    void set(const std::string& block, const std::string& key, double value);
    void set_list(const std::string& block, const std::string& key, const std::vector<double>& values);

    bool has(const std::string& block, const std::string& key) const;
    const std::string& get(const std::string& block, const std::string& key) const;
    double number(const std::string& block, const std::string& key) const;
    std::vector<double> list(const std::string& block, const std::string& key) const;

    bool empty() const { return blocks_.empty(); }
    std::size_t blocks() const { return blocks_.size(); }

    std::string to_text() const;
    static EvalReport parse(std::string_view text);

    bool operator==(const EvalReport&) const = default;

private:
    std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> blocks_;
};

}  // namespace storygen
