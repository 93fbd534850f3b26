#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "storygen/ops.hpp"
#include "storygen/special_tokens.hpp"

namespace storygen {

using Tokens = std::vector<std::string>;
using Ids = std::vector<TokenId>;

/// Whitespace split; leading/trailing punctuation detached one character at a
/// time; contractions split (can't -> ca n't, it's -> it 's); line breaks
/// become <newline>. Tokens of the form <...> pass through untouched.
Tokens tokenize(std::string_view text);

/// Joins tokens with spaces, rendering <newline> as a line break.
std::string detokenize(std::span<const std::string> tokens);

struct StoryPair {
    Tokens prompt;
    Tokens story;
    bool operator==(const StoryPair&) const = default;
};

struct CleanConfig {
    std::size_t min_story_tokens = 30;
    std::size_t max_story_tokens = 1000;
    /// A story equal to, or beginning with, any of these is dropped.
    std::vector<std::string> story_markers{"[deleted]", "[removed]", "[ deleted ]", "[ removed ]"};
    /// A prompt beginning with any of these (case-insensitive) is dropped.
    std::vector<std::string> moderator_prefixes{"[ MP ]", "[ OT ]", "[ META ]", "[ MOD ]", "[MP]", "[OT]", "[META]",
                                                "[MOD]"};
};

/// Drops marker, moderator and short stories; truncates long ones.
std::vector<StoryPair> clean(const std::vector<StoryPair>& pairs, const CleanConfig& config = {});

class Vocabulary {
public:
    /// Specials only.
    Vocabulary();
    explicit Vocabulary(const std::vector<std::string>& regular_tokens);

    std::size_t size() const { return tokens_.size(); }
    TokenId id(const std::string& token) const;  // unknown when absent
    const std::string& token(TokenId id) const;
    bool contains(const std::string& token) const { return index_.count(token) != 0; }
    const std::vector<std::string>& tokens() const { return tokens_; }

    /// One token per line, the five specials first.
    std::string to_text() const;
    static Vocabulary parse(std::string_view text, const std::string& origin = "vocab");
    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

    /// FNV-1a 64 of to_text().
    std::uint64_t hash() const;

    bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

/// Tokens occurring strictly more than `min_count` times, by descending
/// count with ties in first-appearance order.
Vocabulary build_vocab(const std::vector<Tokens>& documents, std::size_t min_count = 10);

Ids encode(std::span<const std::string> tokens, const Vocabulary& vocab);
Tokens decode(std::span<const TokenId> ids, const Vocabulary& vocab);

/// Story ids followed by end_of_document.
Ids encode_story(std::span<const std::string> tokens, const Vocabulary& vocab);
/// Prompt ids followed by end_of_prompt (prompt language model target).
Ids encode_prompt_lm(std::span<const std::string> tokens, const Vocabulary& vocab);

/// Padded row-major batch. mask is 1 on real tokens.
struct Batch {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Ids tokens;
    std::vector<std::uint8_t> mask;
    std::vector<std::size_t> lengths;
    std::vector<std::size_t> examples;  // indices into the source list
};

/// Groups sequences in `order` (identity when empty) so that rows * longest
/// stays within max_tokens; an oversized sequence gets a batch of its own.
std::vector<Batch> make_batches(const std::vector<Ids>& sequences, std::size_t max_tokens,
                                std::span<const std::size_t> order = {});

struct SplitStats {
    std::string split;
    std::size_t pairs = 0;
    std::size_t prompt_tokens = 0;
    std::size_t story_tokens = 0;
    double mean_prompt_length() const { return pairs ? double(prompt_tokens) / pairs : 0.0; }
    double mean_story_length() const { return pairs ? double(story_tokens) / pairs : 0.0; }
};

SplitStats corpus_stats(const std::vector<StoryPair>& pairs, const std::string& split = "");
std::string format_stats(const std::vector<SplitStats>& splits);

/// <dir>/<split>.source and <dir>/<split>.target, one example per line,
/// tokens space-separated.
std::vector<StoryPair> read_split(const std::string& dir, const std::string& split);
void write_split(const std::string& dir, const std::string& split, const std::vector<StoryPair>& pairs);

/// Untokenized variant: each line is raw text passed through tokenize().
std::vector<StoryPair> read_raw_split(const std::string& dir, const std::string& split);

struct SynthConfig {
    std::size_t n_keys = 10;
    std::size_t words_per_key = 20;
    std::size_t train_per_key = 200;
    std::size_t valid_per_key = 10;
    std::size_t test_per_key = 20;
    std::size_t story_length = 40;
    std::size_t featured_words = 2;
    double featured_probability = 0.5;
    std::uint64_t seed = 1;
};

struct SynthCorpus {
    std::vector<StoryPair> train;
    std::vector<StoryPair> valid;
    std::vector<StoryPair> test;
};

/// Keyed corpus: each prompt names its key token ("key3") and a few featured
/// words; each story draws from that key's private word list ("k3w0",
/// "k3w1", ...), favouring the featured words, with a "." every few words.
SynthCorpus synthesize_keyed_corpus(const SynthConfig& config);

/// Key index of a synthetic token ("key3" or "k3w7" -> 3), or -1.
int synthetic_key_of(const std::string& token);

}  // namespace storygen
