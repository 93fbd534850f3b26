#include "storygen/data.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "storygen/checkpoint.hpp"
#include "storygen/errors.hpp"
#include "storygen/random.hpp"

namespace storygen {

namespace {

bool is_punct(char c)
{
    return static_cast<unsigned char>(c) < 0x80 && std::ispunct(static_cast<unsigned char>(c));
}

char lower(char c)
{
    return static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
}

bool ends_with_ci(std::string_view s, std::string_view suffix)
{
    if (s.size() < suffix.size()) return false;
    for (std::size_t i = 0; i < suffix.size(); ++i) {
        if (lower(s[s.size() - suffix.size() + i]) != suffix[i]) return false;
    }
    return true;
}

bool starts_with_ci(std::string_view s, std::string_view prefix)
{
    if (s.size() < prefix.size()) return false;
    for (std::size_t i = 0; i < prefix.size(); ++i) {
        if (lower(s[i]) != lower(prefix[i])) return false;
    }
    return true;
}

bool is_tag(std::string_view s)
{
    return s.size() > 2 && s.front() == '<' && s.back() == '>' && s.find_first_of("<>", 1) == s.size() - 1;
}

constexpr std::string_view clitics[] = {"'s", "'re", "'ve", "'ll", "'d", "'m"};

bool is_clitic(std::string_view s)
{
    for (auto c : clitics) {
        if (s.size() == c.size() && ends_with_ci(s, c)) return true;
    }
    return s.size() == 3 && ends_with_ci(s, "n't");
}

void split_contraction(std::string_view word, Tokens& out)
{
    if (word.size() > 3 && ends_with_ci(word, "n't")) {
        out.emplace_back(word.substr(0, word.size() - 3));
        out.emplace_back(word.substr(word.size() - 3));
        return;
    }
    for (auto clitic : clitics) {
        if (word.size() > clitic.size() && ends_with_ci(word, clitic)) {
            out.emplace_back(word.substr(0, word.size() - clitic.size()));
            out.emplace_back(word.substr(word.size() - clitic.size()));
            return;
        }
    }
    out.emplace_back(word);
}

void split_chunk(std::string_view chunk, Tokens& out)
{
    if (is_tag(chunk) || is_clitic(chunk)) {
        out.emplace_back(chunk);
        return;
    }
    std::size_t begin = 0, end = chunk.size();
    while (begin < end && is_punct(chunk[begin])) out.emplace_back(1, chunk[begin++]);
    std::vector<char> trailing;
    while (end > begin && is_punct(chunk[end - 1])) trailing.push_back(chunk[--end]);
    if (end > begin) split_contraction(chunk.substr(begin, end - begin), out);
    for (auto it = trailing.rbegin(); it != trailing.rend(); ++it) out.emplace_back(1, *it);
}

}  // namespace

Tokens tokenize(std::string_view text)
{
    Tokens out;
    std::size_t i = 0;
    while (i < text.size()) {
        const char c = text[i];
        if (c == '\n') {
            out.emplace_back(special::surface[special::newline]);
            ++i;
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        split_chunk(text.substr(i, j - i), out);
        i = j;
    }
    return out;
}

std::string detokenize(std::span<const std::string> tokens)
{
    std::string out;
    bool line_start = true;
    for (const auto& t : tokens) {
        if (t == special::surface[special::newline]) {
            out += '\n';
            line_start = true;
            continue;
        }
        if (!line_start) out += ' ';
        out += t;
        line_start = false;
    }
    return out;
}

std::vector<StoryPair> clean(const std::vector<StoryPair>& pairs, const CleanConfig& config)
{
    std::vector<StoryPair> out;
    for (const auto& pair : pairs) {
        if (pair.story.size() < config.min_story_tokens) continue;
        const std::string story_text = detokenize(pair.story);
        const std::string prompt_text = detokenize(pair.prompt);
        bool drop = false;
        for (const auto& marker : config.story_markers) {
            if (!marker.empty() && story_text.rfind(marker, 0) == 0) drop = true;
        }
        for (const auto& prefix : config.moderator_prefixes) {
            if (!prefix.empty() && starts_with_ci(prompt_text, prefix)) drop = true;
        }
        if (drop) continue;
        StoryPair kept = pair;
        if (kept.story.size() > config.max_story_tokens) kept.story.resize(config.max_story_tokens);
        out.push_back(std::move(kept));
    }
    return out;
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& regular_tokens)
{
    for (auto s : special::surface) tokens_.emplace_back(s);
    tokens_.insert(tokens_.end(), regular_tokens.begin(), regular_tokens.end());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
            throw DataError("vocabulary lists '" + tokens_[i] + "' twice");
        }
        if (tokens_[i].empty() || tokens_[i].find_first_of(" \t\n\r") != std::string::npos) {
            throw DataError("vocabulary token " + std::to_string(i) + " is empty or contains whitespace");
        }
    }
}

TokenId Vocabulary::id(const std::string& token) const
{
    auto it = index_.find(token);
    return it == index_.end() ? special::unknown : it->second;
}

const std::string& Vocabulary::token(TokenId id) const
{
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw BoundsError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::to_text() const
{
    std::string out;
    for (const auto& t : tokens_) out += t + "\n";
    return out;
}

Vocabulary Vocabulary::parse(std::string_view text, const std::string& origin)
{
    std::vector<std::string> lines;
    std::istringstream in{std::string(text)};
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    if (lines.size() < special::count) throw DataError(origin + ": missing the special-token header");
    for (std::size_t i = 0; i < special::count; ++i) {
        if (lines[i] != special::surface[i]) {
            throw DataError(origin + ":" + std::to_string(i + 1) + ": expected '" + std::string(special::surface[i]) +
                            "', found '" + lines[i] + "'");
        }
    }
    return Vocabulary(std::vector<std::string>(lines.begin() + special::count, lines.end()));
}

void Vocabulary::save(const std::string& path) const
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write vocabulary " + path);
    out << to_text();
}

Vocabulary Vocabulary::load(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open vocabulary " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path);
}

std::uint64_t Vocabulary::hash() const
{
    return fnv1a64(to_text());
}

Vocabulary build_vocab(const std::vector<Tokens>& documents, std::size_t min_count)
{
    struct Entry {
        std::size_t count = 0;
        std::size_t first = 0;
    };
    std::unordered_map<std::string, Entry> counts;
    std::vector<std::string> order;
    std::unordered_map<std::string, bool> is_special;
    for (auto s : special::surface) is_special[std::string(s)] = true;
    for (const auto& doc : documents) {
        for (const auto& t : doc) {
            if (is_special.count(t)) continue;
            auto [it, fresh] = counts.try_emplace(t, Entry{0, order.size()});
            if (fresh) order.push_back(t);
            ++it->second.count;
        }
    }
    std::vector<std::string> kept;
    for (const auto& t : order) {
        if (counts[t].count > min_count) kept.push_back(t);
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [&](const std::string& a, const std::string& b) { return counts[a].count > counts[b].count; });
    return Vocabulary(kept);
}

Ids encode(std::span<const std::string> tokens, const Vocabulary& vocab)
{
    Ids ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(vocab.id(t));
    return ids;
}

Tokens decode(std::span<const TokenId> ids, const Vocabulary& vocab)
{
    Tokens out;
    out.reserve(ids.size());
    for (TokenId id : ids) out.push_back(vocab.token(id));
    return out;
}

Ids encode_story(std::span<const std::string> tokens, const Vocabulary& vocab)
{
    auto ids = encode(tokens, vocab);
    ids.push_back(special::end_of_document);
    return ids;
}

Ids encode_prompt_lm(std::span<const std::string> tokens, const Vocabulary& vocab)
{
    auto ids = encode(tokens, vocab);
    ids.push_back(special::end_of_prompt);
    return ids;
}

std::vector<Batch> make_batches(const std::vector<Ids>& sequences, std::size_t max_tokens,
                                std::span<const std::size_t> order)
{
    if (max_tokens == 0) throw ConfigError("batch size in tokens must be >= 1");
    std::vector<std::size_t> identity;
    if (order.empty()) {
        identity.resize(sequences.size());
        for (std::size_t i = 0; i < identity.size(); ++i) identity[i] = i;
        order = identity;
    }
    std::vector<Batch> batches;
    std::vector<std::size_t> current;
    std::size_t longest = 0;
    auto flush = [&] {
        if (current.empty()) return;
        Batch b;
        b.rows = current.size();
        b.cols = longest;
        b.tokens.assign(b.rows * b.cols, special::pad);
        b.mask.assign(b.rows * b.cols, 0);
        for (std::size_t r = 0; r < b.rows; ++r) {
            const auto& seq = sequences[current[r]];
            std::copy(seq.begin(), seq.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(r * b.cols));
            std::fill_n(b.mask.begin() + static_cast<std::ptrdiff_t>(r * b.cols), seq.size(), 1);
            b.lengths.push_back(seq.size());
        }
        b.examples = current;
        batches.push_back(std::move(b));
        current.clear();
        longest = 0;
    };
    for (std::size_t idx : order) {
        if (idx >= sequences.size()) throw BoundsError("batch order index out of range");
        const std::size_t len = sequences[idx].size();
        const std::size_t widened = std::max(longest, len);
        if (!current.empty() && widened * (current.size() + 1) > max_tokens) flush();
        current.push_back(idx);
        longest = std::max(longest, len);
    }
    flush();
    return batches;
}

SplitStats corpus_stats(const std::vector<StoryPair>& pairs, const std::string& split)
{
    SplitStats s;
    s.split = split;
    s.pairs = pairs.size();
    for (const auto& p : pairs) {
        s.prompt_tokens += p.prompt.size();
        s.story_tokens += p.story.size();
    }
    return s;
}

std::string format_stats(const std::vector<SplitStats>& splits)
{
    std::ostringstream out;
    out << std::fixed << std::setprecision(1);
    out << std::left << std::setw(8) << "split" << std::right << std::setw(10) << "pairs" << std::setw(16)
        << "prompt_tokens" << std::setw(16) << "story_tokens" << std::setw(14) << "mean_prompt" << std::setw(14)
        << "mean_story" << '\n';
    SplitStats total;
    total.split = "total";
    for (const auto& s : splits) {
        out << std::left << std::setw(8) << s.split << std::right << std::setw(10) << s.pairs << std::setw(16)
            << s.prompt_tokens << std::setw(16) << s.story_tokens << std::setw(14) << s.mean_prompt_length()
            << std::setw(14) << s.mean_story_length() << '\n';
        total.pairs += s.pairs;
        total.prompt_tokens += s.prompt_tokens;
        total.story_tokens += s.story_tokens;
    }
    out << std::left << std::setw(8) << total.split << std::right << std::setw(10) << total.pairs << std::setw(16)
        << total.prompt_tokens << std::setw(16) << total.story_tokens << std::setw(14) << total.mean_prompt_length()
        << std::setw(14) << total.mean_story_length() << '\n';
    return out.str();
}

namespace {

std::vector<std::string> read_lines(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(std::move(line));
    }
    return lines;
}

Tokens split_spaces(const std::string& line)
{
    Tokens out;
    std::istringstream in(line);
    for (std::string t; in >> t;) out.push_back(std::move(t));
    return out;
}

template <typename Fn>
std::vector<StoryPair> read_pairs(const std::string& dir, const std::string& split, Fn&& to_tokens)
{
    const auto base = (std::filesystem::path(dir) / split).string();
    const auto sources = read_lines(base + ".source");
    const auto targets = read_lines(base + ".target");
    if (sources.size() != targets.size()) {
        throw DataError(base + ".source has " + std::to_string(sources.size()) + " lines but " + base + ".target has " +
                        std::to_string(targets.size()));
    }
    std::vector<StoryPair> pairs(sources.size());
    for (std::size_t i = 0; i < sources.size(); ++i) {
        pairs[i].prompt = to_tokens(sources[i]);
        pairs[i].story = to_tokens(targets[i]);
    }
    return pairs;
}

}  // namespace

std::vector<StoryPair> read_split(const std::string& dir, const std::string& split)
{
    return read_pairs(dir, split, split_spaces);
}

std::vector<StoryPair> read_raw_split(const std::string& dir, const std::string& split)
{
    return read_pairs(dir, split, [](const std::string& line) { return tokenize(line); });
}

void write_split(const std::string& dir, const std::string& split, const std::vector<StoryPair>& pairs)
{
    std::filesystem::create_directories(dir);
    const auto base = (std::filesystem::path(dir) / split).string();
    std::ofstream src(base + ".source", std::ios::binary | std::ios::trunc);
    std::ofstream tgt(base + ".target", std::ios::binary | std::ios::trunc);
    if (!src || !tgt) throw DataError("cannot write corpus files under " + base);
    auto join = [](const Tokens& tokens) {
        std::string line;
        for (const auto& t : tokens) {
            if (!line.empty()) line += ' ';
            line += t;
        }
        return line;
    };
    for (const auto& p : pairs) {
        src << join(p.prompt) << '\n';
        tgt << join(p.story) << '\n';
    }
}

SynthCorpus synthesize_keyed_corpus(const SynthConfig& config)
{
    if (config.n_keys == 0 || config.words_per_key == 0) throw ConfigError("synth needs keys and words per key");
    if (config.featured_words > config.words_per_key) throw ConfigError("synth: more featured words than words per key");
    Rng rng(config.seed);
    auto word = [](std::size_t key, std::size_t i) { return "k" + std::to_string(key) + "w" + std::to_string(i); };
    auto make_pair = [&](std::size_t key) {
        StoryPair p;
        p.prompt = {"story", "about", "key" + std::to_string(key)};
        std::vector<std::size_t> featured;
        while (featured.size() < config.featured_words) {
            const std::size_t w = rng.below(config.words_per_key);
            if (std::find(featured.begin(), featured.end(), w) == featured.end()) featured.push_back(w);
        }
        for (std::size_t w : featured) p.prompt.push_back(word(key, w));
        for (std::size_t i = 0; i < config.story_length; ++i) {
            if ((i + 1) % 8 == 0) {
                p.story.emplace_back(".");
            } else if (!featured.empty() && rng.uniform() < config.featured_probability) {
                p.story.push_back(word(key, featured[rng.below(featured.size())]));
            } else {
                p.story.push_back(word(key, rng.below(config.words_per_key)));
            }
        }
        return p;
    };
    auto make_split = [&](std::size_t per_key) {
        std::vector<StoryPair> out;
        for (std::size_t i = 0; i < per_key; ++i)
            for (std::size_t key = 0; key < config.n_keys; ++key) out.push_back(make_pair(key));
        return out;
    };
    SynthCorpus corpus;
    corpus.train = make_split(config.train_per_key);
    corpus.valid = make_split(config.valid_per_key);
    corpus.test = make_split(config.test_per_key);
    return corpus;
}

int synthetic_key_of(const std::string& token)
{
    auto digits = [](std::string_view s) {
        return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
    };
    std::string_view t = token;
    if (t.rfind("key", 0) == 0 && digits(t.substr(3))) return std::stoi(std::string(t.substr(3)));
    if (t.size() > 1 && t[0] == 'k') {
        const auto w = t.find('w');
        if (w != std::string_view::npos && digits(t.substr(1, w - 1)) && digits(t.substr(w + 1))) {
            return std::stoi(std::string(t.substr(1, w - 1)));
        }
    }
    return -1;
}

}  // namespace storygen
