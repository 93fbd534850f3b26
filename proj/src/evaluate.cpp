#include "storygen/evaluate.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "storygen/config.hpp"

namespace storygen {

namespace {

constexpr std::uint64_t kPairingGroupStream = 0x67726f7570ULL;
constexpr std::uint64_t kPairingOrderStream = 0x6f72646572ULL;

std::string join(const Tokens& tokens)
{
    std::string out;
    for (const auto& t : tokens) {
        if (!out.empty()) out += ' ';
        out += t;
    }
    return out;
}

Tokens split_spaces(const std::string& text)
{
    Tokens out;
    std::istringstream in(text);
    for (std::string t; in >> t;) out.push_back(t);
    return out;
}

std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

/// Index of the first example carrying each distinct prompt, in corpus order,
/// plus a map from every example to its distinct-prompt slot.
struct PromptPool {
    std::vector<std::size_t> representatives;
    std::vector<std::size_t> slot;
};

PromptPool prompt_pool(const std::vector<Example>& pairs)
{
    PromptPool pool;
    std::map<Ids, std::size_t> seen;
    pool.slot.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        auto [it, inserted] = seen.emplace(pairs[i].prompt, pool.representatives.size());
        if (inserted) pool.representatives.push_back(i);
        pool.slot.push_back(it->second);
    }
    return pool;
}

std::vector<std::size_t> draw_distractors(const PromptPool& pool, std::size_t index, std::uint64_t seed)
{
    std::vector<std::size_t> others;
    others.reserve(pool.representatives.size());
    for (std::size_t s = 0; s < pool.representatives.size(); ++s) {
        if (s != pool.slot[index]) others.push_back(pool.representatives[s]);
    }
    Rng rng(seed, index);
    const std::size_t need = kRankingCandidates - 1;
    for (std::size_t i = 0; i < need; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(others.size() - i));
        std::swap(others[i], others[j]);
    }
    others.resize(need);
    return others;
}

template <typename Fn>
void parallel_for(std::size_t count, std::size_t workers, Fn&& fn)
{
    workers = std::max<std::size_t>(1, std::min(workers, count));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < count; i += workers) fn(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
}

void write_f32_le(std::ostream& out, float value)
{
    auto bits = std::bit_cast<std::uint32_t>(value);
    char bytes[4];
    for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
    out.write(bytes, 4);
}

float read_f32_le(const unsigned char* bytes)
{
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
    return std::bit_cast<float>(bits);
}

std::string one_line(const std::string& text)
{
    std::string out;
    for (char c : text) {
        if (c == '\n') out += " <newline> ";
        else if (c != '\r') out += c;
    }
    return trim(out);
}

}  // namespace

PairScorer model_scorer(const SequenceModel<float>& model)
{
    return [&model](std::span<const TokenId> prompt, std::span<const TokenId> story) {
        return score_sequence(model, prompt, story);
    };
}

std::vector<std::size_t> ranking_distractors(const std::vector<Example>& pairs, std::size_t index, std::uint64_t seed)
{
    const auto pool = prompt_pool(pairs);
    if (pool.representatives.size() < kRankingCandidates) {
        throw ConfigError("prompt ranking needs at least 10 distinct prompts, got " +
                          std::to_string(pool.representatives.size()));
    }
    return draw_distractors(pool, index, seed);
}

RankingResult prompt_ranking(const PairScorer& scorer, const std::vector<Example>& pairs, std::uint64_t seed,
                             std::size_t n_stories, std::size_t workers)
{
    const auto pool = prompt_pool(pairs);
    if (pool.representatives.size() < kRankingCandidates) {
        throw ConfigError("prompt ranking needs at least 10 distinct prompts, got " +
                          std::to_string(pool.representatives.size()));
    }
    const std::size_t n = std::min(n_stories, pairs.size());
    RankingResult result;
    result.ranks.assign(n, 0);
    parallel_for(n, workers, [&](std::size_t i) {
        const auto& story = pairs[i].target;
        const double truth = scorer(pairs[i].prompt, story);
        std::size_t rank = 1;
        for (std::size_t d : draw_distractors(pool, i, seed)) {
            if (scorer(pairs[d].prompt, story) >= truth) ++rank;
        }
        result.ranks[i] = rank;
    });
    const auto hits = std::count(result.ranks.begin(), result.ranks.end(), std::size_t{1});
    result.accuracy = n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
    return result;
}

TfidfIndex::TfidfIndex(const std::vector<Tokens>& prompts, const std::vector<Tokens>& stories)
    : prompts_(prompts), stories_(stories)
{
    if (prompts.size() != stories.size()) {
        throw ShapeError("tf-idf index needs one story per prompt, got " + std::to_string(prompts.size()) +
                         " prompts and " + std::to_string(stories.size()) + " stories");
    }
    std::vector<std::size_t> df;
    for (const auto& p : prompts) {
        std::vector<std::size_t> present;
        for (const auto& term : p) {
            auto [it, inserted] = term_index_.emplace(term, terms_.size());
            if (inserted) {
                terms_.push_back(term);
                df.push_back(0);
            }
            present.push_back(it->second);
        }
        std::sort(present.begin(), present.end());
        present.erase(std::unique(present.begin(), present.end()), present.end());
        for (auto t : present) ++df[t];
    }
    const double n = static_cast<double>(prompts.size());
    idf_.resize(terms_.size());
    for (std::size_t t = 0; t < terms_.size(); ++t) idf_[t] = std::log(n / (1.0 + static_cast<double>(df[t]))) + 1.0;

    vectors_.reserve(prompts.size());
    for (const auto& p : prompts) {
        std::vector<std::pair<std::size_t, float>> row;
        for (const auto& [t, w] : vectorize(p)) row.emplace_back(t, static_cast<float>(w));
        vectors_.push_back(std::move(row));
    }
}

double TfidfIndex::idf(const std::string& term) const
{
    const auto it = term_index_.find(term);
    return it == term_index_.end() ? 0.0 : idf_[it->second];
}

std::vector<std::pair<std::size_t, double>> TfidfIndex::vectorize(const Tokens& query) const
{
    std::map<std::size_t, double> counts;
    for (const auto& term : query) {
        if (auto it = term_index_.find(term); it != term_index_.end()) counts[it->second] += 1.0;
    }
    std::vector<std::pair<std::size_t, double>> out;
    double norm = 0.0;
    for (const auto& [t, tf] : counts) {
        const double w = tf * idf_[t];
        out.emplace_back(t, w);
        norm += w * w;
    }
    norm = std::sqrt(norm);
    if (norm > 0.0) {
        for (auto& [t, w] : out) w /= norm;
    } else {
        out.clear();
    }
    return out;
}

double TfidfIndex::similarity(const Tokens& query, std::size_t document) const
{
    return dot(vectorize(query), document);
}

double TfidfIndex::dot(const std::vector<std::pair<std::size_t, double>>& q, std::size_t document) const
{
    const auto& d = vectors_.at(document);
    double total = 0.0;
    std::size_t i = 0;
    std::size_t j = 0;
    while (i < q.size() && j < d.size()) {
        if (q[i].first < d[j].first) {
            ++i;
        } else if (d[j].first < q[i].first) {
            ++j;
        } else {
            total += q[i].second * static_cast<double>(d[j].second);
            ++i;
            ++j;
        }
    }
    return total;
}

void TfidfIndex::save(const std::string& path) const
{
    const auto tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write tf-idf index " + path);
        out << "storygen-tfidf 1\n" << "documents " << prompts_.size() << "\nterms " << terms_.size() << '\n';
        for (const auto& t : terms_) out << t << '\n';
        for (std::size_t t = 0; t < terms_.size(); ++t) out << format_double(idf_[t]) << '\n';
        for (const auto& p : prompts_) out << join(p) << '\n';
        for (const auto& s : stories_) out << join(s) << '\n';
        out << "vectors\n";
        for (const auto& row : vectors_) {
            std::vector<float> dense(terms_.size(), 0.0f);
            for (const auto& [t, w] : row) dense[t] = w;
            for (float w : dense) write_f32_le(out, w);
        }
        if (!out) throw DataError("failed writing tf-idf index " + path);
    }
    std::filesystem::rename(tmp, path);
}

TfidfIndex TfidfIndex::load(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open tf-idf index " + path);
    const auto fail = [&](const std::string& what) { return DataError("tf-idf index " + path + ": " + what); };

    std::string line;
    if (!std::getline(in, line) || line != "storygen-tfidf 1") throw fail("bad header");
    std::string word;
    std::size_t documents = 0;
    std::size_t terms = 0;
    if (!(in >> word >> documents) || word != "documents") throw fail("missing document count");
    if (!(in >> word >> terms) || word != "terms") throw fail("missing term count");
    std::getline(in, line);

    TfidfIndex index;
    const auto next_line = [&] {
        if (!std::getline(in, line)) throw fail("truncated");
        return line;
    };
    for (std::size_t t = 0; t < terms; ++t) {
        index.term_index_.emplace(next_line(), t);
        index.terms_.push_back(line);
    }
    for (std::size_t t = 0; t < terms; ++t) index.idf_.push_back(parse_double(next_line(), "idf"));
    for (std::size_t d = 0; d < documents; ++d) index.prompts_.push_back(split_spaces(next_line()));
    for (std::size_t d = 0; d < documents; ++d) index.stories_.push_back(split_spaces(next_line()));
    if (next_line() != "vectors") throw fail("missing vector block");

    std::vector<unsigned char> row(4 * terms);
    for (std::size_t d = 0; d < documents; ++d) {
        if (terms && !in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()))) {
            throw fail("truncated vectors");
        }
        std::vector<std::pair<std::size_t, float>> sparse;
        for (std::size_t t = 0; t < terms; ++t) {
            const float w = read_f32_le(row.data() + 4 * t);
            if (w != 0.0f) sparse.emplace_back(t, w);
        }
        index.vectors_.push_back(std::move(sparse));
    }
    if (in.peek() != std::char_traits<char>::eof()) throw fail("trailing bytes");
    return index;
}

std::vector<Retrieved> knn_retrieve(const TfidfIndex& index, const Tokens& query, std::size_t k)
{
    if (index.empty()) throw UsageError("knn retrieval on an empty index");
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(index.size());
    const auto q = index.vectorize(query);
    for (std::size_t d = 0; d < index.size(); ++d) scored.emplace_back(index.dot(q, d), d);
    const std::size_t keep = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    std::vector<Retrieved> out;
    out.reserve(keep);
    for (std::size_t r = 0; r < keep; ++r) {
        const auto d = scored[r].second;
        const auto& story = index.story(d);
        out.push_back({d, scored[r].first, index.prompt(d),
                       Tokens(story.begin(), story.begin() + static_cast<std::ptrdiff_t>(
                                                                 std::min(story.size(), kRetrievedStoryTokens)))});
    }
    return out;
}

std::vector<double> knn_curve(const TfidfIndex& index, const std::vector<Tokens>& queries, std::size_t k)
{
    std::vector<double> curve(std::min(k, index.size()), 0.0);
    if (queries.empty()) return curve;
    for (const auto& q : queries) {
        const auto hits = knn_retrieve(index, q, k);
        for (std::size_t r = 0; r < hits.size(); ++r) curve[r] += hits[r].similarity;
    }
    for (auto& c : curve) c /= static_cast<double>(queries.size());
    return curve;
}

CopyIndex::CopyIndex(const std::vector<Ids>& corpus)
{
    states_.emplace_back();
    for (const auto& story : corpus) {
        if (story.empty()) continue;
        if (!empty_) extend(-1);  // separator; no query contains it
        for (TokenId t : story) extend(t);
        empty_ = false;
    }
}

void CopyIndex::extend(TokenId token)
{
    const std::size_t cur = states_.size();
    states_.push_back({states_[last_].length + 1, -1, {}});
    long p = static_cast<long>(last_);
    while (p != -1 && !states_[static_cast<std::size_t>(p)].next.count(token)) {
        states_[static_cast<std::size_t>(p)].next[token] = cur;
        p = states_[static_cast<std::size_t>(p)].link;
    }
    if (p == -1) {
        states_[cur].link = 0;
    } else {
        const std::size_t q = states_[static_cast<std::size_t>(p)].next[token];
        if (states_[static_cast<std::size_t>(p)].length + 1 == states_[q].length) {
            states_[cur].link = static_cast<long>(q);
        } else {
            const std::size_t clone = states_.size();
            State copy = states_[q];
            copy.length = states_[static_cast<std::size_t>(p)].length + 1;
            states_.push_back(std::move(copy));
            while (p != -1) {
                auto& next = states_[static_cast<std::size_t>(p)].next;
                auto it = next.find(token);
                if (it == next.end() || it->second != q) break;
                it->second = clone;
                p = states_[static_cast<std::size_t>(p)].link;
            }
            states_[q].link = static_cast<long>(clone);
            states_[cur].link = static_cast<long>(clone);
        }
    }
    last_ = cur;
}

std::size_t CopyIndex::longest_run(std::span<const TokenId> story) const
{
    std::size_t state = 0;
    std::size_t length = 0;
    std::size_t best = 0;
    for (TokenId t : story) {
        while (state != 0 && !states_[state].next.count(t)) {
            state = static_cast<std::size_t>(states_[state].link);
            length = states_[state].length;
        }
        if (auto it = states_[state].next.find(t); it != states_[state].next.end()) {
            state = it->second;
            ++length;
        } else {
            length = 0;
        }
        best = std::max(best, length);
    }
    return best;
}

std::size_t copy_overlap(std::span<const TokenId> story, const CopyIndex& index) { return index.longest_run(story); }

std::size_t copy_overlap(std::span<const TokenId> story, const std::vector<Ids>& corpus)
{
    return CopyIndex(corpus).longest_run(story);
}

std::size_t copy_overlap_subsequence(std::span<const TokenId> story, const std::vector<Ids>& corpus)
{
    std::size_t best = 0;
    std::vector<std::size_t> prev(story.size() + 1), cur(story.size() + 1);
    for (const auto& doc : corpus) {
        std::fill(prev.begin(), prev.end(), 0);
        for (TokenId d : doc) {
            cur[0] = 0;
            for (std::size_t i = 1; i <= story.size(); ++i) {
                cur[i] = story[i - 1] == d ? prev[i - 1] + 1 : std::max(prev[i], cur[i - 1]);
            }
            std::swap(prev, cur);
        }
        best = std::max(best, prev[story.size()]);
    }
    return best;
}

CopyStats copy_stats(const std::vector<Ids>& stories, const CopyIndex& index)
{
    CopyStats stats;
    stats.stories = stories.size();
    if (stories.empty()) return stats;
    double overlap = 0.0;
    double length = 0.0;
    for (const auto& s : stories) {
        overlap += static_cast<double>(index.longest_run(s));
        length += static_cast<double>(s.size());
    }
    stats.mean_overlap = overlap / static_cast<double>(stories.size());
    stats.mean_length = length / static_cast<double>(stories.size());
    return stats;
}

PairingExport pairing_task_export(const std::vector<PairingStory>& stories, std::size_t n_per_model, std::uint64_t seed)
{
    if (n_per_model == 0 || n_per_model % 3 != 0) {
        throw ConfigError("pairing export needs a positive multiple of 3 stories per model, got " +
                          std::to_string(n_per_model));
    }
    std::vector<std::string> models;
    std::map<std::string, std::vector<std::size_t>> by_model;
    for (std::size_t i = 0; i < stories.size(); ++i) {
        auto& list = by_model[stories[i].model];
        if (list.empty()) models.push_back(stories[i].model);
        if (list.size() < n_per_model) list.push_back(i);
    }

    PairingExport out;
    for (std::size_t m = 0; m < models.size(); ++m) {
        auto picked = by_model[models[m]];
        if (picked.size() < n_per_model) {
            throw DataError("model " + models[m] + " has " + std::to_string(picked.size()) + " stories, need " +
                            std::to_string(n_per_model));
        }
        Rng rng(Rng::mix(seed, kPairingGroupStream), m);
        shuffle(picked, rng);
        for (std::size_t g = 0; g < picked.size(); g += 3) {
            PairingTriple triple;
            triple.model = models[m];
            std::array<std::size_t, 3> order{0, 1, 2};
            shuffle(order, rng);
            for (std::size_t j = 0; j < 3; ++j) {
                triple.prompts[j] = one_line(stories[picked[g + j]].prompt);
                triple.stories[j] = one_line(stories[picked[g + order[j]]].story);
                triple.answer[j] = order[j];
            }
            out.triples.push_back(std::move(triple));
        }
    }
    Rng order_rng(seed, kPairingOrderStream);
    shuffle(out.triples, order_rng);

    std::ostringstream task;
    std::ostringstream key;
    key << "triple\tmodel\tstory_a\tstory_b\tstory_c\n";
    static constexpr char kLetters[] = {'A', 'B', 'C'};
    for (std::size_t i = 0; i < out.triples.size(); ++i) {
        const auto& t = out.triples[i];
        if (i) task << '\n';
        task << "triple " << i + 1 << '\n';
        for (std::size_t j = 0; j < 3; ++j) task << "prompt " << j + 1 << ": " << t.prompts[j] << '\n';
        for (std::size_t j = 0; j < 3; ++j) task << "story " << kLetters[j] << ": " << t.stories[j] << '\n';
        key << i + 1 << '\t' << t.model;
        for (std::size_t j = 0; j < 3; ++j) key << '\t' << t.answer[j] + 1;
        key << '\n';
    }
    out.task = task.str();
    out.key = key.str();
    return out;
}

std::vector<PairingTriple> parse_pairing_task(std::string_view task, std::string_view key)
{
    std::vector<PairingTriple> triples;
    std::istringstream tin{std::string(task)};
    std::size_t line_no = 0;
    const auto fail = [&](const std::string& what) {
        return DataError("pairing task line " + std::to_string(line_no) + ": " + what);
    };
    for (std::string line; std::getline(tin, line);) {
        ++line_no;
        if (line.empty()) continue;
        if (line.rfind("triple ", 0) == 0) {
            triples.emplace_back();
            continue;
        }
        if (triples.empty()) throw fail("text before the first triple");
        const auto colon = line.find(": ");
        if (colon == std::string::npos) throw fail("expected 'label: text'");
        const std::string label = line.substr(0, colon);
        const std::string text = line.substr(colon + 2);
        if (label.size() == 8 && label.rfind("prompt ", 0) == 0 && label[7] >= '1' && label[7] <= '3') {
            triples.back().prompts[static_cast<std::size_t>(label[7] - '1')] = text;
        } else if (label.size() == 7 && label.rfind("story ", 0) == 0 && label[6] >= 'A' && label[6] <= 'C') {
            triples.back().stories[static_cast<std::size_t>(label[6] - 'A')] = text;
        } else {
            throw fail("unknown label '" + label + "'");
        }
    }

    std::istringstream kin{std::string(key)};
    std::string line;
    std::getline(kin, line);
    std::size_t rows = 0;
    while (std::getline(kin, line)) {
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::size_t number = 0;
        std::string model;
        std::array<std::size_t, 3> answer{};
        if (!(fields >> number) || !std::getline(fields >> std::ws, model, '\t')) {
            throw DataError("pairing key: malformed row '" + line + "'");
        }
        for (auto& a : answer) {
            if (!(fields >> a) || a < 1 || a > 3) throw DataError("pairing key: bad answer in row '" + line + "'");
            --a;
        }
        if (number < 1 || number > triples.size()) throw DataError("pairing key: unknown triple " + std::to_string(number));
        triples[number - 1].model = model;
        triples[number - 1].answer = answer;
        ++rows;
    }
    if (rows != triples.size()) {
        throw DataError("pairing key covers " + std::to_string(rows) + " of " + std::to_string(triples.size()) +
                        " triples");
    }
    return triples;
}

void EvalReport::set(const std::string& block, const std::string& key, const std::string& value)
{
    if (block.empty() || key.empty() || block.find_first_of("[]\n") != std::string::npos ||
        key.find_first_of("=\n# ") != std::string::npos || value.find('\n') != std::string::npos) {
        throw UsageError("report entry " + block + "." + key + " is not representable");
    }
    auto it = std::find_if(blocks_.begin(), blocks_.end(), [&](const auto& b) { return b.first == block; });
    if (it == blocks_.end()) {
        blocks_.push_back({block, {}});
        it = std::prev(blocks_.end());
    }
    auto& entries = it->second;
    auto e = std::find_if(entries.begin(), entries.end(), [&](const auto& kv) { return kv.first == key; });
    if (e == entries.end()) entries.emplace_back(key, value);
    else e->second = value;
}

void EvalReport::set(const std::string& block, const std::string& key, double value)
{
    set(block, key, format_double(value));
}

void EvalReport::set_list(const std::string& block, const std::string& key, const std::vector<double>& values)
{
    std::string text;
    for (double v : values) {
        if (!text.empty()) text += ' ';
        text += format_double(v);
    }
    set(block, key, text);
}

bool EvalReport::has(const std::string& block, const std::string& key) const
{
    for (const auto& [name, entries] : blocks_) {
        if (name != block) continue;
        for (const auto& kv : entries)
            if (kv.first == key) return true;
    }
    return false;
}

const std::string& EvalReport::get(const std::string& block, const std::string& key) const
{
    for (const auto& [name, entries] : blocks_) {
        if (name != block) continue;
        for (const auto& kv : entries)
            if (kv.first == key) return kv.second;
    }
    throw DataError("report has no entry " + block + "." + key);
}

double EvalReport::number(const std::string& block, const std::string& key) const
{
    return parse_double(get(block, key), block + "." + key);
}

std::vector<double> EvalReport::list(const std::string& block, const std::string& key) const
{
    std::vector<double> out;
    for (const auto& item : split_spaces(get(block, key))) out.push_back(parse_double(item, block + "." + key));
    return out;
}

std::string EvalReport::to_text() const
{
    std::string out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        if (b) out += '\n';
        out += '[' + blocks_[b].first + "]\n";
        for (const auto& [k, v] : blocks_[b].second) out += k + " = " + v + '\n';
    }
    return out;
}

EvalReport EvalReport::parse(std::string_view text)
{
    EvalReport report;
    std::istringstream in{std::string(text)};
    std::string block;
    std::size_t line_no = 0;
    for (std::string raw; std::getline(in, raw);) {
        ++line_no;
        const auto line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3) {
                throw DataError("report line " + std::to_string(line_no) + ": bad block header");
            }
            block = line.substr(1, line.size() - 2);
            continue;
        }
        const auto eq = line.find('=');
        if (block.empty() || eq == std::string::npos) {
            throw DataError("report line " + std::to_string(line_no) + ": expected 'key = value' inside a block");
        }
        report.set(block, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return report;
}

}  // namespace storygen
