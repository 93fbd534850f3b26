#include "storygen/generate.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "storygen/config.hpp"

namespace storygen {

namespace {

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

Sample sample_until(const SequenceModel<float>& model, std::span<const TokenId> prompt, const SamplerConfig& cfg,
                    Rng& rng, std::vector<TokenId> stops)
{
    cfg.validate();
    stops.insert(stops.end(), cfg.stop_ids.begin(), cfg.stop_ids.end());
    const std::size_t limit = std::min(cfg.max_tokens, model.max_positions());
    auto session = model.begin(prompt);
    Sample out;
    TokenId previous = special::begin_of_sequence;
    while (out.tokens.size() < limit) {
        const auto logits = session->step(previous);
        const bool hold = out.tokens.size() < cfg.min_tokens;
        const TokenId id = top_k_sample(logits, cfg, rng, hold ? std::span<const TokenId>(stops) : std::span<const TokenId>());
        if (std::find(stops.begin(), stops.end(), id) != stops.end()) return out;
        out.tokens.push_back(id);
        previous = id;
    }
    out.truncated = true;
    return out;
}

}  // namespace

void SamplerConfig::validate() const
{
    if (k == 0) throw ConfigError("sampler k must be >= 1");
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("sampler temperature must be > 0");
    if (max_tokens == 0) throw ConfigError("sampler max_tokens must be >= 1");
}

std::vector<std::pair<TokenId, double>> top_k_distribution(const Eigen::VectorXd& logits, const SamplerConfig& cfg,
                                                           std::span<const TokenId> extra_banned)
{
    cfg.validate();
    std::vector<TokenId> allowed;
    allowed.reserve(static_cast<std::size_t>(logits.size()));
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        if (!std::isfinite(logits[i])) throw NumericError("non-finite logit at id " + std::to_string(i));
        const auto id = static_cast<TokenId>(i);
        if (cfg.banned.count(id)) continue;
        if (std::find(extra_banned.begin(), extra_banned.end(), id) != extra_banned.end()) continue;
        allowed.push_back(id);
    }
    if (allowed.empty()) throw ConfigError("every token is banned; nothing to sample");

    const std::size_t keep = std::min(cfg.k, allowed.size());
    std::partial_sort(allowed.begin(), allowed.begin() + static_cast<std::ptrdiff_t>(keep), allowed.end(),
                      [&](TokenId a, TokenId b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
    allowed.resize(keep);

    const double top = logits[allowed.front()] / cfg.temperature;
    std::vector<std::pair<TokenId, double>> dist;
    dist.reserve(keep);
    double z = 0.0;
    for (TokenId id : allowed) {
        const double w = std::exp(logits[id] / cfg.temperature - top);
        dist.emplace_back(id, w);
        z += w;
    }
    for (auto& [id, p] : dist) p /= z;
    return dist;
}

TokenId top_k_sample(const Eigen::VectorXd& logits, const SamplerConfig& cfg, Rng& rng,
                     std::span<const TokenId> extra_banned)
{
    const auto dist = top_k_distribution(logits, cfg, extra_banned);
    const double u = rng.uniform();
    double cumulative = 0.0;
    for (const auto& [id, p] : dist) {
        cumulative += p;
        if (u < cumulative) return id;
    }
    return dist.back().first;
}

Sample generate_prompt(const SequenceModel<float>& lm, const SamplerConfig& cfg, Rng& rng)
{
    return sample_until(lm, {}, cfg, rng, {special::end_of_prompt});
}

Sample generate_story(std::span<const TokenId> prompt, const SequenceModel<float>& model, const SamplerConfig& cfg,
                      Rng& rng)
{
    if (prompt.empty()) throw UsageError("story generation needs a nonempty prompt");
    return sample_until(model, prompt, cfg, rng, {special::end_of_document});
}

Rng stage_rng(std::uint64_t seed, Stage stage) { return Rng(seed, static_cast<std::uint64_t>(stage)); }

PromptBridge vocabulary_bridge(const Vocabulary& from, const Vocabulary& to)
{
    return [&from, &to](std::span<const TokenId> ids) { return encode(decode(ids, from), to); };
}

StorySample hierarchical_generate(const SequenceModel<float>& lm, const SequenceModel<float>& story_model,
                                  const SamplerConfig& cfg, const PromptBridge& bridge)
{
    SamplerConfig prompt_cfg = cfg;
    prompt_cfg.min_tokens = std::max<std::size_t>(cfg.min_tokens, 1);
    auto prompt_rng = stage_rng(cfg.seed, Stage::prompt);
    const auto prompt = generate_prompt(lm, prompt_cfg, prompt_rng);

    StorySample out;
    out.seed = cfg.seed;
    out.prompt = bridge ? bridge(prompt.tokens) : prompt.tokens;
    out.prompt_truncated = prompt.truncated;
    auto story_rng = stage_rng(cfg.seed, Stage::story);
    const auto story = generate_story(out.prompt, story_model, cfg, story_rng);
    out.story = story.tokens;
    out.story_truncated = story.truncated;
    return out;
}

std::uint64_t job_seed(std::uint64_t seed, std::size_t index) { return Rng::mix(seed, index); }

std::vector<StorySample> run_jobs(std::size_t count, std::size_t workers,
                                  const std::function<StorySample(std::size_t)>& job)
{
    std::vector<StorySample> results(count);
    workers = std::max<std::size_t>(1, std::min(workers, count));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) results[i] = job(i);
        return results;
    }
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < count; i += workers) results[i] = job(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
    return results;
}

std::string format_text_blocks(const std::vector<StorySample>& samples, const Vocabulary& prompt_vocab,
                               const Vocabulary& story_vocab)
{
    std::string out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (i) out += "---\n";
        out += detokenize(decode(samples[i].prompt, prompt_vocab)) + "\n---\n";
        out += detokenize(decode(samples[i].story, story_vocab)) + "\n";
    }
    return out;
}

std::string format_records(const std::vector<StorySample>& samples, const Vocabulary& prompt_vocab,
                           const Vocabulary& story_vocab)
{
    std::string out;
    for (const auto& s : samples) {
        out += std::to_string(s.seed) + '\t' + join(decode(s.prompt, prompt_vocab)) + '\t' +
               join(decode(s.story, story_vocab)) + '\n';
    }
    return out;
}

std::vector<StorySample> parse_records(std::string_view text, const Vocabulary& prompt_vocab,
                                       const Vocabulary& story_vocab)
{
    std::vector<StorySample> out;
    std::istringstream in{std::string(text)};
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (line.empty()) continue;
        const auto a = line.find('\t');
        const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
        if (b == std::string::npos) throw DataError("record line " + std::to_string(line_no) + " needs three fields");
        StorySample s;
        s.seed = parse_u64(line.substr(0, a), "seed");
        s.prompt = encode(split_spaces(line.substr(a + 1, b - a - 1)), prompt_vocab);
        s.story = encode(split_spaces(line.substr(b + 1)), story_vocab);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace storygen
