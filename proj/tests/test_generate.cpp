#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "storygen/errors.hpp"
#include "storygen/generate.hpp"
#include "storygen/train.hpp"

using namespace storygen;

namespace {

/// Emits a fixed token script: step n peaks at script[min(n, size - 1)].
class ScriptedModel : public SequenceModel<float> {
public:
    ScriptedModel(std::size_t vocab, Ids script) : vocab_(vocab), script_(std::move(script)) {}

    std::size_t vocab_size() const override { return vocab_; }
    std::size_t max_positions() const override { return 1024; }
    Tensor<float> forward(std::span<const TokenId>, std::span<const TokenId> input,
                          const ForwardContext&) const override
    {
        return Tensor<float>::zeros({input.size(), vocab_});
    }
    std::unique_ptr<DecodeSession> begin(std::span<const TokenId>) const override
    {
        return std::make_unique<Session>(*this);
    }
    ParameterList<float> parameters() const override { return {}; }

private:
    class Session : public DecodeSession {
    public:
        explicit Session(const ScriptedModel& m) : m_(m) {}
        Eigen::VectorXd step(TokenId) override
        {
            Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m_.vocab_));
            out[m_.script_[std::min(n_, m_.script_.size() - 1)]] = 50.0;
            ++n_;
            return out;
        }
        std::size_t position() const override { return n_; }

    private:
        const ScriptedModel& m_;
        std::size_t n_ = 0;
    };

    std::size_t vocab_;
    Ids script_;
};

ModelSpec tiny(ModelMode mode, std::size_t vocab)
{
    ModelSpec s = preset(mode == ModelMode::lm ? "toy-lm" : "toy-s2s").spec;
    s.prompt_vocab_size = mode == ModelMode::lm ? 0 : vocab;
    s.story_vocab_size = vocab;
    s.embed_dim = 8;
    s.out_embed_dim = 8;
    if (mode == ModelMode::seq2seq) s.encoder_blocks = make_blocks({12}, {3}, 0.0);
    s.decoder_blocks = make_blocks({12, 12}, {3, 3}, 0.0);
    s.self_attention_heads = 2;
    s.dropout = 0.0;
    s.max_positions = 200;
    return s;
}

SamplerConfig config(std::size_t k, double temperature, std::uint64_t seed = 1)
{
    SamplerConfig cfg;
    cfg.k = k;
    cfg.temperature = temperature;
    cfg.seed = seed;
    return cfg;
}

Eigen::VectorXd vec(std::initializer_list<double> xs)
{
    Eigen::VectorXd v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v[i++] = x;
    return v;
}

}  // namespace

TEST(SamplerConfig, Validation)
{
    EXPECT_THROW(config(0, 1.0).validate(), ConfigError);
    EXPECT_THROW(config(1, 0.0).validate(), ConfigError);
    EXPECT_THROW(config(1, -1.0).validate(), ConfigError);
    auto cfg = config(1, 1.0);
    cfg.max_tokens = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_NO_THROW(SamplerConfig{}.validate());
    EXPECT_EQ(SamplerConfig{}.k, 10u);
    EXPECT_EQ(SamplerConfig{}.max_tokens, 150u);
    EXPECT_TRUE(SamplerConfig{}.banned.count(special::unknown));
}

TEST(TopK, KOneIsArgmaxWithLowestIdOnTies)
{
    auto cfg = config(1, 1.0);
    cfg.banned.clear();
    Rng rng(4);
    EXPECT_EQ(top_k_sample(vec({0.0, 3.0, 1.0, 3.0, 2.0}), cfg, rng), 1);
    Rng scores(5);
    for (int i = 0; i < 1000; ++i) {
        Eigen::VectorXd logits(20);
        for (Eigen::Index j = 0; j < 20; ++j) logits[j] = scores.normal();
        Eigen::Index best;
        logits.maxCoeff(&best);
        EXPECT_EQ(top_k_sample(logits, cfg, rng), best);
    }
}

TEST(TopK, BannedTokenNeverSampled)
{
    auto cfg = config(3, 1.0);
    Rng rng(6);
    const auto logits = vec({0.0, 5.0, 1.0, 0.5, 0.2});
    std::size_t unknown = 0;
    for (int i = 0; i < 10000; ++i) unknown += top_k_sample(logits, cfg, rng) == special::unknown;
    EXPECT_EQ(unknown, 0u);
}

TEST(TopK, EmpiricalFrequenciesMatchRenormalizedPair)
{
    auto cfg = config(2, 1.0);
    cfg.banned.clear();
    const auto logits = vec({3.0, 2.0, 1.0, 0.0, -1.0});
    const double p0 = std::exp(1.0) / (std::exp(1.0) + 1.0);
    const double oracle[5] = {p0, 1.0 - p0, 0.0, 0.0, 0.0};
    Rng rng(7);
    std::vector<double> counts(5, 0.0);
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) counts[static_cast<std::size_t>(top_k_sample(logits, cfg, rng))] += 1.0;
    double l1 = 0.0;
    for (int i = 0; i < 5; ++i) l1 += std::abs(counts[i] / draws - oracle[i]);
    EXPECT_LT(l1, 0.02);
}

TEST(TopK, DistributionShape)
{
    auto cfg = config(3, 0.5);
    const auto dist = top_k_distribution(vec({1.0, 4.0, 2.0, 2.0, 0.0, 3.0}), cfg);
    ASSERT_EQ(dist.size(), 3u);
    EXPECT_EQ(dist[0].first, 5);
    EXPECT_EQ(dist[1].first, 2);
    EXPECT_EQ(dist[2].first, 3);
    double total = 0.0;
    for (auto [id, p] : dist) total += p;
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_NEAR(dist[0].second / dist[1].second, std::exp((3.0 - 2.0) / 0.5), 1e-9);

    const std::vector<TokenId> extra{5};
    EXPECT_EQ(top_k_distribution(vec({1.0, 4.0, 2.0, 2.0, 0.0, 3.0}), cfg, extra)[0].first, 2);
}

TEST(TopK, TemperatureFlattens)
{
    auto logits = vec({2.0, 1.0, 0.0, -1.0});
    auto hot = config(4, 5.0);
    auto cold = config(4, 0.2);
    hot.banned.clear();
    cold.banned.clear();
    EXPECT_LT(top_k_distribution(logits, hot)[0].second, top_k_distribution(logits, cold)[0].second);
}

TEST(TopK, AllBannedIsConfigError)
{
    auto cfg = config(2, 1.0);
    cfg.banned = {0, 1, 2};
    Rng rng(1);
    EXPECT_THROW(top_k_sample(vec({1.0, 2.0, 3.0}), cfg, rng), ConfigError);
    EXPECT_THROW(top_k_sample(vec({1.0, std::nan(""), 3.0, 4.0}), config(2, 1.0), rng), NumericError);
}

TEST(TopK, LowTemperatureConvergesToArgmax)
{
    auto cfg = config(10, 1e-4);
    cfg.banned.clear();
    Rng rng(8);
    Rng scores(9);
    for (int i = 0; i < 1000; ++i) {
        Eigen::VectorXd logits(30);
        for (Eigen::Index j = 0; j < 30; ++j) logits[j] = scores.normal();
        Eigen::Index best;
        logits.maxCoeff(&best);
        EXPECT_EQ(top_k_sample(logits, cfg, rng), best);
    }
}

TEST(TopK, SampledIdsStayInSupport)
{
    ConvSeq2Seq<float> model(tiny(ModelMode::seq2seq, 30));
    const Ids prompt{6, 7, 8};
    auto cfg = config(4, 1.3, 21);
    auto rng = Rng(cfg.seed);
    const auto sample = generate_story(prompt, model, cfg, rng);
    ASSERT_FALSE(sample.tokens.empty());

    auto session = model.begin(prompt);
    TokenId previous = special::begin_of_sequence;
    for (TokenId id : sample.tokens) {
        const auto dist = top_k_distribution(session->step(previous), cfg);
        EXPECT_TRUE(std::any_of(dist.begin(), dist.end(), [&](auto& e) { return e.first == id; }));
        previous = id;
    }
}

TEST(GeneratePrompt, ImmediateEndGivesEmptyPrompt)
{
    ScriptedModel lm(8, {special::end_of_prompt});
    Rng rng(1);
    const auto s = generate_prompt(lm, config(1, 1.0), rng);
    EXPECT_TRUE(s.tokens.empty());
    EXPECT_FALSE(s.truncated);

    auto held = config(1, 1.0);
    held.min_tokens = 2;
    Rng again(1);
    const auto forced = generate_prompt(lm, held, again);
    EXPECT_GE(forced.tokens.size(), 2u);
}

TEST(GeneratePrompt, StopsAndTruncates)
{
    ScriptedModel lm(8, {5, 6, special::end_of_prompt});
    Rng rng(1);
    const auto s = generate_prompt(lm, config(1, 1.0), rng);
    EXPECT_EQ(s.tokens, (Ids{5, 6}));
    EXPECT_FALSE(s.truncated);

    ScriptedModel endless(8, {7});
    auto cfg = config(1, 1.0);
    cfg.max_tokens = 12;
    const auto t = generate_prompt(endless, cfg, rng);
    EXPECT_EQ(t.tokens.size(), 12u);
    EXPECT_TRUE(t.truncated);
}

TEST(GeneratePrompt, SeededRunReproduces)
{
    ConvSeq2Seq<float> lm(tiny(ModelMode::lm, 25));
    auto cfg = config(10, 1.0, 3);
    cfg.max_tokens = 40;
    Rng a(3), b(3), c(4);
    const auto first = generate_prompt(lm, cfg, a);
    EXPECT_EQ(first.tokens, generate_prompt(lm, cfg, b).tokens);
    EXPECT_NE(first.tokens, generate_prompt(lm, cfg, c).tokens);
}

TEST(GeneratePrompt, TrainedLmStaysInTrainingVocabulary)
{
    const std::vector<Tokens> prompts{{"a", "b", "c"}, {"b", "d"}, {"e", "a", "f"}, {"c", "c", "g"}, {"g", "h"}};
    Vocabulary vocab(Tokens{"a", "b", "c", "d", "e", "f", "g", "h", "x", "y", "z", "q"});
    std::vector<StoryPair> pairs;
    for (const auto& p : prompts) pairs.push_back({p, {}});
    const auto examples = make_examples(pairs, ModelMode::lm, vocab, vocab);

    ConvSeq2Seq<float> lm(tiny(ModelMode::lm, vocab.size()));
    TrainConfig tc;
    tc.max_updates = 150;
    tc.batch_tokens = 30;
    tc.valid_interval = 150;
    Trainer(lm, [](Checkpoint&) {}, tc, {0.25, 0.9, 0.0, 0.1}).run(examples);

    std::set<TokenId> seen;
    for (const auto& ex : examples) seen.insert(ex.target.begin(), ex.target.end());
    auto cfg = config(10, 0.5);
    cfg.max_tokens = 10;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        for (TokenId id : generate_prompt(lm, cfg, rng).tokens) EXPECT_TRUE(seen.count(id)) << vocab.token(id);
    }
}

TEST(GenerateStory, EmptyPromptIsError)
{
    ScriptedModel model(8, {5});
    Rng rng(1);
    EXPECT_THROW(generate_story({}, model, config(1, 1.0), rng), UsageError);
}

TEST(GenerateStory, LengthCapAndStop)
{
    ScriptedModel endless(8, {6});
    const Ids prompt{5};
    Rng rng(1);
    const auto s = generate_story(prompt, endless, config(1, 1.0), rng);
    EXPECT_EQ(s.tokens.size(), 150u);
    EXPECT_TRUE(s.truncated);

    ScriptedModel short_story(8, {6, 7, special::end_of_document});
    const auto t = generate_story(prompt, short_story, config(1, 1.0), rng);
    EXPECT_EQ(t.tokens, (Ids{6, 7}));
    EXPECT_FALSE(t.truncated);

    ConvSeq2Seq<float> model(tiny(ModelMode::seq2seq, 30));
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Rng r(seed);
        EXPECT_LE(generate_story(prompt, model, config(10, 1.0), r).tokens.size(), 150u);
    }
}

TEST(GenerateStory, SameSeedSameStory)
{
    ConvSeq2Seq<float> model(tiny(ModelMode::seq2seq, 30));
    const Ids prompt{9, 10};
    Rng a(17), b(17);
    auto cfg = config(10, 0.8);
    cfg.max_tokens = 60;
    EXPECT_EQ(generate_story(prompt, model, cfg, a).tokens, generate_story(prompt, model, cfg, b).tokens);
}

TEST(Hierarchical, EqualsStagesWithSplitSeeds)
{
    ConvSeq2Seq<float> lm(tiny(ModelMode::lm, 25));
    ConvSeq2Seq<float> story(tiny(ModelMode::seq2seq, 25));
    auto cfg = config(10, 1.0, 42);
    cfg.max_tokens = 30;
    const auto joint = hierarchical_generate(lm, story, cfg);

    auto prompt_cfg = cfg;
    prompt_cfg.min_tokens = 1;
    auto prng = stage_rng(42, Stage::prompt);
    const auto prompt = generate_prompt(lm, prompt_cfg, prng);
    auto srng = stage_rng(42, Stage::story);
    const auto s = generate_story(prompt.tokens, story, cfg, srng);
    EXPECT_EQ(joint.prompt, prompt.tokens);
    EXPECT_EQ(joint.story, s.tokens);
    EXPECT_EQ(joint.seed, 42u);
}

TEST(Hierarchical, PromptNeverEmpty)
{
    ScriptedModel lm(8, {special::end_of_prompt, 5, special::end_of_prompt});
    ScriptedModel story(8, {6, special::end_of_document});
    const auto out = hierarchical_generate(lm, story, config(1, 1.0));
    EXPECT_FALSE(out.prompt.empty());
    EXPECT_EQ(out.story, (Ids{6}));
}

TEST(Hierarchical, BatchOfRunsDecodesToText)
{
    ConvSeq2Seq<float> lm(tiny(ModelMode::lm, 25));
    ConvSeq2Seq<float> story(tiny(ModelMode::seq2seq, 25));
    Tokens words;
    for (int i = 0; i < 20; ++i) words.push_back("w" + std::to_string(i));
    Vocabulary vocab(words);
    auto job = [&](std::size_t i) {
        auto cfg = config(10, 1.0, job_seed(5, i));
        return hierarchical_generate(lm, story, cfg, vocabulary_bridge(vocab, vocab));
    };
    const auto serial = run_jobs(6, 1, job);
    const auto threaded = run_jobs(6, 3, job);
    ASSERT_EQ(serial.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(serial[i].prompt, threaded[i].prompt);
        EXPECT_EQ(serial[i].story, threaded[i].story);
        EXPECT_LE(serial[i].story.size(), 150u);
        EXPECT_FALSE(serial[i].prompt.empty());
    }

    const auto text = format_text_blocks(serial, vocab, vocab);
    EXPECT_EQ(text.find("<unk>"), std::string::npos);
    EXPECT_EQ(text.find("<newline>"), std::string::npos);
    std::size_t separators = 0;
    for (std::size_t pos = 0; (pos = text.find("\n---\n", pos)) != std::string::npos; ++pos) ++separators;
    EXPECT_GE(separators, 11u);

    const auto records = format_records(serial, vocab, vocab);
    EXPECT_EQ(std::count(records.begin(), records.end(), '\n'), 6);
    const auto parsed = parse_records(records, vocab, vocab);
    ASSERT_EQ(parsed.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(parsed[i].seed, serial[i].seed);
        EXPECT_EQ(parsed[i].prompt, serial[i].prompt);
        EXPECT_EQ(parsed[i].story, serial[i].story);
    }
    EXPECT_THROW(parse_records("12\tonly two\n", vocab, vocab), DataError);
}

TEST(Formatting, NewlinesRenderInTextBlocks)
{
    Vocabulary vocab(Tokens{"hi", "there"});
    StorySample s;
    s.prompt = {5};
    s.story = {5, special::newline, 6};
    EXPECT_EQ(format_text_blocks({s}, vocab, vocab), "hi\n---\nhi\nthere\n");
    EXPECT_EQ(format_records({s}, vocab, vocab), "0\thi\thi <newline> there\n");
}
