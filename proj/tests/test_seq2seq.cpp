#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "storygen/checkpoint.hpp"
#include "storygen/seq2seq.hpp"

using namespace storygen;

namespace {

ModelSpec toy_lm(std::size_t vocab = 17)
{
    ModelSpec s = preset("toy-lm").spec;
    s.story_vocab_size = vocab;
    s.dropout = 0.0;
    s.decoder_blocks = make_blocks({8, 12}, {3, 2}, 0.0);
    s.embed_dim = 6;
    s.out_embed_dim = 5;
    s.self_attention_heads = 2;
    s.max_positions = 80;
    return s;
}

ModelSpec toy_s2s(std::size_t prompt_vocab = 11, std::size_t story_vocab = 13)
{
    ModelSpec s = toy_lm(story_vocab);
    s.mode = ModelMode::seq2seq;
    s.prompt_vocab_size = prompt_vocab;
    s.encoder_blocks = make_blocks({8, 10}, {3, 3}, 0.0);
    return s;
}

std::vector<TokenId> random_ids(std::size_t n, std::size_t vocab, Rng& rng)
{
    std::vector<TokenId> ids(n);
    for (auto& id : ids) id = static_cast<TokenId>(rng.below(vocab));
    return ids;
}

std::string temp_path(const std::string& name)
{
    return (std::filesystem::temp_directory_path() / ("storygen_" + name)).string();
}

}  // namespace

TEST(SizeList, ParsesRunsAndSingles)
{
    EXPECT_EQ(parse_size_list("512 x 4, 768 x 2, 1024"),
              (std::vector<std::size_t>{512, 512, 512, 512, 768, 768, 1024}));
    EXPECT_EQ(parse_size_list("4 \xC3\x97 2, 1, 3"), (std::vector<std::size_t>{4, 4, 1, 3}));
    EXPECT_EQ(format_size_list({3, 3, 1, 4, 4, 4}), "3 x 2, 1, 4 x 3");
    EXPECT_THROW(parse_size_list("512 x"), ConfigError);
    EXPECT_THROW(parse_size_list("0"), ConfigError);
}

TEST(Presets, LanguageModelLayout)
{
    const auto p = preset("gcnn-lm-sa");
    ASSERT_EQ(p.spec.decoder_blocks.size(), 9u);
    const std::vector<std::size_t> widths{512, 512, 512, 512, 768, 768, 1024, 1024, 1024};
    const std::vector<std::size_t> kernels{4, 4, 1, 4, 4, 4, 1, 3, 3};
    for (std::size_t i = 0; i < 9; ++i) {
        EXPECT_EQ(p.spec.decoder_blocks[i].out_width, widths[i]);
        EXPECT_EQ(p.spec.decoder_blocks[i].kernel_width, kernels[i]);
    }
    EXPECT_EQ(p.spec.mode, ModelMode::lm);
    EXPECT_TRUE(p.spec.encoder_blocks.empty());
    EXPECT_EQ(p.spec.embed_dim, 300u);
    EXPECT_EQ(p.spec.self_attention_heads, 4u);
    EXPECT_DOUBLE_EQ(p.spec.dropout, 0.1);
    EXPECT_DOUBLE_EQ(p.learning_rate, 1.0);
    EXPECT_DOUBLE_EQ(p.momentum, 0.99);
    EXPECT_DOUBLE_EQ(p.weight_decay, 1e-7);
}

TEST(Presets, Seq2SeqLayout)
{
    const auto p = preset("conv-s2s-sa");
    ASSERT_EQ(p.spec.encoder_blocks.size(), 3u);
    EXPECT_EQ(p.spec.encoder_blocks[1].out_width, 128u);
    EXPECT_EQ(p.spec.encoder_blocks[2].in_width, 128u);
    EXPECT_EQ(p.spec.encoder_blocks[2].out_width, 512u);
    for (const auto& b : p.spec.encoder_blocks) EXPECT_EQ(b.kernel_width, 3u);
    ASSERT_EQ(p.spec.decoder_blocks.size(), 8u);
    const std::vector<std::size_t> widths{512, 512, 512, 512, 768, 768, 1024, 1024};
    for (std::size_t i = 0; i < 8; ++i) {
        EXPECT_EQ(p.spec.decoder_blocks[i].out_width, widths[i]);
        EXPECT_EQ(p.spec.decoder_blocks[i].kernel_width, 4u);
    }
    EXPECT_EQ(p.spec.embed_dim, 256u);
    EXPECT_EQ(p.spec.out_embed_dim, 256u);
    EXPECT_DOUBLE_EQ(p.spec.dropout, 0.3);
    EXPECT_DOUBLE_EQ(p.learning_rate, 0.25);

    const auto f = preset("fusion-s2s");
    EXPECT_EQ(f.spec.encoder_blocks.size(), 5u);
    EXPECT_EQ(f.spec.encoder_blocks.back().out_width, 512u);
    EXPECT_EQ(f.spec.decoder_blocks.size(), 5u);
    EXPECT_EQ(f.spec.decoder_blocks.back().out_width, 768u);
    for (const auto& b : f.spec.decoder_blocks) EXPECT_EQ(b.kernel_width, 4u);
    EXPECT_THROW(preset("nope"), ConfigError);
}

TEST(ModelSpecText, RoundTripAndRejection)
{
    for (const auto& name : preset_names()) {
        auto spec = preset(name).spec;
        spec.story_vocab_size = 99;
        spec.attention_layers = {0};
        EXPECT_EQ(parse_model_spec(spec.to_text()), spec) << name;
    }
    EXPECT_THROW(parse_model_spec("mode = lm\nlayers = 3\n"), ConfigError);
    EXPECT_THROW(parse_model_spec("mode = rnn\n"), ConfigError);
}

TEST(ModelSpecText, Validation)
{
    auto s = toy_lm();
    EXPECT_NO_THROW(s.validate());
    s.self_attention_heads = 5;
    EXPECT_THROW(s.validate(), ConfigError);
    s = toy_lm();
    s.encoder_blocks = make_blocks({4}, {3}, 0.0);
    EXPECT_THROW(s.validate(), ConfigError);
    s = toy_s2s();
    s.prompt_vocab_size = 0;
    EXPECT_THROW(s.validate(), ConfigError);
}

TEST(LanguageModel, ShapeAndFinite)
{
    ConvSeq2Seq<float> model(toy_lm());
    Rng rng(1);
    auto ids = random_ids(9, 17, rng);
    auto logits = model.forward({}, ids, {});
    EXPECT_EQ(logits.shape(), (Shape{9, 17}));
    for (float v : logits.data()) EXPECT_TRUE(std::isfinite(v));
    EXPECT_THROW(model.forward({}, std::vector<TokenId>{}, {}), UsageError);
}

TEST(LanguageModel, CausalEndToEnd)
{
    ConvSeq2Seq<float> model(toy_lm());
    Rng rng(2);
    auto ids = random_ids(12, 17, rng);
    auto base = model.forward({}, ids, {});
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
        auto changed = ids;
        for (std::size_t j = t + 1; j < ids.size(); ++j) changed[j] = static_cast<TokenId>((changed[j] + 5) % 17);
        auto y = model.forward({}, changed, {});
        for (std::size_t r = 0; r <= t; ++r)
            for (std::size_t v = 0; v < 17; ++v) ASSERT_EQ(y.at(r, v), base.at(r, v)) << "t=" << t;
    }
}

TEST(LanguageModel, MatchesLayerByLayerComposition)
{
    ConvSeq2Seq<double> model(toy_lm());
    Rng rng(3);
    auto ids = random_ids(7, 17, rng);
    auto x = model.input_projection()(model.embedding()(ids));
    for (const auto& layer : model.layers()) {
        EXPECT_FALSE(layer.has_cross);
        x = layer.conv(x, {});
        if (layer.has_self) x = layer.self(x);
    }
    auto expected = model.head()(x);
    auto got = model.forward({}, ids, {});
    for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-5);
}

TEST(Seq2Seq, ShapeConditioningAndEncoderReuse)
{
    ConvSeq2Seq<float> model(toy_s2s());
    Rng rng(4);
    auto story = random_ids(6, 13, rng);
    auto p1 = random_ids(4, 11, rng);
    auto p2 = random_ids(5, 11, rng);
    auto a = model.forward(p1, story, {});
    auto b = model.forward(p2, story, {});
    EXPECT_EQ(a.shape(), (Shape{6, 13}));
    EXPECT_NE(std::vector<float>(a.data().begin(), a.data().end()), std::vector<float>(b.data().begin(), b.data().end()));

    auto encoded = model.encode(p1);
    auto reused = model.head()(model.hidden_from(&encoded, story, {}));
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(reused[i], a[i]);

    std::vector<TokenId> bad_prompt{11};
    EXPECT_THROW(model.forward(bad_prompt, story, {}), BoundsError);
    EXPECT_THROW(model.forward(std::vector<TokenId>{}, story, {}), UsageError);
}

TEST(Seq2Seq, StepwiseDecodingMatchesForward)
{
    for (auto spec : {toy_lm(), toy_s2s()}) {
        ConvSeq2Seq<float> model(spec);
        Rng rng(5);
        auto prompt = random_ids(4, 11, rng);
        auto ids = random_ids(10, spec.story_vocab_size, rng);
        auto full = model.forward(prompt, ids, {});
        auto state = model.start(prompt);
        for (std::size_t t = 0; t < ids.size(); ++t) {
            auto logits = model.step(state, ids[t]);
            for (std::size_t v = 0; v < spec.story_vocab_size; ++v) EXPECT_NEAR(logits[v], full.at(t, v), 1e-5);
        }
        EXPECT_EQ(state.position, 10u);
    }
}

TEST(Seq2Seq, FirstStepEqualsLengthOneForward)
{
    ConvSeq2Seq<float> model(toy_s2s());
    std::vector<TokenId> prompt{3, 4};
    std::vector<TokenId> first{special::begin_of_sequence};
    auto session = model.begin(prompt);
    auto logits = session->step(first[0]);
    auto full = model.forward(prompt, first, {});
    for (std::size_t v = 0; v < 13; ++v) EXPECT_NEAR(logits[v], full.at(0, v), 1e-6);
    EXPECT_EQ(session->position(), 1u);
}

TEST(Seq2Seq, InterleavedStatesAreIndependent)
{
    ConvSeq2Seq<float> model(toy_s2s());
    Rng rng(6);
    auto pa = random_ids(3, 11, rng), pb = random_ids(5, 11, rng);
    auto ia = random_ids(6, 13, rng), ib = random_ids(6, 13, rng);
    auto sa = model.start(pa), sb = model.start(pb);
    std::vector<Eigen::VectorXd> la, lb;
    for (std::size_t t = 0; t < 6; ++t) {
        la.push_back(model.step(sa, ia[t]));
        lb.push_back(model.step(sb, ib[t]));
    }
    auto solo = model.start(pa);
    for (std::size_t t = 0; t < 6; ++t) EXPECT_EQ(model.step(solo, ia[t]), la[t]);
}

TEST(Seq2Seq, DecodingPastMaxPositionsFails)
{
    auto spec = toy_lm();
    spec.max_positions = 3;
    ConvSeq2Seq<float> model(spec);
    auto state = model.start({});
    for (int i = 0; i < 3; ++i) model.step(state, 5);
    EXPECT_THROW(model.step(state, 5), LengthError);
}

TEST(Seq2Seq, EveryParameterReceivesGradient)
{
    ConvSeq2Seq<double> model(toy_s2s());
    Rng rng(7);
    auto prompt = random_ids(4, 11, rng);
    auto ids = random_ids(5, 13, rng);
    auto params = model.parameters();
    std::size_t total = 0;
    for (auto& p : params) {
        p.tensor.clear_grad();
        total += p.tensor.numel();
    }
    std::vector<std::uint8_t> mask(5, 1);
    backward(cross_entropy(model.forward(prompt, ids, {}), ids, mask, Reduction::mean));
    for (const auto& p : params) EXPECT_TRUE(p.tensor.has_grad()) << p.name;
    // encoder 12, decoder embedding + input 4, layer0 24, layer1 26, head 4
    EXPECT_EQ(params.size(), 70u);
    std::set<std::string> names;
    for (const auto& p : params) names.insert(p.name);
    EXPECT_EQ(names.size(), params.size());
    EXPECT_GT(total, 0u);
}

TEST(Scoring, UniformModelGivesLengthTimesLogInverseV)
{
    ConvSeq2Seq<double> model(toy_s2s());
    for (auto& v : model.head().vocab.weight.node().data) v = 0.0;
    for (auto& v : model.head().vocab.bias.node().data) v = 0.0;
    std::vector<TokenId> prompt{1, 2, 3};
    std::vector<TokenId> story{5, 6, 7, 8, special::end_of_document};
    EXPECT_NEAR(score_sequence(model, prompt, story), 5 * std::log(1.0 / 13), 1e-12);
    EXPECT_EQ(score_sequence(model, prompt, std::vector<TokenId>{}), 0.0);
}

TEST(Scoring, AdditiveAndOrderSensitive)
{
    ConvSeq2Seq<double> model(toy_s2s());
    Rng rng(8);
    auto prompt = random_ids(4, 11, rng);
    auto story = random_ids(8, 13, rng);
    const double full = score_sequence(model, prompt, story);
    const auto terms = token_log_probs(model, prompt, story);
    const double prefix = score_sequence(model, prompt, std::span<const TokenId>(story).first(5));
    EXPECT_NEAR(prefix + terms[5] + terms[6] + terms[7], full, 1e-10);

    auto reversed = story;
    std::reverse(reversed.begin(), reversed.end());
    EXPECT_NE(score_sequence(model, prompt, reversed), full);
}

TEST(EnsembleLogits, IdentityCasesAndHandAverage)
{
    Eigen::VectorXd a(3), b(3);
    a << 1.0, 2.0, 0.5;
    b << -1.0, 0.0, 3.0;
    auto log_softmax = [](const Eigen::VectorXd& z) {
        Eigen::VectorXd p = (z.array() - z.maxCoeff()).exp();
        return Eigen::VectorXd((p / p.sum()).array().log());
    };
    EXPECT_TRUE(ensemble_logits({a}).isApprox(log_softmax(a), 1e-12));
    EXPECT_TRUE(ensemble_logits({a, a}).isApprox(log_softmax(a), 1e-12));
    const Eigen::VectorXd pa = log_softmax(a).array().exp(), pb = log_softmax(b).array().exp();
    const Eigen::VectorXd hand = (0.5 * pa + 0.5 * pb).array().log();
    EXPECT_TRUE(ensemble_logits({a, b}).isApprox(hand, 1e-12));
    const Eigen::VectorXd weighted = (0.75 * pa + 0.25 * pb).array().log();
    EXPECT_TRUE(ensemble_logits({a, b}, {3.0, 1.0}).isApprox(weighted, 1e-12));
    EXPECT_THROW(ensemble_logits({a, b}, {1.0}), ConfigError);
}

TEST(EnsembleModel, MatchesMemberAverage)
{
    auto s1 = toy_s2s();
    auto s2 = toy_s2s();
    s2.init_seed = 77;
    ConvSeq2Seq<double> m1(s1), m2(s2);
    Ensemble<double> single({&m1});
    Ensemble<double> pair({&m1, &m2});
    std::vector<TokenId> prompt{2, 3, 4};
    std::vector<TokenId> story{5, 1, 9, 2};
    EXPECT_NEAR(score_sequence(single, prompt, story), score_sequence(m1, prompt, story), 1e-10);

    const auto l1 = token_log_probs(m1, prompt, story), l2 = token_log_probs(m2, prompt, story);
    const auto le = token_log_probs(pair, prompt, story);
    for (std::size_t t = 0; t < story.size(); ++t)
        EXPECT_NEAR(le[t], std::log(0.5 * std::exp(l1[t]) + 0.5 * std::exp(l2[t])), 1e-10);

    auto session = pair.begin(prompt);
    auto full = pair.forward(prompt, story, {});
    for (std::size_t t = 0; t < story.size(); ++t) {
        auto row = session->step(story[t]);
        for (std::size_t v = 0; v < 13; ++v) EXPECT_NEAR(row[v], full.at(t, v), 1e-9);
    }
}

TEST(Checkpoint, RoundTripIsBitExact)
{
    ConvSeq2Seq<float> model(toy_s2s());
    Checkpoint ck;
    store_model(ck, model);
    ck.manifest.set("step", "42");
    const auto path = temp_path("ck_roundtrip.ckpt");
    save_checkpoint(path, ck);
    auto loaded = load_checkpoint(path);
    EXPECT_EQ(loaded.manifest.get("step"), "42");
    ASSERT_EQ(loaded.tensors.size(), ck.tensors.size());
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
        EXPECT_EQ(loaded.tensors[i].name, ck.tensors[i].name);
        EXPECT_EQ(loaded.tensors[i].shape, ck.tensors[i].shape);
        EXPECT_EQ(std::memcmp(loaded.tensors[i].data.data(), ck.tensors[i].data.data(), ck.tensors[i].data.size() * 4), 0);
    }

    auto restored = load_model(loaded);
    EXPECT_EQ(restored->spec(), model.spec());
    std::vector<TokenId> prompt{1, 2}, story{3, 4, 5};
    auto a = model.forward(prompt, story, {}), b = restored->forward(prompt, story, {});
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);

    save_checkpoint(path + "2", loaded);
    EXPECT_EQ(file_hash(path), file_hash(path + "2"));
    std::filesystem::remove(path);
    std::filesystem::remove(path + "2");
}

TEST(Checkpoint, CorruptOrMismatchedFilesAreRejected)
{
    EXPECT_THROW(load_checkpoint(temp_path("does_not_exist.ckpt")), DataError);
    const auto path = temp_path("ck_bad.ckpt");
    {
        std::ofstream out(path);
        out << "hello\n";
    }
    EXPECT_THROW(load_checkpoint(path), DataError);

    ConvSeq2Seq<float> model(toy_s2s());
    Checkpoint ck;
    store_model(ck, model);
    ck.tensors.pop_back();
    EXPECT_THROW(load_model(ck), DataError);

    ConvSeq2Seq<float> other(toy_s2s(11, 14));
    Checkpoint wrong;
    store_model(wrong, other);
    EXPECT_THROW(restore_parameters(wrong, model.parameters(), "model."), DataError);

    save_checkpoint(path, ck);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
    EXPECT_THROW(load_checkpoint(path), DataError);
    std::filesystem::remove(path);
}

TEST(Hashing, Fnv1aReferenceValues)
{
    EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
    EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
    EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}
