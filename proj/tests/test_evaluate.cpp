#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "storygen/errors.hpp"
#include "storygen/evaluate.hpp"

using namespace storygen;

namespace {

std::vector<Example> keyed_pairs(std::size_t n, std::size_t distinct_prompts)
{
    std::vector<Example> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto p = static_cast<TokenId>(10 + i % distinct_prompts);
        out.push_back({{p, 5}, {static_cast<TokenId>(100 + i), 6, special::end_of_document}});
    }
    return out;
}

/// Pseudo-random score in [0, 1) fixed by the (prompt, story) contents.
double hashed_score(std::span<const TokenId> prompt, std::span<const TokenId> story)
{
    std::uint64_t h = 0x1234;
    for (auto t : prompt) h = Rng::mix(h, static_cast<std::uint64_t>(t));
    h = Rng::mix(h, 0xffff);
    for (auto t : story) h = Rng::mix(h, static_cast<std::uint64_t>(t));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

Tokens words(const std::string& text)
{
    Tokens out;
    std::istringstream in(text);
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

std::size_t window_oracle(const Ids& a, const std::vector<Ids>& corpus)
{
    std::size_t best = 0;
    for (const auto& b : corpus) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            for (std::size_t j = 0; j < b.size(); ++j) {
                std::size_t n = 0;
                while (i + n < a.size() && j + n < b.size() && a[i + n] == b[j + n]) ++n;
                best = std::max(best, n);
            }
        }
    }
    return best;
}

std::filesystem::path scratch(const std::string& name)
{
    auto dir = std::filesystem::temp_directory_path() / ("storygen_eval_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST(PromptRanking, OracleScorerIsPerfect)
{
    const auto pairs = keyed_pairs(200, 20);
    const auto oracle = [&](std::span<const TokenId> prompt, std::span<const TokenId> story) {
        const std::size_t i = static_cast<std::size_t>(story[0] - 100);
        return std::equal(prompt.begin(), prompt.end(), pairs[i].prompt.begin(), pairs[i].prompt.end()) ? 0.0 : -1.0;
    };
    const auto r = prompt_ranking(oracle, pairs, 3);
    EXPECT_EQ(r.ranks.size(), 200u);
    EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
}

TEST(PromptRanking, RandomScoresGiveChance)
{
    const auto pairs = keyed_pairs(1000, 50);
    const auto r = prompt_ranking(hashed_score, pairs, 7, 1000);
    ASSERT_EQ(r.ranks.size(), 1000u);
    EXPECT_GE(r.accuracy, 0.07);
    EXPECT_LE(r.accuracy, 0.13);
    for (auto rank : r.ranks) {
        EXPECT_GE(rank, 1u);
        EXPECT_LE(rank, 10u);
    }
}

TEST(PromptRanking, TiesCountAsFailure)
{
    const auto r = prompt_ranking([](auto, auto) { return -3.0; }, keyed_pairs(30, 10), 1);
    EXPECT_DOUBLE_EQ(r.accuracy, 0.0);
    for (auto rank : r.ranks) EXPECT_EQ(rank, 10u);
}

TEST(PromptRanking, DistractorsAreDistinctOtherPrompts)
{
    const auto pairs = keyed_pairs(60, 12);
    for (std::size_t i = 0; i < 60; ++i) {
        const auto d = ranking_distractors(pairs, i, 5);
        ASSERT_EQ(d.size(), 9u);
        std::set<Ids> seen;
        for (auto j : d) {
            EXPECT_NE(pairs[j].prompt, pairs[i].prompt);
            seen.insert(pairs[j].prompt);
        }
        EXPECT_EQ(seen.size(), 9u);
    }
    EXPECT_EQ(ranking_distractors(pairs, 4, 5), ranking_distractors(pairs, 4, 5));
    EXPECT_NE(ranking_distractors(pairs, 4, 5), ranking_distractors(pairs, 4, 6));
}

TEST(PromptRanking, DeterministicAcrossWorkers)
{
    const auto pairs = keyed_pairs(100, 25);
    const auto a = prompt_ranking(hashed_score, pairs, 9, 100, 1);
    const auto b = prompt_ranking(hashed_score, pairs, 9, 100, 3);
    EXPECT_EQ(a.ranks, b.ranks);
    EXPECT_EQ(a.accuracy, b.accuracy);
    EXPECT_EQ(prompt_ranking(hashed_score, pairs, 9, 40).ranks.size(), 40u);
}

TEST(PromptRanking, TooFewPrompts)
{
    EXPECT_THROW(prompt_ranking(hashed_score, keyed_pairs(50, 9), 1), ConfigError);
}

TEST(Tfidf, HandComputedThreeDocuments)
{
    TfidfIndex index({words("a b"), words("a c"), words("b b d")}, {words("s0"), words("s1"), words("s2")});
    // df: a 2, b 2, c 1, d 1 over N = 3.
    const double idf_common = std::log(3.0 / 3.0) + 1.0;
    const double idf_rare = std::log(3.0 / 2.0) + 1.0;
    EXPECT_NEAR(index.idf("a"), idf_common, 1e-12);
    EXPECT_NEAR(index.idf("c"), idf_rare, 1e-12);
    EXPECT_EQ(index.idf("zzz"), 0.0);

    const Tokens query = words("a c");
    const double q_norm = std::sqrt(idf_common * idf_common + idf_rare * idf_rare);
    const double d0 = idf_common * idf_common / (q_norm * std::sqrt(2.0));
    const double d2_norm = std::sqrt(4.0 * idf_common * idf_common + idf_rare * idf_rare);
    EXPECT_NEAR(index.similarity(query, 0), d0, 1e-6);
    EXPECT_NEAR(index.similarity(query, 1), 1.0, 1e-6);
    EXPECT_NEAR(index.similarity(query, 2), 0.0, 1e-6);
    EXPECT_NEAR(index.similarity(words("b"), 2), 2.0 * idf_common / d2_norm, 1e-6);

    const auto hits = knn_retrieve(index, query, 3);
    ASSERT_EQ(hits.size(), 3u);
    EXPECT_EQ(hits[0].document, 1u);
    EXPECT_EQ(hits[1].document, 0u);
    EXPECT_EQ(hits[2].document, 2u);
    EXPECT_EQ(hits[0].story, words("s1"));
}

TEST(Tfidf, SelfRetrievalOnThousandPrompts)
{
    std::vector<Tokens> prompts;
    std::vector<Tokens> stories;
    Rng rng(2);
    for (int i = 0; i < 1000; ++i) {
        prompts.push_back({"p" + std::to_string(i), "w" + std::to_string(rng.below(30)), "w" + std::to_string(rng.below(30)),
                           "shared"});
        Tokens story;
        for (std::size_t t = 0; t < 120 + rng.below(100); ++t) story.push_back("s" + std::to_string(rng.below(50)));
        stories.push_back(story);
    }
    TfidfIndex index(prompts, stories);
    for (std::size_t i = 0; i < 1000; ++i) {
        const auto hits = knn_retrieve(index, prompts[i], 3);
        ASSERT_EQ(hits[0].document, i);
        EXPECT_NEAR(hits[0].similarity, 1.0, 1e-6);
        for (const auto& h : hits) EXPECT_LE(h.story.size(), kRetrievedStoryTokens);
        EXPECT_GE(hits[0].similarity, hits[1].similarity);
    }
    const auto curve = knn_curve(index, {prompts[0], prompts[1], words("w3 shared")}, 5);
    ASSERT_EQ(curve.size(), 5u);
    for (std::size_t r = 1; r < curve.size(); ++r) EXPECT_LE(curve[r], curve[r - 1]);
}

TEST(Tfidf, NoSharedTermsKeepsCorpusOrder)
{
    TfidfIndex index({words("a b"), words("c"), words("d e")}, {words("x"), words("y"), words("z")});
    const auto hits = knn_retrieve(index, words("q r"), 3);
    ASSERT_EQ(hits.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(hits[i].document, i);
        EXPECT_EQ(hits[i].similarity, 0.0);
    }
    EXPECT_TRUE(index.vectorize(words("q")).empty());
}

TEST(Tfidf, EmptyIndexAndMismatch)
{
    EXPECT_THROW(knn_retrieve(TfidfIndex{}, words("a"), 1), UsageError);
    EXPECT_THROW(TfidfIndex({words("a")}, {}), ShapeError);
}

TEST(Tfidf, FileRoundTrip)
{
    auto dir = scratch("tfidf");
    TfidfIndex index({words("a b"), words("a c"), words("b b d"), {}}, {words("s0 x"), words("s1"), words("s2"), words("s3")});
    const auto path = (dir / "index.bin").string();
    index.save(path);
    const auto loaded = TfidfIndex::load(path);
    EXPECT_EQ(loaded.size(), 4u);
    EXPECT_EQ(loaded.terms(), index.terms());
    for (const auto& q : {words("a c"), words("b"), words("d a b")}) {
        const auto x = knn_retrieve(index, q, 4);
        const auto y = knn_retrieve(loaded, q, 4);
        for (std::size_t i = 0; i < 4; ++i) {
            EXPECT_EQ(x[i].document, y[i].document);
            EXPECT_EQ(x[i].similarity, y[i].similarity);
            EXPECT_EQ(x[i].story, y[i].story);
        }
    }
    std::ofstream(dir / "bad.bin") << "not an index\n";
    EXPECT_THROW(TfidfIndex::load((dir / "bad.bin").string()), DataError);
    std::string bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    std::ofstream(dir / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
    EXPECT_THROW(TfidfIndex::load((dir / "short.bin").string()), DataError);
    EXPECT_THROW(TfidfIndex::load((dir / "missing.bin").string()), DataError);
}

TEST(CopyOverlap, ModuleExamples)
{
    const Ids story{1, 2, 3, 4, 5, 6};
    EXPECT_EQ(copy_overlap(story, std::vector<Ids>{{9, 9}, story}), story.size());
    EXPECT_EQ(copy_overlap(story, std::vector<Ids>{{7, 8, 9}}), 0u);
    // "a b c d" against "x b c y"
    EXPECT_EQ(copy_overlap(Ids{10, 11, 12, 13}, std::vector<Ids>{{20, 11, 12, 21}}), 2u);
    EXPECT_EQ(copy_overlap(story, std::vector<Ids>{}), 0u);
    EXPECT_EQ(copy_overlap(Ids{}, std::vector<Ids>{story}), 0u);
}

TEST(CopyOverlap, RunsDoNotSpanStories)
{
    EXPECT_EQ(copy_overlap(Ids{1, 2, 3, 4}, std::vector<Ids>{{1, 2}, {3, 4}}), 2u);
}

TEST(CopyOverlap, MatchesWindowOracle)
{
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<Ids> corpus(1 + rng.below(4));
        for (auto& doc : corpus) {
            doc.resize(rng.below(15));
            for (auto& t : doc) t = static_cast<TokenId>(rng.below(4));
        }
        Ids story(rng.below(15));
        for (auto& t : story) t = static_cast<TokenId>(rng.below(4));
        const CopyIndex index(corpus);
        EXPECT_EQ(copy_overlap(story, index), window_oracle(story, corpus));
    }
}

TEST(CopyOverlap, MonotoneUnderCorpusGrowth)
{
    Rng rng(12);
    std::vector<Ids> corpus;
    Ids story(30);
    for (auto& t : story) t = static_cast<TokenId>(rng.below(6));
    std::size_t previous = 0;
    for (int i = 0; i < 20; ++i) {
        Ids doc(20);
        for (auto& t : doc) t = static_cast<TokenId>(rng.below(6));
        corpus.push_back(doc);
        const auto now = copy_overlap(story, corpus);
        EXPECT_GE(now, previous);
        previous = now;
    }
}

TEST(CopyOverlap, SubsequenceMode)
{
    EXPECT_EQ(copy_overlap_subsequence(Ids{1, 2, 3, 4}, {{1, 9, 3, 4}}), 3u);
    EXPECT_EQ(copy_overlap_subsequence(Ids{1, 2, 3}, {{3, 2, 1}, {1, 5, 3}}), 2u);
    EXPECT_EQ(copy_overlap_subsequence(Ids{1, 2}, {}), 0u);
}

TEST(CopyOverlap, Stats)
{
    const CopyIndex index({{1, 2, 3, 4}});
    const auto stats = copy_stats({{1, 2, 9}, {3, 4, 5, 6, 7}}, index);
    EXPECT_EQ(stats.stories, 2u);
    EXPECT_DOUBLE_EQ(stats.mean_overlap, 2.0);
    EXPECT_DOUBLE_EQ(stats.mean_length, 4.0);
    EXPECT_EQ(copy_stats({}, index).stories, 0u);
}

TEST(Pairing, ThreeStoriesMakeOneTriple)
{
    std::vector<PairingStory> stories{{"zed", "p0", "s0"}, {"zed", "p1", "s1"}, {"zed", "p2", "s2"}};
    const auto ex = pairing_task_export(stories, 3, 4);
    ASSERT_EQ(ex.triples.size(), 1u);
    const auto& t = ex.triples[0];
    std::array<std::size_t, 3> sorted = t.answer;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, (std::array<std::size_t, 3>{0, 1, 2}));
    for (std::size_t s = 0; s < 3; ++s) EXPECT_EQ(t.stories[s].substr(1), t.prompts[t.answer[s]].substr(1));
    EXPECT_EQ(ex.task.find("zed"), std::string::npos);
    EXPECT_NE(ex.key.find("\tzed\t"), std::string::npos);
}

TEST(Pairing, KeyReconstructsPairs)
{
    std::vector<PairingStory> stories;
    for (int m = 0; m < 2; ++m) {
        for (int i = 0; i < 110; ++i) {
            const auto tag = std::to_string(m) + "_" + std::to_string(i);
            stories.push_back({"model" + std::to_string(m), "prompt " + tag, "story " + tag + "\nmore"});
        }
    }
    const auto ex = pairing_task_export(stories, 105, 8);
    EXPECT_EQ(ex.triples.size(), 70u);
    const auto parsed = parse_pairing_task(ex.task, ex.key);
    ASSERT_EQ(parsed.size(), 70u);
    std::map<std::string, std::size_t> per_model;
    std::set<std::string> recovered;
    for (const auto& t : parsed) {
        ++per_model[t.model];
        for (std::size_t s = 0; s < 3; ++s) {
            const auto tag = t.prompts[t.answer[s]].substr(7);
            EXPECT_EQ(t.stories[s], "story " + tag + " <newline> more");
            recovered.insert(tag);
        }
    }
    EXPECT_EQ(per_model["model0"], 35u);
    EXPECT_EQ(per_model["model1"], 35u);
    EXPECT_EQ(recovered.size(), 210u);
    EXPECT_EQ(pairing_task_export(stories, 105, 8).task, ex.task);
    EXPECT_THROW(pairing_task_export(stories, 100, 8), ConfigError);
    EXPECT_THROW(pairing_task_export(stories, 111, 8), DataError);
    EXPECT_THROW(parse_pairing_task(ex.task, "triple\tmodel\n"), DataError);
}

TEST(EvalReport, EmptyReport)
{
    EvalReport r;
    EXPECT_TRUE(r.empty());
    EXPECT_EQ(r.to_text(), "");
    EXPECT_TRUE(EvalReport::parse("").empty());
    EXPECT_TRUE(EvalReport::parse("# nothing here\n\n").empty());
}

TEST(EvalReport, RoundTripIsExact)
{
    EvalReport r;
    r.set("perplexity", "valid", 12.345678901234567);
    r.set("perplexity", "test", 13.0);
    r.set("ranking", "accuracy", 0.61);
    r.set("ranking", "stories", "200");
    r.set_list("knn", "curve", {0.9, 1.0 / 3.0, 0.0});
    r.set("perplexity", "valid", 11.5);
    const auto text = r.to_text();
    EXPECT_EQ(text.substr(0, 13), "[perplexity]\n");
    const auto back = EvalReport::parse(text);
    EXPECT_EQ(back, r);
    EXPECT_EQ(back.number("perplexity", "valid"), 11.5);
    EXPECT_EQ(back.number("ranking", "accuracy"), 0.61);
    EXPECT_EQ(back.list("knn", "curve"), (std::vector<double>{0.9, 1.0 / 3.0, 0.0}));
    EXPECT_EQ(back.blocks(), 3u);
    EXPECT_FALSE(back.has("ranking", "nope"));
    EXPECT_THROW(back.get("ranking", "nope"), DataError);
}

TEST(EvalReport, RejectsMalformed)
{
    EXPECT_THROW(EvalReport::parse("key = 1\n"), DataError);
    EXPECT_THROW(EvalReport::parse("[a]\nno equals\n"), DataError);
    EXPECT_THROW(EvalReport::parse("[a\nk = 1\n"), DataError);
    EvalReport r;
    EXPECT_THROW(r.set("a", "bad key", "1"), UsageError);
}
