#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "run_config.hpp"
#include "storygen/checkpoint.hpp"
#include "storygen/config.hpp"
#include "storygen/data.hpp"
#include "storygen/errors.hpp"
#include "storygen/evaluate.hpp"
#include "storygen/fusion.hpp"
#include "storygen/generate.hpp"
#include "storygen/model_spec.hpp"
#include "storygen/train.hpp"

namespace fs = std::filesystem;
using namespace storygen;

namespace {

std::vector<std::string> split_list(const std::string& text, char sep = ',')
{
    std::vector<std::string> out;
    std::stringstream in(text);
    for (std::string item; std::getline(in, item, sep);) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string read_text(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_text(const std::string& path, const std::string& text)
{
    if (path.empty() || path == "-") {
        std::cout << text << std::flush;
        return;
    }
    const auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out || !(out << text)) throw DataError("cannot write " + path);
}

void log_config(const CLI::App& sub)
{
    std::cerr << "# " << sub.get_name() << "\n" << cli::resolved_config(sub);
}

Vocabulary required_vocab(const std::string& path, const std::string& flag)
{
    if (path.empty()) throw UsageError(flag + " is required");
    return Vocabulary::load(path);
}

void check_vocab(const Checkpoint& ck, const std::string& key, const Vocabulary& vocab, const std::string& path)
{
    const auto recorded = ck.manifest.get_or(key, "");
    if (!recorded.empty() && recorded != hex64(vocab.hash())) {
        throw DataError("vocabulary " + path + " does not match the one the checkpoint was trained with");
    }
}

std::vector<StoryPair> limit(std::vector<StoryPair> pairs, std::size_t max_pairs)
{
    if (max_pairs && pairs.size() > max_pairs) pairs.resize(max_pairs);
    return pairs;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
    std::string out;
    SynthConfig cfg;
};

void add_synth(CLI::App& app, SynthArgs& a)
{
    auto* sub = app.add_subcommand("synth", "Write the synthetic keyed corpus (train/valid/test)");
    sub->add_option("--config", "key = value file");
    sub->add_option("--out", a.out, "Output directory")->required();
    sub->add_option("--n-keys", a.cfg.n_keys, "Number of keys");
    sub->add_option("--words-per-key", a.cfg.words_per_key, "Private words per key");
    sub->add_option("--pairs-per-key", a.cfg.train_per_key, "Training pairs per key");
    sub->add_option("--valid-per-key", a.cfg.valid_per_key, "Validation pairs per key");
    sub->add_option("--test-per-key", a.cfg.test_per_key, "Test pairs per key");
    sub->add_option("--story-length", a.cfg.story_length, "Story length in tokens");
    sub->add_option("--featured-words", a.cfg.featured_words, "Featured words named in each prompt");
    sub->add_option("--featured-probability", a.cfg.featured_probability, "Chance a story word is a featured one");
    sub->add_option("--seed", a.cfg.seed, "Random seed");
}

void run_synth(const SynthArgs& a)
{
    const auto corpus = synthesize_keyed_corpus(a.cfg);
    write_split(a.out, "train", corpus.train);
    write_split(a.out, "valid", corpus.valid);
    write_split(a.out, "test", corpus.test);
    std::cout << format_stats({corpus_stats(corpus.train, "train"), corpus_stats(corpus.valid, "valid"),
                               corpus_stats(corpus.test, "test")});
}

// ---------------------------------------------------------------- preprocess

struct PreprocessArgs {
    std::string input;
    std::string out;
    std::string splits = "train,valid,test";
    CleanConfig clean;
};

void add_preprocess(CLI::App& app, PreprocessArgs& a)
{
    auto* sub = app.add_subcommand("preprocess", "Tokenize and clean raw prompt/story pairs");
    sub->add_option("--config", "key = value file");
    sub->add_option("--input", a.input, "Directory of raw <split>.source/.target files")->required();
    sub->add_option("--out", a.out, "Output directory")->required();
    sub->add_option("--splits", a.splits, "Comma-separated split names");
    sub->add_option("--min-story", a.clean.min_story_tokens, "Drop stories shorter than this");
    sub->add_option("--max-story", a.clean.max_story_tokens, "Truncate stories to this many tokens");
}

void run_preprocess(const PreprocessArgs& a)
{
    std::vector<SplitStats> stats;
    for (const auto& split : split_list(a.splits)) {
        const auto raw = read_raw_split(a.input, split);
        const auto cleaned = clean(raw, a.clean);
        write_split(a.out, split, cleaned);
        std::cerr << split << ": kept " << cleaned.size() << " of " << raw.size() << " pairs\n";
        stats.push_back(corpus_stats(cleaned, split));
    }
    std::cout << format_stats(stats);
}

// ---------------------------------------------------------------- build-vocab

struct VocabArgs {
    std::string data;
    std::string split = "train";
    std::size_t min_count = 10;
    std::string prompt_vocab;
    std::string story_vocab;
};

void add_build_vocab(CLI::App& app, VocabArgs& a)
{
    auto* sub = app.add_subcommand("build-vocab", "Build prompt and story vocabularies from a corpus split");
    sub->add_option("--config", "key = value file");
    sub->add_option("--data", a.data, "Corpus directory")->required();
    sub->add_option("--split", a.split, "Split to count");
    sub->add_option("--min-count", a.min_count, "Keep tokens seen more than this many times");
    sub->add_option("--prompt-vocab", a.prompt_vocab, "Prompt vocabulary output file")->required();
    sub->add_option("--story-vocab", a.story_vocab, "Story vocabulary output file")->required();
}

void run_build_vocab(const VocabArgs& a)
{
    const auto pairs = read_split(a.data, a.split);
    std::vector<Tokens> prompts;
    std::vector<Tokens> stories;
    for (const auto& p : pairs) {
        prompts.push_back(p.prompt);
        stories.push_back(p.story);
    }
    const auto pv = build_vocab(prompts, a.min_count);
    const auto sv = build_vocab(stories, a.min_count);
    pv.save(a.prompt_vocab);
    sv.save(a.story_vocab);
    std::cout << "prompt_vocab = " << pv.size() << "\nstory_vocab = " << sv.size() << "\n";
}

// ---------------------------------------------------------------- stats

struct StatsArgs {
    std::string data;
    std::string splits = "train,valid,test";
    std::string out;
};

void add_stats(CLI::App& app, StatsArgs& a)
{
    auto* sub = app.add_subcommand("stats", "Pair counts and mean lengths per split");
    sub->add_option("--config", "key = value file");
    sub->add_option("--data", a.data, "Corpus directory")->required();
    sub->add_option("--splits", a.splits, "Comma-separated split names");
    sub->add_option("--out", a.out, "Output file (stdout when empty)");
}

void run_stats(const StatsArgs& a)
{
    std::vector<SplitStats> stats;
    for (const auto& split : split_list(a.splits)) stats.push_back(corpus_stats(read_split(a.data, split), split));
    write_text(a.out, format_stats(stats));
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    std::string mode;
    std::string preset;
    std::string spec_file;
    std::string data;
    std::string train_split = "train";
    std::string valid_split = "valid";
    std::size_t max_pairs = 0;
    std::string prompt_vocab;
    std::string story_vocab;
    std::string out;
    std::string resume;
    std::string pretrained;
    std::size_t post_layers = 2;
    TrainConfig train;
    std::optional<double> lr;
    std::optional<double> momentum;
    std::optional<double> weight_decay;
    std::optional<double> clip_norm;
    std::optional<double> dropout;
};

void add_train(CLI::App& app, TrainArgs& a)
{
    auto* sub = app.add_subcommand("train", "Train a prompt LM, a seq2seq story model or a fusion model");
    sub->add_option("--config", "key = value file");
    sub->add_option("--mode", a.mode, "lm, seq2seq or fusion")->required()->check(CLI::IsMember({"lm", "seq2seq", "fusion"}));
    sub->add_option("--preset", a.preset, "Architecture preset (default toy-lm, toy-s2s or toy-fusion)");
    sub->add_option("--spec", a.spec_file, "key = value model spec overriding the preset");
    sub->add_option("--data", a.data, "Corpus directory")->required();
    sub->add_option("--train-split", a.train_split, "Training split");
    sub->add_option("--valid-split", a.valid_split, "Validation split (empty disables validation)");
    sub->add_option("--max-pairs", a.max_pairs, "Use only the first N training pairs (0 = all)");
    sub->add_option("--prompt-vocab", a.prompt_vocab, "Prompt vocabulary file");
    sub->add_option("--story-vocab", a.story_vocab, "Story vocabulary file");
    sub->add_option("--out", a.out, "Checkpoint and log directory")->required();
    sub->add_option("--resume", a.resume, "Continue from this checkpoint");
    sub->add_option("--pretrained", a.pretrained, "Pretrained seq2seq checkpoint (fusion)");
    sub->add_option("--post-layers", a.post_layers, "Fusion post layers");
    sub->add_option("--max-updates", a.train.max_updates, "Total optimizer updates");
    sub->add_option("--batch-tokens", a.train.batch_tokens, "Token budget per batch");
    sub->add_option("--valid-interval", a.train.valid_interval, "Updates between validations");
    sub->add_option("--plateau-factor", a.train.plateau_factor, "Learning rate shrink on plateau");
    sub->add_option("--min-lr", a.train.min_learning_rate, "Learning rate floor");
    sub->add_option("--stop-below-loss", a.train.stop_below_valid_loss, "Stop once validation loss falls below this");
    sub->add_option("--lr", a.lr, "Learning rate (default from preset)");
    sub->add_option("--momentum", a.momentum, "Nesterov momentum (default from preset)");
    sub->add_option("--weight-decay", a.weight_decay, "Weight decay (default from preset)");
    sub->add_option("--clip-norm", a.clip_norm, "Gradient norm clip, 0 disables (default from preset)");
    sub->add_option("--dropout", a.dropout, "Dropout (default from spec)");
    sub->add_option("--seed", a.train.seed, "Seed for initialization, shuffling and dropout");
}

ModelSpec resolve_spec(const TrainArgs& a, const Preset& p, std::size_t prompt_size, std::size_t story_size)
{
    auto merged = KeyValueConfig::parse(p.spec.to_text(), "preset " + p.name);
    if (!a.spec_file.empty()) {
        const auto overrides = KeyValueConfig::load(a.spec_file);
        overrides.reject_unknown(model_spec_keys());
        for (const auto& key : overrides.keys()) merged.set(key, overrides.get(key));
    }
    auto spec = parse_model_spec(merged);
    if (a.dropout) {
        spec.dropout = *a.dropout;
        for (auto& b : spec.encoder_blocks) b.dropout = *a.dropout;
        for (auto& b : spec.decoder_blocks) b.dropout = *a.dropout;
    }
    const bool lm = a.mode == "lm";
    if ((spec.mode == ModelMode::lm) != lm) {
        throw ConfigError("spec mode " + to_string(spec.mode) + " does not fit --mode " + a.mode);
    }
    spec.prompt_vocab_size = lm ? 0 : prompt_size;
    spec.story_vocab_size = story_size;
    spec.init_seed = a.mode == "fusion" ? Rng::mix(a.train.seed, 0x66757365ULL) : a.train.seed;
    spec.validate();
    return spec;
}

void run_train(const CLI::App& sub, const TrainArgs& a)
{
    const bool lm = a.mode == "lm";
    const auto prompt_vocab = required_vocab(a.prompt_vocab, "--prompt-vocab");
    const auto story_vocab = lm ? prompt_vocab : required_vocab(a.story_vocab, "--story-vocab");
    const auto mode = lm ? ModelMode::lm : ModelMode::seq2seq;

    const std::string preset_name = !a.preset.empty() ? a.preset
                                    : lm                 ? "toy-lm"
                                    : a.mode == "fusion" ? "toy-fusion"
                                                         : "toy-s2s";
    const auto p = preset(preset_name);
    OptimizerConfig opt{a.lr.value_or(p.learning_rate), a.momentum.value_or(p.momentum),
                        a.weight_decay.value_or(p.weight_decay), a.clip_norm.value_or(p.clip_norm)};
    opt.validate();

    TrainConfig tc = a.train;
    tc.checkpoint_dir = a.out;
    tc.log_path = (fs::path(a.out) / "metrics.tsv").string();

    std::unique_ptr<SequenceModel<float>> model;
    std::optional<Checkpoint> resume_from;
    ModelSpec spec;
    if (!a.resume.empty()) {
        resume_from = load_checkpoint(a.resume);
        check_vocab(*resume_from, "vocab.prompt", prompt_vocab, a.prompt_vocab);
        check_vocab(*resume_from, "vocab.story", story_vocab, lm ? a.prompt_vocab : a.story_vocab);
        if ((a.mode == "fusion") != is_fusion_checkpoint(*resume_from)) {
            throw ConfigError("checkpoint " + a.resume + " does not hold a " + a.mode + " model");
        }
        if (a.mode == "fusion") {
            auto fused = load_fusion(*resume_from, a.pretrained);
            spec = fused->spec().trainable;
            model = std::move(fused);
        } else {
            auto plain = load_model(*resume_from);
            spec = plain->spec();
            if (plain->spec().mode != mode) throw ConfigError("checkpoint mode does not match --mode " + a.mode);
            model = std::move(plain);
        }
    } else {
        spec = resolve_spec(a, p, prompt_vocab.size(), story_vocab.size());
        if (a.mode == "fusion") {
            if (a.pretrained.empty()) throw UsageError("--pretrained is required for fusion training");
            std::shared_ptr<ConvSeq2Seq<float>> pre = load_model(load_checkpoint(a.pretrained));
            model = std::make_unique<FusionModel<float>>(pre, FusionSpec{spec, a.post_layers});
        } else {
            model = std::make_unique<ConvSeq2Seq<float>>(spec);
        }
    }

    fs::create_directories(a.out);
    std::string resolved = cli::resolved_config(sub);
    resolved += "preset.resolved = " + (a.resume.empty() ? preset_name : "checkpoint") + "\n";
    resolved += "optimizer.learning_rate = " + format_double(opt.learning_rate) + "\n";
    resolved += "optimizer.momentum = " + format_double(opt.momentum) + "\n";
    resolved += "optimizer.weight_decay = " + format_double(opt.weight_decay) + "\n";
    resolved += "optimizer.clip_norm = " + format_double(opt.clip_norm) + "\n";
    std::istringstream spec_lines(spec.to_text());
    for (std::string line; std::getline(spec_lines, line);) {
        if (!line.empty()) resolved += "spec." + line + "\n";
    }
    std::cerr << "# train\n" << resolved;
    write_text((fs::path(a.out) / "run_config.txt").string(), resolved);

    std::string pretrained = a.pretrained;
    if (pretrained.empty() && resume_from) pretrained = resume_from->manifest.get_or("pretrained_path", "");
    const auto prompt_hash = hex64(prompt_vocab.hash());
    const auto story_hash = hex64(story_vocab.hash());
    auto* raw = model.get();
    ModelWriter writer = [raw, pretrained, prompt_hash, story_hash](Checkpoint& ck) {
        if (auto* fused = dynamic_cast<FusionModel<float>*>(raw)) {
            store_fusion(ck, *fused, pretrained);
        } else {
            store_model(ck, *static_cast<ConvSeq2Seq<float>*>(raw));
        }
        ck.manifest.set("vocab.prompt", prompt_hash);
        ck.manifest.set("vocab.story", story_hash);
    };

    const auto train_pairs = limit(read_split(a.data, a.train_split), a.max_pairs);
    const auto train = make_examples(train_pairs, mode, prompt_vocab, story_vocab);
    std::vector<Example> valid;
    if (!a.valid_split.empty()) valid = make_examples(read_split(a.data, a.valid_split), mode, prompt_vocab, story_vocab);

    Trainer trainer(*model, writer, tc, opt);
    if (resume_from) trainer.resume(*resume_from);
    const auto result = trainer.run(train, valid);
    std::cout << "steps = " << result.steps << "\n";
    std::cout << "learning_rate = " << format_double(result.learning_rate) << "\n";
    if (std::isfinite(result.best_valid_loss)) {
        std::cout << "best_valid_loss = " << format_double(result.best_valid_loss) << "\n";
    }
}

// ---------------------------------------------------------------- generate

struct GenerateArgs {
    std::string mode;
    std::string lm;
    std::string model;
    std::string lm_vocab;
    std::string prompt_vocab;
    std::string story_vocab;
    std::string prompts;
    std::size_t count = 10;
    SamplerConfig sampler;
    std::string temperatures;
    std::size_t workers = 1;
    std::string format = "text";
    std::string out;
};

void add_generate(CLI::App& app, GenerateArgs& a)
{
    auto* sub = app.add_subcommand("generate", "Sample prompts, stories for given prompts, or both");
    sub->add_option("--config", "key = value file");
    sub->add_option("--mode", a.mode, "prompt, story or hierarchical")
        ->required()
        ->check(CLI::IsMember({"prompt", "story", "hierarchical"}));
    sub->add_option("--lm", a.lm, "Prompt language model checkpoint");
    sub->add_option("--model", a.model, "Story model checkpoint (seq2seq or fusion)");
    sub->add_option("--lm-vocab", a.lm_vocab, "Prompt LM vocabulary (default: --prompt-vocab)");
    sub->add_option("--prompt-vocab", a.prompt_vocab, "Story model prompt vocabulary");
    sub->add_option("--story-vocab", a.story_vocab, "Story vocabulary");
    sub->add_option("--prompts", a.prompts, "Tokenized prompts, one per line (story mode)");
    sub->add_option("--count", a.count, "Number of samples (story mode: first N prompts, 0 = all)");
    sub->add_option("--k", a.sampler.k, "Top-k");
    sub->add_option("--temperature", a.sampler.temperature, "Softmax temperature");
    sub->add_option("--temperatures", a.temperatures, "Comma-separated temperature sweep");
    sub->add_option("--max-tokens", a.sampler.max_tokens, "Length cap per sample");
    sub->add_option("--min-tokens", a.sampler.min_tokens, "Stop tokens are banned before this length");
    sub->add_option("--seed", a.sampler.seed, "Base seed; sample i uses a seed derived from it");
    sub->add_option("--workers", a.workers, "Parallel samplers");
    sub->add_option("--format", a.format, "text or records")->check(CLI::IsMember({"text", "records"}));
    sub->add_option("--out", a.out, "Output file (stdout when empty)");
}

LoadedModel required_model(const std::string& path, const std::string& flag)
{
    if (path.empty()) throw UsageError(flag + " is required");
    return load_sequence_model(path);
}

std::vector<Ids> read_prompts(const std::string& path, const Vocabulary& vocab)
{
    std::vector<Ids> out;
    std::istringstream in(read_text(path));
    for (std::string line; std::getline(in, line);) {
        std::istringstream words(line);
        Tokens tokens;
        for (std::string w; words >> w;) tokens.push_back(w);
        if (!tokens.empty()) out.push_back(encode(tokens, vocab));
    }
    return out;
}

std::string format_prompts(const std::vector<StorySample>& samples, const Vocabulary& vocab)
{
    std::string out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (i) out += "---\n";
        out += detokenize(decode(samples[i].prompt, vocab)) + "\n";
    }
    return out;
}

void run_generate(const GenerateArgs& a)
{
    std::optional<LoadedModel> lm;
    std::optional<LoadedModel> story;
    std::optional<Vocabulary> lm_vocab;
    std::optional<Vocabulary> prompt_vocab;
    std::optional<Vocabulary> story_vocab;

    if (a.mode != "story") {
        lm = required_model(a.lm, "--lm");
        if (lm->mode != ModelMode::lm) throw ConfigError(a.lm + " is not a prompt language model");
        const auto& path = a.lm_vocab.empty() ? a.prompt_vocab : a.lm_vocab;
        lm_vocab = required_vocab(path, "--lm-vocab");
        check_vocab(lm->checkpoint, "vocab.prompt", *lm_vocab, path);
    }
    if (a.mode != "prompt") {
        story = required_model(a.model, "--model");
        if (story->mode != ModelMode::seq2seq) throw ConfigError(a.model + " is not a story model");
        prompt_vocab = required_vocab(a.prompt_vocab, "--prompt-vocab");
        story_vocab = required_vocab(a.story_vocab, "--story-vocab");
        check_vocab(story->checkpoint, "vocab.prompt", *prompt_vocab, a.prompt_vocab);
        check_vocab(story->checkpoint, "vocab.story", *story_vocab, a.story_vocab);
    }

    std::vector<Ids> prompts;
    std::size_t count = a.count;
    if (a.mode == "story") {
        if (a.prompts.empty()) throw UsageError("--prompts is required in story mode");
        prompts = read_prompts(a.prompts, *prompt_vocab);
        count = count == 0 ? prompts.size() : std::min(count, prompts.size());
    }

    PromptBridge bridge;
    if (a.mode == "hierarchical" && !(*lm_vocab == *prompt_vocab)) bridge = vocabulary_bridge(*lm_vocab, *prompt_vocab);

    auto sample_all = [&](const SamplerConfig& base) {
        base.validate();
        return run_jobs(count, a.workers, [&](std::size_t i) {
            SamplerConfig cfg = base;
            cfg.seed = job_seed(base.seed, i);
            if (a.mode == "hierarchical") return hierarchical_generate(*lm->model, *story->model, cfg, bridge);
            StorySample s;
            s.seed = cfg.seed;
            if (a.mode == "prompt") {
                SamplerConfig pc = cfg;
                pc.min_tokens = std::max<std::size_t>(pc.min_tokens, 1);
                auto rng = stage_rng(cfg.seed, Stage::prompt);
                const auto p = generate_prompt(*lm->model, pc, rng);
                s.prompt = p.tokens;
                s.prompt_truncated = p.truncated;
            } else {
                s.prompt = prompts[i];
                auto rng = stage_rng(cfg.seed, Stage::story);
                const auto st = generate_story(s.prompt, *story->model, cfg, rng);
                s.story = st.tokens;
                s.story_truncated = st.truncated;
            }
            return s;
        });
    };

    auto render = [&](const std::vector<StorySample>& samples) {
        const auto& pv = a.mode == "prompt" ? *lm_vocab : *prompt_vocab;
        const auto& sv = a.mode == "prompt" ? *lm_vocab : *story_vocab;
        if (a.format == "records") return format_records(samples, pv, sv);
        return a.mode == "prompt" ? format_prompts(samples, pv) : format_text_blocks(samples, pv, sv);
    };

    if (a.temperatures.empty()) {
        write_text(a.out, render(sample_all(a.sampler)));
        return;
    }
    std::string combined;
    for (const auto& item : split_list(a.temperatures)) {
        SamplerConfig cfg = a.sampler;
        cfg.temperature = parse_double(item, "temperature");
        const auto text = render(sample_all(cfg));
        if (a.out.empty() || a.out == "-") {
            combined += "# temperature = " + item + "\n" + text;
        } else {
            write_text(a.out + ".t" + item, text);
        }
    }
    if (!combined.empty()) write_text("", combined);
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
    std::string task;
    std::string model;
    std::string data;
    std::string split = "test";
    std::string valid_split = "valid";
    std::string prompt_vocab;
    std::string story_vocab;
    std::size_t n_stories = 1000;
    std::uint64_t seed = 1;
    std::size_t workers = 1;
    std::string index_split = "train";
    std::string index;
    std::string save_index;
    std::size_t k = 10;
    std::string retrieved;
    std::string generated;
    std::string corpus_split = "train";
    bool subsequence = false;
    std::string inputs;
    std::size_t n_per_model = 105;
    std::string task_out;
    std::string key_out;
    std::string out;
};

void add_evaluate(CLI::App& app, EvaluateArgs& a)
{
    auto* sub = app.add_subcommand("evaluate", "Perplexity, prompt ranking, retrieval, copy overlap, reports");
    sub->add_option("--config", "key = value file");
    sub->add_option("--task", a.task, "perplexity, rank, knn, copy, report or pairing-export")
        ->required()
        ->check(CLI::IsMember({"perplexity", "rank", "knn", "copy", "report", "pairing-export"}));
    sub->add_option("--model", a.model, "Model checkpoint");
    sub->add_option("--data", a.data, "Corpus directory");
    sub->add_option("--split", a.split, "Evaluation split");
    sub->add_option("--valid-split", a.valid_split, "Validation split (report; empty skips)");
    sub->add_option("--prompt-vocab", a.prompt_vocab, "Prompt vocabulary");
    sub->add_option("--story-vocab", a.story_vocab, "Story vocabulary");
    sub->add_option("--n-stories", a.n_stories, "Stories ranked");
    sub->add_option("--seed", a.seed, "Seed for distractors and pairing triples");
    sub->add_option("--workers", a.workers, "Parallel scorers");
    sub->add_option("--index-split", a.index_split, "Split indexed for retrieval");
    sub->add_option("--index", a.index, "Load a saved retrieval index instead of building one");
    sub->add_option("--save-index", a.save_index, "Write the retrieval index here");
    sub->add_option("--k", a.k, "Neighbours per query");
    sub->add_option("--retrieved", a.retrieved, "Write the top neighbour of every query here");
    sub->add_option("--generated", a.generated, "Generated records (generate --format records)");
    sub->add_option("--corpus-split", a.corpus_split, "Split searched for copied runs");
    sub->add_flag("--subsequence", a.subsequence, "Longest common subsequence instead of substring");
    sub->add_option("--inputs", a.inputs, "model=records,... for pairing-export");
    sub->add_option("--n-per-model", a.n_per_model, "Stories per model in the pairing task");
    sub->add_option("--task-out", a.task_out, "Pairing task file");
    sub->add_option("--key-out", a.key_out, "Pairing answer key file");
    sub->add_option("--out", a.out, "Report file (stdout when empty)");
}

struct EvalContext {
    LoadedModel model;
    Vocabulary prompt_vocab;
    Vocabulary story_vocab;
};

EvalContext load_eval_model(const EvaluateArgs& a)
{
    auto model = required_model(a.model, "--model");
    const bool lm = model.mode == ModelMode::lm;
    auto pv = required_vocab(a.prompt_vocab, "--prompt-vocab");
    auto sv = lm ? pv : required_vocab(a.story_vocab, "--story-vocab");
    check_vocab(model.checkpoint, "vocab.prompt", pv, a.prompt_vocab);
    check_vocab(model.checkpoint, "vocab.story", sv, lm ? a.prompt_vocab : a.story_vocab);
    return {std::move(model), std::move(pv), std::move(sv)};
}

std::vector<Example> split_examples(const EvaluateArgs& a, const EvalContext& ctx, const std::string& split)
{
    if (a.data.empty()) throw UsageError("--data is required");
    return make_examples(read_split(a.data, split), ctx.model.mode, ctx.prompt_vocab, ctx.story_vocab);
}

void eval_perplexity(const EvaluateArgs& a, const EvalContext& ctx, const std::string& split, EvalReport& report)
{
    const auto total = corpus_nll(*ctx.model.model, split_examples(a, ctx, split));
    report.set("perplexity", split, std::exp(total.mean()));
    report.set("perplexity", split + "_tokens", static_cast<double>(total.tokens));
}

void eval_rank(const EvaluateArgs& a, const EvalContext& ctx, EvalReport& report)
{
    if (ctx.model.mode != ModelMode::seq2seq) throw ConfigError("prompt ranking needs a seq2seq or fusion model");
    const auto result =
        prompt_ranking(model_scorer(*ctx.model.model), split_examples(a, ctx, a.split), a.seed, a.n_stories, a.workers);
    double mean_rank = 0.0;
    for (auto r : result.ranks) mean_rank += static_cast<double>(r);
    if (!result.ranks.empty()) mean_rank /= static_cast<double>(result.ranks.size());
    report.set("rank", "split", a.split);
    report.set("rank", "stories", static_cast<double>(result.ranks.size()));
    report.set("rank", "accuracy", result.accuracy);
    report.set("rank", "mean_rank", mean_rank);
}

void eval_knn(const EvaluateArgs& a, EvalReport& report)
{
    if (a.data.empty()) throw UsageError("--data is required");
    TfidfIndex index;
    if (!a.index.empty()) {
        index = TfidfIndex::load(a.index);
    } else {
        std::vector<Tokens> prompts;
        std::vector<Tokens> stories;
        for (auto& p : read_split(a.data, a.index_split)) {
            prompts.push_back(std::move(p.prompt));
            stories.push_back(std::move(p.story));
        }
        index = TfidfIndex(prompts, stories);
    }
    if (!a.save_index.empty()) index.save(a.save_index);

    std::vector<Tokens> queries;
    for (auto& p : read_split(a.data, a.split)) queries.push_back(std::move(p.prompt));
    report.set("knn", "split", a.split);
    report.set("knn", "queries", static_cast<double>(queries.size()));
    report.set_list("knn", "mean_similarity", knn_curve(index, queries, a.k));

    if (!a.retrieved.empty()) {
        std::string text;
        for (std::size_t i = 0; i < queries.size(); ++i) {
            const auto top = knn_retrieve(index, queries[i], 1);
            if (top.empty()) continue;
            text += std::to_string(i) + '\t' + format_double(top[0].similarity) + '\t';
            for (std::size_t j = 0; j < top[0].story.size(); ++j) text += (j ? " " : "") + top[0].story[j];
            text += '\n';
        }
        write_text(a.retrieved, text);
    }
}

void eval_copy(const EvaluateArgs& a, EvalReport& report)
{
    if (a.generated.empty()) throw UsageError("--generated is required");
    if (a.data.empty()) throw UsageError("--data is required");
    const auto story_vocab = required_vocab(a.story_vocab, "--story-vocab");
    const auto prompt_vocab = a.prompt_vocab.empty() ? story_vocab : Vocabulary::load(a.prompt_vocab);
    std::vector<Ids> corpus;
    for (const auto& p : read_split(a.data, a.corpus_split)) corpus.push_back(encode(p.story, story_vocab));
    std::vector<Ids> stories;
    for (auto& s : parse_records(read_text(a.generated), prompt_vocab, story_vocab)) stories.push_back(std::move(s.story));

    CopyStats stats;
    if (a.subsequence) {
        for (const auto& s : stories) {
            stats.mean_overlap += static_cast<double>(copy_overlap_subsequence(s, corpus));
            stats.mean_length += static_cast<double>(s.size());
        }
        stats.stories = stories.size();
        if (!stories.empty()) {
            stats.mean_overlap /= static_cast<double>(stories.size());
            stats.mean_length /= static_cast<double>(stories.size());
        }
    } else {
        stats = copy_stats(stories, CopyIndex(corpus));
    }
    report.set("copy", "measure", a.subsequence ? "subsequence" : "substring");
    report.set("copy", "stories", static_cast<double>(stats.stories));
    report.set("copy", "mean_overlap", stats.mean_overlap);
    report.set("copy", "mean_length", stats.mean_length);
}

void eval_pairing(const EvaluateArgs& a)
{
    if (a.inputs.empty()) throw UsageError("--inputs is required");
    if (a.task_out.empty() || a.key_out.empty()) throw UsageError("--task-out and --key-out are required");
    std::vector<PairingStory> stories;
    for (const auto& item : split_list(a.inputs)) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0) throw UsageError("--inputs entries look like name=file, got " + item);
        const auto name = item.substr(0, eq);
        std::istringstream in(read_text(item.substr(eq + 1)));
        for (std::string line; std::getline(in, line);) {
            if (line.empty()) continue;
            const auto fields = [&] {
                std::vector<std::string> f;
                std::stringstream ls(line);
                for (std::string x; std::getline(ls, x, '\t');) f.push_back(x);
                return f;
            }();
            if (fields.size() != 3) throw DataError(item.substr(eq + 1) + ": record lines need three fields");
            auto words = [](const std::string& text) {
                std::istringstream ws(text);
                Tokens t;
                for (std::string w; ws >> w;) t.push_back(w);
                return detokenize(t);
            };
            stories.push_back({name, words(fields[1]), words(fields[2])});
        }
    }
    const auto exported = pairing_task_export(stories, a.n_per_model, a.seed);
    write_text(a.task_out, exported.task);
    write_text(a.key_out, exported.key);
    std::cout << "triples = " << exported.triples.size() << "\n";
}

void run_evaluate(const EvaluateArgs& a)
{
    if (a.task == "pairing-export") return eval_pairing(a);
    EvalReport report;
    if (a.task == "knn") {
        eval_knn(a, report);
    } else if (a.task == "copy") {
        eval_copy(a, report);
    } else {
        const auto ctx = load_eval_model(a);
        if (a.task == "perplexity") {
            eval_perplexity(a, ctx, a.split, report);
        } else if (a.task == "rank") {
            eval_rank(a, ctx, report);
        } else {
            if (!a.valid_split.empty()) eval_perplexity(a, ctx, a.valid_split, report);
            eval_perplexity(a, ctx, a.split, report);
            if (ctx.model.mode == ModelMode::seq2seq) eval_rank(a, ctx, report);
            eval_knn(a, report);
            if (!a.generated.empty()) eval_copy(a, report);
        }
    }
    write_text(a.out, report.to_text());
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Hierarchical story generation: data, training, sampling and evaluation"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    SynthArgs synth;
    PreprocessArgs preprocess;
    VocabArgs vocab;
    StatsArgs stats;
    TrainArgs train;
    GenerateArgs generate;
    EvaluateArgs evaluate;
    add_synth(app, synth);
    add_preprocess(app, preprocess);
    add_build_vocab(app, vocab);
    add_stats(app, stats);
    add_train(app, train);
    add_generate(app, generate);
    add_evaluate(app, evaluate);

    try {
        std::vector<std::string> args(argv + 1, argv + argc);
        args = cli::expand_config(app, std::move(args));
        std::reverse(args.begin(), args.end());
        try {
            app.parse(args);
        } catch (const CLI::ParseError& e) {
            const int code = app.exit(e);
            return code == 0 ? 0 : 1;
        }

        const auto* sub = app.get_subcommands().front();
        const auto& name = sub->get_name();
        if (name != "train") log_config(*sub);
        if (name == "synth") run_synth(synth);
        if (name == "preprocess") run_preprocess(preprocess);
        if (name == "build-vocab") run_build_vocab(vocab);
        if (name == "stats") run_stats(stats);
        if (name == "train") run_train(*sub, train);
        if (name == "generate") run_generate(generate);
        if (name == "evaluate") run_evaluate(evaluate);
        return 0;
    } catch (...) {
        return cli::report_failure();
    }
}
