// asc: corpus building, training, intervention sweeps, bound checks and generation.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <malloc.h>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "asc/bounds.hpp"
#include "asc/checkpoint.hpp"
#include "asc/corpus.hpp"
#include "asc/errors.hpp"
#include "asc/harness.hpp"
#include "asc/io.hpp"
#include "asc/manifest.hpp"
#include "asc/metrics.hpp"
#include "asc/parallel.hpp"
#include "asc/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kRuntime = 2, kViolation = 3 };

// Merges a --config JSON file (flat {flag: value}, or a run manifest whose "config" object is
// used) into the argument list. Flags given on the command line win.
std::vector<std::string> expand_config(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::string path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    }
    if (path.empty()) return args;
    json j;
    try {
        j = json::parse(asc::read_text(path));
    } catch (const json::exception& e) {
        throw CLI::ConversionError(path + " is not valid JSON: " + e.what());
    }
    if (j.contains("command") && j.contains("config")) j = j["config"];
    if (!j.is_object()) throw CLI::ConversionError(path + " must hold a JSON object");
    auto given = [&](const std::string& flag) {
        for (const auto& a : args)
            if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
        return false;
    };
    for (const auto& [key, value] : j.items()) {
        const std::string flag = "--" + key;
        if (given(flag)) continue;
        if (value.is_boolean()) {
            if (value.get<bool>()) args.push_back(flag);
            continue;
        }
        const json list = value.is_array() ? value : json::array({value});
        for (const auto& v : list) {
            args.push_back(flag);
            args.push_back(v.is_string() ? v.get<std::string>() : v.dump());
        }
    }
    return args;
}

// Every option's effective value, keyed by long flag name.
json resolved_config(const CLI::App* app) {
    json j = json::object();
    for (const CLI::Option* opt : app->get_options()) {
        if (opt->get_lnames().empty()) continue;
        const std::string& name = opt->get_lnames().front();
        if (name == "help" || name == "config") continue;
        std::string value;
        if (opt->count() > 0) {
            const auto res = opt->reduced_results();
            for (std::size_t i = 0; i < res.size(); ++i) value += (i ? "," : "") + res[i];
        } else {
            value = opt->get_default_str();
        }
        if (value.empty()) continue;
        const json parsed = json::parse(value, nullptr, false);
        j[name] = parsed.is_number() || parsed.is_boolean() ? parsed : json(value);
    }
    return j;
}

std::vector<std::uint32_t> parse_id_list(const std::string& text, const char* what) {
    std::vector<std::uint32_t> out;
    if (text.empty()) return out;
    std::size_t pos = 0;
    while (true) {
        const std::size_t start = pos;
        while (pos < text.size() && text[pos] == ' ') ++pos;
        std::size_t digits = 0;
        std::uint64_t v = 0;
        while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') {
            v = v * 10 + static_cast<std::uint64_t>(text[pos] - '0');
            if (v > 0xffffffffULL) throw asc::InputError(std::string(what) + ": value too large at offset " + std::to_string(start));
            ++pos;
            ++digits;
        }
        while (pos < text.size() && text[pos] == ' ') ++pos;
        if (digits == 0)
            throw asc::InputError(std::string(what) + ": expected an integer at offset " + std::to_string(pos));
        out.push_back(static_cast<std::uint32_t>(v));
        if (pos == text.size()) break;
        if (text[pos] != ',')
            throw asc::InputError(std::string(what) + ": unexpected '" + text[pos] + "' at offset " + std::to_string(pos));
        ++pos;
    }
    return out;
}

asc::InterventionSpec parse_intervention(const std::string& text) {
    asc::InterventionSpec s;
    for (auto l : parse_id_list(text, "layer list")) s.short_circuited_layers.insert(l);
    return s;
}

std::string join_ids(const asc::Tokens& t) {
    std::string s;
    for (std::size_t i = 0; i < t.size(); ++i) s += (i ? "," : "") + std::to_string(t[i]);
    return s;
}

std::size_t resolve_workers(std::size_t flag) { return flag > 0 ? flag : asc::default_workers(); }

// Tracks inputs/outputs of one command and writes the manifest at the end.
struct ManifestScope {
    asc::RunManifest m;
    fs::path path;

    ManifestScope(const CLI::App* app, std::uint64_t seed, fs::path manifest_path) : path(std::move(manifest_path)) {
        m.command = app->get_name();
        m.config_json = resolved_config(app).dump();
        m.root_seed = seed;
        m.started_at = asc::utc_timestamp();
    }
    void input(const fs::path& p) { m.input_digests[p.string()] = asc::path_digest(p); }
    void output(const fs::path& p) { m.output_digests[p.string()] = asc::path_digest(p); }
    void write(int code) {
        m.exit_code = code;
        m.finished_at = asc::utc_timestamp();
        asc::write_text(path, m.to_json());
    }
};

// ---------------------------------------------------------------------------------------------

struct CorpusArgs {
    std::string preset = "pythia-style";
    std::size_t vocab = 512;
    std::size_t canaries = 64;
    std::optional<std::size_t> controls;
    std::size_t reps = 200;
    std::size_t background_tokens = 1'000'000;
    std::size_t heldout_tokens = 20'000;
    std::string background = "markov";
    double repeat_prob = asc::BackgroundSpec{}.repeat_prob;
    std::uint64_t seed = 1;
    std::string out;
};

int cmd_corpus(const CLI::App* app, const CorpusArgs& a) {
    asc::CorpusSpec spec = a.preset == "neo-style" ? asc::CorpusSpec::neo_style() : asc::CorpusSpec::pythia_style();
    spec.vocab_size = a.vocab;
    spec.n_canaries = a.canaries;
    spec.n_controls = a.controls.value_or(a.canaries);
    spec.repetitions = a.reps;
    spec.background_tokens = a.background_tokens;
    spec.heldout_tokens = a.heldout_tokens;
    spec.background.kind = a.background == "uniform" ? asc::BackgroundKind::uniform_random
                                                     : asc::BackgroundKind::markov_chain;
    spec.background.repeat_prob = a.repeat_prob;
    spec.seed = a.seed;
    spec.background.seed = a.seed;
    const fs::path out(a.out);
    ManifestScope scope(app, a.seed, out / "manifest.json");
    const asc::Corpus corpus = asc::build_corpus(spec);
    asc::save_corpus(out, corpus);
    json meta{{"vocab_size", spec.vocab_size},     {"prefix_len", spec.prefix_len},
              {"suffix_len", spec.suffix_len},     {"n_canaries", spec.n_canaries},
              {"n_controls", spec.n_controls},     {"repetitions", spec.repetitions},
              {"stream_tokens", corpus.stream.size()}, {"heldout_tokens", corpus.heldout.size()}};
    asc::write_text(out / "corpus.json", meta.dump(2));
    for (const char* f : {"tokens.bin", "heldout.bin", "canaries.json", "controls.json", "corpus.json"})
        scope.output(out / f);
    scope.write(kOk);
    std::cout << "corpus: " << corpus.stream.size() << " tokens, " << corpus.canaries.size() << " canaries, "
              << corpus.controls.size() << " controls -> " << out.string() << '\n';
    return kOk;
}

struct TrainArgs {
    std::string corpus;
    std::size_t vocab = 0;
    std::size_t layers = 8;
    std::size_t heads = 4;
    std::size_t dmodel = 128;
    std::size_t dff = 512;
    std::size_t max_seq_len = 64;
    std::size_t steps = 1000;
    double lr = 3e-4;
    std::size_t batch = 16;
    std::size_t seq_len = 64;
    std::size_t warmup = 0;
    double clip = 1.0;
    std::size_t eval_every = 100;
    std::uint64_t seed = 1;
    std::string out;
};

std::string flag_for(const std::string& field) {
    static const std::map<std::string, std::string> names{
        {"n_layers", "--layers"},   {"n_heads", "--heads"},       {"d_model", "--dmodel"},
        {"d_ff", "--dff"},          {"vocab_size", "--vocab"},    {"max_seq_len", "--max-seq-len"},
        {"learning_rate", "--lr"},  {"batch_size", "--batch"},    {"seq_len", "--seq-len"},
        {"steps", "--steps"},       {"grad_clip_norm", "--clip"}, {"warmup_steps", "--warmup"},
        {"layer_norm_eps", "layer_norm_eps"}};
    const auto it = names.find(field);
    return it == names.end() ? field : it->second;
}

int cmd_train(const CLI::App* app, const TrainArgs& a) {
    const fs::path corpus_dir(a.corpus), out(a.out);
    asc::ModelConfig cfg;
    cfg.n_layers = a.layers;
    cfg.n_heads = a.heads;
    cfg.d_model = a.dmodel;
    cfg.d_ff = a.dff;
    cfg.max_seq_len = a.max_seq_len;
    cfg.vocab_size = a.vocab;
    if (cfg.vocab_size == 0) {
        const json meta = json::parse(asc::read_text(corpus_dir / "corpus.json"));
        cfg.vocab_size = meta.at("vocab_size").get<std::size_t>();
    }
    asc::TrainConfig t;
    t.learning_rate = a.lr;
    t.steps = a.steps;
    t.batch_size = a.batch;
    t.seq_len = a.seq_len;
    t.warmup_steps = a.warmup;
    t.grad_clip_norm = a.clip;
    t.eval_every = a.eval_every;
    t.rng_seed = a.seed;
    cfg.validate();
    t.validate(cfg);

    ManifestScope scope(app, a.seed, fs::path(out.string() + ".manifest.json"));
    scope.input(corpus_dir);
    const asc::Corpus corpus = asc::load_corpus(corpus_dir);
    const auto result = asc::train(cfg, t, corpus, [](const asc::LossRecord& r) {
        std::cerr << "step " << r.step << " train " << r.train_loss << " canary " << r.canary_loss << " heldout "
                  << r.heldout_loss << '\n';
    });
    asc::save_checkpoint(out, cfg, result.weights);
    const fs::path loss_csv(out.string() + ".loss.csv");
    asc::write_text(loss_csv, asc::loss_history_csv(result.history));
    scope.output(out);
    scope.output(loss_csv);
    scope.write(kOk);
    std::cout << "checkpoint -> " << out.string() << '\n';
    return kOk;
}

struct SweepArgs {
    std::string ckpt;
    std::string corpus;
    std::string mode = "per-layer";
    std::string layers;
    std::string out;
    std::size_t probes = 256;
    std::size_t span = 16;
    std::size_t ppl_window = 64;
    std::size_t ppl_stride = 64;
    bool no_induction = false;
    std::uint64_t seed = 1;
    std::size_t workers = 0;
};

int cmd_sweep(const CLI::App* app, const SweepArgs& a) {
    if (!a.layers.empty() && a.mode != "custom") throw CLI::ValidationError("--layers", "only valid with --mode custom");
    if (a.layers.empty() && a.mode == "custom") throw CLI::ValidationError("--layers", "required with --mode custom");
    const fs::path out(a.out);
    ManifestScope scope(app, a.seed, out / "manifest.json");
    asc::SweepPlan plan;
    plan.checkpoint = a.ckpt;
    plan.corpus_dir = a.corpus;
    scope.input(plan.checkpoint);
    scope.input(plan.corpus_dir);
    const asc::Checkpoint ck = asc::load_checkpoint(plan.checkpoint);
    const std::size_t L = ck.config.n_layers;
    if (a.mode == "per-layer") {
        plan.interventions = asc::per_layer_interventions(L);
    } else if (a.mode == "quartile") {
        plan.interventions = asc::quartile_interventions(L);
    } else if (a.mode == "all") {
        plan.interventions = asc::default_interventions(L);
    } else {
        // Groups are separated by ';'; "6,7" short-circuits both layers in one intervention.
        std::stringstream ss(a.layers);
        std::string group;
        while (std::getline(ss, group, ';')) plan.interventions.push_back(parse_intervention(group));
    }
    plan.options.ppl_window = a.ppl_window;
    plan.options.ppl_stride = a.ppl_stride;
    plan.options.induction.n_probes = a.probes;
    plan.options.induction.span = a.span;
    plan.options.induction.seed = a.seed;
    plan.options.tasks.induction = !a.no_induction;
    plan.options.workers = resolve_workers(a.workers);
    plan.output_dir = out;
    const asc::SweepResult r = asc::run_sweep(plan);
    asc::write_text(out / "relative_drops.csv", asc::relative_drop_table(r));
    for (const char* f : {"sweep.json", "sweep.csv", "relative_drops.csv"}) scope.output(out / f);
    scope.write(kOk);
    std::cout << asc::sweep_to_csv(r);
    return kOk;
}

struct CompareArgs {
    std::vector<std::string> sweeps;
    std::string out;
};

int cmd_compare(const CLI::App* app, const CompareArgs& a) {
    const fs::path out(a.out);
    ManifestScope scope(app, 0, out / "manifest.json");
    std::vector<asc::ScaleEntry> entries;
    for (const auto& s : a.sweeps) {
        const auto eq = s.find('=');
        const std::string label = eq == std::string::npos ? fs::path(s).filename().string() : s.substr(0, eq);
        const fs::path dir = eq == std::string::npos ? fs::path(s) : fs::path(s.substr(eq + 1));
        scope.input(dir / "sweep.json");
        entries.push_back({label, asc::sweep_from_json(asc::read_text(dir / "sweep.json"))});
    }
    const auto cmp = asc::scale_compare(entries);
    asc::write_text(out / "scale_compare.csv", cmp.csv);
    json gaps = json::array();
    for (const auto& g : cmp.gaps)
        gaps.push_back({{"scale", g.label},
                        {"n_layers", g.n_layers},
                        {"baseline_em", g.baseline_em},
                        {"min_last_quartile_em", std::isfinite(g.min_last_quartile_em) ? json(g.min_last_quartile_em) : json(nullptr)},
                        {"gap", std::isfinite(g.gap) ? json(g.gap) : json(nullptr)}});
    asc::write_text(out / "memorization_gaps.json", gaps.dump(2));
    scope.output(out / "scale_compare.csv");
    scope.output(out / "memorization_gaps.json");
    scope.write(kOk);
    std::cout << gaps.dump(2) << '\n';
    return kOk;
}

struct EvalArgs {
    std::string ckpt;
    std::string corpus;
    std::string short_circuit;
    std::size_t ppl_window = 64;
    std::size_t ppl_stride = 64;
    std::size_t workers = 0;
    std::string out;
};

int cmd_eval(const CLI::App* app, const EvalArgs& a) {
    const fs::path out(a.out), corpus_dir(a.corpus);
    ManifestScope scope(app, 0, fs::path(out.string() + ".manifest.json"));
    scope.input(a.ckpt);
    scope.input(corpus_dir);
    const asc::Checkpoint ck = asc::load_checkpoint(a.ckpt);
    asc::MetricsOptions mo;
    mo.ppl_window = a.ppl_window;
    mo.ppl_stride = a.ppl_stride;
    mo.workers = resolve_workers(a.workers);
    const auto r = asc::evaluate_metrics(ck.weights, ck.config, asc::load_canaries(corpus_dir / "canaries.json"),
                                         asc::load_canaries(corpus_dir / "controls.json"),
                                         asc::load_tokens(corpus_dir / "heldout.bin"),
                                         parse_intervention(a.short_circuit), mo);
    asc::write_text(out, asc::metrics_to_json(r));
    scope.output(out);
    scope.write(kOk);
    std::cout << "em_rate " << r.em_rate << " mean_ta " << r.mean_ta << " heldout_ppl " << r.heldout_ppl << '\n';
    return kOk;
}

struct BoundsArgs {
    std::size_t trials = 1000;
    std::size_t max_n = 8;
    std::size_t max_d = 16;
    double max_w_norm = 3.0;
    std::string activation = "identity";
    std::uint64_t seed = 1;
    std::size_t workers = 0;
    std::string out;
};

int cmd_bounds(const CLI::App* app, const BoundsArgs& a) {
    const fs::path out(a.out);
    ManifestScope scope(app, a.seed, fs::path(out.string() + ".manifest.json"));
    asc::TrialDims dims;
    dims.max_n = a.max_n;
    dims.max_d = a.max_d;
    dims.max_w_norm = a.max_w_norm;
    dims.activation = a.activation == "gelu" ? asc::Activation::gelu : asc::Activation::identity;
    const auto run = asc::run_bound_trials(a.trials, dims, a.seed, resolve_workers(a.workers));
    asc::write_text(out, asc::bounds_jsonl(run));
    const fs::path gap_path(out.string() + ".depth_gap.json");
    asc::write_text(gap_path, asc::depth_gap_json(asc::depth_gap_from(run)));
    scope.output(out);
    scope.output(gap_path);
    const bool violated = run.theorem1_violations > 0 || run.theorem2_violations > 0;
    const int code = violated ? kViolation : kOk;
    scope.write(code);
    std::cout << "trials " << run.trials.size() << " single-block violations " << run.theorem1_violations
              << " two-block violations " << run.theorem2_violations << '\n';
    return code;
}

struct GenerateArgs {
    std::string ckpt;
    std::string prefix;
    std::size_t n = 32;
    std::string short_circuit;
    std::optional<double> temperature;
    std::uint64_t seed = 1;
    bool compare = false;
    std::string out;
};

int cmd_generate(const CLI::App* app, const GenerateArgs& a) {
    const asc::Tokens prefix = parse_id_list(a.prefix, "prefix");
    const asc::InterventionSpec spec = parse_intervention(a.short_circuit);
    std::optional<ManifestScope> scope;
    if (!a.out.empty()) {
        scope.emplace(app, a.seed, fs::path(a.out + ".manifest.json"));
        scope->input(a.ckpt);
    }
    const asc::Checkpoint ck = asc::load_checkpoint(a.ckpt);
    spec.validate(ck.config.n_layers);
    auto run = [&](const asc::InterventionSpec& s) {
        if (a.n == 0) return asc::Tokens{};
        return a.temperature ? asc::sample_generate(ck.weights, ck.config, prefix, a.n, s, *a.temperature, a.seed)
                             : asc::greedy_generate(ck.weights, ck.config, prefix, a.n, s);
    };
    std::string text;
    if (a.compare) {
        text += "none: " + join_ids(run(asc::InterventionSpec::vanilla())) + '\n';
        text += spec.label() + ": " + join_ids(run(spec)) + '\n';
    } else {
        const auto ids = run(spec);
        if (!ids.empty()) text = join_ids(ids) + '\n';
    }
    std::cout << text;
    if (scope) {
        asc::write_text(a.out, text);
        scope->output(a.out);
        scope->write(kOk);
    }
    return kOk;
}

void common_flags(CLI::App* sub, std::size_t* workers) {
    sub->add_option("--config", "JSON file of flag values or a run manifest (command-line flags win)")->type_name("PATH");
    if (workers) {
        sub->add_option("--workers", *workers, "Worker threads (0: ASC_WORKERS or all cores)")
            ->envname("ASC_WORKERS")
            ->capture_default_str();
    }
}

}  // namespace

int main(int argc, char** argv) {
    // Keep freed activation buffers in the heap instead of unmapping them; fresh pages are
    // expensive and training reallocates the same sizes every step.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    CLI::App app{"Attention short-circuiting experiments on a toy transformer"};
    app.set_version_flag("--version", asc::kToolVersion);
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    CorpusArgs corpus;
    auto* c = app.add_subcommand("corpus", "Build a synthetic corpus with planted canaries");
    c->add_option("--preset", corpus.preset, "Canary lengths: pythia-style (32,32) or neo-style (150,50)")
        ->check(CLI::IsMember({"pythia-style", "neo-style"}));
    c->add_option("--vocab", corpus.vocab, "Vocabulary size");
    c->add_option("--canaries", corpus.canaries, "Planted canaries");
    c->add_option("--controls", corpus.controls, "Negative-control canaries (default: same as --canaries)");
    c->add_option("--reps", corpus.reps, "Repetitions of each planted canary");
    c->add_option("--background-tokens", corpus.background_tokens, "Background stream length");
    c->add_option("--heldout-tokens", corpus.heldout_tokens, "Held-out stream length");
    c->add_option("--background", corpus.background, "Background process")->check(CLI::IsMember({"markov", "uniform"}));
    c->add_option("--repeat-prob", corpus.repeat_prob, "Per-position probability of a repeated random span")
        ->check(CLI::Range(0.0, 0.999));
    c->add_option("--seed", corpus.seed, "Root seed");
    c->add_option("--out", corpus.out, "Output directory")->required();
    common_flags(c, nullptr);

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train a model on a corpus directory");
    t->add_option("--corpus", train.corpus, "Corpus directory")->required();
    t->add_option("--vocab", train.vocab, "Vocabulary size (0: read from the corpus)");
    t->add_option("--layers", train.layers, "Transformer blocks");
    t->add_option("--heads", train.heads, "Attention heads per block");
    t->add_option("--dmodel", train.dmodel, "Residual width");
    t->add_option("--dff", train.dff, "FFN hidden width");
    t->add_option("--max-seq-len", train.max_seq_len, "Context length");
    t->add_option("--steps", train.steps, "Optimizer steps");
    t->add_option("--lr", train.lr, "Adam learning rate");
    t->add_option("--batch", train.batch, "Windows per step");
    t->add_option("--seq-len", train.seq_len, "Input tokens per window");
    t->add_option("--warmup", train.warmup, "Linear warmup steps");
    t->add_option("--clip", train.clip, "Global gradient-norm clip (0 disables)");
    t->add_option("--eval-every", train.eval_every, "Loss-history cadence in steps");
    t->add_option("--seed", train.seed, "Root seed");
    t->add_option("--out", train.out, "Checkpoint path")->required();
    common_flags(t, nullptr);

    SweepArgs sweep;
    auto* s = app.add_subcommand("sweep", "Evaluate short-circuit interventions against the unmodified model");
    s->add_option("--ckpt", sweep.ckpt, "Checkpoint")->required();
    s->add_option("--corpus", sweep.corpus, "Corpus directory")->required();
    s->add_option("--mode", sweep.mode, "per-layer, quartile, all (both) or custom")
        ->check(CLI::IsMember({"per-layer", "quartile", "all", "custom"}));
    s->add_option("--layers", sweep.layers, "Custom interventions: layer lists separated by ';', e.g. \"0;6,7\"");
    s->add_option("--out", sweep.out, "Output directory")->required();
    s->add_option("--probes", sweep.probes, "Induction probes");
    s->add_option("--span", sweep.span, "Distinct tokens per induction probe");
    s->add_option("--ppl-window", sweep.ppl_window, "Perplexity window");
    s->add_option("--ppl-stride", sweep.ppl_stride, "Perplexity stride");
    s->add_flag("--no-induction", sweep.no_induction, "Skip the induction task");
    s->add_option("--seed", sweep.seed, "Probe seed");
    common_flags(s, &sweep.workers);

    CompareArgs compare;
    auto* sc = app.add_subcommand("scale-compare", "Merge per-layer sweeps of different model sizes");
    sc->add_option("--sweep", compare.sweeps, "LABEL=DIR of a sweep output (repeatable)")->required();
    sc->add_option("--out", compare.out, "Output directory")->required();
    common_flags(sc, nullptr);

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "Memorization and perplexity metrics for one intervention");
    e->add_option("--ckpt", eval.ckpt, "Checkpoint")->required();
    e->add_option("--corpus", eval.corpus, "Corpus directory")->required();
    e->add_option("--short-circuit", eval.short_circuit, "Comma-separated layers (empty: vanilla)");
    e->add_option("--ppl-window", eval.ppl_window, "Perplexity window");
    e->add_option("--ppl-stride", eval.ppl_stride, "Perplexity stride");
    e->add_option("--out", eval.out, "Metrics JSON path")->required();
    common_flags(e, &eval.workers);

    BoundsArgs bounds;
    auto* b = app.add_subcommand("bounds", "Randomized checks of the identity-attention output bounds");
    b->add_option("--trials", bounds.trials, "Random trials");
    b->add_option("--max-n", bounds.max_n, "Maximum sequence length");
    b->add_option("--max-d", bounds.max_d, "Maximum width");
    b->add_option("--max-w-norm", bounds.max_w_norm, "Maximum spectral norm of W");
    b->add_option("--activation", bounds.activation, "FFN activation")->check(CLI::IsMember({"identity", "gelu"}));
    b->add_option("--seed", bounds.seed, "Root seed");
    b->add_option("--out", bounds.out, "JSON-lines report path")->required();
    common_flags(b, &bounds.workers);

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate", "Continue a token prefix");
    g->add_option("--ckpt", gen.ckpt, "Checkpoint")->required();
    g->add_option("--prefix", gen.prefix, "Comma-separated token ids")->required();
    g->add_option("--n", gen.n, "Tokens to generate");
    g->add_option("--short-circuit", gen.short_circuit, "Comma-separated layers (empty: vanilla)");
    g->add_option("--temperature", gen.temperature, "Sample at this temperature (default: greedy)");
    g->add_option("--seed", gen.seed, "Sampling seed");
    g->add_flag("--compare", gen.compare, "Print vanilla and intervened continuations");
    g->add_option("--out", gen.out, "Also write the ids and a run manifest here");
    common_flags(g, nullptr);

    try {
        std::vector<std::string> args = expand_config(argc, argv);
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const asc::Error& err) {
        std::cerr << "config error: " << err.what() << '\n';
        return kUsage;
    } catch (const CLI::ParseError& err) {
        return app.exit(err) == 0 ? kOk : kUsage;
    }

    try {
        if (c->parsed()) return cmd_corpus(c, corpus);
        if (t->parsed()) return cmd_train(t, train);
        if (s->parsed()) return cmd_sweep(s, sweep);
        if (sc->parsed()) return cmd_compare(sc, compare);
        if (e->parsed()) return cmd_eval(e, eval);
        if (b->parsed()) return cmd_bounds(b, bounds);
        if (g->parsed()) return cmd_generate(g, gen);
    } catch (const CLI::ParseError& err) {
        std::cerr << "usage error: " << err.what() << '\n';
        return kUsage;
    } catch (const asc::ConfigError& err) {
        std::cerr << "config error: " << err.what();
        if (!err.fields().empty()) {
            std::cerr << " (flags:";
            for (const auto& f : err.fields()) std::cerr << ' ' << flag_for(f);
            std::cerr << ')';
        }
        std::cerr << '\n';
        return kUsage;
    } catch (const asc::InputError& err) {
        std::cerr << "input error: " << err.what() << '\n';
        return kUsage;
    } catch (const asc::PlanError& err) {
        std::cerr << "plan error: " << err.what() << '\n';
        return kUsage;
    } catch (const asc::LoadError& err) {
        std::cerr << "load error: " << err.what() << '\n';
        return kRuntime;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kRuntime;
    }
    return kUsage;
}
