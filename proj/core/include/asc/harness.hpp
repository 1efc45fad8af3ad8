#pragma once

// Intervention sweeps over a trained checkpoint: memorization metrics, held-out perplexity and
// an in-context copying probe for every short-circuit plan, with drops relative to the
// unmodified model.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "asc/corpus.hpp"
#include "asc/metrics.hpp"
#include "asc/model.hpp"

namespace asc {

// Quartile of layer i in an L-layer model: floor(4 i / L).
std::size_t quartile_of(std::size_t layer, std::size_t n_layers);
// Non-empty quartile groups in quartile order (fewer than four when L < 4).
std::vector<InterventionSpec> quartile_interventions(std::size_t n_layers);
std::vector<InterventionSpec> per_layer_interventions(std::size_t n_layers);
// Layers of the highest non-empty quartile (quartile 3 whenever L >= 4).
std::vector<std::size_t> last_quartile_layers(std::size_t n_layers);
// Each single layer 0..L-1 followed by the quartile groups.
std::vector<InterventionSpec> default_interventions(std::size_t n_layers);

// Induction probe: `span` distinct random tokens followed by a repeat of their first j+1 tokens
// (j uniform in [0, span-2]); the target is the token that followed the final one the first time.
struct InductionProbe {
    Tokens tokens;
    TokenId target = 0;
};

struct InductionOptions {
    std::size_t n_probes = 256;
    std::size_t span = 16;
    std::uint64_t seed = 1;
};

std::vector<InductionProbe> make_induction_probes(std::size_t vocab_size, const InductionOptions& opts);
// Fraction of probes whose greedy next token equals the target. Throws InputError for
// n_probes == 0, span < 2, span > vocab_size or probes longer than max_seq_len.
double induction_task_eval(const TransformerWeights& w, const ModelConfig& cfg, const InterventionSpec& spec,
                           const InductionOptions& opts);
double induction_accuracy(const TransformerWeights& w, const ModelConfig& cfg, const InterventionSpec& spec,
                          const std::vector<InductionProbe>& probes);

struct SweepTasks {
    bool memorization = true;
    bool heldout_ppl = true;
    bool induction = true;
};

struct SweepOptions {
    SweepTasks tasks;
    std::size_t ppl_window = 64;
    std::size_t ppl_stride = 64;
    InductionOptions induction;
    std::size_t workers = 1;
};

struct SweepPlan {
    std::filesystem::path checkpoint;
    // Directory written by save_corpus (canary manifests and held-out stream).
    std::filesystem::path corpus_dir;
    std::vector<InterventionSpec> interventions;
    SweepOptions options;
    // When non-empty, run_sweep also writes sweep.json and sweep.csv here.
    std::filesystem::path output_dir;
};

// Relative decrease (base - value) / base; NaN when base is 0. Vanilla rows of a sweep are
// assigned 0 directly.
double relative_drop(double base, double value);

struct SweepRow {
    MetricsReport metrics;
    double induction_acc = 0.0;  // NaN when the task is disabled
    double rel_drop_em = 0.0;
    double rel_drop_reasoning = 0.0;
    // Drop of 1 / heldout_ppl.
    double rel_drop_language = 0.0;
    // Any of em_rate, 1 / ppl or induction accuracy strictly above the baseline value.
    bool exceeds_baseline = false;
};

struct SweepResult {
    ModelConfig config;
    std::string corpus_digest;
    SweepRow baseline;
    std::vector<SweepRow> rows;  // plan order; the baseline is not repeated here unless planned
};

struct SweepInputs {
    ModelConfig config;
    TransformerWeights weights;
    std::vector<Canary> canaries;
    std::vector<Canary> controls;
    Tokens heldout;
    std::string corpus_digest;
};

// Throws PlanError for an empty plan or an out-of-range layer.
SweepResult evaluate_sweep(const SweepInputs& in, const std::vector<InterventionSpec>& interventions,
                           const SweepOptions& opts);
// Loads checkpoint and corpus (LoadError on missing or corrupt files), then evaluate_sweep.
SweepResult run_sweep(const SweepPlan& plan);

// Digest over the canary and control manifests and the held-out stream of a corpus directory.
std::string corpus_digest(const std::filesystem::path& corpus_dir);

std::string sweep_to_json(const SweepResult& r);
// Summary fields only: per-canary detail is not restored. Throws LoadError on malformed input.
SweepResult sweep_from_json(const std::string& text);
// intervention,em_rate,mean_ta,mean_ce_mem,mean_ce_nonmem,heldout_ppl,induction_acc,
// rel_drop_reasoning,rel_drop_language,exceeds_baseline; baseline first, undefined drops as "undefined".
std::string sweep_to_csv(const SweepResult& r);
// intervention,rel_drop_reasoning,rel_drop_language
std::string relative_drop_table(const SweepResult& r);
void write_sweep(const std::filesystem::path& dir, const SweepResult& r);

struct ScaleEntry {
    std::string label;
    SweepResult result;
};

struct ScaleGap {
    std::string label;
    std::size_t n_layers = 0;
    double baseline_em = 0.0;
    double min_last_quartile_em = 0.0;
    double gap = 0.0;  // baseline_em - min_last_quartile_em
};

struct ScaleComparison {
    std::string csv;  // scale,n_layers,d_model,layer,normalized_depth,em_rate,heldout_ppl,induction_acc,...
    std::vector<ScaleGap> gaps;
};

// Aligns single-layer rows on normalized depth layer / L. Throws InputError with fewer than two
// entries or when the sweeps were run on different corpora.
ScaleComparison scale_compare(const std::vector<ScaleEntry>& entries);

}  // namespace asc
