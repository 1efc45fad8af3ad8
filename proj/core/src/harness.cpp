#include "asc/harness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "asc/checkpoint.hpp"
#include "asc/errors.hpp"
#include "asc/io.hpp"
#include "asc/parallel.hpp"
#include "asc/rng.hpp"
#include "json.hpp"

namespace asc {

using nlohmann::json;

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

std::size_t quartile_of(std::size_t layer, std::size_t n_layers) {
    if (n_layers == 0 || layer >= n_layers) throw PlanError("layer " + std::to_string(layer) + " out of range");
    return 4 * layer / n_layers;
}

std::vector<InterventionSpec> quartile_interventions(std::size_t n_layers) {
    std::vector<InterventionSpec> groups(4);
    for (std::size_t i = 0; i < n_layers; ++i) groups[quartile_of(i, n_layers)].short_circuited_layers.insert(i);
    std::vector<InterventionSpec> out;
    for (auto& g : groups)
        if (!g.is_vanilla()) out.push_back(std::move(g));
    return out;
}

std::vector<InterventionSpec> per_layer_interventions(std::size_t n_layers) {
    std::vector<InterventionSpec> out;
    for (std::size_t i = 0; i < n_layers; ++i) out.push_back(InterventionSpec::single(i));
    return out;
}

std::vector<std::size_t> last_quartile_layers(std::size_t n_layers) {
    // The highest non-empty quartile group; for L < 4 quartile 3 can be empty.
    std::vector<std::size_t> out;
    if (n_layers == 0) return out;
    const std::size_t top = quartile_of(n_layers - 1, n_layers);
    for (std::size_t i = 0; i < n_layers; ++i)
        if (quartile_of(i, n_layers) == top) out.push_back(i);
    return out;
}

std::vector<InterventionSpec> default_interventions(std::size_t n_layers) {
    auto out = per_layer_interventions(n_layers);
    for (auto& q : quartile_interventions(n_layers)) out.push_back(std::move(q));
    return out;
}

std::vector<InductionProbe> make_induction_probes(std::size_t vocab_size, const InductionOptions& opts) {
    if (opts.n_probes == 0) throw InputError("induction eval needs at least one probe");
    if (opts.span < 2 || opts.span > vocab_size)
        throw InputError("induction span must be in [2, vocab_size], got " + std::to_string(opts.span));
    Rng rng(derive_seed(opts.seed, "induction"));
    std::vector<InductionProbe> probes(opts.n_probes);
    for (auto& p : probes) {
        std::set<TokenId> used;
        Tokens first;
        while (first.size() < opts.span) {
            const auto t = static_cast<TokenId>(rng.below(vocab_size));
            if (used.insert(t).second) first.push_back(t);
        }
        const std::size_t j = rng.below(opts.span - 1);
        p.tokens = first;
        p.tokens.insert(p.tokens.end(), first.begin(), first.begin() + static_cast<std::ptrdiff_t>(j + 1));
        p.target = first[j + 1];
    }
    return probes;
}

double induction_accuracy(const TransformerWeights& w, const ModelConfig& cfg, const InterventionSpec& spec,
                          const std::vector<InductionProbe>& probes) {
    if (probes.empty()) throw InputError("induction eval needs at least one probe");
    std::size_t hits = 0;
    for (const auto& p : probes) {
        if (p.tokens.size() > cfg.max_seq_len)
            throw InputError("induction probe of length " + std::to_string(p.tokens.size()) + " exceeds max_seq_len");
        hits += argmax_token(last_logits(w, cfg, p.tokens, spec)) == p.target ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(probes.size());
}

double induction_task_eval(const TransformerWeights& w, const ModelConfig& cfg, const InterventionSpec& spec,
                           const InductionOptions& opts) {
    return induction_accuracy(w, cfg, spec, make_induction_probes(cfg.vocab_size, opts));
}

double relative_drop(double base, double value) {
    if (base == 0.0 || !std::isfinite(base) || !std::isfinite(value)) return kNaN;
    return (base - value) / base;
}

namespace {

SweepRow evaluate_row(const SweepInputs& in, const InterventionSpec& spec, const SweepOptions& opts,
                      const std::vector<InductionProbe>& probes) {
    MetricsOptions mo;
    mo.memorization = opts.tasks.memorization;
    mo.perplexity = opts.tasks.heldout_ppl;
    mo.ppl_window = opts.ppl_window;
    mo.ppl_stride = opts.ppl_stride;
    mo.workers = 1;
    SweepRow row;
    row.metrics = evaluate_metrics(in.weights, in.config, in.canaries, in.controls, in.heldout, spec, mo);
    row.induction_acc = opts.tasks.induction ? induction_accuracy(in.weights, in.config, spec, probes) : kNaN;
    return row;
}

void fill_drops(SweepRow& row, const SweepRow& base) {
    const MetricsReport& m = row.metrics;
    if (m.intervention.is_vanilla()) {
        // The unmodified model has zero drop by definition, even against a zero baseline.
        row.rel_drop_em = row.rel_drop_reasoning = row.rel_drop_language = 0.0;
        row.exceeds_baseline = false;
        return;
    }
    const MetricsReport& b = base.metrics;
    row.rel_drop_em = relative_drop(b.em_rate, m.em_rate);
    row.rel_drop_reasoning = relative_drop(base.induction_acc, row.induction_acc);
    row.rel_drop_language = relative_drop(1.0 / b.heldout_ppl, 1.0 / m.heldout_ppl);
    row.exceeds_baseline = m.em_rate > b.em_rate || row.induction_acc > base.induction_acc ||
                           m.heldout_ppl < b.heldout_ppl;
}

}  // namespace

SweepResult evaluate_sweep(const SweepInputs& in, const std::vector<InterventionSpec>& interventions,
                           const SweepOptions& opts) {
    if (interventions.empty()) throw PlanError("sweep plan lists no interventions");
    for (const auto& s : interventions) s.validate(in.config.n_layers);

    std::vector<InductionProbe> probes;
    if (opts.tasks.induction) probes = make_induction_probes(in.config.vocab_size, opts.induction);

    // Slot 0 is the baseline; each planned intervention is evaluated independently.
    std::vector<InterventionSpec> all{InterventionSpec::vanilla()};
    all.insert(all.end(), interventions.begin(), interventions.end());
    std::vector<SweepRow> rows(all.size());
    parallel_for(all.size(), opts.workers, [&](std::size_t i) { rows[i] = evaluate_row(in, all[i], opts, probes); });

    SweepResult r;
    r.config = in.config;
    r.corpus_digest = in.corpus_digest;
    r.baseline = std::move(rows[0]);
    fill_drops(r.baseline, r.baseline);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        fill_drops(rows[i], r.baseline);
        r.rows.push_back(std::move(rows[i]));
    }
    return r;
}

std::string corpus_digest(const std::filesystem::path& corpus_dir) {
    std::uint64_t h = fnv1a64(std::string_view{});
    for (const char* name : {"canaries.json", "controls.json", "heldout.bin"}) {
        const Bytes b = read_file(corpus_dir / name);
        h = fnv1a64(b, h);
    }
    return hex64(h);
}

SweepResult run_sweep(const SweepPlan& plan) {
    const Checkpoint ck = load_checkpoint(plan.checkpoint);
    SweepInputs in;
    in.config = ck.config;
    in.weights = ck.weights;
    in.canaries = load_canaries(plan.corpus_dir / "canaries.json");
    in.controls = load_canaries(plan.corpus_dir / "controls.json");
    in.heldout = load_tokens(plan.corpus_dir / "heldout.bin");
    in.corpus_digest = corpus_digest(plan.corpus_dir);
    SweepResult r = evaluate_sweep(in, plan.interventions, plan.options);
    if (!plan.output_dir.empty()) write_sweep(plan.output_dir, r);
    return r;
}

namespace {

json num(double v) { return std::isfinite(v) ? json(v) : json("undefined"); }

std::string csv_num(double v) {
    if (!std::isfinite(v)) return "undefined";
    std::ostringstream os;
    os.precision(12);
    os << v;
    return os.str();
}

json row_json(const SweepRow& row) {
    json j = json::parse(metrics_to_json(row.metrics));
    j["label"] = row.metrics.intervention.label();
    j["induction_acc"] = num(row.induction_acc);
    j["rel_drop_em"] = num(row.rel_drop_em);
    j["rel_drop_reasoning"] = num(row.rel_drop_reasoning);
    j["rel_drop_language"] = num(row.rel_drop_language);
    j["exceeds_baseline"] = row.exceeds_baseline;
    return j;
}

void csv_row(std::ostringstream& os, const SweepRow& row) {
    const MetricsReport& m = row.metrics;
    os << '"' << m.intervention.label() << "\"," << csv_num(m.em_rate) << ',' << csv_num(m.mean_ta) << ','
       << csv_num(m.mean_ce_memorized) << ',' << csv_num(m.mean_ce_nonmemorized) << ',' << csv_num(m.heldout_ppl)
       << ',' << csv_num(row.induction_acc) << ',' << csv_num(row.rel_drop_reasoning) << ','
       << csv_num(row.rel_drop_language) << ',' << (row.exceeds_baseline ? 1 : 0) << '\n';
}

}  // namespace

std::string sweep_to_json(const SweepResult& r) {
    json rows = json::array();
    for (const auto& row : r.rows) rows.push_back(row_json(row));
    json j{{"config", json::parse(r.config.to_json())},
           {"corpus_digest", r.corpus_digest},
           {"baseline", row_json(r.baseline)},
           {"rows", rows}};
    return j.dump(2);
}

namespace {

double num_from(const json& j, const char* key) {
    const json& v = j.at(key);
    return v.is_number() ? v.get<double>() : kNaN;
}

SweepRow row_from_json(const json& j) {
    SweepRow row;
    MetricsReport& m = row.metrics;
    for (auto layer : j.at("intervention").get<std::vector<std::size_t>>()) m.intervention.short_circuited_layers.insert(layer);
    m.em_rate = num_from(j, "em_rate");
    m.em_rate_controls = num_from(j, "em_rate_controls");
    m.mean_ta = num_from(j, "mean_ta");
    m.mean_ce_memorized = num_from(j, "mean_ce_memorized");
    m.mean_ce_nonmemorized = num_from(j, "mean_ce_nonmemorized");
    m.heldout_ppl = num_from(j, "heldout_ppl");
    row.induction_acc = num_from(j, "induction_acc");
    row.rel_drop_em = num_from(j, "rel_drop_em");
    row.rel_drop_reasoning = num_from(j, "rel_drop_reasoning");
    row.rel_drop_language = num_from(j, "rel_drop_language");
    row.exceeds_baseline = j.at("exceeds_baseline").get<bool>();
    return row;
}

}  // namespace

SweepResult sweep_from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        SweepResult r;
        r.config = ModelConfig::from_json(j.at("config").dump());
        r.corpus_digest = j.at("corpus_digest").get<std::string>();
        r.baseline = row_from_json(j.at("baseline"));
        for (const auto& row : j.at("rows")) r.rows.push_back(row_from_json(row));
        return r;
    } catch (const json::exception& e) {
        throw LoadError(std::string("sweep json: ") + e.what());
    }
}

std::string sweep_to_csv(const SweepResult& r) {
    std::ostringstream os;
    os << "intervention,em_rate,mean_ta,mean_ce_mem,mean_ce_nonmem,heldout_ppl,induction_acc,"
          "rel_drop_reasoning,rel_drop_language,exceeds_baseline\n";
    csv_row(os, r.baseline);
    for (const auto& row : r.rows) csv_row(os, row);
    return os.str();
}

std::string relative_drop_table(const SweepResult& r) {
    std::ostringstream os;
    os << "intervention,rel_drop_reasoning,rel_drop_language\n";
    auto line = [&](const SweepRow& row) {
        os << '"' << row.metrics.intervention.label() << "\"," << csv_num(row.rel_drop_reasoning) << ','
           << csv_num(row.rel_drop_language) << '\n';
    };
    line(r.baseline);
    for (const auto& row : r.rows) line(row);
    return os.str();
}

void write_sweep(const std::filesystem::path& dir, const SweepResult& r) {
    write_text(dir / "sweep.json", sweep_to_json(r));
    write_text(dir / "sweep.csv", sweep_to_csv(r));
}

ScaleComparison scale_compare(const std::vector<ScaleEntry>& entries) {
    if (entries.size() < 2) throw InputError("scale comparison needs at least two sweeps");
    for (const auto& e : entries)
        if (e.result.corpus_digest != entries.front().result.corpus_digest)
            throw InputError("sweep '" + e.label + "' was run on a different corpus than '" + entries.front().label +
                             "'");
    ScaleComparison out;
    std::ostringstream os;
    os << "scale,n_layers,d_model,layer,normalized_depth,em_rate,heldout_ppl,induction_acc,rel_drop_em,"
          "rel_drop_reasoning,rel_drop_language\n";
    for (const auto& e : entries) {
        const SweepResult& r = e.result;
        const std::size_t L = r.config.n_layers;
        const auto last = last_quartile_layers(L);
        ScaleGap gap;
        gap.label = e.label;
        gap.n_layers = L;
        gap.baseline_em = r.baseline.metrics.em_rate;
        gap.min_last_quartile_em = kNaN;
        for (const auto& row : r.rows) {
            const auto& layers = row.metrics.intervention.short_circuited_layers;
            if (layers.size() != 1) continue;
            const std::size_t layer = *layers.begin();
            os << '"' << e.label << "\"," << L << ',' << r.config.d_model << ',' << layer << ','
               << csv_num(static_cast<double>(layer) / static_cast<double>(L)) << ','
               << csv_num(row.metrics.em_rate) << ',' << csv_num(row.metrics.heldout_ppl) << ','
               << csv_num(row.induction_acc) << ',' << csv_num(row.rel_drop_em) << ','
               << csv_num(row.rel_drop_reasoning) << ',' << csv_num(row.rel_drop_language) << '\n';
            if (std::find(last.begin(), last.end(), layer) != last.end() &&
                !(row.metrics.em_rate >= gap.min_last_quartile_em))
                gap.min_last_quartile_em = row.metrics.em_rate;
        }
        gap.gap = gap.baseline_em - gap.min_last_quartile_em;
        out.gaps.push_back(gap);
    }
    out.csv = os.str();
    return out;
}

}  // namespace asc
