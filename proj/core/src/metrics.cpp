#include "asc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "asc/errors.hpp"
#include "asc/parallel.hpp"
#include "json.hpp"

namespace asc {

using nlohmann::json;

double token_accuracy_of(std::span<const TokenId> generated, std::span<const TokenId> suffix) {
    if (suffix.empty() || generated.size() != suffix.size())
        throw InputError("token accuracy: generated length " + std::to_string(generated.size()) +
                         " vs suffix length " + std::to_string(suffix.size()));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < suffix.size(); ++i) hits += generated[i] == suffix[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(suffix.size());
}

namespace {

void check_canary(const ModelConfig& cfg, const Canary& c) {
    if (c.prefix.empty() || c.suffix.empty()) throw InputError("canary has an empty prefix or suffix");
    if (c.prefix.size() + c.suffix.size() > cfg.max_seq_len)
        throw InputError("canary length " + std::to_string(c.prefix.size() + c.suffix.size()) +
                         " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
}

}  // namespace

CanaryMetrics evaluate_canary(const TransformerWeights& w, const ModelConfig& cfg, const Canary& c,
                              const InterventionSpec& spec) {
    check_canary(cfg, c);
    CanaryMetrics m;
    m.generated = greedy_generate(w, cfg, c.prefix, c.suffix.size(), spec);
    m.em = m.generated == c.suffix ? 1 : 0;
    m.token_accuracy = token_accuracy_of(m.generated, c.suffix);
    m.completion_entropy = completion_entropy(w, cfg, c, spec);
    return m;
}

int exact_match(const TransformerWeights& w, const ModelConfig& cfg, const Canary& c, const InterventionSpec& spec) {
    check_canary(cfg, c);
    return greedy_generate(w, cfg, c.prefix, c.suffix.size(), spec) == c.suffix ? 1 : 0;
}

double token_accuracy(const TransformerWeights& w, const ModelConfig& cfg, const Canary& c,
                      const InterventionSpec& spec) {
    check_canary(cfg, c);
    return token_accuracy_of(greedy_generate(w, cfg, c.prefix, c.suffix.size(), spec), c.suffix);
}

double softmax_entropy(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits) sum += std::exp(z - mx);
    const double lse = mx + std::log(sum);
    double h = 0.0;
    for (double z : logits) {
        const double p = std::exp(z - lse);
        if (p > 0.0) h -= p * (z - lse);
    }
    return std::max(0.0, h);
}

double completion_entropy(const TransformerWeights& w, const ModelConfig& cfg, const Canary& c,
                          const InterventionSpec& spec) {
    check_canary(cfg, c);
    // Teacher forcing: the final suffix token is only ever a target.
    Tokens input = c.joined();
    input.pop_back();
    const ForwardTrace tr = forward(w, cfg, input, spec);
    double ce = 0.0;
    for (std::size_t i = c.prefix.size() - 1; i < input.size(); ++i) ce += softmax_entropy(tr.logits.row(i));
    return ce;
}

double heldout_perplexity(const TransformerWeights& w, const ModelConfig& cfg, std::span<const TokenId> stream,
                          const InterventionSpec& spec, std::size_t window, std::size_t stride) {
    if (window < 2 || window > cfg.max_seq_len)
        throw InputError("perplexity window must be in [2, max_seq_len], got " + std::to_string(window));
    if (stride < 1) throw InputError("perplexity stride must be >= 1");
    if (stream.size() < window)
        throw InputError("held-out stream of " + std::to_string(stream.size()) + " tokens is shorter than window " +
                         std::to_string(window));
    double nll = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start + window <= stream.size(); start += stride) {
        const auto win = stream.subspan(start, window);
        const ForwardTrace tr = forward(w, cfg, win.first(window - 1), spec);
        for (std::size_t i = 0; i + 1 < window; ++i) {
            const auto row = tr.logits.row(i);
            const double mx = *std::max_element(row.begin(), row.end());
            double sum = 0.0;
            for (double z : row) sum += std::exp(z - mx);
            nll -= row[win[i + 1]] - mx - std::log(sum);
            ++count;
        }
    }
    return std::exp(nll / static_cast<double>(count));
}

Summary summarize(std::span<const double> values) {
    Summary s;
    s.count = values.size();
    if (values.empty()) return s;
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(values.size()));
    return s;
}

CeSplit ce_split(std::span<const double> memorized, std::span<const double> nonmemorized) {
    if (memorized.empty() || nonmemorized.empty()) throw InputError("ce_split: both canary sets must be non-empty");
    CeSplit out;
    out.memorized = summarize(memorized);
    out.nonmemorized = summarize(nonmemorized);
    const double n1 = static_cast<double>(out.memorized.count), n2 = static_cast<double>(out.nonmemorized.count);
    out.pooled_stddev = std::sqrt((n1 * out.memorized.stddev * out.memorized.stddev +
                                   n2 * out.nonmemorized.stddev * out.nonmemorized.stddev) /
                                  (n1 + n2));
    const double gap = out.nonmemorized.mean - out.memorized.mean;
    if (out.pooled_stddev > 0.0) {
        out.separation = gap / out.pooled_stddev;
    } else {
        out.separation = gap == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), gap);
    }
    return out;
}

MetricsReport evaluate_metrics(const TransformerWeights& w, const ModelConfig& cfg, const std::vector<Canary>& planted,
                               const std::vector<Canary>& controls, std::span<const TokenId> heldout,
                               const InterventionSpec& spec, const MetricsOptions& opts) {
    spec.validate(cfg.n_layers);
    MetricsReport r;
    r.intervention = spec;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (opts.memorization) {
        r.planted.resize(planted.size());
        r.controls.resize(controls.size());
        const std::size_t total = planted.size() + controls.size();
        parallel_for(total, opts.workers, [&](std::size_t i) {
            if (i < planted.size()) {
                r.planted[i] = evaluate_canary(w, cfg, planted[i], spec);
            } else {
                r.controls[i - planted.size()] = evaluate_canary(w, cfg, controls[i - planted.size()], spec);
            }
        });
        auto mean_of = [](const std::vector<CanaryMetrics>& v, auto field) {
            if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
            double s = 0.0;
            for (const auto& m : v) s += static_cast<double>(field(m));
            return s / static_cast<double>(v.size());
        };
        r.em_rate = mean_of(r.planted, [](const CanaryMetrics& m) { return m.em; });
        r.em_rate_controls = mean_of(r.controls, [](const CanaryMetrics& m) { return m.em; });
        r.mean_ta = mean_of(r.planted, [](const CanaryMetrics& m) { return m.token_accuracy; });
        r.mean_ce_memorized = mean_of(r.planted, [](const CanaryMetrics& m) { return m.completion_entropy; });
        r.mean_ce_nonmemorized = mean_of(r.controls, [](const CanaryMetrics& m) { return m.completion_entropy; });
    } else {
        r.em_rate = r.em_rate_controls = r.mean_ta = r.mean_ce_memorized = r.mean_ce_nonmemorized = nan;
    }
    r.heldout_ppl = opts.perplexity ? heldout_perplexity(w, cfg, heldout, spec, opts.ppl_window, opts.ppl_stride) : nan;
    return r;
}

namespace {

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json canary_json(const char* set, std::size_t index, const CanaryMetrics& m) {
    return {{"set", set},
            {"index", index},
            {"em", m.em},
            {"token_accuracy", m.token_accuracy},
            {"completion_entropy", m.completion_entropy}};
}

}  // namespace

std::string metrics_to_json(const MetricsReport& r) {
    json per = json::array();
    for (std::size_t i = 0; i < r.planted.size(); ++i) per.push_back(canary_json("planted", i, r.planted[i]));
    for (std::size_t i = 0; i < r.controls.size(); ++i) per.push_back(canary_json("control", i, r.controls[i]));
    json j{{"intervention", r.intervention.layers()},
           {"em_rate", number_or_null(r.em_rate)},
           {"em_rate_controls", number_or_null(r.em_rate_controls)},
           {"mean_ta", number_or_null(r.mean_ta)},
           {"mean_ce_memorized", number_or_null(r.mean_ce_memorized)},
           {"mean_ce_nonmemorized", number_or_null(r.mean_ce_nonmemorized)},
           {"heldout_ppl", number_or_null(r.heldout_ppl)},
           {"per_canary", per}};
    return j.dump(2);
}

std::string metrics_to_csv(const MetricsReport& r) {
    std::ostringstream os;
    os.precision(12);
    os << "intervention,set,index,em,token_accuracy,completion_entropy\n";
    const std::string label = "\"" + r.intervention.label() + "\"";
    for (std::size_t i = 0; i < r.planted.size(); ++i)
        os << label << ",planted," << i << ',' << r.planted[i].em << ',' << r.planted[i].token_accuracy << ','
           << r.planted[i].completion_entropy << '\n';
    for (std::size_t i = 0; i < r.controls.size(); ++i)
        os << label << ",control," << i << ',' << r.controls[i].em << ',' << r.controls[i].token_accuracy << ','
           << r.controls[i].completion_entropy << '\n';
    return os.str();
}

}  // namespace asc
