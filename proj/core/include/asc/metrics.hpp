#pragma once

// Memorization metrics over canary sets: exact match and token accuracy under greedy
// decoding, teacher-forced completion entropy (nats), and held-out perplexity.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "asc/corpus.hpp"
#include "asc/model.hpp"

namespace asc {

// Fraction of positions where generated[i] == suffix[i]; both must have equal, non-zero length.
double token_accuracy_of(std::span<const TokenId> generated, std::span<const TokenId> suffix);

int exact_match(const TransformerWeights& w, const ModelConfig& cfg, const Canary& c, const InterventionSpec& spec);
double token_accuracy(const TransformerWeights& w, const ModelConfig& cfg, const Canary& c,
                      const InterventionSpec& spec);
double completion_entropy(const TransformerWeights& w, const ModelConfig& cfg, const Canary& c,
                          const InterventionSpec& spec);

// Shannon entropy (nats) of softmax(logits).
double softmax_entropy(std::span<const double> logits);

struct CanaryMetrics {
    int em = 0;
    double token_accuracy = 0.0;
    double completion_entropy = 0.0;
    Tokens generated;
};

// One greedy generation serves both EM and TA.
CanaryMetrics evaluate_canary(const TransformerWeights& w, const ModelConfig& cfg, const Canary& c,
                              const InterventionSpec& spec);

// exp(mean next-token cross-entropy) over windows of `window` tokens starting every `stride`
// tokens. Within a window the first token is context only.
double heldout_perplexity(const TransformerWeights& w, const ModelConfig& cfg, std::span<const TokenId> stream,
                          const InterventionSpec& spec, std::size_t window, std::size_t stride);

struct Summary {
    std::size_t count = 0;
    double mean = 0.0;
    double stddev = 0.0;  // population standard deviation
};

Summary summarize(std::span<const double> values);

struct CeSplit {
    Summary memorized;
    Summary nonmemorized;
    // sqrt((n1 var1 + n2 var2) / (n1 + n2))
    double pooled_stddev = 0.0;
    // (mean_nonmemorized - mean_memorized) / pooled_stddev; +inf when the pooled stddev is 0
    // and the means differ.
    double separation = 0.0;
};

// Throws InputError when either set is empty.
CeSplit ce_split(std::span<const double> memorized, std::span<const double> nonmemorized);

struct MetricsOptions {
    bool memorization = true;
    bool perplexity = true;
    std::size_t ppl_window = 64;
    std::size_t ppl_stride = 64;
    std::size_t workers = 1;
};

struct MetricsReport {
    InterventionSpec intervention;
    std::vector<CanaryMetrics> planted;
    std::vector<CanaryMetrics> controls;
    double em_rate = 0.0;
    double em_rate_controls = 0.0;
    double mean_ta = 0.0;
    double mean_ce_memorized = 0.0;
    double mean_ce_nonmemorized = 0.0;
    double heldout_ppl = 0.0;  // NaN when perplexity is disabled
};

MetricsReport evaluate_metrics(const TransformerWeights& w, const ModelConfig& cfg, const std::vector<Canary>& planted,
                               const std::vector<Canary>& controls, std::span<const TokenId> heldout,
                               const InterventionSpec& spec, const MetricsOptions& opts = {});

std::string metrics_to_json(const MetricsReport& r);
// One row per canary: intervention,set,index,em,token_accuracy,completion_entropy
std::string metrics_to_csv(const MetricsReport& r);

}  // namespace asc
