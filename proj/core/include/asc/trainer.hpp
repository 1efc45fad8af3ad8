#pragma once

// Next-token training for the toy transformer: batched forward with activation caches,
// hand-derived backward pass, Adam with global-norm clipping.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "asc/corpus.hpp"
#include "asc/model.hpp"

namespace asc {

struct TrainConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    std::size_t batch_size = 16;
    std::size_t steps = 1000;
    // Tokens per training window (inputs); each sampled window holds seq_len + 1 tokens.
    std::size_t seq_len = 64;
    double grad_clip_norm = 1.0;
    std::size_t warmup_steps = 0;
    std::uint64_t rng_seed = 1;
    // Loss-history cadence; 0 disables canary/heldout evaluation.
    std::size_t eval_every = 100;
    std::size_t eval_canaries = 16;
    std::size_t eval_heldout_windows = 16;

    void validate(const ModelConfig& cfg) const;
};

struct LossRecord {
    std::size_t step = 0;
    double train_loss = 0.0;
    double canary_loss = 0.0;   // NaN when not evaluated at this step
    double heldout_loss = 0.0;  // NaN when not evaluated at this step
};

struct TrainResult {
    TransformerWeights weights;
    std::vector<LossRecord> history;
};

using TrainProgress = std::function<void(const LossRecord&)>;

// Runs tcfg.steps Adam updates starting from init_weights(cfg, derive_seed(rng_seed, "init")).
// Throws TrainingDivergence on a non-finite loss.
TrainResult train(const ModelConfig& cfg, const TrainConfig& tcfg, const Corpus& corpus,
                  const TrainProgress& progress = {});

// Same, from explicit starting weights.
TrainResult train_from(const ModelConfig& cfg, const TrainConfig& tcfg, const Corpus& corpus,
                       TransformerWeights start, const TrainProgress& progress = {});

TransformerWeights initial_weights(const ModelConfig& cfg, const TrainConfig& tcfg);

// Mean next-token cross-entropy (nats) over every position of every window and, when `grad`
// is non-null, its gradient (same shapes as w, overwritten). Windows must share one length >= 2.
double loss_and_grad(const TransformerWeights& w, const ModelConfig& cfg, std::span<const Tokens> windows,
                     TransformerWeights* grad);

// The same loss computed through the inference forward pass; independent of loss_and_grad.
double reference_loss(const TransformerWeights& w, const ModelConfig& cfg, std::span<const Tokens> windows);

std::string loss_history_csv(const std::vector<LossRecord>& history);

struct GradProbe {
    std::size_t parameter_index = 0;  // flat index in canonical tensor order
    double analytic = 0.0;
    double numeric = 0.0;
    double relative_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradProbe> probes;
    double max_relative_error = 0.0;
    double step = 1e-5;
};

// Flat parameter access in canonical order.
double& parameter_at(TransformerWeights& w, std::size_t flat_index);

// Central difference of reference_loss w.r.t. one flat parameter.
double central_difference(const TransformerWeights& w, const ModelConfig& cfg, std::span<const Tokens> windows,
                          std::size_t flat_index, double h);

// |a - n| / max(|a|, |n|, floor)
double gradient_relative_error(double analytic, double numeric, double floor = 1e-6);

// Analytic gradient vs central differences on probe_dims random parameters of a random tiny model.
// Requires d_model <= 8, n_layers <= 2, max_seq_len <= 6 (seq_len <= 5 predicted positions).
GradCheckReport grad_check(const ModelConfig& cfg, std::size_t probe_dims, std::uint64_t seed, double h = 1e-5);

}  // namespace asc
