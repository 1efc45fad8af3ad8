#include <benchmark/benchmark.h>

#include "asc/bounds.hpp"
#include "asc/model.hpp"
#include "asc/rng.hpp"
#include "asc/tensor.hpp"
#include "asc/trainer.hpp"

namespace {

asc::Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    asc::Rng rng(seed);
    asc::Matrix m(r, c);
    for (double& v : m.storage()) v = rng.normal();
    return m;
}

asc::ModelConfig acceptance_config() { return asc::ModelConfig{}; }

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_matrix(n, 128, 1), b = random_matrix(128, 512, 2);
    for (auto _ : state) benchmark::DoNotOptimize(asc::matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * 128 * 512));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(1024);

void BM_MatmulTn(benchmark::State& state) {
    const auto a = random_matrix(1024, 128, 1), b = random_matrix(1024, 512, 2);
    asc::Matrix out(128, 512);
    for (auto _ : state) {
        asc::add_matmul_tn(out, a, b);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * 2 * 1024 * 128 * 512);
}
BENCHMARK(BM_MatmulTn);

void BM_Forward(benchmark::State& state) {
    const auto cfg = acceptance_config();
    const auto w = asc::init_weights(cfg, 1);
    asc::Tokens toks(static_cast<std::size_t>(state.range(0)));
    for (std::size_t i = 0; i < toks.size(); ++i) toks[i] = static_cast<asc::TokenId>((i * 37) % cfg.vocab_size);
    for (auto _ : state) benchmark::DoNotOptimize(asc::forward(w, cfg, toks, asc::InterventionSpec::vanilla()));
}
BENCHMARK(BM_Forward)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
    const auto cfg = acceptance_config();
    const auto w = asc::init_weights(cfg, 1);
    std::vector<asc::Tokens> windows(static_cast<std::size_t>(state.range(0)), asc::Tokens(65));
    asc::Rng rng(3);
    for (auto& wdw : windows)
        for (auto& t : wdw) t = static_cast<asc::TokenId>(rng.below(cfg.vocab_size));
    asc::TransformerWeights g;
    for (auto _ : state) benchmark::DoNotOptimize(asc::loss_and_grad(w, cfg, windows, &g));
}
BENCHMARK(BM_TrainStep)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_BoundTrial(benchmark::State& state) {
    asc::TrialDims dims;
    std::uint64_t seed = 0;
    for (auto _ : state) {
        const auto t = asc::random_trial(dims, ++seed);
        benchmark::DoNotOptimize(asc::theorem2_check(t.layer_l, t.layer_l1, t.x));
    }
}
BENCHMARK(BM_BoundTrial);

}  // namespace

BENCHMARK_MAIN();
