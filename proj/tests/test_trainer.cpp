#include <cmath>

#include "asc/checkpoint.hpp"
#include "asc/errors.hpp"
#include "asc/trainer.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace asc;

namespace {

std::vector<Tokens> random_windows(Rng& rng, std::size_t count, std::size_t len, std::size_t vocab) {
    std::vector<Tokens> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(oracle::random_tokens(rng, len, vocab));
    return out;
}

Corpus tiny_corpus(std::size_t vocab, BackgroundKind kind = BackgroundKind::markov_chain) {
    CorpusSpec s;
    s.vocab_size = vocab;
    s.background.kind = kind;
    s.background.successors = 4;
    s.background_tokens = 5'000;
    s.heldout_tokens = 500;
    s.n_canaries = 2;
    s.n_controls = 2;
    s.prefix_len = 4;
    s.suffix_len = 4;
    s.repetitions = 20;
    return build_corpus(s);
}

TrainConfig tiny_train(std::size_t steps) {
    TrainConfig t;
    t.steps = steps;
    t.batch_size = 4;
    t.seq_len = 8;
    t.learning_rate = 3e-3;
    t.eval_every = 5;
    t.eval_canaries = 2;
    t.eval_heldout_windows = 2;
    return t;
}

}  // namespace

TEST_CASE("batched loss equals the inference-path loss") {
    Rng rng(41);
    for (int trial = 0; trial < 5; ++trial) {
        const auto cfg = oracle::tiny_config(1 + rng.below(3), 2, 8, 13, 10);
        const auto w = oracle::random_weights(cfg, 400 + trial);
        const auto windows = random_windows(rng, 3, 2 + rng.below(8), cfg.vocab_size);
        TransformerWeights g;
        const double a = loss_and_grad(w, cfg, windows, &g);
        CHECK(std::abs(a - reference_loss(w, cfg, windows)) < 1e-10);
        CHECK(std::abs(a - loss_and_grad(w, cfg, windows, nullptr)) == 0.0);
        g.validate(cfg);
    }
}

TEST_CASE("grad check on the tiny model") {
    ModelConfig cfg = oracle::tiny_config(2, 2, 8, 11, 6);
    const auto rep = grad_check(cfg, 200, 1);
    CHECK(rep.probes.size() == 200);
    CHECK(rep.max_relative_error < 1e-4);
    cfg.d_model = 16;
    CHECK_THROWS_AS(grad_check(cfg, 1, 1), ConfigError);
}

TEST_CASE("every parameter of a very small model matches central differences") {
    const auto cfg = oracle::tiny_config(1, 2, 4, 5, 6);
    const auto w = oracle::random_weights(cfg, 42, 0.5);
    Rng rng(43);
    const auto windows = random_windows(rng, 2, 5, cfg.vocab_size);
    TransformerWeights g;
    loss_and_grad(w, cfg, windows, &g);
    std::vector<double> flat;
    g.for_each_tensor([&](std::span<const double> t) { flat.insert(flat.end(), t.begin(), t.end()); });
    double worst = 0.0;
    for (std::size_t i = 0; i < flat.size(); ++i)
        worst = std::max(worst, gradient_relative_error(flat[i], central_difference(w, cfg, windows, i, 1e-5)));
    CHECK(worst < 1e-4);
}

TEST_CASE("central-difference truncation error scales with h squared") {
    const auto cfg = oracle::tiny_config(1, 1, 4, 5, 6);
    const auto w = oracle::random_weights(cfg, 44, 0.7);
    Rng rng(45);
    const auto windows = random_windows(rng, 2, 5, cfg.vocab_size);
    TransformerWeights g;
    loss_and_grad(w, cfg, windows, &g);
    std::vector<double> flat;
    g.for_each_tensor([&](std::span<const double> t) { flat.insert(flat.end(), t.begin(), t.end()); });

    int checked = 0;
    for (std::size_t idx = 0; idx < flat.size() && checked < 10; idx += 7) {
        const double h = 2e-2;
        const double e1 = std::abs(central_difference(w, cfg, windows, idx, h) - flat[idx]);
        const double e2 = std::abs(central_difference(w, cfg, windows, idx, 2 * h) - flat[idx]);
        if (e1 < 1e-9) continue;  // third derivative too small for a clean trend
        ++checked;
        CHECK(e2 / e1 == doctest::Approx(4.0).epsilon(0.15));
    }
    CHECK(checked >= 5);
}

TEST_CASE("blocked path yields an exactly zero gradient") {
    // Zero final-LN gain: logits are bias x unembedding and no earlier tensor can move them.
    const auto cfg = oracle::tiny_config(2, 2, 8, 7, 6);
    auto w = oracle::random_weights(cfg, 46);
    std::fill(w.final_ln_gain.begin(), w.final_ln_gain.end(), 0.0);
    Rng rng(47);
    const auto windows = random_windows(rng, 2, 6, cfg.vocab_size);
    TransformerWeights g;
    loss_and_grad(w, cfg, windows, &g);
    CHECK(std::all_of(g.token_embedding.storage().begin(), g.token_embedding.storage().end(),
                      [](double v) { return v == 0.0; }));
    for (const auto& b : g.blocks) {
        BlockWeights::visit(b, [](std::span<const double> t) {
            for (double v : t) CHECK(v == 0.0);
        });
    }
    double bias_grad = 0.0;
    for (double v : g.final_ln_bias) bias_grad += std::abs(v);
    CHECK(bias_grad > 0.0);
}

TEST_CASE("initial loss is near ln|V| on a uniform background") {
    ModelConfig cfg = oracle::tiny_config(2, 2, 16, 64, 16);
    const auto c = tiny_corpus(64, BackgroundKind::uniform_random);
    TrainConfig t = tiny_train(0);
    const auto w = initial_weights(cfg, t);
    std::vector<Tokens> windows;
    for (std::size_t s = 0; s + 17 <= 17 * 20; s += 17) windows.emplace_back(c.stream.begin() + s, c.stream.begin() + s + 17);
    const double loss = loss_and_grad(w, cfg, windows, nullptr);
    CHECK(std::abs(loss - std::log(64.0)) <= 0.05 * std::log(64.0));
}

TEST_CASE("zero steps returns the initialization") {
    const auto cfg = oracle::tiny_config(2, 2, 8, 16, 10);
    const auto t = tiny_train(0);
    const auto r = train(cfg, t, tiny_corpus(16));
    CHECK(r.weights == initial_weights(cfg, t));
    CHECK(r.history.empty());
}

TEST_CASE("training is deterministic and reduces the loss") {
    const auto cfg = oracle::tiny_config(2, 2, 8, 16, 10);
    const auto corpus = tiny_corpus(16);
    const auto t = tiny_train(40);
    const auto a = train(cfg, t, corpus);
    const auto b = train(cfg, t, corpus);
    CHECK(encode_checkpoint(cfg, a.weights) == encode_checkpoint(cfg, b.weights));
    REQUIRE(a.history.size() == 8);
    CHECK(a.history.back().step == 40);
    CHECK(a.history.back().train_loss < a.history.front().train_loss);
    CHECK(std::isfinite(a.history.back().canary_loss));
    const std::string csv = loss_history_csv(a.history);
    CHECK(csv.rfind("step,train_loss,canary_loss,heldout_loss\n", 0) == 0);

    TrainConfig other = t;
    other.rng_seed = 2;
    CHECK_FALSE(train(cfg, other, corpus).weights == a.weights);
}

TEST_CASE("non-finite loss raises divergence with the step index") {
    const auto cfg = oracle::tiny_config(1, 2, 8, 16, 10);
    auto start = initial_weights(cfg, tiny_train(3));
    // finite weights whose logits overflow
    for (std::size_t j = 0; j < cfg.vocab_size; ++j) start.unembedding(0, j) = j % 2 ? 1e308 : -1e308;
    try {
        train_from(cfg, tiny_train(3), tiny_corpus(16), start);
        FAIL("expected TrainingDivergence");
    } catch (const TrainingDivergence& e) {
        CHECK(e.step() == 0);
    }
}

TEST_CASE("train config validation") {
    const auto cfg = oracle::tiny_config();
    TrainConfig t;
    t.seq_len = 64;
    CHECK_THROWS_AS(t.validate(cfg), ConfigError);
    t = TrainConfig{};
    t.seq_len = 8;
    t.beta1 = 1.0;
    try {
        t.validate(cfg);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.fields() == std::vector<std::string>{"beta1"});
    }
}
