#include <cmath>
#include <map>

#include "asc/checkpoint.hpp"
#include "asc/errors.hpp"
#include "asc/model.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace asc;

TEST_CASE("config validation names the offending fields") {
    ModelConfig c = oracle::tiny_config();
    c.n_heads = 3;
    c.d_model = 16;
    try {
        c.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.fields() == std::vector<std::string>{"d_model", "n_heads"});
    }
    c = oracle::tiny_config();
    c.max_seq_len = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = oracle::tiny_config();
    CHECK(ModelConfig::from_json(c.to_json()) == c);
}

TEST_CASE("input validation") {
    const auto cfg = oracle::tiny_config();
    const auto w = oracle::random_weights(cfg, 1);
    CHECK_THROWS_AS(forward(w, cfg, Tokens{}, {}), InputError);
    CHECK_THROWS_AS(forward(w, cfg, Tokens{11}, {}), InputError);
    CHECK_THROWS_AS(forward(w, cfg, Tokens(13, 0), {}), InputError);
    CHECK_THROWS_AS(greedy_generate(w, cfg, Tokens(10, 1), 3, {}), InputError);
    CHECK_THROWS_AS(sample_generate(w, cfg, Tokens{1}, 2, {}, 0.0, 1), InputError);
    CHECK_THROWS_AS(sample_generate(w, cfg, Tokens{1}, 2, {}, -1.0, 1), InputError);
    CHECK_THROWS_AS(InterventionSpec::single(2).validate(2), PlanError);
    auto bad = w;
    bad.blocks.pop_back();
    CHECK_THROWS_AS(bad.validate(cfg), ShapeError);
}

TEST_CASE("vanilla forward matches the unbatched reference") {
    Rng rng(21);
    for (int trial = 0; trial < 12; ++trial) {
        const std::size_t heads = 1 + rng.below(4);
        const std::size_t d = heads * (1 + rng.below(4));
        if (d > 16) continue;
        const auto cfg = oracle::tiny_config(1 + rng.below(4), heads, d, 7 + rng.below(10), 10);
        const auto w = oracle::random_weights(cfg, 100 + trial);
        const Tokens toks = oracle::random_tokens(rng, 1 + rng.below(10), cfg.vocab_size);
        const auto trace = forward(w, cfg, toks, {});
        for (std::size_t t = 0; t < toks.size(); ++t) {
            const Tokens prefix(toks.begin(), toks.begin() + static_cast<long>(t) + 1);
            const Vector ref = oracle::reference_last_logits(w, cfg, prefix, {});
            const Vector got(trace.logits.row(t).begin(), trace.logits.row(t).end());
            CHECK(oracle::max_abs_diff(got, ref) < 1e-10);
        }
        // short-circuited paths against the same reference
        const InterventionSpec sc{{rng.below(cfg.n_layers)}};
        const Vector ref = oracle::reference_last_logits(w, cfg, toks, sc);
        CHECK(oracle::max_abs_diff(last_logits(w, cfg, toks, sc), ref) < 1e-10);
    }
}

TEST_CASE("single-token sequences are unaffected by short-circuiting") {
    Rng rng(22);
    const auto cfg = oracle::tiny_config(3, 2, 8, 13, 8);
    const auto w = oracle::random_weights(cfg, 5);
    for (TokenId tok = 0; tok < 13; ++tok) {
        const auto base = forward(w, cfg, Tokens{tok}, {}, TraceLevel::full);
        for (const InterventionSpec& spec : {InterventionSpec{{0}}, InterventionSpec{{2}}, InterventionSpec{{0, 1, 2}}}) {
            const auto sc = forward(w, cfg, Tokens{tok}, spec, TraceLevel::full);
            CHECK(sc.logits == base.logits);
        }
    }
}

TEST_CASE("short-circuit locality: blocks before the intervention are untouched") {
    Rng rng(23);
    const auto cfg = oracle::tiny_config(4, 2, 8, 13, 10);
    const auto w = oracle::random_weights(cfg, 6);
    const Tokens toks = oracle::random_tokens(rng, 9, cfg.vocab_size);
    const auto base = forward(w, cfg, toks, {}, TraceLevel::full);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto sc = forward(w, cfg, toks, InterventionSpec::single(l), TraceLevel::full);
        for (std::size_t b = 0; b < l; ++b) {
            CHECK(sc.post_attention[b] == base.post_attention[b]);
            CHECK(sc.post_ffn[b] == base.post_ffn[b]);
            CHECK(sc.post_attention_last[b] == base.post_attention_last[b]);
        }
        CHECK(sc.post_attention[l] != base.post_attention[l]);
        for (const auto& a : sc.attention[l]) CHECK(a == Matrix::identity(toks.size()));
    }
}

TEST_CASE("attention rows are causal and normalized") {
    Rng rng(24);
    for (int trial = 0; trial < 10; ++trial) {
        const auto cfg = oracle::tiny_config(2, 1 + rng.below(3), 12, 9, 12);
        if (cfg.d_model % cfg.n_heads) continue;
        const auto w = oracle::random_weights(cfg, 200 + trial, 1.0);
        const Tokens toks = oracle::random_tokens(rng, 1 + rng.below(12), cfg.vocab_size);
        const auto tr = forward(w, cfg, toks, {}, TraceLevel::full);
        for (const auto& block : tr.attention)
            for (const auto& a : block)
                for (std::size_t r = 0; r < a.rows(); ++r) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < a.cols(); ++c) {
                        if (c > r) CHECK(a(r, c) == 0.0);
                        CHECK(a(r, c) >= 0.0);
                        s += a(r, c);
                    }
                    CHECK(std::abs(s - 1.0) <= 1e-9);
                }
    }
}

TEST_CASE("perturbing token t leaves earlier logits unchanged") {
    Rng rng(25);
    const auto cfg = oracle::tiny_config(2, 2, 8, 13, 10);
    const auto w = oracle::random_weights(cfg, 7);
    Tokens toks = oracle::random_tokens(rng, 10, cfg.vocab_size);
    const auto base = forward(w, cfg, toks, {});
    for (std::size_t t = 0; t < toks.size(); ++t) {
        Tokens p = toks;
        p[t] = (p[t] + 1) % cfg.vocab_size;
        const auto tr = forward(w, cfg, p, {});
        for (std::size_t r = 0; r < t; ++r)
            CHECK(std::equal(tr.logits.row(r).begin(), tr.logits.row(r).end(), base.logits.row(r).begin()));
        CHECK_FALSE(std::equal(tr.logits.row(t).begin(), tr.logits.row(t).end(), base.logits.row(t).begin()));
    }
}

TEST_CASE("short-circuit attention is I times V") {
    Rng rng(26);
    const Matrix v = oracle::random_matrix(rng, 3, 4);
    CHECK(short_circuit_attention(v) == v);

    // One row: standard attention is already the identity.
    const Matrix v1 = oracle::random_matrix(rng, 1, 4);
    const Matrix q1 = oracle::random_matrix(rng, 1, 4), k1 = oracle::random_matrix(rng, 1, 4);
    CHECK(matmul(causal_attention_weights(q1, k1), v1) == short_circuit_attention(v1));

    // Uniform weights over three rows: standard row 3 is the column mean, short-circuited row 3 is V row 3.
    const Matrix a = causal_attention_weights(Matrix(3, 4), Matrix(3, 4));
    const Matrix std_out = matmul(a, v);
    for (std::size_t j = 0; j < 4; ++j) {
        const double mean = (v(0, j) + v(1, j) + v(2, j)) / 3.0;
        CHECK(std_out(2, j) == doctest::Approx(mean).epsilon(1e-14));
        const double diff = short_circuit_attention(v)(2, j) - std_out(2, j);
        CHECK(diff == doctest::Approx(v(2, j) - mean).epsilon(1e-12));
    }
}

TEST_CASE("short-circuit keeps the value and output projections") {
    // With W_O = 0 a short-circuited block must equal the vanilla block (attention contributes nothing).
    const auto cfg = oracle::tiny_config(1, 2, 8, 9, 6);
    auto w = oracle::random_weights(cfg, 8);
    w.blocks[0].w_o.fill(0.0);
    const Tokens toks{1, 2, 3, 4};
    CHECK(forward(w, cfg, toks, InterventionSpec::single(0)).logits == forward(w, cfg, toks, {}).logits);
    // With W_O != 0 the projected values reach the residual stream.
    w = oracle::random_weights(cfg, 8);
    CHECK(forward(w, cfg, toks, InterventionSpec::single(0)).logits != forward(w, cfg, toks, {}).logits);
}

TEST_CASE("greedy generation") {
    const auto cfg = oracle::tiny_config(2, 2, 8, 11, 12);
    const auto w7 = oracle::constant_model(cfg, 7);
    CHECK(greedy_generate(w7, cfg, Tokens{1, 2}, 0, {}).empty());
    CHECK(greedy_generate(w7, cfg, Tokens{1, 2}, 5, {}) == Tokens(5, 7));
    CHECK(greedy_generate(w7, cfg, Tokens{1, 2}, 5, InterventionSpec::single(1)) == Tokens(5, 7));
    // ties break to the lowest id
    CHECK(greedy_generate(oracle::uniform_model(cfg), cfg, Tokens{3}, 3, {}) == Tokens(3, 0));
    CHECK(argmax_token(Vector{1, 3, 3, 2}) == 1);

    const auto w = oracle::random_weights(cfg, 9);
    const Tokens a = greedy_generate(w, cfg, Tokens{4, 5, 6}, 9, {});
    CHECK(a.size() == 9);
    CHECK(a == greedy_generate(w, cfg, Tokens{4, 5, 6}, 9, {}));
    // each step is the argmax of a fresh forward over the running sequence
    Tokens run{4, 5, 6};
    for (TokenId t : a) {
        CHECK(argmax_token(last_logits(w, cfg, run, {})) == t);
        run.push_back(t);
    }
}

TEST_CASE("temperature sampling") {
    const auto cfg = oracle::tiny_config(2, 2, 8, 11, 12);
    const auto w = oracle::random_weights(cfg, 10, 0.8);
    const Tokens prefix{1, 2, 3};
    CHECK(sample_generate(w, cfg, prefix, 6, {}, 0.7, 42) == sample_generate(w, cfg, prefix, 6, {}, 0.7, 42));
    CHECK(sample_generate(w, cfg, prefix, 6, {}, 1e-6, 42) == greedy_generate(w, cfg, prefix, 6, {}));
    CHECK(sample_generate(w, cfg, prefix, 0, {}, 1.0, 42).empty());
}

TEST_CASE("sampled frequencies match softmax probabilities") {
    // 4-token vocab; logits depend only on the final LN bias, so the next-token distribution is known.
    ModelConfig cfg = oracle::tiny_config(1, 1, 4, 4, 4);
    auto w = TransformerWeights::zeros(cfg);
    w.final_ln_bias = {1.0, 0.0, 0.0, 0.0};
    const Vector logits{0.3, -0.5, 1.1, 0.0};
    for (std::size_t j = 0; j < 4; ++j) w.unembedding(0, j) = logits[j];
    const double temperature = 0.8;
    Vector scaled = logits;
    for (double& x : scaled) x /= temperature;
    const Vector p = softmax(scaled);

    const int draws = 10'000;
    std::map<TokenId, int> counts;
    for (int i = 0; i < draws; ++i) counts[sample_generate(w, cfg, Tokens{0}, 1, {}, temperature, 1000 + i)[0]]++;
    for (std::size_t j = 0; j < 4; ++j) {
        const double expect = draws * p[j];
        const double sigma = std::sqrt(draws * p[j] * (1 - p[j]));
        CHECK(std::abs(counts[static_cast<TokenId>(j)] - expect) <= 3 * sigma);
    }
}

TEST_CASE("init is seeded and shaped") {
    const auto cfg = oracle::tiny_config();
    const auto a = init_weights(cfg, 3), b = init_weights(cfg, 3), c = init_weights(cfg, 4);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    a.validate(cfg);
    std::size_t n = 0;
    a.for_each_tensor([&](std::span<const double> t) { n += t.size(); });
    CHECK(n == a.parameter_count());
    CHECK(encode_checkpoint(cfg, a) == encode_checkpoint(cfg, b));
}

TEST_CASE("block_forward without layer norm is the bare residual block") {
    const auto cfg = oracle::tiny_config(1, 1, 4, 5, 6);
    Rng rng(27);
    auto w = oracle::random_weights(cfg, 11);
    const Matrix x = oracle::random_matrix(rng, 3, 4);
    const auto out = block_forward(w.blocks[0], cfg, x, true, {.layer_norm = false, .keep_attention = true});
    // identity attention: X' = X + X W_V W_O
    const Matrix expect = add(x, oracle::naive_matmul(oracle::naive_matmul(x, w.blocks[0].w_v), w.blocks[0].w_o));
    CHECK(oracle::max_abs_diff(out.post_attention, expect) < 1e-12);
    REQUIRE(out.attention.size() == 1);
    CHECK(out.attention[0] == Matrix::identity(3));
}
