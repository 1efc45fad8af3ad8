#include <cmath>
#include <algorithm>
#include <filesystem>
#include <set>
#include <sstream>

#include "asc/checkpoint.hpp"
#include "asc/errors.hpp"
#include "asc/harness.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace asc;
namespace fs = std::filesystem;

namespace {

SweepInputs small_inputs(std::size_t layers = 4) {
    SweepInputs in;
    in.config = oracle::tiny_config(layers, 2, 8, 40, 24);
    in.weights = oracle::random_weights(in.config, 71, 0.4);
    Rng rng(72);
    for (int i = 0; i < 6; ++i) {
        in.canaries.push_back({oracle::random_tokens(rng, 4, 40), oracle::random_tokens(rng, 4, 40)});
        in.controls.push_back({oracle::random_tokens(rng, 4, 40), oracle::random_tokens(rng, 4, 40)});
    }
    in.heldout = oracle::random_tokens(rng, 200, 40);
    in.corpus_digest = "abc";
    return in;
}

SweepOptions small_options() {
    SweepOptions o;
    o.ppl_window = 24;
    o.ppl_stride = 24;
    o.induction.n_probes = 32;
    o.induction.span = 8;
    return o;
}

}  // namespace

TEST_CASE("quartile assignment") {
    CHECK(quartile_of(3, 8) == 1);
    CHECK(quartile_of(7, 8) == 3);
    CHECK_THROWS_AS(quartile_of(8, 8), PlanError);
    auto q = quartile_interventions(8);
    REQUIRE(q.size() == 4);
    CHECK(q[0].layers() == std::vector<std::size_t>{0, 1});
    CHECK(q[3].layers() == std::vector<std::size_t>{6, 7});
    // L = 6: quartiles 0,0,1,2,2,3
    q = quartile_interventions(6);
    REQUIRE(q.size() == 4);
    CHECK(q[0].layers() == std::vector<std::size_t>{0, 1});
    CHECK(q[1].layers() == std::vector<std::size_t>{2});
    CHECK(q[2].layers() == std::vector<std::size_t>{3, 4});
    CHECK(q[3].layers() == std::vector<std::size_t>{5});
    // fewer layers than quartiles: empty groups are dropped
    CHECK(quartile_interventions(3).size() == 3);
    CHECK(quartile_interventions(1).size() == 1);
    CHECK(last_quartile_layers(8) == std::vector<std::size_t>{6, 7});
    CHECK(last_quartile_layers(2) == std::vector<std::size_t>{1});
    CHECK(per_layer_interventions(8).size() == 8);
    CHECK(default_interventions(8).size() == 12);
}

TEST_CASE("relative drop") {
    CHECK(relative_drop(0.8, 0.6) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(relative_drop(0.5, 0.5) == 0.0);
    CHECK(std::isnan(relative_drop(0.0, 0.3)));
    CHECK(relative_drop(1.0, 1.5) == -0.5);
}

TEST_CASE("induction probes") {
    InductionOptions o;
    o.n_probes = 100;
    o.span = 10;
    const auto probes = make_induction_probes(50, o);
    REQUIRE(probes.size() == 100);
    for (const auto& p : probes) {
        REQUIRE(p.tokens.size() > 10);
        const std::size_t j = p.tokens.size() - 10 - 1;
        CHECK(j <= 8);
        std::set<TokenId> first(p.tokens.begin(), p.tokens.begin() + 10);
        CHECK(first.size() == 10);
        for (std::size_t i = 0; i <= j; ++i) CHECK(p.tokens[10 + i] == p.tokens[i]);
        CHECK(p.target == p.tokens[j + 1]);
    }
    CHECK(make_induction_probes(50, o)[7].tokens == probes[7].tokens);

    const auto cfg = oracle::tiny_config(2, 2, 8, 50, 24);
    const auto w = oracle::random_weights(cfg, 73);
    o.n_probes = 0;
    CHECK_THROWS_AS(induction_task_eval(w, cfg, {}, o), InputError);
    o.n_probes = 4;
    o.span = 60;
    CHECK_THROWS_AS(induction_task_eval(w, cfg, {}, o), InputError);
    o.span = 20;  // probes up to 2 * 20 - 1 tokens exceed max_seq_len = 24
    CHECK_THROWS_AS(induction_task_eval(w, cfg, {}, o), InputError);
}

TEST_CASE("untrained model scores induction at chance") {
    ModelConfig cfg = oracle::tiny_config(2, 2, 16, 64, 32);
    const auto w = init_weights(cfg, 74);
    InductionOptions o;
    o.n_probes = 2000;
    o.span = 16;
    const double acc = induction_task_eval(w, cfg, {}, o);
    const double p = 1.0 / 64;
    CHECK(std::abs(acc - p) <= 3 * std::sqrt(p * (1 - p) / 2000));
}

TEST_CASE("induction probes never occur in a training corpus") {
    CorpusSpec s;
    s.vocab_size = 512;
    s.background_tokens = 200'000;
    s.heldout_tokens = 1000;
    s.n_canaries = 8;
    s.n_controls = 8;
    const Corpus c = build_corpus(s);
    InductionOptions o;
    const auto probes = make_induction_probes(512, o);
    for (const auto& p : probes) {
        std::size_t hits = 0;
        for (std::size_t i = 0; i + p.tokens.size() <= c.stream.size(); ++i) {
            std::size_t k = 0;
            while (k < p.tokens.size() && c.stream[i + k] == p.tokens[k]) ++k;
            hits += k == p.tokens.size();
        }
        CHECK(hits == 0);
    }
}

TEST_CASE("baseline-only sweep has zero drops") {
    const auto in = small_inputs();
    const auto r = evaluate_sweep(in, {InterventionSpec::vanilla()}, small_options());
    REQUIRE(r.rows.size() == 1);
    CHECK(r.rows[0].rel_drop_em == 0.0);
    CHECK(r.rows[0].rel_drop_language == 0.0);
    CHECK(sweep_to_json(r).find("\"rel_drop_reasoning\"") != std::string::npos);
    CHECK(r.baseline.rel_drop_language == 0.0);
    CHECK_FALSE(r.rows[0].exceeds_baseline);
    CHECK_THROWS_AS(evaluate_sweep(in, {}, small_options()), PlanError);
    CHECK_THROWS_AS(evaluate_sweep(in, {InterventionSpec::single(4)}, small_options()), PlanError);
}

TEST_CASE("sweep rows are deterministic and order independent") {
    const auto in = small_inputs();
    auto opts = small_options();
    opts.workers = 3;
    const std::vector<InterventionSpec> plan{InterventionSpec::single(0), InterventionSpec::single(3),
                                             InterventionSpec::single(0), InterventionSpec{{1, 2}}};
    const auto a = evaluate_sweep(in, plan, opts);
    REQUIRE(a.rows.size() == 4);
    CHECK(metrics_to_json(a.rows[0].metrics) == metrics_to_json(a.rows[2].metrics));
    CHECK(a.rows[0].induction_acc == a.rows[2].induction_acc);

    const std::vector<InterventionSpec> permuted{plan[3], plan[1], plan[0]};
    opts.workers = 1;
    const auto b = evaluate_sweep(in, permuted, opts);
    CHECK(metrics_to_json(b.rows[0].metrics) == metrics_to_json(a.rows[3].metrics));
    CHECK(metrics_to_json(b.rows[1].metrics) == metrics_to_json(a.rows[1].metrics));
    CHECK(metrics_to_json(b.rows[2].metrics) == metrics_to_json(a.rows[0].metrics));
    CHECK(sweep_to_json(evaluate_sweep(in, plan, opts)) == sweep_to_json(a));

    const auto& row = a.rows[1];
    CHECK(row.rel_drop_language ==
          doctest::Approx(relative_drop(1 / a.baseline.metrics.heldout_ppl, 1 / row.metrics.heldout_ppl)));
    CHECK(row.exceeds_baseline == (row.metrics.em_rate > a.baseline.metrics.em_rate ||
                                   row.induction_acc > a.baseline.induction_acc ||
                                   row.metrics.heldout_ppl < a.baseline.metrics.heldout_ppl));
}

TEST_CASE("sweep serialization") {
    const auto in = small_inputs();
    const auto r = evaluate_sweep(in, quartile_interventions(4), small_options());
    const std::string csv = sweep_to_csv(r);
    CHECK(csv.rfind("intervention,em_rate,mean_ta,mean_ce_mem,mean_ce_nonmem,heldout_ppl,induction_acc,"
                    "rel_drop_reasoning,rel_drop_language,exceeds_baseline\n",
                    0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 1 + 4);  // header, baseline, four groups
    CHECK(relative_drop_table(r).rfind("intervention,rel_drop_reasoning,rel_drop_language\n", 0) == 0);
    const auto back = sweep_from_json(sweep_to_json(r));
    CHECK(back.config == r.config);
    CHECK(back.rows.size() == r.rows.size());
    CHECK(back.rows[2].metrics.em_rate == r.rows[2].metrics.em_rate);
    CHECK(back.rows[2].metrics.intervention == r.rows[2].metrics.intervention);
    CHECK_THROWS_AS(sweep_from_json("{"), LoadError);

    // zero baseline induction accuracy is reported as undefined
    SweepResult z = r;
    z.baseline.induction_acc = 0.0;
    z.rows[0].rel_drop_reasoning = relative_drop(0.0, 0.0);
    CHECK(sweep_to_csv(z).find("undefined") != std::string::npos);
}

TEST_CASE("run_sweep from files") {
    const auto in = small_inputs();
    const fs::path dir = fs::temp_directory_path() / "asc_test_sweep";
    fs::remove_all(dir);
    Corpus c;
    c.canaries = in.canaries;
    c.controls = in.controls;
    c.heldout = in.heldout;
    c.stream = in.heldout;
    save_corpus(dir / "corpus", c);
    save_checkpoint(dir / "m.ckpt", in.config, in.weights);

    SweepPlan plan;
    plan.checkpoint = dir / "m.ckpt";
    plan.corpus_dir = dir / "corpus";
    plan.interventions = {InterventionSpec::single(1)};
    plan.options = small_options();
    plan.output_dir = dir / "out";
    const auto r = run_sweep(plan);
    CHECK(fs::exists(dir / "out" / "sweep.json"));
    CHECK(fs::exists(dir / "out" / "sweep.csv"));
    CHECK(r.corpus_digest == corpus_digest(dir / "corpus"));

    SweepInputs f32 = in;
    f32.weights = round_to_f32(in.weights);
    f32.corpus_digest = r.corpus_digest;
    CHECK(sweep_to_json(evaluate_sweep(f32, plan.interventions, plan.options)) == sweep_to_json(r));

    Bytes bytes = read_file(dir / "m.ckpt");
    bytes[bytes.size() - 20] ^= 1;
    write_file(dir / "bad.ckpt", bytes);
    plan.checkpoint = dir / "bad.ckpt";
    CHECK_THROWS_AS(run_sweep(plan), LoadError);
    plan.checkpoint = dir / "missing.ckpt";
    CHECK_THROWS_AS(run_sweep(plan), LoadError);
    plan.checkpoint = dir / "m.ckpt";
    plan.interventions = {InterventionSpec::single(9)};
    CHECK_THROWS_AS(run_sweep(plan), PlanError);
    fs::remove_all(dir);
}

TEST_CASE("scale comparison") {
    const auto in = small_inputs(8);
    auto opts = small_options();
    opts.tasks.induction = false;
    const auto r = evaluate_sweep(in, per_layer_interventions(8), opts);
    const auto cmp = scale_compare({{"a", r}, {"b", r}});
    REQUIRE(cmp.gaps.size() == 2);
    CHECK(cmp.gaps[0].gap == cmp.gaps[1].gap);
    CHECK(cmp.gaps[0].n_layers == 8);
    // both curves identical apart from the label
    std::istringstream is(cmp.csv);
    std::string line, header;
    std::getline(is, header);
    std::vector<std::string> a, b;
    while (std::getline(is, line)) (line.rfind("\"a\"", 0) == 0 ? a : b).push_back(line.substr(3));
    CHECK(a.size() == 8);
    CHECK(a == b);
    CHECK(cmp.csv.find(",8,8,3,0.375,") != std::string::npos);

    CHECK_THROWS_AS(scale_compare({{"a", r}}), InputError);
    auto other = r;
    other.corpus_digest = "different";
    CHECK_THROWS_AS(scale_compare({{"a", r}, {"b", other}}), InputError);
}
