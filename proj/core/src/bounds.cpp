#include "asc/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "asc/errors.hpp"
#include "asc/parallel.hpp"
#include "asc/rng.hpp"
#include "json.hpp"

namespace asc {

using nlohmann::json;

namespace {

void check_block(const TheoremBlock& b, const Matrix& x) {
    if (x.rows() == 0) throw InputError("bound block: input has no rows");
    const std::size_t d = x.cols();
    const bool two = b.ffn_w_out.size() > 0;
    if (b.ffn_w.cols() != d || (!two && b.ffn_w.rows() != d) ||
        (two && (b.ffn_w_out.rows() != d || b.ffn_w_out.cols() != b.ffn_w.rows())))
        throw ShapeError("bound block: FFN weights (" + std::to_string(b.ffn_w.rows()) + "x" +
                         std::to_string(b.ffn_w.cols()) + ") do not match input width " + std::to_string(d));
}

void check_alpha(const Matrix& a, std::size_t n) {
    if (a.rows() != n || a.cols() != n)
        throw ShapeError("bound block: alpha must be " + std::to_string(n) + "x" + std::to_string(n));
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double v = a(i, j);
            if (j > i && v != 0.0) throw InputError("bound block: alpha has weight on a future position");
            if (!(v >= 0.0)) throw InputError("bound block: alpha has a negative entry");
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-12) throw InputError("bound block: alpha row does not sum to 1");
    }
}

Vector row_vec(const Matrix& m, std::size_t r) {
    const auto s = m.row(r);
    return {s.begin(), s.end()};
}

// z = sum_i alpha_i x_i + x_n for row `r` of alpha.
Vector standard_residual(const Matrix& x, const Matrix& alpha, std::size_t r) {
    const std::size_t d = x.cols();
    Vector z(d, 0.0);
    for (std::size_t i = 0; i <= r; ++i) {
        const double a = alpha(r, i);
        const auto xi = x.row(i);
        for (std::size_t c = 0; c < d; ++c) z[c] += a * xi[c];
    }
    const auto xr = x.row(r);
    for (std::size_t c = 0; c < d; ++c) z[c] += xr[c];
    return z;
}

Vector identity_residual(const Matrix& x) {
    Vector z = row_vec(x, x.rows() - 1);
    for (double& v : z) v *= 2.0;
    return z;
}

Vector block_output(const TheoremBlock& b, const Vector& z) {
    Vector v = theorem_ffn(b, z);
    for (std::size_t c = 0; c < v.size(); ++c) v[c] += z[c];
    return v;
}

double eps_diff(const TheoremBlock& b, const Vector& z_ia, const Vector& z) {
    return l2_norm(subtract(theorem_epsilon(b, z_ia), theorem_epsilon(b, z)));
}

void finish(BoundReport& r) {
    r.slack = r.rhs_total - r.measured_d_norm;
    r.holds = r.measured_d_norm <= r.rhs_total + kBoundSlackTolerance;
}

// Theorem-1 report for block b over inputs x with weights alpha, plus the perturbed output.
BoundReport single_block(const TheoremBlock& b, const Matrix& x, const Matrix& alpha, Vector* v_ia_out = nullptr) {
    const std::size_t n = x.rows();
    const Vector z = standard_residual(x, alpha, n - 1);
    const Vector z_ia = identity_residual(x);
    const Vector v = block_output(b, z);
    const Vector v_ia = block_output(b, z_ia);
    BoundReport r;
    r.measured_d_norm = l2_norm(subtract(v_ia, v));
    r.w_norm_factor = 1.0 + operator_norm(theorem_linear_part(b));
    r.m = max_spread(x);
    r.one_minus_alpha = 1.0 - alpha(n - 1, n - 1);
    r.eps_diff_norm = eps_diff(b, z_ia, z);
    r.rhs_total = r.w_norm_factor * r.m * r.one_minus_alpha + r.eps_diff_norm;
    finish(r);
    if (v_ia_out) *v_ia_out = v_ia;
    return r;
}

}  // namespace

Matrix injected_alpha(const Vector& last_row) {
    const std::size_t n = last_row.size();
    Matrix a(n, n);
    for (std::size_t i = 0; i + 1 < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) a(i, j) = 1.0 / static_cast<double>(i + 1);
    for (std::size_t j = 0; j < n; ++j) a(n - 1, j) = last_row[j];
    return a;
}

Matrix theorem_attention(const TheoremBlock& b, const Matrix& x) {
    check_block(b, x);
    const std::size_t n = x.rows();
    if (b.attention == AttentionMode::injected) {
        check_alpha(b.alpha, n);
        return b.alpha;
    }
    if (b.w_q.rows() != x.cols() || b.w_k.rows() != x.cols() || b.w_q.cols() != b.w_k.cols() || b.w_q.cols() == 0)
        throw ShapeError("bound block: W_Q/W_K shapes do not match the input width");
    const Matrix q = matmul(x, b.w_q);
    const Matrix k = matmul(x, b.w_k);
    const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        Vector scores(i + 1);
        for (std::size_t j = 0; j <= i; ++j) scores[j] = dot(q.row(i), k.row(j)) * s;
        const Vector p = softmax(scores);
        for (std::size_t j = 0; j <= i; ++j) a(i, j) = p[j];
    }
    return a;
}

Matrix theorem_linear_part(const TheoremBlock& b) {
    return b.ffn_w_out.size() > 0 ? matmul(b.ffn_w_out, b.ffn_w) : b.ffn_w;
}

Vector theorem_ffn(const TheoremBlock& b, std::span<const double> z) {
    if (b.activation == Activation::identity) return matvec(theorem_linear_part(b), z);
    Vector h = matvec(b.ffn_w, z);
    for (double& v : h) v = gelu(v);
    return b.ffn_w_out.size() > 0 ? matvec(b.ffn_w_out, h) : h;
}

Vector theorem_epsilon(const TheoremBlock& b, std::span<const double> z) {
    if (b.activation == Activation::identity) return Vector(z.size(), 0.0);
    return subtract(theorem_ffn(b, z), matvec(theorem_linear_part(b), z));
}

Vector eval_theorem_block_with(const TheoremBlock& b, const Matrix& x, const Matrix& alpha, BlockMode mode) {
    check_block(b, x);
    check_alpha(alpha, x.rows());
    const Vector z = mode == BlockMode::standard ? standard_residual(x, alpha, x.rows() - 1) : identity_residual(x);
    return block_output(b, z);
}

Vector eval_theorem_block(const TheoremBlock& b, const Matrix& x, BlockMode mode) {
    return eval_theorem_block_with(b, x, theorem_attention(b, x), mode);
}

Matrix eval_theorem_block_rows(const TheoremBlock& b, const Matrix& x, const Matrix& alpha) {
    check_block(b, x);
    check_alpha(alpha, x.rows());
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const Vector v = block_output(b, standard_residual(x, alpha, r));
        std::copy(v.begin(), v.end(), out.row(r).begin());
    }
    return out;
}

double max_spread(const Matrix& x) {
    const std::size_t n = x.rows();
    double m = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) m = std::max(m, l2_norm(subtract(x.row(n - 1), x.row(i))));
    return m;
}

BoundReport theorem1_check(const TheoremBlock& b, const Matrix& x) {
    return single_block(b, x, theorem_attention(b, x));
}

Theorem2Report theorem2_check(const TheoremBlock& layer_l, const TheoremBlock& layer_l1, const Matrix& x) {
    const std::size_t n = x.rows();
    const Matrix alpha_l = theorem_attention(layer_l, x);
    const Matrix v_l = eval_theorem_block_rows(layer_l, x, alpha_l);  // unperturbed layer-L outputs
    check_block(layer_l1, v_l);
    const Matrix alpha_l1 = theorem_attention(layer_l1, v_l);

    Theorem2Report out;

    // Replace at L: only the last-token row entering L+1 changes.
    Vector v_l_ia;
    const BoundReport inner = single_block(layer_l, x, alpha_l, &v_l_ia);
    Matrix v_l_perturbed = v_l;
    std::copy(v_l_ia.begin(), v_l_ia.end(), v_l_perturbed.row(n - 1).begin());
    const Vector z = standard_residual(v_l, alpha_l1, n - 1);
    const Vector z_pert = standard_residual(v_l_perturbed, alpha_l1, n - 1);
    {
        BoundReport& r = out.replace_at_l;
        r.measured_d_norm = l2_norm(subtract(block_output(layer_l1, z_pert), block_output(layer_l1, z)));
        r.w_norm_factor = 1.0 + operator_norm(theorem_linear_part(layer_l1));
        r.m = inner.m;
        r.one_minus_alpha = inner.one_minus_alpha;
        r.eps_diff_norm = eps_diff(layer_l1, z_pert, z);
        r.propagation_factor = 1.0 + alpha_l1(n - 1, n - 1);
        r.inner_rhs = inner.rhs_total;
        r.inner_measured = inner.measured_d_norm;
        r.rhs_total = r.w_norm_factor * r.propagation_factor * r.inner_rhs + r.eps_diff_norm;
        finish(r);
    }

    // Replace at L+1: the single-block bound over the unperturbed layer-L outputs.
    out.replace_at_l1 = single_block(layer_l1, v_l, alpha_l1);
    return out;
}

namespace {

Matrix random_w(Rng& rng, std::size_t d, double max_norm) {
    Matrix w(d, d);
    for (double& v : w.storage()) v = rng.normal();
    const double norm = operator_norm(w);
    if (norm == 0.0) return w;
    return scale(w, rng.uniform() * max_norm / norm);
}

Matrix random_alpha(Rng& rng, std::size_t n) {
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            double u;
            do {
                u = rng.uniform();
            } while (u <= 0.0);
            a(i, j) = -std::log(u);  // Dirichlet(1, ..., 1) via normalized exponentials
            sum += a(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) a(i, j) /= sum;
        // Renormalize the diagonal so the row sums to 1 within rounding.
        double rest = 0.0;
        for (std::size_t j = 0; j < i; ++j) rest += a(i, j);
        a(i, i) = std::max(0.0, 1.0 - rest);
    }
    return a;
}

TheoremBlock random_block(Rng& rng, std::size_t n, std::size_t d, const TrialDims& dims) {
    TheoremBlock b;
    b.activation = dims.activation;
    if (dims.activation == Activation::identity) {
        b.ffn_w = random_w(rng, d, dims.max_w_norm);
    } else {
        b.ffn_w = random_w(rng, d, 1.0);
        b.ffn_w_out = random_w(rng, d, 1.0);
        const double norm = operator_norm(matmul(b.ffn_w_out, b.ffn_w));
        if (norm > 0.0) {
            const double s = std::sqrt(rng.uniform() * dims.max_w_norm / norm);
            b.ffn_w = scale(b.ffn_w, s);
            b.ffn_w_out = scale(b.ffn_w_out, s);
        }
    }
    b.attention = AttentionMode::injected;
    b.alpha = random_alpha(rng, n);
    return b;
}

}  // namespace

TrialCase random_trial(const TrialDims& dims, std::uint64_t seed) {
    if (dims.max_n < 1 || dims.max_d < 1) throw ConfigError("trial dims must be >= 1", {"max_n", "max_d"});
    Rng rng(seed);
    const std::size_t n = 1 + rng.below(dims.max_n);
    const std::size_t d = 1 + rng.below(dims.max_d);
    TrialCase t;
    t.x = Matrix(n, d);
    for (double& v : t.x.storage()) v = rng.normal();
    t.layer_l = random_block(rng, n, d, dims);
    t.layer_l1 = random_block(rng, n, d, dims);
    return t;
}

BoundsRun run_bound_trials(std::size_t trials, const TrialDims& dims, std::uint64_t root_seed, std::size_t workers) {
    BoundsRun run;
    run.root_seed = root_seed;
    run.dims = dims;
    run.trials.resize(trials);
    parallel_for(trials, workers, [&](std::size_t i) {
        TrialResult& r = run.trials[i];
        r.trial = i;
        r.seed = derive_seed(root_seed, static_cast<std::uint64_t>(i));
        const TrialCase tc = random_trial(dims, r.seed);
        r.n = tc.x.rows();
        r.d = tc.x.cols();
        r.theorem1 = theorem1_check(tc.layer_l, tc.x);
        r.theorem2 = theorem2_check(tc.layer_l, tc.layer_l1, tc.x);
    });
    for (const auto& r : run.trials) {
        if (!r.theorem1.holds) ++run.theorem1_violations;
        if (!r.theorem2.replace_at_l.holds || !r.theorem2.replace_at_l1.holds) ++run.theorem2_violations;
    }
    return run;
}

double depth_ratio(double a, double b) {
    if (b == 0.0) return a == 0.0 ? std::numeric_limits<double>::quiet_NaN() : std::numeric_limits<double>::infinity();
    return a / b;
}

RatioSummary summarize_ratios(const std::vector<double>& ratios) {
    RatioSummary s;
    std::vector<double> finite;
    std::size_t above = 0;
    for (double r : ratios) {
        if (std::isnan(r)) {
            ++s.degenerate;
            continue;
        }
        if (r > 1.0) ++above;
        if (std::isfinite(r)) finite.push_back(r);
    }
    s.count = ratios.size() - s.degenerate;
    if (s.count > 0) s.fraction_above_one = static_cast<double>(above) / static_cast<double>(s.count);
    if (finite.empty()) return s;
    std::sort(finite.begin(), finite.end());
    const std::size_t k = finite.size();
    s.median = k % 2 == 1 ? finite[k / 2] : 0.5 * (finite[k / 2 - 1] + finite[k / 2]);
    double sum = 0.0;
    for (double r : finite) sum += r;
    s.mean = sum / static_cast<double>(k);
    s.min = finite.front();
    s.max = finite.back();
    return s;
}

DepthGapReport depth_gap_from(const std::vector<Theorem2Report>& reports, std::uint64_t root_seed) {
    DepthGapReport out;
    out.root_seed = root_seed;
    out.trials = reports.size();
    for (const auto& r : reports) {
        out.measured_ratios.push_back(depth_ratio(r.replace_at_l.measured_d_norm, r.replace_at_l1.measured_d_norm));
        out.rhs_ratios.push_back(depth_ratio(r.replace_at_l.rhs_total, r.replace_at_l1.rhs_total));
    }
    out.measured = summarize_ratios(out.measured_ratios);
    out.rhs = summarize_ratios(out.rhs_ratios);
    return out;
}

DepthGapReport depth_gap_from(const BoundsRun& run) {
    std::vector<Theorem2Report> reports;
    reports.reserve(run.trials.size());
    for (const auto& t : run.trials) reports.push_back(t.theorem2);
    return depth_gap_from(reports, run.root_seed);
}

DepthGapReport depth_gap_report(std::size_t trials, const TrialDims& dims, std::uint64_t root_seed) {
    if (trials < 1) throw InputError("depth_gap_report needs at least one trial");
    return depth_gap_from(run_bound_trials(trials, dims, root_seed));
}

namespace {

json num(double v) {
    if (std::isnan(v)) return "degenerate";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

json report_json(const BoundReport& r) {
    return {{"measured_D_norm", r.measured_d_norm},
            {"rhs_terms",
             {{"w_norm_factor", r.w_norm_factor},
              {"M", r.m},
              {"one_minus_alpha", r.one_minus_alpha},
              {"eps_diff_norm", r.eps_diff_norm},
              {"propagation_factor", r.propagation_factor},
              {"inner_rhs", r.inner_rhs},
              {"inner_measured", r.inner_measured}}},
            {"rhs_total", r.rhs_total},
            {"holds", r.holds},
            {"slack", r.slack}};
}

json ratio_json(const RatioSummary& s) {
    return {{"count", s.count},   {"degenerate", s.degenerate}, {"median", num(s.median)},
            {"mean", num(s.mean)}, {"min", num(s.min)},         {"max", num(s.max)},
            {"fraction_above_one", s.fraction_above_one}};
}

}  // namespace

std::string bound_report_json(const BoundReport& r) { return report_json(r).dump(); }

std::string bounds_jsonl(const BoundsRun& run) {
    std::ostringstream os;
    const char* act_name = run.dims.activation == Activation::gelu ? "gelu" : "identity";
    for (const auto& t : run.trials) {
        json j{{"root_seed", run.root_seed},
               {"trial", t.trial},
               {"trial_seed", t.seed},
               {"activation", act_name},
               {"n", t.n},
               {"d", t.d},
               {"theorem1", report_json(t.theorem1)},
               {"theorem2", {{"case_replace_at_L", report_json(t.theorem2.replace_at_l)},
                             {"case_replace_at_L1", report_json(t.theorem2.replace_at_l1)}}}};
        os << j.dump() << '\n';
    }
    return os.str();
}

std::string depth_gap_json(const DepthGapReport& r) {
    json measured = json::array(), rhs = json::array();
    for (double v : r.measured_ratios) measured.push_back(num(v));
    for (double v : r.rhs_ratios) rhs.push_back(num(v));
    json j{{"root_seed", r.root_seed},
           {"trials", r.trials},
           {"measured_ratio", ratio_json(r.measured)},
           {"rhs_ratio", ratio_json(r.rhs)},
           {"measured_ratios", measured},
           {"rhs_ratios", rhs}};
    return j.dump(2);
}

}  // namespace asc
