#pragma once

// Numerical verification of the single-block and two-block output-difference bounds for
// identity ("short-circuited") attention.
//
// A bound-checker block is the bare convex-combination abstraction of a transformer block:
//   standard:  z = sum_i alpha_i x_i + x_n,  v = z + act(W z)
//   identity:  z = 2 x_n,                   v = z + act(W z)
// with no value/output projections and no layer norm. Vectors are columns here (W z); inputs
// are stored one token per row of X. The linear part of the FFN is W and the approximation
// error is eps(z) = act(W z) - W z, which is identically zero for the identity activation.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "asc/tensor.hpp"

namespace asc {

enum class Activation { identity, gelu };
enum class AttentionMode { softmax, injected };
enum class BlockMode { standard, identity_attention };

struct TheoremBlock {
    // FFN(z) = act(ffn_w z), or ffn_w_out act(ffn_w z) when ffn_w_out is set. The linear part W is
    // ffn_w (d x d) or ffn_w_out ffn_w (d x k times k x d); eps(z) = FFN(z) - W z.
    Matrix ffn_w;
    Matrix ffn_w_out;
    Activation activation = Activation::identity;
    AttentionMode attention = AttentionMode::injected;
    // Injected mode: n x n lower-triangular, row-stochastic; the last row is the last token's alpha.
    Matrix alpha;
    // Softmax mode: alpha = causal softmax((X W_Q)(X W_K)ᵀ / sqrt(d_k)); W_Q, W_K are d x d_k.
    Matrix w_q, w_k;
};

// Causal weights with the given last row and uniform causal rows above it.
Matrix injected_alpha(const Vector& last_row);

// n x n attention weights of `b` over the rows of x. Throws ShapeError/InputError on bad shapes
// or an injected matrix that is not causal and row-stochastic.
Matrix theorem_attention(const TheoremBlock& b, const Matrix& x);

// The linear part W (d x d).
Matrix theorem_linear_part(const TheoremBlock& b);
// FFN(z); with the identity activation this is exactly W z.
Vector theorem_ffn(const TheoremBlock& b, std::span<const double> z);
// FFN(z) - W z; identically zero for the identity activation.
Vector theorem_epsilon(const TheoremBlock& b, std::span<const double> z);

// Last-token output v for the requested mode.
Vector eval_theorem_block(const TheoremBlock& b, const Matrix& x, BlockMode mode);
// Same, with attention weights supplied explicitly (rows of `alpha` are used for the standard path).
Vector eval_theorem_block_with(const TheoremBlock& b, const Matrix& x, const Matrix& alpha, BlockMode mode);
// Standard-mode output for every row; row i uses alpha row i.
Matrix eval_theorem_block_rows(const TheoremBlock& b, const Matrix& x, const Matrix& alpha);

inline constexpr double kBoundSlackTolerance = 1e-9;

struct BoundReport {
    double measured_d_norm = 0.0;
    // 1 + ||W|| (spectral norm) of the block whose output is measured.
    double w_norm_factor = 0.0;
    // M = max_{i != n} ||x_n - x_i|| and 1 - alpha_n, both taken at the short-circuited block.
    double m = 0.0;
    double one_minus_alpha = 0.0;
    // ||eps_IA - eps|| at the measured block.
    double eps_diff_norm = 0.0;
    // Replace-at-L case only: (1 + alpha_n^{L+1}) and the layer-L quantities it multiplies.
    double propagation_factor = 1.0;
    double inner_rhs = 0.0;
    double inner_measured = 0.0;
    double rhs_total = 0.0;
    bool holds = false;
    double slack = 0.0;  // rhs_total - measured_d_norm
};

// M for rows of x relative to the last row (0 when n == 1).
double max_spread(const Matrix& x);

BoundReport theorem1_check(const TheoremBlock& b, const Matrix& x);

struct Theorem2Report {
    BoundReport replace_at_l;   // short-circuit layer L, measure after layer L+1
    BoundReport replace_at_l1;  // short-circuit layer L+1, measure after layer L+1
};

// Layer L+1 attention weights are computed once over the unperturbed layer-L outputs and shared
// by both paths; in the replace-at-L path only the last-token row entering L+1 changes.
Theorem2Report theorem2_check(const TheoremBlock& layer_l, const TheoremBlock& layer_l1, const Matrix& x);

struct TrialDims {
    std::size_t max_n = 8;
    std::size_t max_d = 16;
    double max_w_norm = 3.0;
    Activation activation = Activation::identity;
};

struct TrialCase {
    Matrix x;
    TheoremBlock layer_l;
    TheoremBlock layer_l1;
};

// Random injected-alpha pair of blocks with ||W|| <= max_w_norm, reproducible from `seed`. Gelu
// trials use a two-matrix FFN (ffn_w_out set) so W is a product, as in the real block.
TrialCase random_trial(const TrialDims& dims, std::uint64_t seed);

struct TrialResult {
    std::size_t trial = 0;
    std::uint64_t seed = 0;
    std::size_t n = 0;
    std::size_t d = 0;
    BoundReport theorem1;
    Theorem2Report theorem2;
    bool all_hold() const { return theorem1.holds && theorem2.replace_at_l.holds && theorem2.replace_at_l1.holds; }
};

struct BoundsRun {
    std::uint64_t root_seed = 0;
    TrialDims dims;
    std::vector<TrialResult> trials;
    std::size_t theorem1_violations = 0;
    std::size_t theorem2_violations = 0;  // trials where either case fails
};

BoundsRun run_bound_trials(std::size_t trials, const TrialDims& dims, std::uint64_t root_seed, std::size_t workers = 1);

struct RatioSummary {
    std::size_t count = 0;  // non-degenerate ratios
    std::size_t degenerate = 0;
    double median = 0.0;
    double mean = 0.0;
    double min = 0.0;
    double max = 0.0;
    double fraction_above_one = 0.0;
};

struct DepthGapReport {
    std::uint64_t root_seed = 0;
    std::size_t trials = 0;
    // Per trial: ||D^{L+1}_{IA,L}|| / ||D^{L+1}_{IA,L+1}|| and the matching ratio of right-hand sides.
    // A 0/0 ratio is recorded as NaN and counted as degenerate.
    std::vector<double> measured_ratios;
    std::vector<double> rhs_ratios;
    RatioSummary measured;
    RatioSummary rhs;
};

// Ratio a / b; NaN for 0/0, +inf for x/0 with x > 0.
double depth_ratio(double a, double b);
RatioSummary summarize_ratios(const std::vector<double>& ratios);

DepthGapReport depth_gap_report(std::size_t trials, const TrialDims& dims, std::uint64_t root_seed);
DepthGapReport depth_gap_from(const std::vector<Theorem2Report>& reports, std::uint64_t root_seed = 0);
DepthGapReport depth_gap_from(const BoundsRun& run);

std::string bound_report_json(const BoundReport& r);
// One JSON object per line for each trial, with the root seed for replay.
std::string bounds_jsonl(const BoundsRun& run);
std::string depth_gap_json(const DepthGapReport& r);

}  // namespace asc
