#include "asc/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "asc/errors.hpp"

namespace asc {

namespace {

using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const EigenRowMajor>;
using MutMap = Eigen::Map<EigenRowMajor>;

ConstMap view(const Matrix& m) { return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())}; }
MutMap view(Matrix& m) { return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())}; }

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

[[noreturn]] void shape_fail(const char* op, const Matrix& a, const Matrix& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " != " + std::to_string(rows_) +
                         "x" + std::to_string(cols_));
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
    Matrix m(diag.size(), diag.size());
    for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
    return m;
}

Matrix Matrix::transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Matrix Matrix::col_block(std::size_t first, std::size_t count) const {
    if (first + count > cols_) throw ShapeError("col_block: range exceeds " + shape_str(*this));
    Matrix out(rows_, count);
    for (std::size_t r = 0; r < rows_; ++r)
        std::copy_n(data_.data() + r * cols_ + first, count, out.data() + r * count);
    return out;
}

void Matrix::set_col_block(std::size_t first, const Matrix& block) {
    if (block.rows() != rows_ || first + block.cols() > cols_) shape_fail("set_col_block", *this, block);
    for (std::size_t r = 0; r < rows_; ++r)
        std::copy_n(block.data() + r * block.cols(), block.cols(), data_.data() + r * cols_ + first);
}

void Matrix::fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

bool all_finite(std::span<const double> v) noexcept {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

bool all_finite(const Matrix& m) noexcept { return all_finite(std::span<const double>(m.storage())); }

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) shape_fail("matmul", a, b);
    Matrix out(a.rows(), b.cols());
    if (a.cols() == 0) return out;
    view(out).noalias() = view(a) * view(b);
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) shape_fail("matmul_tn", a, b);
    Matrix out(a.cols(), b.cols());
    if (a.rows() == 0) return out;
    view(out).noalias() = view(a).transpose() * view(b);
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) shape_fail("matmul_nt", a, b);
    Matrix out(a.rows(), b.rows());
    if (a.cols() == 0) return out;
    view(out).noalias() = view(a) * view(b).transpose();
    return out;
}

void add_matmul_tn(Matrix& out, const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) shape_fail("add_matmul_tn", a, b);
    if (a.rows() == 0) return;
    view(out).noalias() += view(a).transpose() * view(b);
}

void add_matmul(Matrix& out, const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows() || out.rows() != a.rows() || out.cols() != b.cols()) shape_fail("add_matmul", a, b);
    if (a.cols() == 0) return;
    view(out).noalias() += view(a) * view(b);
}

Matrix add(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("add", a, b);
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.storage()[i] += b.storage()[i];
    return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail("subtract", a, b);
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.storage()[i] -= b.storage()[i];
    return out;
}

Matrix scale(const Matrix& a, double s) {
    Matrix out = a;
    for (double& x : out.storage()) x *= s;
    return out;
}

Vector matvec(const Matrix& m, std::span<const double> x) {
    if (m.cols() != x.size()) throw ShapeError("matvec: " + shape_str(m) + " times vector of " + std::to_string(x.size()));
    Vector out(m.rows(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) out[r] = dot(m.row(r), x);
    return out;
}

Vector softmax(std::span<const double> x) {
    Vector out(x.size());
    if (x.empty()) return out;
    const double mx = *std::max_element(x.begin(), x.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - mx);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

Matrix softmax_rows(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        Vector s = softmax(m.row(r));
        std::copy(s.begin(), s.end(), out.row(r).begin());
    }
    return out;
}

Vector layer_norm(std::span<const double> x, std::span<const double> gain, std::span<const double> bias, double eps) {
    if (gain.size() != x.size() || bias.size() != x.size())
        throw ShapeError("layer_norm: length mismatch (" + std::to_string(x.size()) + ", " +
                         std::to_string(gain.size()) + ", " + std::to_string(bias.size()) + ")");
    if (!(eps > 0.0)) throw InputError("layer_norm: eps must be positive");
    const std::size_t n = x.size();
    Vector out(n);
    if (n == 0) return out;
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    return out;
}

Matrix layer_norm_rows(const Matrix& m, std::span<const double> gain, std::span<const double> bias, double eps) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        Vector y = layer_norm(m.row(r), gain, bias, eps);
        std::copy(y.begin(), y.end(), out.row(r).begin());
    }
    return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu(double x) noexcept {
    const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    return 0.5 * x * (1.0 + t);
}

double gelu_derivative(double x) noexcept {
    const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

Vector gelu(std::span<const double> x) {
    Vector out(x.size());
    std::transform(x.begin(), x.end(), out.begin(), [](double v) { return gelu(v); });
    return out;
}

void gelu_inplace(std::span<double> x, std::span<double> tanh_out) {
    if (!tanh_out.empty() && tanh_out.size() != x.size()) throw ShapeError("gelu_inplace: tanh buffer size mismatch");
    Eigen::Map<Eigen::ArrayXd> z(x.data(), static_cast<Eigen::Index>(x.size()));
    const Eigen::ArrayXd y = kGeluC * (z + kGeluA * z.cube());
    const Eigen::ArrayXd t = 1.0 - 2.0 / ((2.0 * y).exp() + 1.0);
    if (!tanh_out.empty()) Eigen::Map<Eigen::ArrayXd>(tanh_out.data(), static_cast<Eigen::Index>(x.size())) = t;
    z = 0.5 * z * (1.0 + t);
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double l2_norm(std::span<const double> x) noexcept {
    // Scaled accumulation so huge/tiny entries neither overflow nor underflow.
    double scale_ = 0.0;
    for (double v : x) scale_ = std::max(scale_, std::abs(v));
    if (scale_ == 0.0) return 0.0;
    double s = 0.0;
    for (double v : x) {
        const double r = v / scale_;
        s += r * r;
    }
    return scale_ * std::sqrt(s);
}

Vector subtract(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("subtract: length mismatch");
    Vector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

double operator_norm(const Matrix& m, PowerIterationOptions opts) {
    if (m.empty()) return 0.0;
    const std::size_t n = m.cols();
    // Deterministic, non-symmetric start so it is unlikely to be orthogonal to the top singular vector.
    Vector v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.37 * std::sin(1.0 + 2.1 * static_cast<double>(i));
    double nv = l2_norm(v);
    for (double& x : v) x /= nv;

    double sigma = 0.0;
    for (std::size_t it = 1; it <= opts.max_iterations; ++it) {
        const Vector mv = matvec(m, v);
        Vector w(n, 0.0);  // mᵀ m v
        for (std::size_t r = 0; r < m.rows(); ++r) {
            const auto row = m.row(r);
            for (std::size_t c = 0; c < n; ++c) w[c] += row[c] * mv[r];
        }
        const double next = std::sqrt(std::max(0.0, dot(v, w)));  // sqrt of the Rayleigh quotient
        const double nw = l2_norm(w);
        if (nw == 0.0) return 0.0;
        for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / nw;
        if (it > 1 && std::abs(next - sigma) <= opts.relative_tolerance * next) {
            // One more Rayleigh evaluation on the refreshed vector.
            return std::max(next, l2_norm(matvec(m, v)));
        }
        sigma = next;
    }
    throw NumericError("operator_norm: power iteration did not converge", sigma, opts.max_iterations);
}

}  // namespace asc
