#pragma once

// Dense row-major float64 kernel used by every other module.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace asc {

using Vector = std::vector<double>;

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);
    static Matrix diagonal(std::span<const double> diag);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    Matrix transpose() const;
    // Copy of columns [first, first + count).
    Matrix col_block(std::size_t first, std::size_t count) const;
    void set_col_block(std::size_t first, const Matrix& block);

    void fill(double v) noexcept;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

bool all_finite(const Matrix& m) noexcept;
bool all_finite(std::span<const double> v) noexcept;

// a · b. Throws ShapeError when a.cols() != b.rows().
Matrix matmul(const Matrix& a, const Matrix& b);
// aᵀ · b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// a · bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// out += aᵀ · b, used for gradient accumulation.
void add_matmul_tn(Matrix& out, const Matrix& a, const Matrix& b);
// out += a · b
void add_matmul(Matrix& out, const Matrix& a, const Matrix& b);

Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Vector matvec(const Matrix& m, std::span<const double> x);

// Row-wise softmax with per-row max subtraction.
Matrix softmax_rows(const Matrix& m);
// Softmax of a single vector, same stabilization as softmax_rows.
Vector softmax(std::span<const double> x);

Vector layer_norm(std::span<const double> x, std::span<const double> gain, std::span<const double> bias,
                  double eps);
// Applies layer_norm to every row of m.
Matrix layer_norm_rows(const Matrix& m, std::span<const double> gain, std::span<const double> bias, double eps);

// tanh-approximation GELU.
double gelu(double x) noexcept;
double gelu_derivative(double x) noexcept;
Vector gelu(std::span<const double> x);
// Vectorized in-place GELU over a buffer; tanh is evaluated as 1 - 2 / (exp(2y) + 1), which agrees
// with std::tanh to a few ulps. When `tanh_out` is non-empty it receives the tanh term.
void gelu_inplace(std::span<double> x, std::span<double> tanh_out = {});

double l2_norm(std::span<const double> x) noexcept;
double dot(std::span<const double> a, std::span<const double> b);
Vector subtract(std::span<const double> a, std::span<const double> b);

struct PowerIterationOptions {
    double relative_tolerance = 1e-8;
    std::size_t max_iterations = 10'000;
};

// Spectral norm by power iteration on mᵀm. Throws NumericError on non-convergence.
double operator_norm(const Matrix& m, PowerIterationOptions opts = {});

}  // namespace asc
