#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace cvgl {

// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    std::string shape_str() const;

    void fill(double v);
    bool all_finite() const noexcept;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// a^T * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix relu(const Matrix& x);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);
// Throws NumericError("degenerate descriptor") on a zero vector.
std::vector<double> l2_normalize(std::span<const double> v);

struct SgdConfig {
    double base_lr = 0.001;
    std::size_t total_steps = 1;
    std::size_t warmup_steps = 0;
    double momentum = 0.0;

    void validate() const;
};

// Linear warmup to base_lr, then half-cosine decay to zero at total_steps.
double cosine_lr(std::size_t step, const SgdConfig& cfg);

// SGD with optional heavy-ball momentum: v <- m*v + g; p <- p - lr*v.
// velocity is created on first use when empty.
void sgd_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads,
              double lr, const SgdConfig& cfg, std::vector<Matrix>& velocity);

// Central-difference check over a flat parameter vector. Returns the max over
// coordinates of |fd - analytic| / max(1e-8, |fd| + |analytic|).
double finite_diff_check(const std::function<double(std::span<const double>)>& f,
                         std::span<const double> params,
                         std::span<const double> analytic_grads,
                         double eps = 1e-5);

// Runs body(i) for i in [0, n) across up to `threads` workers. Each index is
// visited exactly once; callers write to disjoint slots so the result does
// not depend on the thread count.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body);

int default_thread_count();

} // namespace cvgl
