#include "cvgl/numerics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>
#include <mutex>
#include <thread>

#include "cvgl/error.hpp"

namespace cvgl {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                         std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
}

std::string Matrix::shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: cannot multiply " + a.shape_str() + " by " + b.shape_str());
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t inner = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto orow = out.row(i);
        for (std::size_t k = 0; k < inner; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto brow = b.row(k);
            for (std::size_t j = 0; j < orow.size(); ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: cannot multiply " + a.shape_str() + " by transpose of " +
                         b.shape_str());
    }
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto arow = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(arow, b.row(j));
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: cannot multiply transpose of " + a.shape_str() + " by " +
                         b.shape_str());
    }
    Matrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        auto arow = a.row(k);
        auto brow = b.row(k);
        for (std::size_t i = 0; i < arow.size(); ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            auto orow = out.row(i);
            for (std::size_t j = 0; j < brow.size(); ++j) orow[j] += aki * brow[j];
        }
    }
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

Matrix relu(const Matrix& x) {
    Matrix out = x;
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ShapeError("dot: length " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

std::vector<double> l2_normalize(std::span<const double> v) {
    const double norm = l2_norm(v);
    if (!(norm > 0.0) || !std::isfinite(norm)) throw NumericError("degenerate descriptor");
    std::vector<double> out(v.begin(), v.end());
    for (double& x : out) x /= norm;
    return out;
}

void SgdConfig::validate() const {
    if (!(base_lr > 0.0)) throw UsageError("sgd: base_lr must be positive");
    if (warmup_steps >= total_steps) {
        throw UsageError("sgd: warmup_steps (" + std::to_string(warmup_steps) +
                         ") must be below total_steps (" + std::to_string(total_steps) + ")");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) throw UsageError("sgd: momentum must be in [0,1)");
}

double cosine_lr(std::size_t step, const SgdConfig& cfg) {
    cfg.validate();
    if (step > cfg.total_steps) {
        throw UsageError("cosine_lr: step " + std::to_string(step) + " beyond total_steps " +
                         std::to_string(cfg.total_steps));
    }
    if (step < cfg.warmup_steps) {
        return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    const double progress = static_cast<double>(step - cfg.warmup_steps) /
                            static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void sgd_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads, double lr,
              const SgdConfig& cfg, std::vector<Matrix>& velocity) {
    if (params.size() != grads.size()) {
        throw ShapeError("sgd_step: " + std::to_string(params.size()) + " params but " +
                         std::to_string(grads.size()) + " grads");
    }
    for (std::size_t t = 0; t < params.size(); ++t) {
        if (!params[t]->same_shape(*grads[t])) {
            throw ShapeError("sgd_step: tensor " + std::to_string(t) + " param " +
                             params[t]->shape_str() + " vs grad " + grads[t]->shape_str());
        }
    }
    if (cfg.momentum > 0.0) {
        if (velocity.empty()) {
            velocity.reserve(params.size());
            for (const Matrix* p : params) velocity.emplace_back(p->rows(), p->cols());
        }
        if (velocity.size() != params.size()) throw ShapeError("sgd_step: velocity count mismatch");
        for (std::size_t t = 0; t < params.size(); ++t) {
            auto v = velocity[t].data();
            auto g = grads[t]->data();
            auto p = params[t]->data();
            for (std::size_t i = 0; i < p.size(); ++i) {
                v[i] = cfg.momentum * v[i] + g[i];
                p[i] -= lr * v[i];
            }
        }
        return;
    }
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto g = grads[t]->data();
        auto p = params[t]->data();
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
    }
}

double finite_diff_check(const std::function<double(std::span<const double>)>& f,
                         std::span<const double> params, std::span<const double> analytic_grads,
                         double eps) {
    if (!(eps > 0.0)) throw UsageError("finite_diff_check: eps must be positive");
    if (params.size() != analytic_grads.size()) {
        throw ShapeError("finite_diff_check: " + std::to_string(params.size()) + " params vs " +
                         std::to_string(analytic_grads.size()) + " gradients");
    }
    std::vector<double> p(params.begin(), params.end());
    double worst = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double saved = p[i];
        p[i] = saved + eps;
        const double up = f(p);
        p[i] = saved - eps;
        const double down = f(p);
        p[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("finite_diff_check: non-finite objective at coordinate " +
                               std::to_string(i));
        }
        const double fd = (up - down) / (2.0 * eps);
        const double an = analytic_grads[i];
        const double err = std::abs(fd - an) / std::max(1e-8, std::abs(fd) + std::abs(an));
        worst = std::max(worst, err);
    }
    return worst;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body) {
    const std::size_t workers =
        std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::atomic<bool> failed{false};
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    std::mutex failure_mutex;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n || failed.load()) return;
                try {
                    body(i);
                } catch (...) {
                    std::scoped_lock lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    failed.store(true);
                }
            }
        });
    }
    pool.clear();
    if (failure) std::rethrow_exception(failure);
}

int default_thread_count() {
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

} // namespace cvgl
