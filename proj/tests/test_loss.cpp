#include <doctest.h>

#include <cmath>
#include <vector>

#include "cvgl/error.hpp"
#include "cvgl/loss.hpp"
#include "cvgl/rng.hpp"

using namespace cvgl;

namespace {

Matrix random_unit_rows(std::size_t b, std::size_t dim, Rng& rng) {
    Matrix m(b, dim);
    for (std::size_t i = 0; i < b; ++i) {
        double n = 0.0;
        for (auto& v : m.row(i)) {
            v = rng.normal();
            n += v * v;
        }
        for (auto& v : m.row(i)) v /= std::sqrt(n);
    }
    return m;
}

// Brute-force smoothed CE in both directions, averaged.
double loss_oracle(const Matrix& q, const Matrix& r, double tau, double eps) {
    const std::size_t b = q.rows();
    std::vector<std::vector<double>> z(b, std::vector<double>(b));
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < q.cols(); ++k) s += q(i, k) * r(j, k);
            z[i][j] = s / tau;
        }
    auto target = [&](std::size_t i, std::size_t j) { return i == j ? 1.0 - eps : eps / static_cast<double>(b - 1); };
    double rows = 0.0, cols = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        double zr = 0.0, zc = 0.0;
        for (std::size_t j = 0; j < b; ++j) {
            zr += std::exp(z[i][j]);
            zc += std::exp(z[j][i]);
        }
        for (std::size_t j = 0; j < b; ++j) {
            rows -= target(i, j) * std::log(std::exp(z[i][j]) / zr);
            cols -= target(i, j) * std::log(std::exp(z[j][i]) / zc);
        }
    }
    return 0.5 * (rows + cols) / static_cast<double>(b);
}

} // namespace

TEST_CASE("loss config") {
    LossConfig c;
    CHECK(c.temperature() == 0.1);
    c.temperature_mode = TemperatureMode::Learnable;
    CHECK(c.temperature() == doctest::Approx(0.07).epsilon(1e-12));
    c.log_inv_tau = std::log(1.0 / 5.0);
    c.clamp();
    CHECK(c.temperature() == doctest::Approx(kMaxTemperature).epsilon(1e-12));
    c.log_inv_tau = std::log(1000.0);
    c.clamp();
    CHECK(c.temperature() == doctest::Approx(kMinTemperature).epsilon(1e-12));
    c.label_smoothing = 1.0;
    CHECK_THROWS_AS(c.validate(), UsageError);
}

TEST_CASE("batch validation") {
    BatchPair one{Matrix::from_rows({{1.0, 0.0}}), Matrix::from_rows({{1.0, 0.0}})};
    CHECK_THROWS_AS(one.validate(), ShapeError);
    BatchPair not_unit{Matrix::from_rows({{1.0, 0.0}, {0.0, 2.0}}), Matrix::identity(2)};
    CHECK_THROWS(not_unit.validate());
    BatchPair mismatch{Matrix::identity(2), Matrix::identity(3)};
    CHECK_THROWS_AS(mismatch.validate(), ShapeError);
}

TEST_CASE("similarity logits") {
    BatchPair eye{Matrix::identity(3), Matrix::identity(3)};
    CHECK(similarity_logits(eye, 1.0) == Matrix::identity(3));
    Rng rng(1);
    BatchPair b{random_unit_rows(5, 8, rng), random_unit_rows(5, 8, rng)};
    const Matrix l1 = similarity_logits(b, 1.0);
    const Matrix lh = similarity_logits(b, 0.5);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 8; ++k) s += b.queries(i, k) * b.references(j, k);
            CHECK(std::abs(l1(i, j) - s) < 1e-12);
            CHECK(lh(i, j) == doctest::Approx(2.0 * l1(i, j)).epsilon(1e-14));
        }
    CHECK_THROWS_AS((void)similarity_logits(b, 0.0), UsageError);
}

TEST_CASE("B=2 orthogonal example") {
    BatchPair b{Matrix::identity(2), Matrix::identity(2)};
    LossConfig cfg;
    cfg.tau = 1.0;
    cfg.label_smoothing = 0.0;
    const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    CHECK(expected == doctest::Approx(0.3133).epsilon(1e-4));
    CHECK(std::abs(symmetric_infonce(b, cfg).loss - expected) < 1e-12);

    cfg.label_smoothing = 0.1;
    CHECK(std::abs(symmetric_infonce(b, cfg).loss - loss_oracle(b.queries, b.references, 1.0, 0.1)) < 1e-10);
}

TEST_CASE("loss matches the oracle on random batches") {
    Rng rng(3);
    for (double eps : {0.0, 0.1, 0.3}) {
        for (double tau : {0.05, 0.1, 1.0}) {
            const Matrix q = random_unit_rows(6, 8, rng);
            const Matrix r = random_unit_rows(6, 8, rng);
            LossConfig cfg;
            cfg.tau = tau;
            cfg.label_smoothing = eps;
            CHECK(std::abs(symmetric_infonce({q, r}, cfg).loss - loss_oracle(q, r, tau, eps)) < 1e-10);
        }
    }
}

TEST_CASE("symmetry and permutation equivariance") {
    Rng rng(4);
    const Matrix q = random_unit_rows(5, 6, rng);
    const Matrix r = random_unit_rows(5, 6, rng);
    LossConfig cfg;
    const double base = symmetric_infonce({q, r}, cfg).loss;
    CHECK(std::abs(symmetric_infonce({r, q}, cfg).loss - base) < 1e-12);

    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    Matrix qp(5, 6), rp(5, 6);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t k = 0; k < 6; ++k) {
            qp(i, k) = q(perm[i], k);
            rp(i, k) = r(perm[i], k);
        }
    CHECK(std::abs(symmetric_infonce({qp, rp}, cfg).loss - base) < 1e-12);
}

TEST_CASE("lower bound and diagonal monotonicity with eps=0") {
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        const auto res = symmetric_infonce_raw(random_unit_rows(4, 5, rng), random_unit_rows(4, 5, rng), 0.1, 0.0);
        CHECK(res.loss >= 0.0);
    }
    // Scaling up only the diagonal similarity strictly lowers the loss.
    Matrix q = Matrix::identity(3);
    double prev = symmetric_infonce_raw(q, q, 1.0, 0.0).loss;
    for (double s : {1.5, 2.0, 4.0, 8.0}) {
        Matrix r = Matrix::identity(3);
        for (std::size_t i = 0; i < 3; ++i) r(i, i) = s;
        const double cur = symmetric_infonce_raw(q, r, 1.0, 0.0).loss;
        CHECK(cur < prev);
        prev = cur;
    }
    CHECK(prev < 1e-2);
}

TEST_CASE("gradient check") {
    Rng rng(6);
    for (double eps : {0.0, 0.1}) {
        for (auto mode : {TemperatureMode::Fixed, TemperatureMode::Learnable}) {
            LossConfig cfg;
            cfg.temperature_mode = mode;
            cfg.label_smoothing = eps;
            BatchPair b{random_unit_rows(4, 8, rng), random_unit_rows(4, 8, rng)};
            CHECK(loss_gradient_check(cfg, b) < 1e-6);
        }
    }
}

TEST_CASE("grad_tau matches a central difference") {
    Rng rng(7);
    const Matrix q = random_unit_rows(4, 8, rng);
    const Matrix r = random_unit_rows(4, 8, rng);
    const double tau = 0.2, h = 1e-7;
    const double fd = (symmetric_infonce_raw(q, r, tau + h, 0.1).loss - symmetric_infonce_raw(q, r, tau - h, 0.1).loss) /
                      (2 * h);
    CHECK(symmetric_infonce_raw(q, r, tau, 0.1).grad_tau == doctest::Approx(fd).epsilon(1e-6));
}
