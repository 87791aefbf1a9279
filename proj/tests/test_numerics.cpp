#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "cvgl/error.hpp"
#include "cvgl/numerics.hpp"
#include "cvgl/rng.hpp"

using namespace cvgl;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (auto& v : m.data()) v = rng.uniform(-1.0, 1.0);
    return m;
}

Matrix naive_product(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            out(i, j) = s;
        }
    return out;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

} // namespace

TEST_CASE("matrix construction checks data length") {
    CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
    const Matrix m(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6});
    CHECK(m(1, 2) == 6);
    CHECK(m.shape_str() == "2x3");
}

TEST_CASE("matmul hand examples") {
    const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
    CHECK(matmul(Matrix::identity(2), a) == a);
    const Matrix r = matmul(a, Matrix::from_rows({{1}, {1}}));
    CHECK(r == Matrix::from_rows({{3}, {7}}));
}

TEST_CASE("matmul matches a triple-loop oracle") {
    Rng rng(11);
    for (int t = 0; t < 5; ++t) {
        const Matrix a = random_matrix(8, 8, rng);
        const Matrix b = random_matrix(8, 8, rng);
        CHECK(max_abs_diff(matmul(a, b), naive_product(a, b)) < 1e-12);
        CHECK(max_abs_diff(matmul_nt(a, b), naive_product(a, transpose(b))) < 1e-12);
        CHECK(max_abs_diff(matmul_tn(a, b), naive_product(transpose(a), b)) < 1e-12);
    }
    const Matrix a = random_matrix(3, 5, rng);
    const Matrix b = random_matrix(5, 2, rng);
    CHECK(max_abs_diff(matmul(a, b), naive_product(a, b)) < 1e-12);
}

TEST_CASE("matmul rejects mismatched shapes with the shapes in the message") {
    const Matrix a(2, 3), b(2, 3);
    try {
        (void)matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string what = e.what();
        CHECK(what.find("2x3") != std::string::npos);
    }
    CHECK_THROWS_AS((void)matmul_nt(Matrix(2, 3), Matrix(2, 4)), ShapeError);
    CHECK_THROWS_AS((void)matmul_tn(Matrix(2, 3), Matrix(3, 3)), ShapeError);
}

TEST_CASE("matmul is associative on random triples") {
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        const Matrix a = random_matrix(4, 6, rng);
        const Matrix b = random_matrix(6, 3, rng);
        const Matrix c = random_matrix(3, 5, rng);
        const Matrix l = matmul(matmul(a, b), c);
        const Matrix r = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < l.size(); ++i) {
            const double scale = std::max(1.0, std::abs(l.data()[i]));
            CHECK(std::abs(l.data()[i] - r.data()[i]) / scale < 1e-9);
        }
    }
}

TEST_CASE("relu") {
    CHECK(relu(Matrix::from_rows({{-1, 2}})) == Matrix::from_rows({{0, 2}}));
    const Matrix pos = Matrix::from_rows({{0, 1.5}, {3, 0.25}});
    CHECK(relu(pos) == pos);
    Rng rng(3);
    const Matrix x = random_matrix(6, 7, rng);
    const Matrix once = relu(x);
    CHECK(relu(once) == once);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(once.data()[i] == (x.data()[i] > 0 ? x.data()[i] : 0.0));
}

TEST_CASE("l2_normalize") {
    const std::vector<double> v{3, 4};
    const auto u = l2_normalize(v);
    CHECK(u[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(u[1] == doctest::Approx(0.8).epsilon(1e-15));

    const std::vector<double> unit{0, 1, 0};
    CHECK(l2_normalize(unit) == unit);

    Rng rng(2);
    std::vector<double> big(256);
    for (auto& x : big) x = rng.normal();
    double norm = 0.0;
    for (double x : big) norm += x * x;
    norm = std::sqrt(norm);
    const auto n = l2_normalize(big);
    for (std::size_t i = 0; i < big.size(); ++i) CHECK(std::abs(n[i] - big[i] / norm) < 1e-12);
    CHECK(std::abs(l2_norm(n) - 1.0) < 1e-9);

    for (int t = 0; t < 200; ++t) {
        std::vector<double> w(1 + rng.uniform_index(40));
        const double scale = std::pow(10.0, rng.uniform(-6, 6));
        for (auto& x : w) x = scale * rng.normal();
        const double len = l2_norm(l2_normalize(w));
        CHECK(len >= 1 - 1e-9);
        CHECK(len <= 1 + 1e-9);
    }
}

TEST_CASE("l2_normalize rejects the zero vector") {
    const std::vector<double> z(5, 0.0);
    try {
        (void)l2_normalize(z);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("degenerate descriptor") != std::string::npos);
    }
}

TEST_CASE("cosine_lr endpoints and continuity") {
    const SgdConfig cfg{.base_lr = 0.001, .total_steps = 400, .warmup_steps = 10, .momentum = 0.0};
    CHECK(cosine_lr(0, cfg) == 0.0);
    CHECK(cosine_lr(10, cfg) == doctest::Approx(0.001).epsilon(1e-15));
    CHECK(std::abs(cosine_lr(400, cfg)) < 1e-12);
    CHECK(cosine_lr(5, cfg) == doctest::Approx(0.0005));
    // Halfway through the decay.
    CHECK(cosine_lr(205, cfg) == doctest::Approx(0.0005));
    const double bound = cfg.base_lr * (1.0 / 10.0 + std::numbers::pi / 390.0);
    for (std::size_t s = 0; s < 400; ++s) CHECK(std::abs(cosine_lr(s + 1, cfg) - cosine_lr(s, cfg)) <= bound);
    CHECK_THROWS_AS((void)cosine_lr(401, cfg), UsageError);
}

TEST_CASE("sgd config validation") {
    CHECK_THROWS_AS((SgdConfig{.base_lr = 0.0, .total_steps = 10, .warmup_steps = 1}.validate()), UsageError);
    CHECK_THROWS_AS((SgdConfig{.base_lr = 0.1, .total_steps = 10, .warmup_steps = 10}.validate()), UsageError);
    CHECK_NOTHROW((SgdConfig{.base_lr = 0.1, .total_steps = 10, .warmup_steps = 1}.validate()));
}

TEST_CASE("sgd_step") {
    SgdConfig cfg{.base_lr = 0.1, .total_steps = 10, .warmup_steps = 1};
    Matrix p = Matrix::from_rows({{1.0}});
    const Matrix g = Matrix::from_rows({{2.0}});
    std::vector<Matrix> vel;
    Matrix* ps[] = {&p};
    const Matrix* gs[] = {&g};

    sgd_step(ps, gs, 0.0, cfg, vel);
    CHECK(p(0, 0) == 1.0);

    sgd_step(ps, gs, 0.1, cfg, vel);
    CHECK(p(0, 0) == doctest::Approx(0.8).epsilon(1e-15));

    // Two momentum steps against the explicit recurrence.
    cfg.momentum = 0.9;
    Matrix q = Matrix::from_rows({{1.0}});
    Matrix* qs[] = {&q};
    std::vector<Matrix> v2;
    const Matrix g1 = Matrix::from_rows({{2.0}});
    const Matrix g2 = Matrix::from_rows({{-0.5}});
    const Matrix* gs1[] = {&g1};
    const Matrix* gs2[] = {&g2};
    sgd_step(qs, gs1, 0.1, cfg, v2);
    sgd_step(qs, gs2, 0.05, cfg, v2);
    double pv = 1.0, vv = 0.0;
    vv = 0.9 * vv + 2.0;
    pv -= 0.1 * vv;
    vv = 0.9 * vv - 0.5;
    pv -= 0.05 * vv;
    CHECK(q(0, 0) == doctest::Approx(pv).epsilon(1e-15));

    Matrix wrong(1, 2);
    const Matrix* bad[] = {&wrong};
    std::vector<Matrix> v3;
    CHECK_THROWS_AS(sgd_step(ps, bad, 0.1, cfg, v3), ShapeError);
}

TEST_CASE("finite_diff_check") {
    const std::vector<double> p{3.0};
    const std::vector<double> g{6.0};
    auto sq = [](std::span<const double> x) { return x[0] * x[0]; };
    CHECK(finite_diff_check(sq, p, g) < 1e-8);

    std::vector<double> q(10), gq(10);
    for (std::size_t i = 0; i < q.size(); ++i) {
        q[i] = 0.3 * static_cast<double>(i) - 1.0;
        gq[i] = 2.0 * q[i];
    }
    auto norm2 = [](std::span<const double> x) {
        double s = 0.0;
        for (double v : x) s += v * v;
        return s;
    };
    CHECK(finite_diff_check(norm2, q, gq) < 1e-7);

    // A wrong gradient is caught.
    const std::vector<double> wrong{5.0};
    CHECK(finite_diff_check(sq, p, wrong) > 1e-2);

    auto nan = [](std::span<const double>) { return std::nan(""); };
    CHECK_THROWS_AS((void)finite_diff_check(nan, p, g), NumericError);
}

TEST_CASE("parallel_for visits every index exactly once") {
    for (int threads : {1, 2, 7}) {
        std::vector<int> hits(1000, 0);
        parallel_for(hits.size(), threads, [&](std::size_t i) { hits[i] += 1; });
        for (int h : hits) CHECK(h == 1);
    }
    CHECK_THROWS_AS(parallel_for(10, 3, [](std::size_t i) { if (i == 4) throw DataError("boom"); }), DataError);
}

TEST_CASE("rng is reproducible and serializable") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
    for (int i = 0; i < 100; ++i) {
        const auto k = a.uniform_index(7);
        CHECK(k < 7);
        CHECK(k == b.uniform_index(7));
    }
    const Rng restored = Rng::deserialize(a.serialize());
    CHECK(restored == a);
    Rng c = restored;
    CHECK(c.normal() == a.normal());
    CHECK(mix_seed(1, 2) != mix_seed(2, 1));

    std::vector<int> items{0, 1, 2, 3, 4, 5, 6, 7};
    Rng s(9);
    s.shuffle(std::span<int>(items));
    std::vector<int> sorted = items;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
}
