#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "cvgl/error.hpp"
#include "cvgl/index.hpp"
#include "cvgl/rng.hpp"

using namespace cvgl;

namespace {

std::vector<double> unit(std::size_t dim, Rng& rng) {
    std::vector<double> v(dim);
    double s = 0.0;
    for (auto& x : v) {
        x = rng.normal();
        s += x * x;
    }
    for (auto& x : v) x /= std::sqrt(s);
    return v;
}

DescriptorStore random_store(std::size_t n, std::size_t dim, Rng& rng) {
    DescriptorStore s(dim);
    for (std::size_t i = 0; i < n; ++i) s.add(10 + 3 * i, unit(dim, rng));
    s.freeze();
    return s;
}

std::vector<ScoredId> full_sort_oracle(const DescriptorStore& s, const std::vector<double>& q) {
    std::vector<ScoredId> all;
    for (std::size_t i = 0; i < s.size(); ++i) {
        double d = 0.0;
        for (std::size_t k = 0; k < s.dim(); ++k) d += s.row(i)[k] * q[k];
        all.push_back({s.ids()[i], d});
    }
    std::sort(all.begin(), all.end(), [](const ScoredId& a, const ScoredId& b) {
        return a.score != b.score ? a.score > b.score : a.id < b.id;
    });
    return all;
}

} // namespace

TEST_CASE("add contract") {
    DescriptorStore s(2);
    s.add(5, std::vector<double>{1.0, 0.0});
    CHECK(s.size() == 1);
    CHECK_THROWS_AS(s.add(5, std::vector<double>{0.0, 1.0}), DataError);
    CHECK_THROWS_AS(s.add(6, std::vector<double>{1.0, 0.0, 0.0}), ShapeError);
    CHECK_THROWS_AS(s.add(7, std::vector<double>{1.0, 1.0}), NumericError);
    s.freeze();
    CHECK_THROWS_AS(s.add(8, std::vector<double>{0.0, 1.0}), UsageError);

    Rng rng(1);
    DescriptorStore big(8);
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < 1000; ++i) {
        rows.push_back(unit(8, rng));
        big.add(i * 7, rows.back());
    }
    CHECK(big.size() == 1000);
    for (std::size_t i = 0; i < 1000; ++i) {
        const auto pos = big.position(i * 7);
        REQUIRE(pos);
        CHECK(std::equal(rows[i].begin(), rows[i].end(), big.row(*pos).begin()));
    }
    CHECK(!big.position(3));
}

TEST_CASE("search") {
    Rng rng(2);
    const DescriptorStore s = random_store(200, 16, rng);
    for (std::size_t i = 0; i < 200; i += 13) {
        const std::vector<double> q(s.row(i).begin(), s.row(i).end());
        const RankedList r = s.search(q, 5);
        CHECK(r.entries.front().id == s.ids()[i]);
        CHECK(std::abs(r.entries.front().score - 1.0) < 1e-9);
    }
    for (int t = 0; t < 10; ++t) {
        const auto q = unit(16, rng);
        const auto want = full_sort_oracle(s, q);
        const RankedList full = s.search(q, s.size(), 99);
        CHECK(full.query_id == 99);
        CHECK(full.entries == want);
        for (std::size_t k : {1u, 7u, 50u}) {
            const auto part = s.search(q, k).entries;
            CHECK(std::equal(part.begin(), part.end(), want.begin()));
        }
        for (const auto& e : full.entries) {
            CHECK(e.score <= 1.0 + 1e-9);
            CHECK(e.score >= -1.0 - 1e-9);
        }
    }
}

TEST_CASE("orthogonal query ties resolve by ascending id") {
    DescriptorStore s(3);
    s.add(30, std::vector<double>{1, 0, 0});
    s.add(10, std::vector<double>{0, 1, 0});
    s.add(20, std::vector<double>{1, 0, 0});
    const RankedList r = s.search(std::vector<double>{0, 0, 1}, 3);
    CHECK(r.entries == std::vector<ScoredId>{{10, 0.0}, {20, 0.0}, {30, 0.0}});
}

TEST_CASE("search errors") {
    DescriptorStore empty(3);
    CHECK_THROWS_AS((void)empty.search(std::vector<double>{1, 0, 0}, 1), UsageError);
    Rng rng(3);
    const DescriptorStore s = random_store(5, 3, rng);
    CHECK_THROWS_AS((void)s.search(std::vector<double>{1, 0, 0}, 6), UsageError);
    CHECK_THROWS_AS((void)s.search(std::vector<double>{1, 0, 0}, 0), UsageError);
    CHECK_THROWS_AS((void)s.search(std::vector<double>{1, 0}, 1), ShapeError);
}

TEST_CASE("search_batch is thread-independent") {
    Rng rng(4);
    const DescriptorStore s = random_store(300, 12, rng);
    Matrix q(100, 12);
    std::vector<std::uint64_t> qids;
    for (std::size_t i = 0; i < 100; ++i) {
        const auto v = unit(12, rng);
        std::copy(v.begin(), v.end(), q.row(i).begin());
        qids.push_back(i);
    }
    // Duplicate query.
    std::copy(q.row(0).begin(), q.row(0).end(), q.row(1).begin());
    const auto one = s.search_batch(q, qids, 20, 1);
    const auto many = s.search_batch(q, qids, 20, 4);
    CHECK(one == many);
    CHECK(one[0].entries == one[1].entries);
    const std::vector<double> q0(q.row(0).begin(), q.row(0).end());
    CHECK(one[0] == s.search(q0, 20, 0));
    const auto unlabeled = s.search_batch(q, {}, 3, 2);
    CHECK(unlabeled.size() == 100);
    CHECK_THROWS_AS((void)s.search_batch(q, std::vector<std::uint64_t>{1, 2}, 3, 1), ShapeError);
}

TEST_CASE("descriptor file round trip") {
    Rng rng(5);
    const DescriptorStore s = random_store(50, 10, rng);
    const auto path = std::filesystem::temp_directory_path() / "cvgl_test_store.cvds";
    save_descriptors(path, s);
    const DescriptorStore back = load_descriptors(path);
    CHECK(back.size() == 50);
    CHECK(back.dim() == 10);
    CHECK(std::equal(back.ids().begin(), back.ids().end(), s.ids().begin()));
    for (std::size_t i = 0; i < 50; ++i) {
        double n = 0.0;
        for (std::size_t k = 0; k < 10; ++k) {
            CHECK(std::abs(back.row(i)[k] - s.row(i)[k]) < 1e-6);
            n += back.row(i)[k] * back.row(i)[k];
        }
        CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-12);
    }
    // Truncated file.
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 7);
    CHECK_THROWS_AS((void)load_descriptors(path), DataError);
    {
        std::ofstream os(path, std::ios::binary);
        os << "NOPE";
    }
    CHECK_THROWS_AS((void)load_descriptors(path), DataError);
    std::filesystem::remove(path);
    CHECK_THROWS_AS((void)load_descriptors(path), DataError);
}
