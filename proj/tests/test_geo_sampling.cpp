#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>
#include <unordered_set>
#include <vector>

#include "cvgl/error.hpp"
#include "cvgl/geo.hpp"
#include "cvgl/rng.hpp"
#include "cvgl/sampling.hpp"

using namespace cvgl;

namespace {

double haversine_oracle(double lat1, double lon1, double lat2, double lon2) {
    const double k = std::numbers::pi / 180.0;
    const double a = std::pow(std::sin((lat2 - lat1) * k / 2), 2) +
                     std::cos(lat1 * k) * std::cos(lat2 * k) * std::pow(std::sin((lon2 - lon1) * k / 2), 2);
    return 2.0 * 6371000.0 * std::asin(std::sqrt(a));
}

std::vector<GeoPoint> random_points(std::size_t n, Rng& rng) {
    std::vector<GeoPoint> pts;
    for (std::size_t i = 0; i < n; ++i) pts.push_back(GeoPoint::wgs84(rng.uniform(40.0, 40.05), rng.uniform(-74.0, -73.95)));
    return pts;
}

std::vector<std::size_t> sort_oracle(const std::vector<GeoPoint>& pts, std::size_t q) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t i = 0; i < pts.size(); ++i)
        if (i != q) all.push_back({haversine(pts[q], pts[i]), i});
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> out;
    for (const auto& [d, i] : all) out.push_back(i);
    return out;
}

std::vector<std::uint64_t> iota_ids(std::size_t n, std::uint64_t first = 1) {
    std::vector<std::uint64_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = first + i;
    return ids;
}

} // namespace

TEST_CASE("haversine") {
    const auto a = GeoPoint::wgs84(0, 0);
    const auto b = GeoPoint::wgs84(0, 1);
    CHECK(haversine(a, a) == 0.0);
    CHECK(std::abs(haversine(a, b) - 111194.93) < 0.01);
    Rng rng(1);
    for (int t = 0; t < 500; ++t) {
        const auto p = GeoPoint::wgs84(rng.uniform(-89, 89), rng.uniform(-179, 180));
        const auto q = GeoPoint::wgs84(rng.uniform(-89, 89), rng.uniform(-179, 180));
        const double d = haversine(p, q);
        CHECK(d >= 0.0);
        CHECK(d == haversine(q, p));
        CHECK(std::abs(d - haversine_oracle(p.lat(), p.lon(), q.lat(), q.lon())) < 1e-6);
    }
    CHECK_THROWS_AS((void)haversine(GeoPoint::utm(0, 0), GeoPoint::utm(1, 1)), UsageError);
}

TEST_CASE("euclidean") {
    CHECK(euclidean(GeoPoint::utm(0, 0), GeoPoint::utm(3, 4)) == 5.0);
    CHECK(euclidean(GeoPoint::utm(7, 9), GeoPoint::utm(7, 9)) == 0.0);
    Rng rng(2);
    for (int t = 0; t < 200; ++t) {
        const auto a = GeoPoint::utm(rng.uniform(0, 1e5), rng.uniform(0, 1e5));
        const auto b = GeoPoint::utm(rng.uniform(0, 1e5), rng.uniform(0, 1e5));
        const auto c = GeoPoint::utm(rng.uniform(0, 1e5), rng.uniform(0, 1e5));
        CHECK(euclidean(a, c) <= euclidean(a, b) + euclidean(b, c) + 1e-9);
    }
    CHECK_THROWS_AS((void)euclidean(GeoPoint::wgs84(0, 0), GeoPoint::wgs84(0, 1)), UsageError);
    CHECK_THROWS((void)geo_distance(GeoPoint::wgs84(0, 0), GeoPoint::utm(0, 1)));
}

TEST_CASE("geo point validation") {
    CHECK_THROWS_AS(GeoPoint::wgs84(91, 0).validate(), DataError);
    CHECK_THROWS_AS(GeoPoint::wgs84(0, -181).validate(), DataError);
    CHECK_THROWS_AS(GeoPoint::utm(std::nan(""), 0).validate(), DataError);
    CHECK_NOTHROW(GeoPoint::wgs84(-90, 180).validate());
    CHECK(parse_coord_mode("UTM") == CoordMode::UTM);
    CHECK(std::string(to_string(CoordMode::WGS84)) == "WGS84");
}

TEST_CASE("nns_neighbors") {
    const std::vector<GeoPoint> line{GeoPoint::utm(0, 0), GeoPoint::utm(10, 0), GeoPoint::utm(20, 0)};
    CHECK(nns_neighbors(line, 1, 2) == std::vector<std::size_t>{0, 2});

    Rng rng(3);
    const auto pts = random_points(200, rng);
    for (std::size_t q = 0; q < pts.size(); q += 7) {
        const auto want = sort_oracle(pts, q);
        CHECK(nns_neighbors(pts, q, 16) == std::vector<std::size_t>(want.begin(), want.begin() + 16));
        CHECK(nns_neighbors(pts, q, pts.size() - 1) == want);
    }
    CHECK_THROWS_AS((void)nns_neighbors(pts, 200, 3), UsageError);
}

TEST_CASE("dss_batch with S=128, s=64") {
    const DssConfig cfg{.pool_size = 128, .batch_quota = 64, .rng_seed = 5};
    Rng rng(4);
    std::vector<std::uint64_t> ranked = iota_ids(300, 1000);
    rng.shuffle(std::span<std::uint64_t>(ranked));

    const auto out = dss_batch(ranked, cfg, {});
    REQUIRE(out.size() == 64);
    for (std::size_t i = 0; i < 32; ++i) CHECK(out[i] == ranked[i]);
    const std::set<std::uint64_t> pool_tail(ranked.begin() + 32, ranked.begin() + 128);
    std::set<std::uint64_t> seen(out.begin(), out.end());
    CHECK(seen.size() == 64);
    for (std::size_t i = 32; i < 64; ++i) CHECK(pool_tail.contains(out[i]));
    CHECK(dss_batch(ranked, cfg, {}) == out);

    DssConfig other = cfg;
    other.rng_seed = 6;
    CHECK(dss_batch(ranked, other, {}) != out);
}

TEST_CASE("dss_batch skips excluded ids and refills") {
    const DssConfig cfg{.pool_size = 8, .batch_quota = 4, .rng_seed = 1};
    const std::vector<std::uint64_t> ranked{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    const auto out = dss_batch(ranked, cfg, {1});
    CHECK(out[0] == 2);
    CHECK(out[1] == 3);
    for (std::size_t i = 2; i < 4; ++i) CHECK((out[i] >= 4 && out[i] <= 8));

    // Only one pool entry is open: the rest comes from later ranks in order.
    const std::vector<std::uint64_t> longer{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
    const auto refill = dss_batch(longer, cfg, {1, 2, 3, 4, 5, 6, 7});
    CHECK(refill == std::vector<std::uint64_t>{8, 9, 10, 11});
}

TEST_CASE("dss_batch error paths") {
    const DssConfig cfg{.pool_size = 8, .batch_quota = 4, .rng_seed = 1};
    const std::vector<std::uint64_t> ranked{1, 2, 3, 4, 5, 6, 7, 8};
    try {
        (void)dss_batch(ranked, cfg, {1, 2, 3, 4, 5});
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()) == "exhausted candidate pool");
    }
    const std::vector<std::uint64_t> short_rank{1, 2, 3};
    CHECK_THROWS_AS((void)dss_batch(short_rank, cfg, {}), UsageError);
    CHECK_THROWS_AS((DssConfig{.pool_size = 8, .batch_quota = 3}.validate()), UsageError);
    CHECK_THROWS_AS((DssConfig{.pool_size = 4, .batch_quota = 6}.validate()), UsageError);
}

namespace {

Matrix unit_rows(std::size_t n, std::size_t dim, Rng& rng) {
    Matrix m(n, dim);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (auto& v : m.row(i)) {
            v = rng.normal();
            s += v * v;
        }
        for (auto& v : m.row(i)) v /= std::sqrt(s);
    }
    return m;
}

void check_plan_shape(const EpochPlan& plan, std::size_t batch_size) {
    std::set<std::uint64_t> seen;
    for (const auto& b : plan.batches) {
        CHECK(b.size() == batch_size);
        for (auto id : b) CHECK(seen.insert(id).second);
    }
}

} // namespace

TEST_CASE("NNS plans use exact division and drop the remainder") {
    Rng rng(8);
    for (std::size_t n : {64u, 70u}) {
        const auto ids = iota_ids(n);
        const auto pts = random_points(n, rng);
        const PlanInputs in{.ids = ids, .coords = pts};
        const EpochPlan plan = build_epoch_plan(in, SamplingPhase::NNS, 32, 3);
        CHECK(plan.phase == SamplingPhase::NNS);
        CHECK(plan.batches.size() == 2);
        CHECK(plan.id_count() == 64);
        check_plan_shape(plan, 32);
        CHECK(build_epoch_plan(in, SamplingPhase::NNS, 32, 3) == plan);
    }
}

TEST_CASE("NNS batch is an anchor plus its nearest neighbors") {
    Rng rng(9);
    const std::size_t n = 120;
    const auto ids = iota_ids(n, 500);
    const auto pts = random_points(n, rng);
    const PlanInputs in{.ids = ids, .coords = pts};
    const EpochPlan plan = build_epoch_plan(in, SamplingPhase::NNS, 16, 1);
    std::set<std::uint64_t> used;
    for (const auto& b : plan.batches) {
        const std::size_t anchor = b.front() - 500;
        std::vector<std::uint64_t> want{b.front()};
        for (std::size_t p : sort_oracle(pts, anchor)) {
            if (want.size() == 16) break;
            if (!used.contains(ids[p])) want.push_back(ids[p]);
        }
        CHECK(b == want);
        used.insert(b.begin(), b.end());
    }
}

TEST_CASE("NNS excludes near-duplicate locations") {
    std::vector<GeoPoint> pts;
    for (int i = 0; i < 8; ++i) pts.push_back(GeoPoint::utm(100.0 * i, 0));
    pts.push_back(GeoPoint::utm(0.5, 0));  // within 1 m of point 0
    const auto ids = iota_ids(pts.size());
    const PlanInputs in{.ids = ids, .coords = pts};
    std::size_t anchored = 0;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        for (const auto& b : build_epoch_plan(in, SamplingPhase::NNS, 4, seed).batches) {
            if (b.front() != 1 && b.front() != 9) continue;
            ++anchored;
            const std::uint64_t twin = b.front() == 1 ? 9 : 1;
            CHECK(std::find(b.begin(), b.end(), twin) == b.end());
        }
    }
    CHECK(anchored > 0);
}

TEST_CASE("random plan") {
    const auto ids = iota_ids(50);
    const PlanInputs in{.ids = ids};
    const EpochPlan plan = build_epoch_plan(in, SamplingPhase::Random, 8, 4);
    CHECK(plan.batches.size() == 6);
    check_plan_shape(plan, 8);
    CHECK(build_epoch_plan(in, SamplingPhase::Random, 8, 5) != plan);
    const EpochPlan rest = build_epoch_plan(in, SamplingPhase::Random, 8, 4, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
    CHECK(rest.batches.size() == 4);
    for (const auto& b : rest.batches)
        for (auto id : b) CHECK(id > 11);
    CHECK_THROWS_AS((void)build_epoch_plan(in, SamplingPhase::Random, 1, 0), UsageError);
    CHECK_THROWS_AS((void)build_epoch_plan(in, SamplingPhase::Random, 51, 0), UsageError);
}

TEST_CASE("DSS plan fixed half matches the brute-force ranking") {
    Rng rng(10);
    const std::size_t n = 260;
    const auto ids = iota_ids(n, 1);
    const auto pts = random_points(n, rng);
    const Matrix g = unit_rows(n, 12, rng);
    const Matrix s = unit_rows(n, 12, rng);
    const PlanInputs in{.ids = ids, .coords = pts, .ground_descriptors = &g, .satellite_descriptors = &s,
                        .dss = DssConfig{.pool_size = 128, .batch_quota = 64}};
    const EpochPlan plan = build_epoch_plan(in, SamplingPhase::DSS, 65, 7);
    CHECK(plan.phase == SamplingPhase::DSS);
    CHECK(plan.batches.size() == 4);
    check_plan_shape(plan, 65);
    CHECK(build_epoch_plan(in, SamplingPhase::DSS, 65, 7) == plan);

    std::set<std::uint64_t> used;
    for (const auto& b : plan.batches) {
        const std::size_t a = b.front() - 1;
        std::vector<std::pair<double, std::uint64_t>> sims;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == a || used.contains(ids[j])) continue;
            double d = 0.0;
            for (std::size_t k = 0; k < 12; ++k) d += g(a, k) * s(j, k);
            sims.push_back({-d, ids[j]});
        }
        std::sort(sims.begin(), sims.end());
        for (std::size_t i = 0; i < 32; ++i) CHECK(b[1 + i] == sims[i].second);
        used.insert(b.begin(), b.end());
    }
}

TEST_CASE("similarity rankings drop the anchor and order by score") {
    Rng rng(11);
    const auto ids = iota_ids(20, 40);
    const Matrix g = unit_rows(20, 5, rng);
    const Matrix s = unit_rows(20, 5, rng);
    const PlanInputs in{.ids = ids, .ground_descriptors = &g, .satellite_descriptors = &s};
    const auto ranks = similarity_rankings(in);
    REQUIRE(ranks.size() == 20);
    for (std::size_t i = 0; i < 20; ++i) {
        CHECK(ranks[i].size() == 19);
        CHECK(std::find(ranks[i].begin(), ranks[i].end(), ids[i]) == ranks[i].end());
    }
    const PlanInputs none{.ids = ids};
    CHECK_THROWS_AS((void)similarity_rankings(none), UsageError);
}

TEST_CASE("plan text round trip") {
    EpochPlan plan{SamplingPhase::DSS, {{1, 2, 3}, {9, 8, 7}}};
    std::stringstream ss;
    write_plan(ss, plan);
    CHECK(read_plan(ss) == plan);
    std::istringstream bad("# phase=nns\n1 2 x\n");
    CHECK_THROWS_AS((void)read_plan(bad), DataError);
    CHECK(parse_sampling_phase("random") == SamplingPhase::Random);
    CHECK_THROWS((void)parse_sampling_phase("bogus"));
}
