#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "cvgl/geo.hpp"
#include "cvgl/index.hpp"

namespace cvgl {

struct QueryTruth {
    std::set<std::uint64_t> relevant;  // non-empty
    std::set<std::uint64_t> covering;  // superset of relevant
    GeoPoint truth_point;
};

using GroundTruth = std::map<std::uint64_t, QueryTruth>;

void validate(const GroundTruth& truth);

// 1-based rank of the first relevant entry, if any.
std::optional<std::size_t> first_relevant_rank(const RankedList& ranked,
                                               const std::set<std::uint64_t>& relevant);

double topk_accuracy(std::span<const RankedList> ranked, const GroundTruth& truth, std::size_t k);
// k used for top-1%: ceil(0.01 * reference_count).
std::size_t top1_percent_k(std::size_t reference_count);

double average_precision(const RankedList& ranked, const std::set<std::uint64_t>& relevant);
double mean_average_precision(std::span<const RankedList> ranked, const GroundTruth& truth);

double hit_rate(std::span<const RankedList> ranked, const GroundTruth& truth);

inline constexpr std::size_t kBucketCount = 4;

struct DistanceBuckets {
    static constexpr std::array<double, 5> edges{0.0, 10.0, 500.0, 1000.0, 200000.0};
    std::array<std::size_t, kBucketCount> counts{};

    // Index of the bucket holding d; distances past the last edge land in the last bucket.
    static std::size_t bucket_of(double meters);
    std::size_t total() const;
};

inline constexpr double kSuccessRadiusMeters = 10.0;

struct QueryDistance {
    std::uint64_t query_id = 0;
    std::uint64_t top1_id = 0;
    double distance_m = 0.0;
    std::optional<std::size_t> first_relevant_rank;
};

struct DistanceReport {
    DistanceBuckets buckets;
    double success_fraction = 0.0;  // share with distance < 10 m
    std::vector<QueryDistance> per_query;
};

DistanceReport distance_report(std::span<const RankedList> ranked, const GroundTruth& truth,
                               const std::map<std::uint64_t, GeoPoint>& reference_coords);

struct EvalSummary {
    std::size_t query_count = 0;
    std::size_t reference_count = 0;
    std::vector<std::pair<std::size_t, double>> topk;  // (k, accuracy) in the requested order
    std::size_t top1_percent_k = 0;
    double top1_percent = 0.0;
    double mean_ap = 0.0;
    double hit_rate = 0.0;
    DistanceReport distances;
};

EvalSummary evaluate(std::span<const RankedList> ranked, const GroundTruth& truth,
                     const std::map<std::uint64_t, GeoPoint>& reference_coords,
                     std::span<const std::size_t> k_list, std::size_t reference_count);

// metric=value lines followed by the bucket table.
void write_report(std::ostream& os, const EvalSummary& summary);
// query_id top1_id distance_m rank_of_first_relevant, tab separated.
void write_query_dump(std::ostream& os, const DistanceReport& report);

} // namespace cvgl
