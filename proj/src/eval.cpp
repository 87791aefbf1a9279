#include "cvgl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "cvgl/error.hpp"

namespace cvgl {

namespace {

const QueryTruth& truth_for(const GroundTruth& truth, std::uint64_t query_id) {
    const auto it = truth.find(query_id);
    if (it == truth.end()) throw DataError("no ground truth for query " + std::to_string(query_id));
    return it->second;
}

} // namespace

void validate(const GroundTruth& truth) {
    for (const auto& [qid, t] : truth) {
        if (t.relevant.empty()) throw DataError("query " + std::to_string(qid) + " has no relevant references");
        for (std::uint64_t id : t.relevant) {
            if (!t.covering.contains(id)) {
                throw DataError("query " + std::to_string(qid) + ": relevant id " + std::to_string(id) +
                                " missing from covering set");
            }
        }
    }
}

std::optional<std::size_t> first_relevant_rank(const RankedList& ranked,
                                               const std::set<std::uint64_t>& relevant) {
    for (std::size_t i = 0; i < ranked.entries.size(); ++i)
        if (relevant.contains(ranked.entries[i].id)) return i + 1;
    return std::nullopt;
}

double topk_accuracy(std::span<const RankedList> ranked, const GroundTruth& truth, std::size_t k) {
    if (ranked.empty()) throw UsageError("topk_accuracy: no queries");
    if (k == 0) throw UsageError("topk_accuracy: k must be positive");
    std::size_t hits = 0;
    for (const auto& list : ranked) {
        if (k > list.entries.size()) {
            throw UsageError("topk_accuracy: k=" + std::to_string(k) + " exceeds ranked list length " +
                             std::to_string(list.entries.size()) + " for query " + std::to_string(list.query_id));
        }
        const auto& rel = truth_for(truth, list.query_id).relevant;
        for (std::size_t i = 0; i < k; ++i) {
            if (rel.contains(list.entries[i].id)) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(ranked.size());
}

std::size_t top1_percent_k(std::size_t reference_count) {
    return (reference_count + 99) / 100;
}

double average_precision(const RankedList& ranked, const std::set<std::uint64_t>& relevant) {
    if (relevant.empty()) throw UsageError("average_precision: empty relevant set");
    const double total = static_cast<double>(relevant.size());
    std::size_t found = 0;
    double ap = 0.0;
    for (std::size_t i = 0; i < ranked.entries.size() && found < relevant.size(); ++i) {
        if (!relevant.contains(ranked.entries[i].id)) continue;
        ++found;
        // recall steps by 1/|relevant| at each hit; precision at this cutoff.
        ap += (1.0 / total) * (static_cast<double>(found) / static_cast<double>(i + 1));
    }
    if (found < relevant.size()) {
        for (std::uint64_t id : relevant) {
            const bool present = std::any_of(ranked.entries.begin(), ranked.entries.end(),
                                             [id](const ScoredId& e) { return e.id == id; });
            if (!present) {
                throw DataError("average_precision: relevant id " + std::to_string(id) +
                                " absent from ranking of query " + std::to_string(ranked.query_id));
            }
        }
    }
    return ap;
}

double mean_average_precision(std::span<const RankedList> ranked, const GroundTruth& truth) {
    if (ranked.empty()) throw UsageError("mean_average_precision: no queries");
    double sum = 0.0;
    for (const auto& list : ranked) sum += average_precision(list, truth_for(truth, list.query_id).relevant);
    return sum / static_cast<double>(ranked.size());
}

double hit_rate(std::span<const RankedList> ranked, const GroundTruth& truth) {
    if (ranked.empty()) throw UsageError("hit_rate: no queries");
    std::size_t hits = 0;
    for (const auto& list : ranked) {
        if (list.entries.empty()) throw UsageError("hit_rate: empty ranking for query " + std::to_string(list.query_id));
        if (truth_for(truth, list.query_id).covering.contains(list.entries.front().id)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(ranked.size());
}

std::size_t DistanceBuckets::bucket_of(double meters) {
    for (std::size_t b = 0; b + 1 < kBucketCount; ++b)
        if (meters < edges[b + 1]) return b;
    return kBucketCount - 1;
}

std::size_t DistanceBuckets::total() const {
    std::size_t t = 0;
    for (std::size_t c : counts) t += c;
    return t;
}

DistanceReport distance_report(std::span<const RankedList> ranked, const GroundTruth& truth,
                               const std::map<std::uint64_t, GeoPoint>& reference_coords) {
    DistanceReport report;
    std::size_t successes = 0;
    for (const auto& list : ranked) {
        if (list.entries.empty()) throw UsageError("distance_report: empty ranking for query " + std::to_string(list.query_id));
        const QueryTruth& t = truth_for(truth, list.query_id);
        const std::uint64_t top1 = list.entries.front().id;
        const auto it = reference_coords.find(top1);
        if (it == reference_coords.end()) {
            throw DataError("distance_report: no coordinates for reference " + std::to_string(top1));
        }
        const double d = geo_distance(it->second, t.truth_point);
        ++report.buckets.counts[DistanceBuckets::bucket_of(d)];
        if (d < kSuccessRadiusMeters) ++successes;
        report.per_query.push_back({list.query_id, top1, d, first_relevant_rank(list, t.relevant)});
    }
    report.success_fraction =
        ranked.empty() ? 0.0 : static_cast<double>(successes) / static_cast<double>(ranked.size());
    return report;
}

EvalSummary evaluate(std::span<const RankedList> ranked, const GroundTruth& truth,
                     const std::map<std::uint64_t, GeoPoint>& reference_coords,
                     std::span<const std::size_t> k_list, std::size_t reference_count) {
    validate(truth);
    EvalSummary s;
    s.query_count = ranked.size();
    s.reference_count = reference_count;
    for (std::size_t k : k_list) s.topk.emplace_back(k, topk_accuracy(ranked, truth, k));
    s.top1_percent_k = top1_percent_k(reference_count);
    s.top1_percent = topk_accuracy(ranked, truth, s.top1_percent_k);
    s.mean_ap = mean_average_precision(ranked, truth);
    s.hit_rate = hit_rate(ranked, truth);
    s.distances = distance_report(ranked, truth, reference_coords);
    return s;
}

void write_report(std::ostream& os, const EvalSummary& s) {
    const auto flags = os.flags();
    os << std::setprecision(6) << std::fixed;
    os << "queries=" << s.query_count << '\n';
    os << "references=" << s.reference_count << '\n';
    for (const auto& [k, acc] : s.topk) os << "top" << k << '=' << acc << '\n';
    os << "top1%=" << s.top1_percent << " (k=" << s.top1_percent_k << ")\n";
    os << "mAP=" << s.mean_ap << '\n';
    os << "hit_rate=" << s.hit_rate << '\n';
    os << "success_10m=" << s.distances.success_fraction << '\n';
    os << "# distance buckets (m)\n";
    const auto& e = DistanceBuckets::edges;
    for (std::size_t b = 0; b < s.distances.buckets.counts.size(); ++b) {
        os << "bucket[" << std::setprecision(0) << e[b] << ',' << e[b + 1] << (b + 1 == s.distances.buckets.counts.size() ? "]" : ")")
           << '=' << s.distances.buckets.counts[b] << '\n';
    }
    os.flags(flags);
}

void write_query_dump(std::ostream& os, const DistanceReport& report) {
    os << "query_id\ttop1_id\tdistance_m\trank_of_first_relevant\n";
    const auto flags = os.flags();
    os << std::setprecision(3) << std::fixed;
    for (const auto& q : report.per_query) {
        os << q.query_id << '\t' << q.top1_id << '\t' << q.distance_m << '\t';
        if (q.first_relevant_rank) os << *q.first_relevant_rank;
        else os << '-';
        os << '\n';
    }
    os.flags(flags);
}

} // namespace cvgl
