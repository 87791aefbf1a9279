#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "cvgl/geo.hpp"
#include "cvgl/numerics.hpp"
#include "cvgl/rng.hpp"

namespace cvgl {

// Hard-negative quota for one anchor: the top batch_quota/2 by similarity plus
// a random batch_quota/2 from the rest of the top pool_size.
struct DssConfig {
    std::size_t pool_size = 128;   // S
    std::size_t batch_quota = 64;  // s
    std::uint64_t rng_seed = 0;

    void validate() const;
};

enum class SamplingPhase { Random, NNS, DSS };

const char* to_string(SamplingPhase phase);
SamplingPhase parse_sampling_phase(const std::string& text);

struct EpochPlan {
    SamplingPhase phase = SamplingPhase::Random;
    std::vector<std::vector<std::uint64_t>> batches;

    std::size_t id_count() const;
    friend bool operator==(const EpochPlan&, const EpochPlan&) = default;
};

// Candidates closer than this to the anchor are treated as the same place
// and never used as its negatives.
inline constexpr double kDuplicateRadiusMeters = 1.0;

// Positions of the `count` points nearest to coords[query] (query excluded),
// ascending by distance, ties by ascending position.
std::vector<std::size_t> nns_neighbors(std::span<const GeoPoint> coords, std::size_t query,
                                       std::size_t count);

// ranked: candidate ids by descending similarity to one anchor, at least
// pool_size long. Ids in `excluded` are skipped; the quota is refilled from
// later ranks. Throws DataError("exhausted candidate pool") when too few remain.
std::vector<std::uint64_t> dss_batch(std::span<const std::uint64_t> ranked, const DssConfig& cfg,
                                     const std::unordered_set<std::uint64_t>& excluded, Rng& rng);
// Convenience overload seeded from cfg.rng_seed.
std::vector<std::uint64_t> dss_batch(std::span<const std::uint64_t> ranked, const DssConfig& cfg,
                                     const std::unordered_set<std::uint64_t>& excluded);

// Everything an epoch plan may draw on. ids and coords are parallel; the
// descriptor matrices (one row per id, same order) are needed for DSS only.
struct PlanInputs {
    std::span<const std::uint64_t> ids;
    std::span<const GeoPoint> coords;
    const Matrix* ground_descriptors = nullptr;
    const Matrix* satellite_descriptors = nullptr;
    DssConfig dss;
    int threads = 1;
};

// Builds full batches of batch_size ids; an id is used at most once and the
// remainder that cannot fill a batch is dropped. Ids in `consumed` are left out.
//  - Random: shuffled ids chunked into batches.
//  - NNS: each unconsumed anchor (shuffled order) plus its nearest unconsumed
//    geographic neighbors.
//  - DSS: each unconsumed anchor plus a dss_batch drawn from the ranking of
//    satellite descriptors by similarity to the anchor's ground descriptor.
EpochPlan build_epoch_plan(const PlanInputs& inputs, SamplingPhase phase, std::size_t batch_size,
                           std::uint64_t seed,
                           const std::unordered_set<std::uint64_t>& consumed = {});

// Similarity rankings used by DSS: for row i, all other ids ordered by
// descending ground_i . satellite_j, ties by ascending id.
std::vector<std::vector<std::uint64_t>> similarity_rankings(const PlanInputs& inputs);

// One batch per line, space-separated ids, preceded by a "# phase=..." line.
void write_plan(std::ostream& os, const EpochPlan& plan);
EpochPlan read_plan(std::istream& is);

} // namespace cvgl
