#include "cvgl/sampling.hpp"

#include <algorithm>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "cvgl/error.hpp"
#include "cvgl/index.hpp"

namespace cvgl {

void DssConfig::validate() const {
    if (batch_quota % 2 != 0) throw UsageError("dss: batch_quota must be even");
    if (batch_quota > pool_size) {
        throw UsageError("dss: batch_quota (" + std::to_string(batch_quota) + ") exceeds pool_size (" +
                         std::to_string(pool_size) + ")");
    }
}

const char* to_string(SamplingPhase phase) {
    switch (phase) {
        case SamplingPhase::Random: return "random";
        case SamplingPhase::NNS: return "nns";
        case SamplingPhase::DSS: return "dss";
    }
    return "?";
}

SamplingPhase parse_sampling_phase(const std::string& text) {
    if (text == "random") return SamplingPhase::Random;
    if (text == "nns") return SamplingPhase::NNS;
    if (text == "dss") return SamplingPhase::DSS;
    throw DataError("unknown sampling phase '" + text + "'");
}

std::size_t EpochPlan::id_count() const {
    std::size_t n = 0;
    for (const auto& b : batches) n += b.size();
    return n;
}

std::vector<std::size_t> nns_neighbors(std::span<const GeoPoint> coords, std::size_t query,
                                       std::size_t count) {
    if (query >= coords.size()) throw UsageError("nns_neighbors: query index out of range");
    if (count >= coords.size()) {
        throw UsageError("nns_neighbors: count " + std::to_string(count) + " must be below dataset size " +
                         std::to_string(coords.size()));
    }
    struct Cand {
        double dist;
        std::size_t pos;
    };
    std::vector<Cand> cands;
    cands.reserve(coords.size() - 1);
    for (std::size_t i = 0; i < coords.size(); ++i) {
        if (i != query) cands.push_back({geo_distance(coords[query], coords[i]), i});
    }
    auto closer = [](const Cand& a, const Cand& b) {
        return a.dist != b.dist ? a.dist < b.dist : a.pos < b.pos;
    };
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(count), cands.end(), closer);
    std::vector<std::size_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = cands[i].pos;
    return out;
}

std::vector<std::uint64_t> dss_batch(std::span<const std::uint64_t> ranked, const DssConfig& cfg,
                                     const std::unordered_set<std::uint64_t>& excluded, Rng& rng) {
    cfg.validate();
    if (ranked.size() < cfg.pool_size) {
        throw UsageError("dss_batch: ranking holds " + std::to_string(ranked.size()) +
                         " candidates, pool_size is " + std::to_string(cfg.pool_size));
    }
    const std::size_t half = cfg.batch_quota / 2;
    std::vector<std::uint64_t> out;
    out.reserve(cfg.batch_quota);

    // Hardest half, rank order.
    std::size_t rank = 0;
    for (; rank < ranked.size() && out.size() < half; ++rank) {
        if (!excluded.contains(ranked[rank])) out.push_back(ranked[rank]);
    }
    // Random half from what is left of the pool.
    std::vector<std::uint64_t> leftover;
    for (std::size_t r = rank; r < cfg.pool_size; ++r) {
        if (!excluded.contains(ranked[r])) leftover.push_back(ranked[r]);
    }
    rng.shuffle(std::span<std::uint64_t>(leftover));
    const std::size_t take = std::min(half, leftover.size());
    out.insert(out.end(), leftover.begin(), leftover.begin() + static_cast<std::ptrdiff_t>(take));
    // Refill past the pool in rank order.
    for (std::size_t r = std::max(rank, cfg.pool_size); r < ranked.size() && out.size() < cfg.batch_quota; ++r) {
        if (!excluded.contains(ranked[r])) out.push_back(ranked[r]);
    }
    if (out.size() < cfg.batch_quota) throw DataError("exhausted candidate pool");
    return out;
}

std::vector<std::uint64_t> dss_batch(std::span<const std::uint64_t> ranked, const DssConfig& cfg,
                                     const std::unordered_set<std::uint64_t>& excluded) {
    Rng rng(cfg.rng_seed);
    return dss_batch(ranked, cfg, excluded, rng);
}

std::vector<std::vector<std::uint64_t>> similarity_rankings(const PlanInputs& inputs) {
    if (inputs.ground_descriptors == nullptr || inputs.satellite_descriptors == nullptr) {
        throw UsageError("similarity rankings need ground and satellite descriptors");
    }
    const Matrix& ground = *inputs.ground_descriptors;
    const Matrix& sat = *inputs.satellite_descriptors;
    if (ground.rows() != inputs.ids.size() || sat.rows() != inputs.ids.size() || !ground.same_shape(sat)) {
        throw ShapeError("similarity rankings: descriptor rows do not match id count");
    }
    DescriptorStore store(sat.cols());
    for (std::size_t i = 0; i < inputs.ids.size(); ++i) store.add(inputs.ids[i], sat.row(i));
    store.freeze();
    const auto lists = store.search_batch(ground, inputs.ids, store.size(), inputs.threads);
    std::vector<std::vector<std::uint64_t>> out(lists.size());
    for (std::size_t i = 0; i < lists.size(); ++i) {
        out[i].reserve(lists[i].entries.size());
        for (const auto& e : lists[i].entries)
            if (e.id != inputs.ids[i]) out[i].push_back(e.id);
    }
    return out;
}

namespace {

struct PlanContext {
    const PlanInputs& in;
    std::size_t batch_size;
    std::unordered_map<std::uint64_t, std::size_t> pos;
    std::unordered_set<std::uint64_t> used;
    std::size_t available = 0;

    PlanContext(const PlanInputs& inputs, std::size_t bs, const std::unordered_set<std::uint64_t>& consumed)
        : in(inputs), batch_size(bs) {
        for (std::size_t i = 0; i < in.ids.size(); ++i) {
            if (!pos.emplace(in.ids[i], i).second) throw DataError("plan: duplicate id " + std::to_string(in.ids[i]));
        }
        for (std::uint64_t id : consumed)
            if (pos.contains(id)) used.insert(id);
        available = in.ids.size() - used.size();
    }

    bool near_duplicate(std::size_t anchor, std::size_t other) const {
        if (in.coords.empty()) return false;
        return geo_distance(in.coords[anchor], in.coords[other]) < kDuplicateRadiusMeters;
    }

    std::vector<std::size_t> shuffled_anchors(Rng& rng) const {
        std::vector<std::size_t> order;
        for (std::size_t i = 0; i < in.ids.size(); ++i)
            if (!used.contains(in.ids[i])) order.push_back(i);
        rng.shuffle(std::span<std::size_t>(order));
        return order;
    }

    void commit(EpochPlan& plan, std::vector<std::uint64_t> batch) {
        for (std::uint64_t id : batch) used.insert(id);
        available -= batch.size();
        plan.batches.push_back(std::move(batch));
    }
};

void plan_random(PlanContext& ctx, EpochPlan& plan, Rng& rng) {
    const auto order = ctx.shuffled_anchors(rng);
    for (std::size_t start = 0; start + ctx.batch_size <= order.size(); start += ctx.batch_size) {
        std::vector<std::uint64_t> batch;
        for (std::size_t k = 0; k < ctx.batch_size; ++k) batch.push_back(ctx.in.ids[order[start + k]]);
        ctx.commit(plan, std::move(batch));
    }
}

void plan_nns(PlanContext& ctx, EpochPlan& plan, Rng& rng) {
    if (ctx.in.coords.size() != ctx.in.ids.size()) throw ShapeError("NNS plan: coords and ids differ in length");
    const std::size_t n = ctx.in.ids.size();
    for (std::size_t anchor : ctx.shuffled_anchors(rng)) {
        if (ctx.available < ctx.batch_size) break;
        if (ctx.used.contains(ctx.in.ids[anchor])) continue;
        std::vector<std::uint64_t> batch{ctx.in.ids[anchor]};
        for (std::size_t nb : nns_neighbors(ctx.in.coords, anchor, n - 1)) {
            if (batch.size() == ctx.batch_size) break;
            const std::uint64_t id = ctx.in.ids[nb];
            if (ctx.used.contains(id) || ctx.near_duplicate(anchor, nb)) continue;
            batch.push_back(id);
        }
        if (batch.size() == ctx.batch_size) ctx.commit(plan, std::move(batch));
    }
}

void plan_dss(PlanContext& ctx, EpochPlan& plan, Rng& rng) {
    const auto rankings = similarity_rankings(ctx.in);
    const std::size_t n = ctx.in.ids.size();
    // Scale the default quota down when a batch or the dataset is smaller.
    DssConfig eff = ctx.in.dss;
    eff.pool_size = std::min(eff.pool_size, n - 1);
    eff.batch_quota = std::min({eff.batch_quota, (ctx.batch_size - 1) / 2 * 2, eff.pool_size / 2 * 2});
    eff.validate();

    for (std::size_t anchor : ctx.shuffled_anchors(rng)) {
        if (ctx.available < ctx.batch_size) break;
        const std::uint64_t anchor_id = ctx.in.ids[anchor];
        if (ctx.used.contains(anchor_id)) continue;
        std::unordered_set<std::uint64_t> excluded = ctx.used;
        excluded.insert(anchor_id);
        std::size_t open = 0;
        for (std::uint64_t id : rankings[anchor]) {
            if (excluded.contains(id)) continue;
            if (ctx.near_duplicate(anchor, ctx.pos.at(id))) {
                excluded.insert(id);
                continue;
            }
            ++open;
        }
        if (open < ctx.batch_size - 1) continue;

        std::vector<std::uint64_t> batch{anchor_id};
        const auto picks = dss_batch(rankings[anchor], eff, excluded, rng);
        batch.insert(batch.end(), picks.begin(), picks.end());
        // Odd remainder: next-ranked open candidates.
        if (batch.size() < ctx.batch_size) {
            std::unordered_set<std::uint64_t> taken(picks.begin(), picks.end());
            for (std::uint64_t id : rankings[anchor]) {
                if (batch.size() == ctx.batch_size) break;
                if (!excluded.contains(id) && !taken.contains(id)) batch.push_back(id);
            }
        }
        ctx.commit(plan, std::move(batch));
    }
}

} // namespace

EpochPlan build_epoch_plan(const PlanInputs& inputs, SamplingPhase phase, std::size_t batch_size,
                           std::uint64_t seed, const std::unordered_set<std::uint64_t>& consumed) {
    if (batch_size < 2) throw UsageError("plan: batch_size must be at least 2");
    if (batch_size > inputs.ids.size()) {
        throw UsageError("plan: batch_size " + std::to_string(batch_size) + " exceeds dataset size " +
                         std::to_string(inputs.ids.size()));
    }
    PlanContext ctx(inputs, batch_size, consumed);
    Rng rng(seed);
    EpochPlan plan;
    plan.phase = phase;
    switch (phase) {
        case SamplingPhase::Random: plan_random(ctx, plan, rng); break;
        case SamplingPhase::NNS: plan_nns(ctx, plan, rng); break;
        case SamplingPhase::DSS: plan_dss(ctx, plan, rng); break;
    }
    return plan;
}

void write_plan(std::ostream& os, const EpochPlan& plan) {
    os << "# phase=" << to_string(plan.phase) << '\n';
    for (const auto& batch : plan.batches) {
        for (std::size_t i = 0; i < batch.size(); ++i) os << (i ? " " : "") << batch[i];
        os << '\n';
    }
}

EpochPlan read_plan(std::istream& is) {
    EpochPlan plan;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto at = line.find("phase=");
            if (at != std::string::npos) plan.phase = parse_sampling_phase(line.substr(at + 6));
            continue;
        }
        std::istringstream ls(line);
        std::vector<std::uint64_t> batch;
        std::uint64_t id = 0;
        while (ls >> id) batch.push_back(id);
        if (!ls.eof()) throw DataError("plan line " + std::to_string(line_no) + ": not an id list");
        plan.batches.push_back(std::move(batch));
    }
    return plan;
}

} // namespace cvgl
