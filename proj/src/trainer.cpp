#include "cvgl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <utility>

#include "cvgl/binio.hpp"
#include "cvgl/error.hpp"

namespace cvgl {

namespace {

constexpr std::uint32_t kStateVersion = 1;

std::vector<const PairRecord*> sorted_records(const Manifest& m) {
    std::vector<const PairRecord*> out;
    out.reserve(m.records.size());
    for (const auto& r : m.records) out.push_back(&r);
    std::sort(out.begin(), out.end(), [](const PairRecord* a, const PairRecord* b) { return a->id < b->id; });
    return out;
}

void add_into(MixerParams& acc, const MixerParams& g) {
    auto dst = acc.tensors();
    const auto src = g.tensors();
    for (std::size_t t = 0; t < dst.size(); ++t) {
        auto d = dst[t]->data();
        auto s = src[t]->data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
    }
}

} // namespace

const char* to_string(SamplingStrategy s) {
    switch (s) {
        case SamplingStrategy::NnsThenDss: return "nns+dss";
        case SamplingStrategy::DssOnly: return "dss";
        case SamplingStrategy::NnsOnly: return "nns";
        case SamplingStrategy::Random: return "random";
    }
    return "?";
}

SamplingStrategy parse_sampling_strategy(const std::string& text) {
    if (text == "nns+dss") return SamplingStrategy::NnsThenDss;
    if (text == "dss") return SamplingStrategy::DssOnly;
    if (text == "nns") return SamplingStrategy::NnsOnly;
    if (text == "random") return SamplingStrategy::Random;
    throw UsageError("unknown sampling strategy '" + text + "' (nns+dss, dss, nns, random)");
}

void TrainConfig::validate() const {
    mixer.validate();
    loss.validate();
    dss.validate();
    if (epochs == 0) throw UsageError("train: epochs must be positive");
    if (batch_size < 2) throw UsageError("train: batch_size must be at least 2");
    if (!(base_lr > 0.0)) throw UsageError("train: lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw UsageError("train: momentum must be in [0,1)");
    if (sampling == SamplingStrategy::NnsThenDss && nns_epochs >= epochs) {
        throw UsageError("train: nns_epochs (" + std::to_string(nns_epochs) + ") must be below epochs (" +
                         std::to_string(epochs) + ")");
    }
    if (feature_variants == 0) throw UsageError("train: feature_variants must be at least 1");
    if (threads < 1) throw UsageError("train: threads must be at least 1");
}

Splits resolve_splits(const Manifest& manifest, const Manifest* heldout, std::uint64_t seed) {
    Splits s;
    if (heldout != nullptr) {
        if (heldout->coordinate_mode != manifest.coordinate_mode) {
            throw DataError("held-out manifest uses a different coordinate mode");
        }
        if (manifest.split == Split::Train && heldout->split == Split::Test) check_city_disjoint(manifest, *heldout);
        s.train = manifest;
        s.heldout = *heldout;
        return s;
    }
    s.train.coordinate_mode = s.heldout.coordinate_mode = manifest.coordinate_mode;
    s.train.split = Split::Train;
    s.heldout.split = Split::Test;
    const auto cities = manifest.cities();
    if (cities.size() > 1) {
        const std::size_t hold = std::max<std::size_t>(1, (cities.size() + 4) / 5);
        const std::set<std::string> held(cities.end() - static_cast<std::ptrdiff_t>(hold), cities.end());
        for (const auto& r : manifest.records) (held.contains(r.city) ? s.heldout : s.train).records.push_back(r);
        return s;
    }
    std::vector<std::size_t> order(manifest.records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(seed, 0x5B11));
    rng.shuffle(std::span<std::size_t>(order));
    const std::size_t hold = order.size() / 5;
    std::vector<bool> is_held(order.size(), false);
    for (std::size_t i = 0; i < hold; ++i) is_held[order[i]] = true;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        (is_held[i] ? s.heldout : s.train).records.push_back(manifest.records[i]);
    }
    return s;
}

std::pair<DescriptorStore, DescriptorStore> encode_all(const Manifest& manifest, const FeatureSource& features,
                                                       const MixerParams& params, const MixerConfig& cfg,
                                                       int threads) {
    const auto records = sorted_records(manifest);
    std::vector<Descriptor> ground(records.size());
    std::vector<Descriptor> sat(records.size());
    parallel_for(2 * records.size(), threads, [&](std::size_t k) {
        const PairRecord& r = *records[k / 2];
        if (k % 2 == 0) ground[k / 2] = mixer_forward(features.tokens(r, View::Ground), params, cfg);
        else sat[k / 2] = mixer_forward(features.tokens(r, View::Satellite), params, cfg);
    });
    std::pair<DescriptorStore, DescriptorStore> out{DescriptorStore(cfg.descriptor_dim()),
                                                    DescriptorStore(cfg.descriptor_dim())};
    for (std::size_t i = 0; i < records.size(); ++i) {
        out.first.add(records[i]->id, ground[i]);
        out.second.add(records[i]->id, sat[i]);
    }
    out.first.freeze();
    out.second.freeze();
    return out;
}

double retrieval_top1(const Manifest& manifest, const FeatureSource& features, const MixerParams& params,
                      const MixerConfig& cfg, int threads) {
    if (manifest.records.empty()) throw UsageError("retrieval_top1: empty manifest");
    const auto [ground, sat] = encode_all(manifest, features, params, cfg, threads);
    const auto lists = sat.search_batch(ground.matrix(), ground.ids(), 1, threads);
    std::size_t hits = 0;
    for (const auto& l : lists) hits += l.entries.front().id == l.query_id ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(lists.size());
}

GroundTruth ground_truth_for(const Manifest& manifest) {
    GroundTruth truth;
    for (const auto& r : manifest.records) {
        QueryTruth t;
        t.relevant.insert(r.id);
        t.covering.insert(r.id);
        if (r.covering_ids) t.covering.insert(r.covering_ids->begin(), r.covering_ids->end());
        t.truth_point = r.point;
        truth.emplace(r.id, std::move(t));
    }
    return truth;
}

std::map<std::uint64_t, GeoPoint> reference_coordinates(const Manifest& manifest) {
    std::map<std::uint64_t, GeoPoint> coords;
    for (const auto& r : manifest.records) coords.emplace(r.id, r.point);
    return coords;
}

TrainState initial_state(const TrainConfig& cfg) {
    TrainState s;
    s.params = MixerParams::init(cfg.mixer, mix_seed(cfg.seed, 0x1A17));
    s.loss = cfg.loss;
    s.loss.clamp();
    s.rng = Rng(mix_seed(cfg.seed, 0x9A4));
    return s;
}

Trainer::Trainer(Splits splits, const FeatureSource& features, TrainConfig cfg)
    : Trainer(std::move(splits), features, cfg, initial_state(cfg)) {}

Trainer::Trainer(Splits splits, const FeatureSource& features, TrainConfig cfg, TrainState resumed)
    : splits_(std::move(splits)), features_(features), cfg_(std::move(cfg)), state_(std::move(resumed)) {
    cfg_.validate();
    splits_.train.validate();
    state_.params.check_shapes(cfg_.mixer);
    const std::size_t n = splits_.train.records.size();
    if (cfg_.batch_size > n) {
        throw UsageError("train: batch_size " + std::to_string(cfg_.batch_size) + " exceeds training set size " +
                         std::to_string(n));
    }
    steps_per_epoch_ = n / cfg_.batch_size;
    if (cfg_.epochs * steps_per_epoch_ < 2) throw UsageError("train: fewer than 2 total steps");
    for (const PairRecord* r : sorted_records(splits_.train)) {
        ids_.push_back(r->id);
        coords_.push_back(r->point);
        by_id_.emplace(r->id, r);
    }
}

SgdConfig Trainer::sgd_config() const {
    SgdConfig s;
    s.base_lr = cfg_.base_lr;
    s.total_steps = total_steps();
    s.warmup_steps = steps_per_epoch_;
    s.momentum = cfg_.momentum;
    return s;
}

SamplingPhase Trainer::phase_for_epoch(std::size_t epoch) const {
    switch (cfg_.sampling) {
        case SamplingStrategy::NnsThenDss: return epoch < cfg_.nns_epochs ? SamplingPhase::NNS : SamplingPhase::DSS;
        case SamplingStrategy::DssOnly: return SamplingPhase::DSS;
        case SamplingStrategy::NnsOnly: return SamplingPhase::NNS;
        case SamplingStrategy::Random: return SamplingPhase::Random;
    }
    return SamplingPhase::Random;
}

EpochPlan Trainer::make_plan(SamplingPhase phase, std::uint64_t seed,
                             const std::unordered_set<std::uint64_t>& consumed) const {
    PlanInputs in;
    in.ids = ids_;
    in.coords = coords_;
    in.dss = cfg_.dss;
    in.threads = cfg_.threads;
    Matrix ground;
    Matrix sat;
    if (phase == SamplingPhase::DSS) {
        const auto stores = encode_all(splits_.train, features_, state_.params, cfg_.mixer, cfg_.threads);
        ground = stores.first.matrix();
        sat = stores.second.matrix();
        in.ground_descriptors = &ground;
        in.satellite_descriptors = &sat;
    }
    return build_epoch_plan(in, phase, cfg_.batch_size, seed, consumed);
}

void Trainer::begin_epoch() {
    const SamplingPhase phase = phase_for_epoch(state_.epoch);
    state_.plan = make_plan(phase, state_.rng.next_u64(), {});
    state_.cursor = 0;
    state_.epoch_loss_sum = 0.0;
    state_.epoch_batches = 0;
    if (state_.plan.batches.empty()) throw DataError("epoch plan produced no batches");
}

void Trainer::replan_remaining() {
    std::unordered_set<std::uint64_t> consumed;
    for (std::size_t b = 0; b < state_.cursor; ++b) consumed.insert(state_.plan.batches[b].begin(), state_.plan.batches[b].end());
    EpochPlan rest = make_plan(SamplingPhase::DSS, state_.rng.next_u64(), consumed);
    state_.plan.batches.resize(state_.cursor);
    for (auto& b : rest.batches) state_.plan.batches.push_back(std::move(b));
}

void Trainer::end_epoch() {
    HistoryEntry h;
    h.epoch = state_.epoch + 1;
    h.step = state_.step;
    h.loss = state_.epoch_batches == 0 ? 0.0 : state_.epoch_loss_sum / static_cast<double>(state_.epoch_batches);
    h.lr = cosine_lr(std::min(state_.step - 1, total_steps()), sgd_config());
    const bool last = h.epoch == cfg_.epochs;
    if (cfg_.eval_every > 0 && !splits_.heldout.records.empty() && (h.epoch % cfg_.eval_every == 0 || last)) {
        h.top1 = retrieval_top1(splits_.heldout, features_, state_.params, cfg_.mixer, cfg_.threads);
        if (*h.top1 > state_.best_top1) {
            state_.best_top1 = *h.top1;
            state_.best_epoch = h.epoch;
        }
    }
    state_.history.push_back(h);
    state_.epoch += 1;
    state_.plan = {};
    state_.cursor = 0;
}

double Trainer::step() {
    if (finished()) throw UsageError("train: already finished");
    if (state_.plan.batches.empty() || state_.cursor >= state_.plan.batches.size()) begin_epoch();

    const auto& batch = state_.plan.batches[state_.cursor];
    const std::size_t b = batch.size();
    const std::size_t dim = cfg_.mixer.descriptor_dim();
    const std::size_t epoch = state_.epoch;
    auto variant = [&](std::uint64_t id) -> std::size_t {
        if (cfg_.feature_variants <= 1) return 0;
        return static_cast<std::size_t>(mix_seed(mix_seed(cfg_.seed, epoch), id) % cfg_.feature_variants);
    };

    // Slot 2i is the ground view of batch[i], slot 2i+1 its satellite view;
    // both go through the same parameters.
    auto numeric_failure = [&](const std::string& what) {
        std::ostringstream os;
        os << what << " at step " << state_.step << " (epoch " << state_.epoch + 1 << "), batch ids:";
        for (std::uint64_t id : batch) os << ' ' << id;
        return NumericError(os.str());
    };
    std::vector<MixerCache> caches(2 * b);
    try {
        parallel_for(2 * b, cfg_.threads, [&](std::size_t k) {
            const PairRecord& r = *by_id_.at(batch[k / 2]);
            const View view = k % 2 == 0 ? View::Ground : View::Satellite;
            caches[k] = mixer_forward_cached(features_.tokens(r, view, variant(r.id)), state_.params, cfg_.mixer);
        });
    } catch (const NumericError& e) {
        throw numeric_failure(e.what());
    }
    BatchPair pair{Matrix(b, dim), Matrix(b, dim)};
    for (std::size_t i = 0; i < b; ++i) {
        std::copy(caches[2 * i].descriptor.begin(), caches[2 * i].descriptor.end(), pair.queries.row(i).begin());
        std::copy(caches[2 * i + 1].descriptor.begin(), caches[2 * i + 1].descriptor.end(),
                  pair.references.row(i).begin());
    }
    LossResult loss;
    try {
        loss = symmetric_infonce(pair, state_.loss);
    } catch (const NumericError& e) {
        throw numeric_failure(e.what());
    }
    if (!std::isfinite(loss.loss)) throw numeric_failure("non-finite loss");

    std::vector<MixerGradients> grads(2 * b);
    parallel_for(2 * b, cfg_.threads, [&](std::size_t k) {
        const Matrix& g = k % 2 == 0 ? loss.grad_queries : loss.grad_references;
        grads[k] = mixer_backward(caches[k], state_.params, cfg_.mixer, g.row(k / 2));
    });
    MixerParams total = MixerParams::zeros(cfg_.mixer);
    for (const auto& g : grads) add_into(total, g.params);  // fixed reduction order

    const SgdConfig sgd = sgd_config();
    const double lr = cosine_lr(state_.step, sgd);
    const auto params = state_.params.tensors();
    const auto grad_tensors = std::as_const(total).tensors();
    sgd_step(params, grad_tensors, lr, sgd, state_.velocity);
    if (state_.loss.temperature_mode == TemperatureMode::Learnable) {
        const double grad_theta = -state_.loss.temperature() * loss.grad_tau;
        state_.temperature_velocity = cfg_.momentum * state_.temperature_velocity + grad_theta;
        state_.loss.log_inv_tau -= lr * state_.temperature_velocity;
        state_.loss.clamp();
    }
    if (!state_.params.all_finite()) throw NumericError("non-finite parameters after step " + std::to_string(state_.step));

    state_.step += 1;
    state_.cursor += 1;
    state_.epoch_loss_sum += loss.loss;
    state_.epoch_batches += 1;
    state_.step_losses.push_back(loss.loss);

    if (state_.cursor >= state_.plan.batches.size()) {
        end_epoch();
    } else if (cfg_.dss_refresh_steps > 0 && state_.plan.phase == SamplingPhase::DSS &&
               state_.cursor % cfg_.dss_refresh_steps == 0) {
        replan_remaining();
        if (state_.cursor >= state_.plan.batches.size()) end_epoch();
    }
    return loss.loss;
}

void Trainer::run(const std::function<void(const TrainState&)>& on_epoch_end) {
    while (!finished()) {
        const std::size_t epoch = state_.epoch;
        step();
        if (state_.epoch != epoch && on_epoch_end) on_epoch_end(state_);
    }
}

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const TrainState& s) {
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError("cannot open " + tmp.string() + " for writing");
        write_mixer(os, cfg.mixer, s.params);
        binio::put_magic(os, "CVTS");
        binio::put_u32(os, kStateVersion);
        binio::put_u32(os, s.loss.temperature_mode == TemperatureMode::Learnable ? 1 : 0);
        binio::put_f64(os, s.loss.tau);
        binio::put_f64(os, s.loss.log_inv_tau);
        binio::put_f64(os, s.loss.label_smoothing);
        binio::put_f64(os, s.temperature_velocity);
        binio::put_u64(os, s.epoch);
        binio::put_u64(os, s.step);
        binio::put_u64(os, s.cursor);
        binio::put_string(os, s.rng.serialize());
        binio::put_u32(os, static_cast<std::uint32_t>(s.velocity.size()));
        for (std::size_t i = 0; i < s.velocity.size(); ++i) write_tensor(os, "velocity." + std::to_string(i), s.velocity[i]);
        binio::put_u32(os, static_cast<std::uint32_t>(s.plan.phase));
        binio::put_u64(os, s.plan.batches.size());
        for (const auto& batch : s.plan.batches) {
            binio::put_u64(os, batch.size());
            for (std::uint64_t id : batch) binio::put_u64(os, id);
        }
        binio::put_f64(os, s.epoch_loss_sum);
        binio::put_u64(os, s.epoch_batches);
        binio::put_u64(os, s.step_losses.size());
        for (double v : s.step_losses) binio::put_f64(os, v);
        binio::put_u64(os, s.history.size());
        for (const auto& h : s.history) {
            binio::put_u64(os, h.epoch);
            binio::put_u64(os, h.step);
            binio::put_f64(os, h.loss);
            binio::put_f64(os, h.lr);
            binio::put_u32(os, h.top1 ? 1 : 0);
            binio::put_f64(os, h.top1.value_or(0.0));
        }
        binio::put_f64(os, s.best_top1);
        binio::put_u64(os, s.best_epoch);
        if (!os) throw DataError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path, const MixerConfig& expected) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint " + path.string());
    const std::string what = "checkpoint " + path.string();
    TrainState s;
    MixerConfig cfg;
    read_mixer(is, cfg, s.params);
    if (!(cfg == expected)) {
        throw DataError("checkpoint mixer config (" + to_string(cfg) + ") does not match (" + to_string(expected) + ")");
    }
    binio::expect_magic(is, "CVTS", what);
    const std::uint32_t version = binio::get_u32(is, what);
    if (version != kStateVersion) throw DataError("unsupported training state version " + std::to_string(version));
    s.loss.temperature_mode = binio::get_u32(is, what) == 1 ? TemperatureMode::Learnable : TemperatureMode::Fixed;
    s.loss.tau = binio::get_f64(is, what);
    s.loss.log_inv_tau = binio::get_f64(is, what);
    s.loss.label_smoothing = binio::get_f64(is, what);
    s.temperature_velocity = binio::get_f64(is, what);
    s.epoch = binio::get_u64(is, what);
    s.step = binio::get_u64(is, what);
    s.cursor = binio::get_u64(is, what);
    s.rng = Rng::deserialize(binio::get_string(is, what));
    const std::uint32_t nvel = binio::get_u32(is, what);
    if (nvel > 4096) throw DataError("corrupt " + what);
    for (std::uint32_t i = 0; i < nvel; ++i) s.velocity.push_back(read_tensor(is, "velocity." + std::to_string(i)));
    const std::uint32_t phase = binio::get_u32(is, what);
    if (phase > 2) throw DataError("corrupt plan phase in " + what);
    s.plan.phase = static_cast<SamplingPhase>(phase);
    const std::uint64_t nbatches = binio::get_u64(is, what);
    if (nbatches > (1u << 24)) throw DataError("corrupt " + what);
    for (std::uint64_t b = 0; b < nbatches; ++b) {
        const std::uint64_t len = binio::get_u64(is, what);
        if (len > (1u << 20)) throw DataError("corrupt " + what);
        std::vector<std::uint64_t> batch(len);
        for (auto& id : batch) id = binio::get_u64(is, what);
        s.plan.batches.push_back(std::move(batch));
    }
    s.epoch_loss_sum = binio::get_f64(is, what);
    s.epoch_batches = binio::get_u64(is, what);
    const std::uint64_t nloss = binio::get_u64(is, what);
    if (nloss > (1ull << 32)) throw DataError("corrupt " + what);
    s.step_losses.resize(nloss);
    for (double& v : s.step_losses) v = binio::get_f64(is, what);
    const std::uint64_t nhist = binio::get_u64(is, what);
    if (nhist > (1u << 24)) throw DataError("corrupt " + what);
    for (std::uint64_t i = 0; i < nhist; ++i) {
        HistoryEntry h;
        h.epoch = binio::get_u64(is, what);
        h.step = binio::get_u64(is, what);
        h.loss = binio::get_f64(is, what);
        h.lr = binio::get_f64(is, what);
        const bool has_top1 = binio::get_u32(is, what) == 1;
        const double top1 = binio::get_f64(is, what);
        if (has_top1) h.top1 = top1;
        s.history.push_back(h);
    }
    s.best_top1 = binio::get_f64(is, what);
    s.best_epoch = binio::get_u64(is, what);
    if (s.cursor > s.plan.batches.size()) throw DataError("corrupt plan cursor in " + what);
    return s;
}

void write_history(std::ostream& os, const std::vector<HistoryEntry>& history) {
    os << "epoch\tstep\tloss\tlr\ttop1\n";
    for (const auto& h : history) {
        os << h.epoch << '\t' << h.step << '\t' << std::setprecision(17) << h.loss << '\t' << h.lr << '\t';
        if (h.top1) os << *h.top1;
        else os << '-';
        os << '\n';
    }
}

} // namespace cvgl
