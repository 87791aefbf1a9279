#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cvgl/dataset.hpp"
#include "cvgl/eval.hpp"
#include "cvgl/index.hpp"
#include "cvgl/loss.hpp"
#include "cvgl/mixer.hpp"
#include "cvgl/rng.hpp"
#include "cvgl/sampling.hpp"

namespace cvgl {

// Negative-mining schedule across epochs.
enum class SamplingStrategy {
    NnsThenDss,  // NNS for the first nns_epochs, DSS afterwards
    DssOnly,
    NnsOnly,
    Random,
};

const char* to_string(SamplingStrategy s);
SamplingStrategy parse_sampling_strategy(const std::string& text);

struct TrainConfig {
    MixerConfig mixer;
    std::size_t epochs = 40;
    std::size_t batch_size = 32;
    double base_lr = 0.001;
    double momentum = 0.0;
    LossConfig loss;
    DssConfig dss;
    SamplingStrategy sampling = SamplingStrategy::NnsThenDss;
    std::size_t nns_epochs = 1;
    // 0 refreshes DSS rankings once per epoch; N > 0 also every N steps.
    std::size_t dss_refresh_steps = 0;
    std::size_t eval_every = 1;  // epochs; 0 disables held-out evaluation
    std::size_t feature_variants = 1;
    std::uint64_t seed = 0;
    int threads = 1;

    void validate() const;
};

struct HistoryEntry {
    std::size_t epoch = 0;  // 1-based
    std::size_t step = 0;   // global step count at epoch end
    double loss = 0.0;      // mean batch loss over the epoch
    double lr = 0.0;        // lr of the epoch's last step
    std::optional<double> top1;
    friend bool operator==(const HistoryEntry&, const HistoryEntry&) = default;
};

struct TrainState {
    MixerParams params;
    LossConfig loss;                 // carries the learnable temperature
    std::vector<Matrix> velocity;    // momentum buffers, empty without momentum
    double temperature_velocity = 0.0;
    std::size_t epoch = 0;           // epochs completed
    std::size_t step = 0;            // global steps completed
    Rng rng;
    EpochPlan plan;                  // current epoch, empty between epochs
    std::size_t cursor = 0;          // next batch within plan
    double epoch_loss_sum = 0.0;
    std::size_t epoch_batches = 0;
    std::vector<double> step_losses;
    std::vector<HistoryEntry> history;
    double best_top1 = -1.0;
    std::size_t best_epoch = 0;
};

// Resolved sets of records used for training and held-out evaluation.
struct Splits {
    Manifest train;
    Manifest heldout;
};

// Uses `heldout` when given (cities must be disjoint for a train/test pair),
// otherwise holds out whole cities when there are several (the last
// ceil(20%) in sorted order), else a seeded 80/20 record split.
Splits resolve_splits(const Manifest& manifest, const Manifest* heldout, std::uint64_t seed);

// Descriptor stores for both views, rows ordered by ascending id.
std::pair<DescriptorStore, DescriptorStore> encode_all(const Manifest& manifest, const FeatureSource& features,
                                                       const MixerParams& params, const MixerConfig& cfg,
                                                       int threads = 1);

// Top-1 of ground queries against the satellite references of the same manifest.
double retrieval_top1(const Manifest& manifest, const FeatureSource& features, const MixerParams& params,
                      const MixerConfig& cfg, int threads = 1);

// Ground query i matches satellite reference i; covering ids default to {i}.
GroundTruth ground_truth_for(const Manifest& manifest);
std::map<std::uint64_t, GeoPoint> reference_coordinates(const Manifest& manifest);

class Trainer {
public:
    Trainer(Splits splits, const FeatureSource& features, TrainConfig cfg);
    // Continues from a checkpointed state.
    Trainer(Splits splits, const FeatureSource& features, TrainConfig cfg, TrainState resumed);

    std::size_t steps_per_epoch() const noexcept { return steps_per_epoch_; }
    std::size_t total_steps() const noexcept { return steps_per_epoch_ * cfg_.epochs; }
    bool finished() const noexcept { return state_.epoch >= cfg_.epochs; }
    const TrainState& state() const noexcept { return state_; }
    const TrainConfig& config() const noexcept { return cfg_; }
    SgdConfig sgd_config() const;

    // Runs one batch. Returns the batch loss. Plans a new epoch when needed and
    // closes the epoch (history, evaluation) after its last batch.
    double step();
    // Trains to completion; on_epoch_end runs after every epoch.
    void run(const std::function<void(const TrainState&)>& on_epoch_end = {});

    SamplingPhase phase_for_epoch(std::size_t epoch) const;

private:
    void begin_epoch();
    void end_epoch();
    void replan_remaining();
    EpochPlan make_plan(SamplingPhase phase, std::uint64_t seed,
                        const std::unordered_set<std::uint64_t>& consumed) const;

    Splits splits_;
    const FeatureSource& features_;
    TrainConfig cfg_;
    TrainState state_;
    std::size_t steps_per_epoch_ = 0;
    std::vector<std::uint64_t> ids_;
    std::vector<GeoPoint> coords_;
    std::unordered_map<std::uint64_t, const PairRecord*> by_id_;
};

TrainState initial_state(const TrainConfig& cfg);

// CVMX mixer section followed by a CVTS section holding the optimizer,
// temperature, rng, plan position and history.
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path, const MixerConfig& expected);

// epoch, step, loss, lr, top1 as tab-separated lines with a header.
void write_history(std::ostream& os, const std::vector<HistoryEntry>& history);

} // namespace cvgl
