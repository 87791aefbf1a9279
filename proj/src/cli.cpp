#include "cvgl/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "cvgl/config.hpp"
#include "cvgl/dataset.hpp"
#include "cvgl/error.hpp"
#include "cvgl/eval.hpp"
#include "cvgl/gradcheck.hpp"
#include "cvgl/index.hpp"
#include "cvgl/trainer.hpp"

namespace fs = std::filesystem;

namespace cvgl {

namespace {

constexpr double kGradcheckTolerance = 1e-4;

void log_config(std::ostream& out, const std::string& command, const KeyValues& kv) {
    out << "[" << command << "] resolved config:";
    for (const auto& [k, v] : kv.entries()) out << ' ' << k << '=' << v;
    out << '\n';
}

void write_config_echo(const fs::path& dir, const KeyValues& kv, const std::vector<std::string>& comments) {
    std::ofstream os(dir / "config.txt");
    if (!os) throw DataError("cannot write " + (dir / "config.txt").string());
    for (const auto& c : comments) os << "# " << c << '\n';
    kv.write(os);
    if (!os) throw DataError("write failed for " + (dir / "config.txt").string());
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw DataError("cannot create directory " + dir.string());
}

fs::path default_features(const fs::path& manifest, const std::string& given) {
    if (!given.empty()) return given;
    return manifest.parent_path() / "features";
}

int resolve_threads(int requested) { return requested > 0 ? requested : default_thread_count(); }

// ---- gen-synthetic -------------------------------------------------------

struct GenArgs {
    std::string out;
    std::size_t pairs = 512;
    std::size_t holdout = 0;
    std::uint64_t seed = 0;
    std::uint32_t h = 8;
    std::uint32_t w = 8;
    std::uint32_t channels = 32;
    double sigma = 0.1;
};

int cmd_gen_synthetic(const GenArgs& a, std::ostream& out) {
    if (a.pairs < 2) throw UsageError("--pairs must be at least 2");
    if (a.holdout == 1) throw UsageError("--holdout must be 0 or at least 2");
    if (a.h == 0 || a.w == 0 || a.channels == 0) throw UsageError("--h, --w and --d-channels must be positive");
    if (!(a.sigma >= 0.0)) throw UsageError("--sigma must be non-negative");

    SyntheticConfig cfg;
    cfg.seed = a.seed;
    cfg.pair_count = a.pairs;
    cfg.holdout_count = a.holdout;
    cfg.map_height = a.h;
    cfg.map_width = a.w;
    cfg.channels = a.channels;
    cfg.noise_sigma = a.sigma;

    KeyValues kv;
    kv.set("pairs", std::to_string(cfg.pair_count));
    kv.set("holdout", std::to_string(cfg.holdout_count));
    kv.set("seed", std::to_string(cfg.seed));
    kv.set("h", std::to_string(cfg.map_height));
    kv.set("w", std::to_string(cfg.map_width));
    kv.set("channels", std::to_string(cfg.channels));
    std::ostringstream sigma;
    sigma << cfg.noise_sigma;
    kv.set("sigma", sigma.str());
    log_config(out, "gen-synthetic", kv);

    const fs::path dir = a.out;
    make_dir(dir);
    const SyntheticDataset data = synthetic_encoder(cfg);
    write_synthetic(dir, data);
    write_config_echo(dir, kv, {"gen-synthetic"});
    out << "wrote " << data.train.records.size() << " pairs";
    if (!data.holdout.records.empty()) out << " + " << data.holdout.records.size() << " holdout pairs";
    out << " to " << dir.string() << '\n';
    return kExitOk;
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
    std::string manifest;
    std::string features;
    std::string config;
    std::string out;
    std::string holdout_manifest;
    std::string resume;
    std::vector<std::string> overrides;
    std::string epochs, batch_size, lr, seed;
    int threads = 0;
};

// Fills channels/h/w from the first record's ground feature file unless set.
void infer_feature_shape(KeyValues& kv, const Manifest& manifest, const DirectoryFeatureSource& features) {
    if (kv.has("channels") && kv.has("h") && kv.has("w")) return;
    if (manifest.records.empty()) throw DataError("manifest has no records");
    const PairRecord& first = manifest.records.front();
    FeatureMap map;
    try {
        map = read_feature_file(features.path_for(first, View::Ground));
    } catch (const DataError& e) {
        throw DataError("features for id " + std::to_string(first.id) + ": " + e.what());
    }
    if (!kv.has("channels")) kv.set("channels", std::to_string(map.channels));
    if (!kv.has("h")) kv.set("h", std::to_string(map.height));
    if (!kv.has("w")) kv.set("w", std::to_string(map.width));
}

void log_epoch(std::ostream& out, const HistoryEntry& h) {
    out << "epoch " << h.epoch << " step " << h.step << " loss " << std::setprecision(6) << h.loss << " lr " << h.lr;
    if (h.top1) out << " top1 " << *h.top1;
    out << '\n' << std::flush;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
    const fs::path manifest_path = a.manifest;
    const Manifest manifest = load_manifest(manifest_path);
    std::optional<Manifest> heldout;
    if (!a.holdout_manifest.empty()) heldout = load_manifest(a.holdout_manifest);
    const fs::path features_root = default_features(manifest_path, a.features);
    const DirectoryFeatureSource features(features_root);

    KeyValues kv;
    if (!a.config.empty()) kv = KeyValues::load(a.config);
    for (const auto& o : a.overrides) kv.set_assignment(o);
    if (!a.epochs.empty()) kv.set("epochs", a.epochs);
    if (!a.batch_size.empty()) kv.set("batch_size", a.batch_size);
    if (!a.lr.empty()) kv.set("lr", a.lr);
    if (!a.seed.empty()) kv.set("seed", a.seed);
    if (a.threads > 0) kv.set("threads", std::to_string(a.threads));
    if (!kv.has("threads")) kv.set("threads", std::to_string(default_thread_count()));
    infer_feature_shape(kv, manifest, features);

    const TrainConfig cfg = train_config_from(kv);
    cfg.validate();
    const KeyValues resolved = to_key_values(cfg);
    log_config(out, "train", resolved);

    const fs::path dir = a.out;
    make_dir(dir);
    std::vector<std::string> comments{"train manifest=" + manifest_path.string(), "features=" + features_root.string()};
    if (heldout) comments.push_back("holdout_manifest=" + a.holdout_manifest);
    write_config_echo(dir, resolved, comments);

    Splits splits = resolve_splits(manifest, heldout ? &*heldout : nullptr, cfg.seed);
    out << "train pairs " << splits.train.records.size() << ", held-out pairs " << splits.heldout.records.size()
        << '\n';

    std::optional<Trainer> trainer;
    if (!a.resume.empty()) {
        TrainState state = load_checkpoint(a.resume, cfg.mixer);
        out << "resuming at epoch " << state.epoch << " step " << state.step << '\n';
        trainer.emplace(std::move(splits), features, cfg, std::move(state));
    } else {
        trainer.emplace(std::move(splits), features, cfg);
    }

    const fs::path last = dir / "checkpoint_last.cvck";
    const fs::path best = dir / "best.cvck";
    const fs::path final_path = dir / "final.cvck";
    trainer->run([&](const TrainState& s) {
        log_epoch(out, s.history.back());
        save_checkpoint(last, cfg, s);
        if (s.best_epoch == s.epoch && s.history.back().top1) save_checkpoint(best, cfg, s);
    });
    const TrainState& s = trainer->state();
    save_checkpoint(final_path, cfg, s);
    if (s.best_epoch == 0) save_checkpoint(best, cfg, s);

    std::ofstream hist(dir / "history.tsv");
    if (!hist) throw DataError("cannot write " + (dir / "history.tsv").string());
    write_history(hist, s.history);
    out << "final checkpoint " << final_path.string();
    if (s.best_epoch > 0) out << ", best top1 " << s.best_top1 << " at epoch " << s.best_epoch;
    out << '\n';
    return kExitOk;
}

// ---- encode / eval / report ---------------------------------------------

struct EvalArgs {
    std::string manifest;
    std::string features;
    std::string checkpoint;
    std::string out;
    std::string ground;
    std::string satellite;
    std::vector<std::size_t> k_list{1, 5, 10};
    std::string report;
    std::string dump;
    int threads = 0;
};

KeyValues eval_key_values(const EvalArgs& a, const std::string& mixer) {
    KeyValues kv;
    if (!a.manifest.empty()) kv.set("manifest", a.manifest);
    if (!a.checkpoint.empty()) kv.set("checkpoint", a.checkpoint);
    if (!mixer.empty()) kv.set("mixer", mixer);
    std::string ks;
    for (std::size_t i = 0; i < a.k_list.size(); ++i) ks += (i ? "," : "") + std::to_string(a.k_list[i]);
    kv.set("k_list", ks);
    kv.set("threads", std::to_string(resolve_threads(a.threads)));
    return kv;
}

int evaluate_stores(const EvalArgs& a, const Manifest& manifest, const DescriptorStore& ground,
                    const DescriptorStore& satellite, std::ostream& out) {
    if (ground.size() == 0 || satellite.size() == 0) throw DataError("empty descriptor store");
    if (ground.dim() != satellite.dim()) throw DataError("ground and satellite descriptor dims differ");
    const GroundTruth truth = ground_truth_for(manifest);
    for (const auto id : ground.ids()) {
        if (!truth.contains(id)) throw DataError("query id " + std::to_string(id) + " not in manifest");
    }
    const auto lists = satellite.search_batch(ground.matrix(), ground.ids(), satellite.size(), resolve_threads(a.threads));
    const EvalSummary summary =
        evaluate(lists, truth, reference_coordinates(manifest), a.k_list, satellite.size());
    write_report(out, summary);
    if (!a.report.empty()) {
        std::ofstream os(a.report);
        if (!os) throw DataError("cannot write report " + a.report);
        write_report(os, summary);
    }
    if (!a.dump.empty()) {
        std::ofstream os(a.dump);
        if (!os) throw DataError("cannot write dump " + a.dump);
        write_query_dump(os, summary.distances);
    }
    return kExitOk;
}

std::pair<DescriptorStore, DescriptorStore> encode_from_checkpoint(const EvalArgs& a, const Manifest& manifest,
                                                                   const std::string& command, std::ostream& out) {
    MixerConfig cfg;
    MixerParams params;
    load_mixer(a.checkpoint, cfg, params);
    log_config(out, command, eval_key_values(a, to_string(cfg)));
    const fs::path features_root = default_features(a.manifest, a.features);
    const DirectoryFeatureSource features(features_root);
    return encode_all(manifest, features, params, cfg, resolve_threads(a.threads));
}

int cmd_encode(const EvalArgs& a, std::ostream& out) {
    const Manifest manifest = load_manifest(a.manifest);
    const auto [ground, satellite] = encode_from_checkpoint(a, manifest, "encode", out);
    const fs::path dir = a.out;
    make_dir(dir);
    save_descriptors(dir / "ground.cvds", ground);
    save_descriptors(dir / "satellite.cvds", satellite);
    write_config_echo(dir, eval_key_values(a, ""), {"encode"});
    out << "wrote " << ground.size() << " ground and " << satellite.size() << " satellite descriptors to "
        << dir.string() << '\n';
    return kExitOk;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    const Manifest manifest = load_manifest(a.manifest);
    const auto [ground, satellite] = encode_from_checkpoint(a, manifest, "eval", out);
    return evaluate_stores(a, manifest, ground, satellite, out);
}

int cmd_report(const EvalArgs& a, std::ostream& out) {
    const Manifest manifest = load_manifest(a.manifest);
    KeyValues kv = eval_key_values(a, "");
    kv.set("ground", a.ground);
    kv.set("satellite", a.satellite);
    log_config(out, "report", kv);
    const DescriptorStore ground = load_descriptors(a.ground);
    const DescriptorStore satellite = load_descriptors(a.satellite);
    return evaluate_stores(a, manifest, ground, satellite, out);
}

// ---- gradcheck -----------------------------------------------------------

struct GradArgs {
    std::string config;
    std::uint64_t seed = 0;
    std::size_t batch = 4;
    bool corrupt = false;
};

int cmd_gradcheck(const GradArgs& a, std::ostream& out) {
    GradcheckOptions opts;
    opts.mixer = gradcheck_default_mixer();
    opts.seed = a.seed;
    opts.batch = a.batch;
    opts.corrupt = a.corrupt;
    if (!a.config.empty()) {
        TrainConfig base;
        base.mixer = opts.mixer;
        const TrainConfig cfg = train_config_from(KeyValues::load(a.config), base);
        opts.mixer = cfg.mixer;
        opts.label_smoothing = cfg.loss.label_smoothing;
    }
    opts.mixer.validate();
    const std::size_t dims = opts.mixer.num_maps * opts.mixer.n();
    if (dims > 10000) throw UsageError("gradcheck needs a small config (s*h*w <= 10000, got " + std::to_string(dims) + ")");
    if (opts.batch < 2) throw UsageError("--batch must be at least 2");

    KeyValues kv;
    kv.set("mixer", to_string(opts.mixer));
    kv.set("batch", std::to_string(opts.batch));
    kv.set("seed", std::to_string(opts.seed));
    kv.set("label_smoothing", std::to_string(opts.label_smoothing));
    kv.set("tolerance", "1e-4");
    log_config(out, "gradcheck", kv);

    const auto start = std::chrono::steady_clock::now();
    const auto entries = run_gradcheck(opts);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_gradcheck_table(out, entries, kGradcheckTolerance);
    bool ok = true;
    for (const auto& e : entries) ok = ok && e.max_relative_error < kGradcheckTolerance;
    out << (ok ? "gradcheck passed" : "gradcheck FAILED") << " in " << std::fixed << std::setprecision(2) << seconds
        << " s\n";
    return ok ? kExitOk : kExitNumeric;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Cross-view geo-localization: train a feature-mix head and evaluate retrieval", "cvgl"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-synthetic", "Write a synthetic paired-feature dataset");
    gen_cmd->set_help_flag("--help", "Print this help message and exit");
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();
    gen_cmd->add_option("--pairs", gen.pairs, "Training pairs (>= 2)");
    gen_cmd->add_option("--holdout", gen.holdout, "Extra pairs in a separate held-out city");
    gen_cmd->add_option("--seed", gen.seed, "Data seed");
    gen_cmd->add_option("--h", gen.h, "Feature map height");
    gen_cmd->add_option("--w", gen.w, "Feature map width");
    gen_cmd->add_option("--d-channels", gen.channels, "Token channels");
    gen_cmd->add_option("--sigma", gen.sigma, "Per-view noise sigma");

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Train the mixer head");
    train_cmd->add_option("--manifest", train.manifest, "Manifest TSV")->required();
    train_cmd->add_option("--features", train.features, "Feature root (default: <manifest dir>/features)");
    train_cmd->add_option("--config", train.config, "key=value config file");
    train_cmd->add_option("--out", train.out, "Run directory")->required();
    train_cmd->add_option("--holdout-manifest", train.holdout_manifest, "Held-out manifest for evaluation");
    train_cmd->add_option("--resume", train.resume, "Checkpoint to continue from");
    train_cmd->add_option("--set", train.overrides, "key=value override (repeatable)");
    train_cmd->add_option("--epochs", train.epochs, "Override epochs");
    train_cmd->add_option("--batch-size", train.batch_size, "Override batch size");
    train_cmd->add_option("--lr", train.lr, "Override base learning rate");
    train_cmd->add_option("--seed", train.seed, "Override seed");
    train_cmd->add_option("--threads", train.threads, "Worker threads (default: available cores)");

    EvalArgs enc;
    auto* enc_cmd = app.add_subcommand("encode", "Encode a manifest into CVDS descriptor stores");
    enc_cmd->add_option("--manifest", enc.manifest, "Manifest TSV")->required();
    enc_cmd->add_option("--features", enc.features, "Feature root (default: <manifest dir>/features)");
    enc_cmd->add_option("--checkpoint", enc.checkpoint, "Mixer checkpoint")->required();
    enc_cmd->add_option("--out", enc.out, "Output directory")->required();
    enc_cmd->add_option("--threads", enc.threads, "Worker threads");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Encode and evaluate retrieval");
    eval_cmd->add_option("--manifest", ev.manifest, "Manifest TSV")->required();
    eval_cmd->add_option("--features", ev.features, "Feature root (default: <manifest dir>/features)");
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "Mixer checkpoint")->required();
    eval_cmd->add_option("--k-list", ev.k_list, "Comma-separated k values")->delimiter(',');
    eval_cmd->add_option("--report", ev.report, "Report output path");
    eval_cmd->add_option("--dump", ev.dump, "Per-query TSV output path");
    eval_cmd->add_option("--threads", ev.threads, "Worker threads");

    EvalArgs rep;
    auto* rep_cmd = app.add_subcommand("report", "Evaluate precomputed descriptor stores");
    rep_cmd->add_option("--manifest", rep.manifest, "Manifest TSV")->required();
    rep_cmd->add_option("--ground", rep.ground, "Ground CVDS")->required();
    rep_cmd->add_option("--satellite", rep.satellite, "Satellite CVDS")->required();
    rep_cmd->add_option("--k-list", rep.k_list, "Comma-separated k values")->delimiter(',');
    rep_cmd->add_option("--report", rep.report, "Report output path");
    rep_cmd->add_option("--dump", rep.dump, "Per-query TSV output path");
    rep_cmd->add_option("--threads", rep.threads, "Worker threads");

    GradArgs grad;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of mixer and loss gradients");
    grad_cmd->add_option("--config", grad.config, "key=value config file (mixer keys)");
    grad_cmd->add_option("--seed", grad.seed, "Seed");
    grad_cmd->add_option("--batch", grad.batch, "Batch size");
    grad_cmd->add_flag("--corrupt-gradient", grad.corrupt)->group("");

    std::vector<const char*> argv;
    argv.reserve(args.size());
    for (const auto& s : args) argv.push_back(s.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen_cmd->parsed()) return cmd_gen_synthetic(gen, out);
        if (train_cmd->parsed()) return cmd_train(train, out);
        if (enc_cmd->parsed()) return cmd_encode(enc, out);
        if (eval_cmd->parsed()) return cmd_eval(ev, out);
        if (rep_cmd->parsed()) return cmd_report(rep, out);
        if (grad_cmd->parsed()) return cmd_gradcheck(grad, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const Error& e) {
        err << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const fs::filesystem_error& e) {
        err << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const std::bad_alloc&) {
        err << "data error: out of memory\n";
        return kExitData;
    }
    return kExitUsage;
}

} // namespace cvgl
