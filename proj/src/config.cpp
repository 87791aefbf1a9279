#include "cvgl/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <sstream>

#include "cvgl/error.hpp"

namespace cvgl {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
    T v{};
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size() || text.empty()) {
        throw UsageError("config: bad value '" + text + "' for " + key);
    }
    return v;
}

std::string format(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

} // namespace

KeyValues KeyValues::parse(std::istream& is, const std::string& source) {
    KeyValues kv;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw UsageError(source + ":" + std::to_string(line_no) + ": expected key=value");
        }
        kv.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open config " + path.string());
    return parse(is, path.string());
}

void KeyValues::set_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw UsageError("expected key=value, got '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& KeyValues::get(const std::string& key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) throw UsageError("config: missing key " + key);
    return it->second;
}

void KeyValues::merge(const KeyValues& overrides) {
    for (const auto& [k, v] : overrides.entries_) entries_[k] = v;
}

void KeyValues::write(std::ostream& os) const {
    for (const auto& [k, v] : entries_) os << k << '=' << v << '\n';
}

TrainConfig train_config_from(const KeyValues& kv, TrainConfig c) {
    using Setter = std::function<void(const std::string&, const std::string&)>;
    auto size = [](std::size_t& dst) -> Setter {
        return [&dst](const std::string& k, const std::string& v) { dst = parse_value<std::size_t>(k, v); };
    };
    auto real = [](double& dst) -> Setter {
        return [&dst](const std::string& k, const std::string& v) { dst = parse_value<double>(k, v); };
    };
    const std::map<std::string, Setter> setters{
        {"channels", size(c.mixer.num_maps)},
        {"h", size(c.mixer.map_height)},
        {"w", size(c.mixer.map_width)},
        {"blocks", size(c.mixer.num_blocks)},
        {"hidden", size(c.mixer.hidden_dim)},
        {"d", size(c.mixer.out_depth)},
        {"r", size(c.mixer.out_rows)},
        {"epochs", size(c.epochs)},
        {"batch_size", size(c.batch_size)},
        {"lr", real(c.base_lr)},
        {"momentum", real(c.momentum)},
        {"tau", real(c.loss.tau)},
        {"label_smoothing", real(c.loss.label_smoothing)},
        {"tau_mode",
         [&c](const std::string& k, const std::string& v) {
             if (v == "fixed") c.loss.temperature_mode = TemperatureMode::Fixed;
             else if (v == "learnable") c.loss.temperature_mode = TemperatureMode::Learnable;
             else throw UsageError("config: " + k + " must be fixed or learnable");
         }},
        {"tau_init",
         [&c](const std::string& k, const std::string& v) {
             const double t = parse_value<double>(k, v);
             if (!(t > 0.0)) throw UsageError("config: tau_init must be positive");
             c.loss.log_inv_tau = std::log(1.0 / t);
         }},
        {"dss_pool", size(c.dss.pool_size)},
        {"dss_quota", size(c.dss.batch_quota)},
        {"sampling", [&c](const std::string&, const std::string& v) { c.sampling = parse_sampling_strategy(v); }},
        {"nns_epochs", size(c.nns_epochs)},
        {"dss_refresh_steps", size(c.dss_refresh_steps)},
        {"eval_every", size(c.eval_every)},
        {"variants", size(c.feature_variants)},
        {"seed",
         [&c](const std::string& k, const std::string& v) {
             c.seed = parse_value<std::uint64_t>(k, v);
             c.dss.rng_seed = c.seed;
         }},
        {"threads", [&c](const std::string& k, const std::string& v) { c.threads = parse_value<int>(k, v); }},
    };
    for (const auto& [k, v] : kv.entries()) {
        const auto it = setters.find(k);
        if (it == setters.end()) throw UsageError("config: unknown key '" + k + "'");
        it->second(k, v);
    }
    return c;
}

KeyValues to_key_values(const TrainConfig& c) {
    KeyValues kv;
    auto n = [](std::size_t v) { return std::to_string(v); };
    kv.set("channels", n(c.mixer.num_maps));
    kv.set("h", n(c.mixer.map_height));
    kv.set("w", n(c.mixer.map_width));
    kv.set("blocks", n(c.mixer.num_blocks));
    kv.set("hidden", n(c.mixer.hidden()));
    kv.set("d", n(c.mixer.out_depth));
    kv.set("r", n(c.mixer.out_rows));
    kv.set("epochs", n(c.epochs));
    kv.set("batch_size", n(c.batch_size));
    kv.set("lr", format(c.base_lr));
    kv.set("momentum", format(c.momentum));
    kv.set("tau_mode", c.loss.temperature_mode == TemperatureMode::Fixed ? "fixed" : "learnable");
    kv.set("tau", format(c.loss.tau));
    kv.set("tau_init", format(std::exp(-c.loss.log_inv_tau)));
    kv.set("label_smoothing", format(c.loss.label_smoothing));
    kv.set("dss_pool", n(c.dss.pool_size));
    kv.set("dss_quota", n(c.dss.batch_quota));
    kv.set("sampling", to_string(c.sampling));
    kv.set("nns_epochs", n(c.nns_epochs));
    kv.set("dss_refresh_steps", n(c.dss_refresh_steps));
    kv.set("eval_every", n(c.eval_every));
    kv.set("variants", n(c.feature_variants));
    kv.set("seed", std::to_string(c.seed));
    kv.set("threads", std::to_string(c.threads));
    return kv;
}

} // namespace cvgl
