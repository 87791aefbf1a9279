#include "cvgl/dataset.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <unordered_set>

#include "cvgl/binio.hpp"
#include "cvgl/error.hpp"
#include "cvgl/rng.hpp"

namespace cvgl {

namespace {

constexpr std::uint32_t kFeatureVersion = 1;
constexpr std::uint64_t kMaxFeatureValues = 1ull << 31;

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t tab = line.find('\t', start);
        out.push_back(line.substr(start, tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    return out;
}

template <typename T>
T parse_number(const std::string& field, const std::string& what, const std::string& where) {
    T v{};
    const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (res.ec != std::errc{} || res.ptr != field.data() + field.size() || field.empty()) {
        throw DataError(where + ": cannot parse " + what + " '" + field + "'");
    }
    return v;
}

void check_text_field(const std::string& s, const std::string& what) {
    if (s.find_first_of("\t\n\r") != std::string::npos) {
        throw DataError("manifest " + what + " contains a tab or newline: '" + s + "'");
    }
}

} // namespace

const char* to_string(Split split) { return split == Split::Train ? "train" : "test"; }

std::vector<std::string> Manifest::cities() const {
    std::set<std::string> s;
    for (const auto& r : records) s.insert(r.city);
    return {s.begin(), s.end()};
}

const PairRecord* Manifest::find(std::uint64_t id) const {
    for (const auto& r : records)
        if (r.id == id) return &r;
    return nullptr;
}

void Manifest::validate() const {
    std::unordered_set<std::uint64_t> seen;
    for (const auto& r : records) {
        if (!seen.insert(r.id).second) throw DataError("manifest: duplicate id " + std::to_string(r.id));
        if (r.point.mode != coordinate_mode) {
            throw DataError("manifest: record " + std::to_string(r.id) + " uses a different coordinate mode");
        }
        try {
            r.point.validate();
        } catch (const DataError& e) {
            throw DataError("manifest: record " + std::to_string(r.id) + ": " + e.what());
        }
    }
}

Manifest parse_manifest(std::istream& is, const std::string& source) {
    Manifest m;
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    std::unordered_set<std::uint64_t> seen;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::string where = source + ":" + std::to_string(line_no);
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (header_seen) continue;
            std::istringstream hs(line.substr(1));
            std::string kv;
            bool mode_seen = false;
            bool split_seen = false;
            while (hs >> kv) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) throw DataError(where + ": malformed header entry '" + kv + "'");
                const std::string key = kv.substr(0, eq);
                const std::string value = kv.substr(eq + 1);
                if (key == "coordinate_mode") {
                    m.coordinate_mode = parse_coord_mode(value.c_str());
                    mode_seen = true;
                } else if (key == "split") {
                    if (value == "train") m.split = Split::Train;
                    else if (value == "test") m.split = Split::Test;
                    else throw DataError(where + ": unknown split '" + value + "'");
                    split_seen = true;
                } else {
                    throw DataError(where + ": unknown header key '" + key + "'");
                }
            }
            if (!mode_seen || !split_seen) throw DataError(where + ": header must declare coordinate_mode and split");
            header_seen = true;
            continue;
        }
        if (!header_seen) throw DataError(where + ": record before the '# coordinate_mode=... split=...' header");
        const auto f = split_tabs(line);
        if (f.size() != 9) {
            throw DataError(where + ": expected 9 tab-separated fields, found " + std::to_string(f.size()));
        }
        PairRecord r;
        r.id = parse_number<std::uint64_t>(f[0], "id", where);
        r.city = f[1];
        r.point = {m.coordinate_mode, parse_number<double>(f[2], "coordinate", where),
                   parse_number<double>(f[3], "coordinate", where)};
        try {
            r.point.validate();
        } catch (const DataError& e) {
            throw DataError(where + ": " + e.what());
        }
        r.ground_ref = f[4];
        r.sat_ref = f[5];
        r.ground_date = f[6];
        r.sat_date = f[7];
        if (!f[8].empty()) {
            std::vector<std::uint64_t> cover;
            std::size_t start = 0;
            for (;;) {
                const std::size_t comma = f[8].find(',', start);
                cover.push_back(parse_number<std::uint64_t>(f[8].substr(start, comma - start), "covering id", where));
                if (comma == std::string::npos) break;
                start = comma + 1;
            }
            r.covering_ids = std::move(cover);
        }
        if (!seen.insert(r.id).second) throw DataError(where + ": duplicate id " + std::to_string(r.id));
        m.records.push_back(std::move(r));
    }
    if (!header_seen) throw DataError(source + ": missing '# coordinate_mode=... split=...' header");
    return m;
}

Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open manifest " + path.string());
    return parse_manifest(is, path.string());
}

void write_manifest(std::ostream& os, const Manifest& m) {
    m.validate();
    os << "# coordinate_mode=" << to_string(m.coordinate_mode) << " split=" << to_string(m.split) << '\n';
    for (const auto& r : m.records) {
        for (const auto* s : {&r.city, &r.ground_ref, &r.sat_ref, &r.ground_date, &r.sat_date}) check_text_field(*s, "field");
        os << r.id << '\t' << r.city << '\t' << format_double(r.point.first) << '\t'
           << format_double(r.point.second) << '\t' << r.ground_ref << '\t' << r.sat_ref << '\t'
           << r.ground_date << '\t' << r.sat_date << '\t';
        if (r.covering_ids) {
            for (std::size_t i = 0; i < r.covering_ids->size(); ++i) os << (i ? "," : "") << (*r.covering_ids)[i];
        }
        os << '\n';
    }
}

void save_manifest(const std::filesystem::path& path, const Manifest& m) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    write_manifest(os, m);
    if (!os) throw DataError("write failed for " + path.string());
}

void check_city_disjoint(const Manifest& train, const Manifest& test) {
    const auto a = train.cities();
    const auto b = test.cities();
    std::vector<std::string> both;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
    if (!both.empty()) throw DataError("train and test splits share city '" + both.front() + "'");
}

Matrix FeatureMap::tokens() const {
    Matrix m(token_count(), channels);
    auto d = m.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<double>(values[i]);
    return m;
}

void write_feature_file(const std::filesystem::path& path, const FeatureMap& map) {
    if (map.height == 0 || map.width == 0 || map.channels == 0) throw DataError("feature map dims must be positive");
    if (map.values.size() != map.token_count() * map.channels) {
        throw DataError("feature map payload length does not match its dims");
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    binio::put_magic(os, "CVFM");
    binio::put_u32(os, kFeatureVersion);
    binio::put_u32(os, map.height);
    binio::put_u32(os, map.width);
    binio::put_u32(os, map.channels);
    for (float v : map.values) binio::put_f32(os, v);
    if (!os) throw DataError("write failed for " + path.string());
}

FeatureMap read_feature_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open feature file " + path.string());
    const std::string what = "feature file " + path.string();
    binio::expect_magic(is, "CVFM", what);
    const std::uint32_t version = binio::get_u32(is, what);
    if (version != kFeatureVersion) throw DataError("unsupported version " + std::to_string(version) + " in " + what);
    FeatureMap map;
    map.height = binio::get_u32(is, what);
    map.width = binio::get_u32(is, what);
    map.channels = binio::get_u32(is, what);
    if (map.height == 0 || map.width == 0 || map.channels == 0) throw DataError("zero dimension in " + what);
    const std::uint64_t count = std::uint64_t{map.height} * map.width * map.channels;
    if (count > kMaxFeatureValues) throw DataError("dimension overflow in " + what);
    std::vector<char> raw(count * 4);
    if (!is.read(raw.data(), static_cast<std::streamsize>(raw.size()))) throw DataError("truncated payload in " + what);
    if (is.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes in " + what);
    map.values.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= std::uint32_t{static_cast<unsigned char>(raw[i * 4 + b])} << (8 * b);
        map.values[i] = std::bit_cast<float>(bits);
    }
    return map;
}

std::filesystem::path DirectoryFeatureSource::path_for(const PairRecord& record, View view,
                                                       std::size_t variant) const {
    std::filesystem::path ref = view == View::Ground ? record.ground_ref : record.sat_ref;
    if (variant > 0) {
        const auto ext = ref.extension().string();
        ref.replace_extension();
        ref += ".v" + std::to_string(variant) + ext;
    }
    return root_ / ref;
}

Matrix DirectoryFeatureSource::tokens(const PairRecord& record, View view, std::size_t variant) const {
    const auto path = path_for(record, view, variant);
    if (!std::filesystem::exists(path)) {
        throw DataError("missing " + std::string(view == View::Ground ? "ground" : "satellite") +
                        " features for id " + std::to_string(record.id) + ": " + path.string());
    }
    return read_feature_file(path).tokens();
}

void InMemoryFeatureSource::put(std::uint64_t id, FeatureMap ground, FeatureMap satellite) {
    maps_.insert_or_assign(id, std::make_pair(std::move(ground), std::move(satellite)));
}

const FeatureMap& InMemoryFeatureSource::map(std::uint64_t id, View view) const {
    const auto it = maps_.find(id);
    if (it == maps_.end()) throw DataError("missing features for id " + std::to_string(id));
    return view == View::Ground ? it->second.first : it->second.second;
}

Matrix InMemoryFeatureSource::tokens(const PairRecord& record, View view, std::size_t /*variant*/) const {
    return map(record.id, view).tokens();
}

namespace {

Matrix random_rotation(std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    Matrix q(dim, dim);
    for (double& v : q.data()) v = rng.normal();
    // Modified Gram-Schmidt over rows.
    for (std::size_t i = 0; i < dim; ++i) {
        auto ri = q.row(i);
        for (std::size_t j = 0; j < i; ++j) {
            const double proj = dot(ri, q.row(j));
            auto rj = q.row(j);
            for (std::size_t k = 0; k < dim; ++k) ri[k] -= proj * rj[k];
        }
        const double norm = l2_norm(ri);
        for (double& v : ri) v /= norm;
    }
    return q;
}

struct CityLayout {
    const char* name;
    double lat0;
    double lon0;
};

constexpr CityLayout kTrainCity{"synthetic-a", 10.0, 20.0};
constexpr CityLayout kHoldoutCity{"synthetic-b", 12.0, 22.0};

void generate_city(const SyntheticConfig& cfg, const CityLayout& city, std::size_t count,
                   std::uint64_t first_id, const Matrix& rotation, Rng& rng, Manifest& manifest,
                   InMemoryFeatureSource& features) {
    manifest.coordinate_mode = CoordMode::WGS84;
    const std::size_t cols = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(count)))));
    const std::size_t rows = (count + cols - 1) / cols;
    const std::size_t n = std::size_t{cfg.map_height} * cfg.map_width;
    const std::size_t dim = cfg.channels;
    const double meters_per_deg_lat = kEarthRadiusMeters * std::numbers::pi / 180.0;
    const double meters_per_deg_lon = meters_per_deg_lat * std::cos(city.lat0 * std::numbers::pi / 180.0);

    // Shared neighborhood latents on 3x3 blocks of grid cells.
    const std::size_t block_rows = (rows + 2) / 3;
    const std::size_t block_cols = (cols + 2) / 3;
    std::vector<Matrix> regions;
    regions.reserve(block_rows * block_cols);
    for (std::size_t b = 0; b < block_rows * block_cols; ++b) {
        Matrix m(n, dim);
        for (double& v : m.data()) v = rng.normal();
        regions.push_back(std::move(m));
    }
    const double own_weight = std::sqrt(1.0 - cfg.geo_correlation * cfg.geo_correlation);

    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t row = k / cols;
        const std::size_t col = k % cols;
        PairRecord r;
        r.id = first_id + k;
        r.city = city.name;
        const double north = static_cast<double>(row) * cfg.spacing_m + rng.uniform(-cfg.jitter_m, cfg.jitter_m);
        const double east = static_cast<double>(col) * cfg.spacing_m + rng.uniform(-cfg.jitter_m, cfg.jitter_m);
        r.point = GeoPoint::wgs84(city.lat0 + north / meters_per_deg_lat, city.lon0 + east / meters_per_deg_lon);
        char stem[32];
        std::snprintf(stem, sizeof(stem), "%06llu", static_cast<unsigned long long>(r.id));
        r.ground_ref = std::string(stem) + ".ground.cvfm";
        r.sat_ref = std::string(stem) + ".sat.cvfm";

        const Matrix& region = regions[(row / 3) * block_cols + col / 3];
        Matrix latent(n, dim);
        auto ld = latent.data();
        auto rd = region.data();
        for (std::size_t i = 0; i < ld.size(); ++i) ld[i] = cfg.geo_correlation * rd[i] + own_weight * rng.normal();
        const Matrix rotated = matmul(latent, rotation);

        FeatureMap ground{cfg.map_height, cfg.map_width, cfg.channels, std::vector<float>(n * dim)};
        FeatureMap sat = ground;
        for (std::size_t i = 0; i < ld.size(); ++i) ground.values[i] = static_cast<float>(ld[i] + cfg.noise_sigma * rng.normal());
        for (std::size_t i = 0; i < ld.size(); ++i) {
            sat.values[i] = static_cast<float>(rotated.data()[i] + cfg.noise_sigma * rng.normal());
        }
        features.put(r.id, std::move(ground), std::move(sat));
        manifest.records.push_back(std::move(r));
    }
}

} // namespace

SyntheticDataset synthetic_encoder(const SyntheticConfig& cfg) {
    if (cfg.pair_count < 2) throw UsageError("synthetic_encoder: pair_count must be at least 2");
    if (cfg.holdout_count == 1) throw UsageError("synthetic_encoder: holdout_count must be 0 or at least 2");
    if (!(cfg.noise_sigma >= 0.0)) throw UsageError("synthetic_encoder: noise_sigma must be non-negative");
    if (!(cfg.geo_correlation >= 0.0 && cfg.geo_correlation < 1.0)) {
        throw UsageError("synthetic_encoder: geo_correlation must be in [0,1)");
    }
    if (cfg.map_height == 0 || cfg.map_width == 0 || cfg.channels == 0) {
        throw UsageError("synthetic_encoder: dims must be positive");
    }
    SyntheticDataset out;
    out.rotation = random_rotation(cfg.channels, cfg.rotation_seed);
    Rng rng(cfg.seed);
    out.train.split = Split::Train;
    generate_city(cfg, kTrainCity, cfg.pair_count, 1, out.rotation, rng, out.train, out.features);
    out.holdout.split = Split::Test;
    if (cfg.holdout_count > 0) {
        generate_city(cfg, kHoldoutCity, cfg.holdout_count, 1 + cfg.pair_count, out.rotation, rng, out.holdout,
                      out.features);
    }
    return out;
}

void write_synthetic(const std::filesystem::path& dir, const SyntheticDataset& data) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "features", ec);
    if (ec) throw DataError("cannot create " + (dir / "features").string() + ": " + ec.message());
    save_manifest(dir / "manifest.tsv", data.train);
    if (!data.holdout.records.empty()) save_manifest(dir / "holdout.tsv", data.holdout);
    for (const Manifest* m : {&data.train, &data.holdout}) {
        for (const auto& r : m->records) {
            write_feature_file(dir / "features" / r.ground_ref, data.features.map(r.id, View::Ground));
            write_feature_file(dir / "features" / r.sat_ref, data.features.map(r.id, View::Satellite));
        }
    }
}

} // namespace cvgl
