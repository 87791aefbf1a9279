#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cvgl/geo.hpp"
#include "cvgl/numerics.hpp"

namespace cvgl {

enum class Split { Train, Test };

const char* to_string(Split split);

struct PairRecord {
    std::uint64_t id = 0;
    std::string city;
    GeoPoint point;
    std::string ground_ref;
    std::string sat_ref;
    std::string ground_date;  // ISO-8601, empty when unknown
    std::string sat_date;
    std::optional<std::vector<std::uint64_t>> covering_ids;

    friend bool operator==(const PairRecord&, const PairRecord&) = default;
};

struct Manifest {
    CoordMode coordinate_mode = CoordMode::WGS84;
    Split split = Split::Train;
    std::vector<PairRecord> records;

    std::vector<std::string> cities() const;  // sorted, unique
    const PairRecord* find(std::uint64_t id) const;
    // Rejects duplicate ids and invalid or mixed-mode coordinates.
    void validate() const;

    friend bool operator==(const Manifest&, const Manifest&) = default;
};

// Tab-separated, one record per line, after a header line
//   # coordinate_mode=WGS84 split=train
// Fields: id, city, lat|easting, lon|northing, ground_ref, sat_ref,
// ground_date, sat_date, covering_ids (comma separated). Empty optional
// fields are left blank.
Manifest parse_manifest(std::istream& is, const std::string& source = "<stream>");
Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(std::ostream& os, const Manifest& manifest);
void save_manifest(const std::filesystem::path& path, const Manifest& manifest);

// Train and test must not share a city.
void check_city_disjoint(const Manifest& train, const Manifest& test);

// Backbone output for one image: height*width tokens of `channels` floats,
// token (i, j) at flat index i*width + j.
struct FeatureMap {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::uint32_t channels = 0;
    std::vector<float> values;

    std::size_t token_count() const noexcept { return std::size_t{height} * width; }
    // Promotes to an N x D double matrix.
    Matrix tokens() const;
    friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

// CVFM file: magic, version, h, w, D (u32 LE), then h*w*D f32 LE.
void write_feature_file(const std::filesystem::path& path, const FeatureMap& map);
FeatureMap read_feature_file(const std::filesystem::path& path);

enum class View { Ground, Satellite };

// Token features per record and view. `variant` selects one of several
// pre-extracted augmentations; variant 0 is the plain extraction.
class FeatureSource {
public:
    virtual ~FeatureSource() = default;
    virtual Matrix tokens(const PairRecord& record, View view, std::size_t variant = 0) const = 0;
};

// Resolves record refs against a root directory. Variant k > 0 of
// "x/123.ground.cvfm" is "x/123.ground.v<k>.cvfm".
class DirectoryFeatureSource : public FeatureSource {
public:
    explicit DirectoryFeatureSource(std::filesystem::path root) : root_(std::move(root)) {}
    Matrix tokens(const PairRecord& record, View view, std::size_t variant = 0) const override;
    std::filesystem::path path_for(const PairRecord& record, View view, std::size_t variant = 0) const;

private:
    std::filesystem::path root_;
};

class InMemoryFeatureSource : public FeatureSource {
public:
    void put(std::uint64_t id, FeatureMap ground, FeatureMap satellite);
    Matrix tokens(const PairRecord& record, View view, std::size_t variant = 0) const override;
    const FeatureMap& map(std::uint64_t id, View view) const;
    std::size_t size() const noexcept { return maps_.size(); }

private:
    std::map<std::uint64_t, std::pair<FeatureMap, FeatureMap>> maps_;  // id -> (ground, satellite)
};

struct SyntheticConfig {
    std::uint64_t seed = 0;
    std::size_t pair_count = 512;
    std::size_t holdout_count = 0;  // extra pairs in a separate test city
    std::uint32_t map_height = 8;
    std::uint32_t map_width = 8;
    std::uint32_t channels = 32;
    double noise_sigma = 0.1;
    // The cross-view channel rotation is a property of the synthetic "world",
    // shared by every split, so it has its own seed.
    std::uint64_t rotation_seed = 0xC0FFEE;
    // Weight of a latent component shared by geographic neighbors (3x3 grid
    // cells), which makes nearby pairs hard negatives.
    double geo_correlation = 0.6;
    double spacing_m = 100.0;
    double jitter_m = 10.0;
};

struct SyntheticDataset {
    Manifest train;
    Manifest holdout;  // empty unless holdout_count > 0
    Matrix rotation;   // channels x channels orthonormal
    InMemoryFeatureSource features;
};

// Paired features: ground = latent + sigma*noise, satellite = latent*rotation
// + sigma*noise. Points lie on a jittered ~100 m grid per city.
SyntheticDataset synthetic_encoder(const SyntheticConfig& cfg);

// Writes manifest.tsv (and holdout.tsv) plus features/<ref> CVFM files.
void write_synthetic(const std::filesystem::path& dir, const SyntheticDataset& data);

} // namespace cvgl
