#include "cvgl/geo.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "cvgl/error.hpp"

namespace cvgl {

void GeoPoint::validate() const {
    if (!std::isfinite(first) || !std::isfinite(second)) throw DataError("non-finite coordinate");
    if (mode == CoordMode::WGS84) {
        if (first < -90.0 || first > 90.0) {
            throw DataError("latitude " + std::to_string(first) + " outside [-90, 90]");
        }
        if (second <= -180.0 || second > 180.0) {
            throw DataError("longitude " + std::to_string(second) + " outside (-180, 180]");
        }
    }
}

double haversine(const GeoPoint& a, const GeoPoint& b) {
    if (a.mode != CoordMode::WGS84 || b.mode != CoordMode::WGS84) {
        throw UsageError("haversine requires WGS84 points; use euclidean for UTM");
    }
    constexpr double rad = std::numbers::pi / 180.0;
    const double dlat = (b.lat() - a.lat()) * rad;
    const double dlon = (b.lon() - a.lon()) * rad;
    const double s1 = std::sin(dlat / 2.0);
    const double s2 = std::sin(dlon / 2.0);
    const double h = s1 * s1 + std::cos(a.lat() * rad) * std::cos(b.lat() * rad) * s2 * s2;
    return 2.0 * kEarthRadiusMeters * std::asin(std::min(1.0, std::sqrt(h)));
}

double euclidean(const GeoPoint& a, const GeoPoint& b) {
    if (a.mode != CoordMode::UTM || b.mode != CoordMode::UTM) {
        throw UsageError("euclidean requires UTM points; use haversine for WGS84");
    }
    return std::hypot(b.first - a.first, b.second - a.second);
}

double geo_distance(const GeoPoint& a, const GeoPoint& b) {
    if (a.mode != b.mode) throw UsageError("geo_distance: mixed coordinate modes");
    return a.mode == CoordMode::WGS84 ? haversine(a, b) : euclidean(a, b);
}

const char* to_string(CoordMode mode) { return mode == CoordMode::WGS84 ? "WGS84" : "UTM"; }

CoordMode parse_coord_mode(const char* text) {
    const std::string s(text);
    if (s == "WGS84") return CoordMode::WGS84;
    if (s == "UTM") return CoordMode::UTM;
    throw DataError("unknown coordinate mode '" + s + "'");
}

} // namespace cvgl
