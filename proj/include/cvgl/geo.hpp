#pragma once

#include <span>

namespace cvgl {

enum class CoordMode { WGS84, UTM };

inline constexpr double kEarthRadiusMeters = 6'371'000.0;

// WGS84 mode: first = latitude, second = longitude (degrees).
// UTM mode: first = easting, second = northing (meters).
struct GeoPoint {
    CoordMode mode = CoordMode::WGS84;
    double first = 0.0;
    double second = 0.0;

    static GeoPoint wgs84(double lat, double lon) { return {CoordMode::WGS84, lat, lon}; }
    static GeoPoint utm(double easting, double northing) { return {CoordMode::UTM, easting, northing}; }

    double lat() const noexcept { return first; }
    double lon() const noexcept { return second; }

    // Throws DataError when a WGS84 point is out of range or a value is not finite.
    void validate() const;
    friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

double haversine(const GeoPoint& a, const GeoPoint& b);
double euclidean(const GeoPoint& a, const GeoPoint& b);
// Dispatches on the shared coordinate mode; mixed modes are an error.
double geo_distance(const GeoPoint& a, const GeoPoint& b);

const char* to_string(CoordMode mode);
CoordMode parse_coord_mode(const char* text);

} // namespace cvgl
