#ifndef DIFFMM_GEO_HPP_
#define DIFFMM_GEO_HPP_

#include <span>
#include <vector>

/**
 * Geodesic primitives: great-circle distance, point-to-polyline projection,
 * direction similarity and min-max normalization.
 *
 * Planar computations use a local equirectangular projection, which keeps
 * errors well below a meter at city scale.
 */
namespace diffmm::geo {

constexpr double kEarthRadiusM = 6371000.0;

struct GeoPoint {
  double lat = 0.0;  ///< degrees, [-90, 90]
  double lng = 0.0;  ///< degrees, [-180, 180]

  friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

/// True when both coordinates are finite and within their ranges.
bool is_valid(const GeoPoint& p);

/// Great-circle distance in meters. Throws std::invalid_argument on non-finite input.
double haversine_distance(const GeoPoint& a, const GeoPoint& b);

struct Projection {
  GeoPoint point;           ///< foot of the perpendicular, clamped to the polyline
  double distance_m = 0.0;  ///< great-circle distance from the query to `point`
  double fraction = 0.0;    ///< position along the polyline by length, [0, 1]
};

/**
 * Minimum-distance projection of `p` onto a polyline. Ties between
 * sub-segments go to the earliest one. A polyline whose points all coincide
 * projects onto that point with fraction 0.
 *
 * Throws std::invalid_argument when the polyline has fewer than 2 points.
 */
Projection project_to_segment(const GeoPoint& p, std::span<const GeoPoint> polyline);

struct DirectionCosine {
  double value = 0.0;
  bool degenerate = false;  ///< zero-length displacement or segment; value is 0
};

/**
 * Cosine of the angle between the displacement `from -> to` and the vector
 * `seg_start -> seg_end`, both expressed in a local plane centred on the
 * displacement midpoint. Swapping `from` and `to` negates the result exactly.
 */
DirectionCosine direction_cosine(const GeoPoint& from, const GeoPoint& to,
                                 const GeoPoint& seg_start, const GeoPoint& seg_end);

/// (v - lo) / (hi - lo) clamped to [0, 1]. Throws std::invalid_argument unless hi > lo.
double min_max_normalize(double value, double lo, double hi);
std::vector<double> min_max_normalize(std::span<const double> values, double lo, double hi);

/// Offsets a point by `north_m`/`east_m` meters in the local tangent plane.
GeoPoint offset_by_meters(const GeoPoint& p, double north_m, double east_m);

}  // namespace diffmm::geo

#endif  // DIFFMM_GEO_HPP_
