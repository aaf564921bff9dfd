#include "diffmm/geo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace diffmm::geo {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;
constexpr double kMetersPerDegree = kEarthRadiusM * kDegToRad;

}  // namespace

bool is_valid(const GeoPoint& p) {
  return std::isfinite(p.lat) && std::isfinite(p.lng) && p.lat >= -90.0 && p.lat <= 90.0 &&
         p.lng >= -180.0 && p.lng <= 180.0;
}

double haversine_distance(const GeoPoint& a, const GeoPoint& b) {
  if (!std::isfinite(a.lat) || !std::isfinite(a.lng) || !std::isfinite(b.lat) ||
      !std::isfinite(b.lng)) {
    throw std::invalid_argument("haversine_distance: non-finite coordinate");
  }
  const double phi1 = a.lat * kDegToRad;
  const double phi2 = b.lat * kDegToRad;
  const double dphi = (b.lat - a.lat) * kDegToRad;
  const double dlambda = (b.lng - a.lng) * kDegToRad;
  const double s1 = std::sin(dphi / 2.0);
  const double s2 = std::sin(dlambda / 2.0);
  const double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
  return 2.0 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(h)));
}

Projection project_to_segment(const GeoPoint& p, std::span<const GeoPoint> polyline) {
  if (polyline.size() < 2) {
    throw std::invalid_argument("project_to_segment: polyline needs at least 2 points");
  }
  const double cos_lat = std::cos(p.lat * kDegToRad);

  std::vector<double> cumulative(polyline.size(), 0.0);
  for (std::size_t i = 1; i < polyline.size(); ++i) {
    cumulative[i] = cumulative[i - 1] + haversine_distance(polyline[i - 1], polyline[i]);
  }
  const double total = cumulative.back();

  Projection best;
  best.distance_m = std::numeric_limits<double>::infinity();
  double best_along = 0.0;
  for (std::size_t i = 0; i + 1 < polyline.size(); ++i) {
    const GeoPoint& a = polyline[i];
    const GeoPoint& b = polyline[i + 1];
    // query point is the origin of the local plane
    const double ax = (a.lng - p.lng) * cos_lat;
    const double ay = a.lat - p.lat;
    const double bx = (b.lng - p.lng) * cos_lat;
    const double by = b.lat - p.lat;
    const double dx = bx - ax;
    const double dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    double t = 0.0;
    if (len2 > 0.0) {
      t = std::clamp(-(ax * dx + ay * dy) / len2, 0.0, 1.0);
    }
    const GeoPoint foot{a.lat + t * (b.lat - a.lat), a.lng + t * (b.lng - a.lng)};
    const double dist = haversine_distance(p, foot);
    if (dist < best.distance_m) {
      best.point = foot;
      best.distance_m = dist;
      best_along = cumulative[i] + t * (cumulative[i + 1] - cumulative[i]);
    }
  }
  best.fraction = total > 0.0 ? std::clamp(best_along / total, 0.0, 1.0) : 0.0;
  return best;
}

DirectionCosine direction_cosine(const GeoPoint& from, const GeoPoint& to,
                                 const GeoPoint& seg_start, const GeoPoint& seg_end) {
  const double cos_lat = std::cos((from.lat + to.lat) / 2.0 * kDegToRad);
  const double ux = (to.lng - from.lng) * cos_lat;
  const double uy = to.lat - from.lat;
  const double vx = (seg_end.lng - seg_start.lng) * cos_lat;
  const double vy = seg_end.lat - seg_start.lat;
  const double nu = std::hypot(ux, uy);
  const double nv = std::hypot(vx, vy);
  if (nu == 0.0 || nv == 0.0) {
    return {0.0, true};
  }
  return {std::clamp((ux * vx + uy * vy) / (nu * nv), -1.0, 1.0), false};
}

double min_max_normalize(double value, double lo, double hi) {
  if (!(hi > lo)) {
    throw std::invalid_argument("min_max_normalize: degenerate bounds (hi must exceed lo)");
  }
  return std::clamp((value - lo) / (hi - lo), 0.0, 1.0);
}

std::vector<double> min_max_normalize(std::span<const double> values, double lo, double hi) {
  if (!(hi > lo)) {
    throw std::invalid_argument("min_max_normalize: degenerate bounds (hi must exceed lo)");
  }
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) {
    out.push_back(min_max_normalize(v, lo, hi));
  }
  return out;
}

GeoPoint offset_by_meters(const GeoPoint& p, double north_m, double east_m) {
  const double cos_lat = std::cos(p.lat * kDegToRad);
  return {p.lat + north_m / kMetersPerDegree, p.lng + east_m / (kMetersPerDegree * cos_lat)};
}

}  // namespace diffmm::geo
