#include "diffmm/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <unordered_map>

#include "diffmm/csv.hpp"
#include "diffmm/errors.hpp"
#include "diffmm/rng.hpp"

namespace diffmm {

void validate(const Trajectory& traj) {
  if (traj.points.empty()) {
    throw DataError("trajectory '" + traj.id + "' is empty");
  }
  if (traj.seq.size() != traj.points.size()) {
    throw DataError("trajectory '" + traj.id + "' seq/points length mismatch");
  }
  for (std::size_t i = 0; i < traj.points.size(); ++i) {
    const auto& p = traj.points[i];
    if (!geo::is_valid(p.position()) || !std::isfinite(p.t)) {
      throw DataError("trajectory '" + traj.id + "' has an invalid point at index " +
                      std::to_string(i));
    }
    if (i > 0 && !(p.t > traj.points[i - 1].t)) {
      throw DataError("trajectory '" + traj.id + "' timestamps not strictly increasing at index " +
                      std::to_string(i));
    }
    if (i > 0 && !(traj.seq[i] > traj.seq[i - 1])) {
      throw DataError("trajectory '" + traj.id + "' seq not increasing at index " +
                      std::to_string(i));
    }
  }
}

void validate(const MatchedTrajectory& mt, std::size_t segment_count) {
  validate(mt.trajectory);
  if (mt.route.size() != mt.trajectory.size()) {
    throw DataError("trajectory '" + mt.trajectory.id + "' route length " +
                    std::to_string(mt.route.size()) + " != point count " +
                    std::to_string(mt.trajectory.size()));
  }
  for (SegmentId s : mt.route) {
    if (s < 0 || static_cast<std::size_t>(s) >= segment_count) {
      throw DataError("trajectory '" + mt.trajectory.id + "' references segment " +
                      std::to_string(s) + " outside [0, " + std::to_string(segment_count) + ")");
    }
  }
}

MatchedTrajectory sparsify(const MatchedTrajectory& mt, double ratio, std::uint64_t seed,
                           std::uint64_t stream_index) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("sparsify: ratio must lie in (0, 1)");
  }
  const std::size_t l = mt.trajectory.size();
  if (l < 2) {
    throw std::invalid_argument("sparsify: trajectory needs at least 2 points");
  }
  // Endpoints are always kept, so the result has length >= 2 by construction.
  Rng rng = make_rng(seed, "sparsify", stream_index);
  std::bernoulli_distribution keep(ratio);
  MatchedTrajectory out;
  out.trajectory.id = mt.trajectory.id;
  for (std::size_t i = 0; i < l; ++i) {
    const bool interior = i > 0 && i + 1 < l;
    if (interior && !keep(rng)) continue;
    out.trajectory.points.push_back(mt.trajectory.points[i]);
    out.trajectory.seq.push_back(mt.trajectory.seq[i]);
    out.route.push_back(mt.route[i]);
  }
  return out;
}

std::vector<MatchedTrajectory> sparsify_all(const std::vector<MatchedTrajectory>& data, double ratio,
                                            std::uint64_t seed) {
  std::vector<MatchedTrajectory> out;
  out.reserve(data.size());
  for (const auto& mt : data) out.push_back(sparsify(mt, ratio, seed, fnv1a64(mt.trajectory.id)));
  return out;
}

DatasetSplit split_dataset(std::vector<MatchedTrajectory> data, std::uint64_t seed) {
  if (data.size() < 10) {
    throw DataError("split_dataset needs at least 10 trajectories, got " +
                    std::to_string(data.size()));
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "split");
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t n = data.size();
  const std::size_t n_train = (4 * n + 5) / 10;
  const std::size_t n_valid = (3 * n + 5) / 10;
  DatasetSplit split;
  split.seed = seed;
  for (std::size_t k = 0; k < n; ++k) {
    auto& item = data[order[k]];
    if (k < n_train) {
      split.train.push_back(std::move(item));
    } else if (k < n_train + n_valid) {
      split.valid.push_back(std::move(item));
    } else {
      split.test.push_back(std::move(item));
    }
  }
  return split;
}

namespace {

GeoPoint point_along(const std::vector<GeoPoint>& polyline, double along_m) {
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < polyline.size(); ++i) {
    const double len = geo::haversine_distance(polyline[i], polyline[i + 1]);
    if (along_m <= acc + len || i + 2 == polyline.size()) {
      const double f = len > 0.0 ? std::clamp((along_m - acc) / len, 0.0, 1.0) : 0.0;
      return {polyline[i].lat + f * (polyline[i + 1].lat - polyline[i].lat),
              polyline[i].lng + f * (polyline[i + 1].lng - polyline[i].lng)};
    }
    acc += len;
  }
  return polyline.back();
}

constexpr int kMaxPairRetries = 200;

}  // namespace

std::vector<MatchedTrajectory> generate_synthetic(const RoadNetwork& net,
                                                  const SyntheticConfig& cfg) {
  return generate_synthetic(net, cfg, nullptr);
}

std::vector<MatchedTrajectory> generate_synthetic(
    const RoadNetwork& net, const SyntheticConfig& cfg,
    std::vector<std::vector<GeoPoint>>* true_positions) {
  if (net.node_count() < 2) throw DataError("generate_synthetic: network has fewer than 2 nodes");
  if (!(cfg.step_interval_s > 0.0) || !(cfg.speed_mps > 0.0) || cfg.noise_sigma_m < 0.0) {
    throw std::invalid_argument("generate_synthetic: invalid interval, speed or noise");
  }
  const double step_m = cfg.step_interval_s * cfg.speed_mps;

  std::vector<MatchedTrajectory> out;
  out.reserve(cfg.n_trajectories);
  if (true_positions) true_positions->clear();

  for (std::size_t i = 0; i < cfg.n_trajectories; ++i) {
    Rng rng = make_rng(cfg.seed, "data", i);
    std::uniform_int_distribution<std::size_t> pick(0, net.node_count() - 1);

    std::vector<SegmentId> path;
    double total = 0.0;
    for (int attempt = 0; attempt < kMaxPairRetries; ++attempt) {
      const std::size_t a = pick(rng);
      const std::size_t b = pick(rng);
      if (a == b) continue;
      path = net.shortest_path(a, b);
      total = 0.0;
      for (SegmentId s : path) total += net.segment(s).length_m;
      if (!path.empty() && total >= step_m) break;  // at least 2 samples
      path.clear();
    }
    if (path.empty()) {
      throw DataError("generate_synthetic: no routable node pair found (disconnected network?)");
    }

    std::vector<double> cumulative{0.0};
    for (SegmentId s : path) cumulative.push_back(cumulative.back() + net.segment(s).length_m);

    Rng noise_rng = make_rng(cfg.seed, "noise", i);
    std::normal_distribution<double> gauss(0.0, 1.0);

    MatchedTrajectory mt;
    mt.trajectory.id = std::to_string(i);
    std::vector<GeoPoint> truth;
    const double t0 = cfg.start_time + 60.0 * static_cast<double>(i);
    std::size_t k = 0;
    for (int step = 0;; ++step) {
      const double s = step * step_m;
      if (s > total) break;
      while (k + 1 < path.size() && s >= cumulative[k + 1]) ++k;
      const RoadSegment& seg = net.segment(path[k]);
      const GeoPoint on_road = point_along(seg.polyline, s - cumulative[k]);
      const double north = cfg.noise_sigma_m * gauss(noise_rng);
      const double east = cfg.noise_sigma_m * gauss(noise_rng);
      const GeoPoint observed = geo::offset_by_meters(on_road, north, east);
      mt.trajectory.points.push_back({observed.lat, observed.lng, t0 + step * cfg.step_interval_s});
      mt.trajectory.seq.push_back(step);
      mt.route.push_back(seg.id);
      truth.push_back(on_road);
    }
    if (true_positions) true_positions->push_back(std::move(truth));
    out.push_back(std::move(mt));
  }
  return out;
}

std::vector<Trajectory> load_trajectories(const std::filesystem::path& path) {
  csv::Reader reader(path, "traj_id,seq,lat,lng,t");
  std::vector<Trajectory> out;
  std::unordered_map<std::string, std::size_t> index;
  std::vector<std::string> f;
  while (reader.next(f)) {
    if (f.size() != 5) throw DataError(reader.where("expected 5 fields"));
    try {
      auto [it, inserted] = index.emplace(f[0], out.size());
      if (inserted) out.push_back(Trajectory{f[0], {}, {}});
      Trajectory& traj = out[it->second];
      traj.seq.push_back(static_cast<int>(csv::parse_int(f[1], "seq")));
      traj.points.push_back({csv::parse_double(f[2], "lat"), csv::parse_double(f[3], "lng"),
                             csv::parse_double(f[4], "t")});
    } catch (const DataError& e) {
      throw DataError(reader.where(e.what()));
    }
  }
  for (const auto& t : out) validate(t);
  return out;
}

void write_trajectories(const std::vector<Trajectory>& trajs, const std::filesystem::path& path) {
  auto out = csv::open_for_write(path);
  out << "traj_id,seq,lat,lng,t\n";
  for (const auto& traj : trajs) {
    for (std::size_t i = 0; i < traj.size(); ++i) {
      const auto& p = traj.points[i];
      out << traj.id << ',' << traj.seq[i] << ',' << csv::format_double(p.lat) << ','
          << csv::format_double(p.lng) << ',' << csv::format_double(p.t) << '\n';
    }
  }
  if (!out) throw DataError("failed writing " + path.string());
}

std::vector<RouteRecord> load_routes(const std::filesystem::path& path) {
  csv::Reader reader(path, "traj_id,seq,edge_id");
  std::vector<RouteRecord> out;
  std::unordered_map<std::string, std::size_t> index;
  std::vector<std::string> f;
  while (reader.next(f)) {
    if (f.size() != 3) throw DataError(reader.where("expected 3 fields"));
    try {
      auto [it, inserted] = index.emplace(f[0], out.size());
      if (inserted) out.push_back(RouteRecord{f[0], {}});
      out[it->second].rows.push_back({static_cast<int>(csv::parse_int(f[1], "seq")),
                                      static_cast<SegmentId>(csv::parse_int(f[2], "edge_id"))});
    } catch (const DataError& e) {
      throw DataError(reader.where(e.what()));
    }
  }
  return out;
}

void write_routes(const std::vector<RouteRecord>& routes, const std::filesystem::path& path) {
  auto out = csv::open_for_write(path);
  out << "traj_id,seq,edge_id\n";
  for (const auto& r : routes) {
    for (const auto& row : r.rows) {
      out << r.traj_id << ',' << row.seq << ',' << row.edge << '\n';
    }
  }
  if (!out) throw DataError("failed writing " + path.string());
}

std::vector<MatchedTrajectory> join_routes(const std::vector<Trajectory>& trajs,
                                           const std::vector<RouteRecord>& routes) {
  std::unordered_map<std::string, const RouteRecord*> by_id;
  for (const auto& r : routes) by_id.emplace(r.traj_id, &r);

  std::vector<std::string> missing;
  std::unordered_map<std::string, bool> traj_ids;
  for (const auto& t : trajs) {
    traj_ids.emplace(t.id, true);
    if (!by_id.contains(t.id)) missing.push_back(t.id);
  }
  for (const auto& r : routes) {
    if (!traj_ids.contains(r.traj_id)) missing.push_back(r.traj_id);
  }
  if (!missing.empty()) {
    std::string msg = "trajectory ids without a counterpart:";
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg += " " + missing[i];
    if (missing.size() > 20) msg += " ... (" + std::to_string(missing.size()) + " total)";
    throw DataError(msg);
  }

  std::vector<MatchedTrajectory> out;
  out.reserve(trajs.size());
  for (const auto& t : trajs) {
    std::map<int, SegmentId> by_seq;
    for (const auto& row : by_id.at(t.id)->rows) by_seq[row.seq] = row.edge;
    MatchedTrajectory mt{t, {}};
    for (int s : t.seq) {
      auto it = by_seq.find(s);
      if (it == by_seq.end()) {
        throw DataError("route for trajectory '" + t.id + "' lacks seq " + std::to_string(s));
      }
      mt.route.push_back(it->second);
    }
    out.push_back(std::move(mt));
  }
  return out;
}

RouteRecord to_route_record(const Trajectory& traj, const std::vector<SegmentId>& route) {
  if (route.size() != traj.size()) {
    throw DataError("route length does not match trajectory '" + traj.id + "'");
  }
  RouteRecord r{traj.id, {}};
  for (std::size_t i = 0; i < route.size(); ++i) r.rows.push_back({traj.seq[i], route[i]});
  return r;
}

}  // namespace diffmm
