#ifndef DIFFMM_TRAJECTORY_HPP_
#define DIFFMM_TRAJECTORY_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "diffmm/road_network.hpp"

namespace diffmm {

struct GpsPoint {
  double lat = 0.0;
  double lng = 0.0;
  double t = 0.0;  ///< unix seconds

  GeoPoint position() const { return {lat, lng}; }
  friend bool operator==(const GpsPoint&, const GpsPoint&) = default;
};

struct Trajectory {
  std::string id;
  std::vector<GpsPoint> points;
  /// Original position of each point in the trajectory it was derived from.
  /// Equals 0..l-1 for raw data; sparsify keeps the surviving indices.
  std::vector<int> seq;

  std::size_t size() const { return points.size(); }
};

/// A trajectory with one segment id per point.
struct MatchedTrajectory {
  Trajectory trajectory;
  std::vector<SegmentId> route;
};

struct DatasetSplit {
  std::vector<MatchedTrajectory> train;
  std::vector<MatchedTrajectory> valid;
  std::vector<MatchedTrajectory> test;
  std::uint64_t seed = 0;
};

/// Throws DataError unless the trajectory is non-empty, finite, has strictly
/// increasing timestamps and a matching seq vector.
void validate(const Trajectory& traj);
/// Additionally checks route length and that every id is below `segment_count`.
void validate(const MatchedTrajectory& mt, std::size_t segment_count);

/**
 * Keeps every interior point independently with probability `ratio`; first
 * and last points are always kept and the route stays in lockstep. The
 * random stream is derived from (seed, "sparsify", stream_index).
 */
MatchedTrajectory sparsify(const MatchedTrajectory& mt, double ratio, std::uint64_t seed,
                           std::uint64_t stream_index = 0);

/// sparsify() over a whole set; trajectory k uses stream fnv1a64(id) so the
/// result does not depend on the order of `data`.
std::vector<MatchedTrajectory> sparsify_all(const std::vector<MatchedTrajectory>& data, double ratio,
                                            std::uint64_t seed);

/// Shuffles with `seed` and partitions 40/30/30. Needs at least 10 trajectories.
DatasetSplit split_dataset(std::vector<MatchedTrajectory> data, std::uint64_t seed);

struct SyntheticConfig {
  std::size_t n_trajectories = 200;
  double noise_sigma_m = 20.0;
  double step_interval_s = 5.0;
  double speed_mps = 10.0;
  double start_time = 1.7e9;
  std::uint64_t seed = 7;
};

/**
 * Trajectories that follow the shortest path between random node pairs,
 * sampled every `step_interval_s` at constant speed and perturbed by isotropic
 * Gaussian noise. The label of a point is the segment under its unperturbed
 * position; a point exactly on a junction belongs to the segment being entered.
 */
std::vector<MatchedTrajectory> generate_synthetic(const RoadNetwork& net,
                                                  const SyntheticConfig& cfg);

/// Ground-truth (unperturbed) positions are kept alongside when requested.
std::vector<MatchedTrajectory> generate_synthetic(const RoadNetwork& net,
                                                  const SyntheticConfig& cfg,
                                                  std::vector<std::vector<GeoPoint>>* true_positions);

// trajectories.csv: traj_id,seq,lat,lng,t    routes.csv: traj_id,seq,edge_id
std::vector<Trajectory> load_trajectories(const std::filesystem::path& path);
void write_trajectories(const std::vector<Trajectory>& trajs, const std::filesystem::path& path);

struct RouteRow {
  int seq = 0;
  SegmentId edge = 0;
};
struct RouteRecord {
  std::string traj_id;
  std::vector<RouteRow> rows;
};
std::vector<RouteRecord> load_routes(const std::filesystem::path& path);
void write_routes(const std::vector<RouteRecord>& routes, const std::filesystem::path& path);

/// Joins trajectories with their routes by (traj_id, seq). Throws DataError
/// listing trajectory ids that are missing on either side.
std::vector<MatchedTrajectory> join_routes(const std::vector<Trajectory>& trajs,
                                           const std::vector<RouteRecord>& routes);
RouteRecord to_route_record(const Trajectory& traj, const std::vector<SegmentId>& route);

}  // namespace diffmm

#endif  // DIFFMM_TRAJECTORY_HPP_
