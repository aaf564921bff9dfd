#ifndef DIFFMM_ROAD_NETWORK_HPP_
#define DIFFMM_ROAD_NETWORK_HPP_

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <unordered_map>
#include <vector>

#include "diffmm/geo.hpp"

namespace diffmm {

using geo::GeoPoint;

using NodeId = std::int64_t;
using SegmentId = int;

struct Node {
  NodeId id = 0;
  GeoPoint position;
};

/// Directed road segment from its entrance node to its exit node.
struct RoadSegment {
  SegmentId id = 0;
  NodeId from_node = 0;
  NodeId to_node = 0;
  std::vector<GeoPoint> polyline;  ///< entrance -> exit, at least 2 points
  double length_m = 0.0;           ///< summed haversine length of the polyline
};

/**
 * Directed road graph G = (V, E). Segment ids are dense in [0, |E|); node
 * ids are arbitrary integers and are mapped to dense indices internally.
 * Immutable after construction.
 */
class RoadNetwork {
 public:
  /// Validates and indexes the graph. Throws DataError on duplicate ids,
  /// non-dense segment ids, dangling node references or short polylines.
  /// Segments with an empty polyline get the straight line between their nodes.
  RoadNetwork(std::vector<Node> nodes, std::vector<RoadSegment> segments);

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t segment_count() const { return segments_.size(); }

  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<RoadSegment>& segments() const { return segments_; }
  const RoadSegment& segment(SegmentId id) const { return segments_.at(static_cast<std::size_t>(id)); }

  /// Dense index of a node id; throws DataError if absent.
  std::size_t node_index(NodeId id) const;
  const Node& node(NodeId id) const { return nodes_[node_index(id)]; }

  /// Outgoing segment ids per dense node index.
  const std::vector<SegmentId>& outgoing(std::size_t node_index) const { return outgoing_[node_index]; }

  /**
   * Single-source network distances (meters) from a node to every node,
   * exploring no further than `cap_m`. Unreached nodes hold +infinity.
   */
  std::vector<double> distances_from(std::size_t source_index, double cap_m) const;

  /// Shortest path as a sequence of segment ids; empty when unreachable or source == target.
  std::vector<SegmentId> shortest_path(std::size_t source_index, std::size_t target_index) const;

 private:
  std::vector<Node> nodes_;
  std::vector<RoadSegment> segments_;
  std::unordered_map<NodeId, std::size_t> index_of_;
  std::vector<std::vector<SegmentId>> outgoing_;
};

/// Loads `node_id,lat,lng` and `edge_id,from_node,to_node,polyline` CSV files.
RoadNetwork load_network(const std::filesystem::path& nodes_path,
                         const std::filesystem::path& edges_path);
void write_network(const RoadNetwork& net, const std::filesystem::path& nodes_path,
                   const std::filesystem::path& edges_path);

/**
 * rows x cols grid city with `spacing_m` between neighbouring intersections.
 * Every street is emitted as two directed segments, so
 * |E| = 2 * (rows * (cols - 1) + cols * (rows - 1)).
 */
RoadNetwork make_grid_network(int rows, int cols, double spacing_m,
                              GeoPoint origin = {41.15, -8.61});

struct Candidate {
  SegmentId segment = 0;
  geo::Projection projection;
};

/// R-tree over segment bounding boxes answering radius queries.
class SpatialIndex {
 public:
  explicit SpatialIndex(const RoadNetwork& net);
  ~SpatialIndex();
  SpatialIndex(SpatialIndex&&) noexcept;
  SpatialIndex& operator=(SpatialIndex&&) noexcept;

  /**
   * Every segment whose projection distance to `p` is at most `delta_m`,
   * sorted by ascending distance, ties by segment id.
   */
  std::vector<Candidate> candidates_within(const GeoPoint& p, double delta_m) const;

  const RoadNetwork& network() const { return *net_; }

 private:
  struct Tree;
  const RoadNetwork* net_;
  std::unique_ptr<Tree> tree_;
};

}  // namespace diffmm

#endif  // DIFFMM_ROAD_NETWORK_HPP_
