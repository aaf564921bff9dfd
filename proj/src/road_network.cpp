#include "diffmm/road_network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <queue>
#include <string>
#include <unordered_set>

#include <boost/geometry.hpp>
#include <boost/geometry/index/rtree.hpp>

#include "diffmm/csv.hpp"
#include "diffmm/errors.hpp"

namespace diffmm {

namespace bg = boost::geometry;
namespace bgi = boost::geometry::index;

RoadNetwork::RoadNetwork(std::vector<Node> nodes, std::vector<RoadSegment> segments)
    : nodes_(std::move(nodes)) {
  index_of_.reserve(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!geo::is_valid(nodes_[i].position)) {
      throw DataError("node " + std::to_string(nodes_[i].id) + " has invalid coordinates");
    }
    if (!index_of_.emplace(nodes_[i].id, i).second) {
      throw DataError("duplicate node id " + std::to_string(nodes_[i].id));
    }
  }

  segments_.resize(segments.size());
  std::vector<bool> seen(segments.size(), false);
  for (auto& seg : segments) {
    if (seg.id < 0 || static_cast<std::size_t>(seg.id) >= segments.size()) {
      throw DataError("segment id " + std::to_string(seg.id) + " outside dense range [0, " +
                      std::to_string(segments.size()) + ")");
    }
    if (seen[static_cast<std::size_t>(seg.id)]) {
      throw DataError("duplicate segment id " + std::to_string(seg.id));
    }
    seen[static_cast<std::size_t>(seg.id)] = true;
    for (NodeId n : {seg.from_node, seg.to_node}) {
      if (!index_of_.contains(n)) {
        throw DataError("edge " + std::to_string(seg.id) + " references missing node " +
                        std::to_string(n));
      }
    }
    if (seg.polyline.empty()) {
      seg.polyline = {nodes_[index_of_.at(seg.from_node)].position,
                      nodes_[index_of_.at(seg.to_node)].position};
    }
    if (seg.polyline.size() < 2) {
      throw DataError("edge " + std::to_string(seg.id) + " polyline has fewer than 2 points");
    }
    double length = 0.0;
    for (std::size_t i = 0; i < seg.polyline.size(); ++i) {
      if (!geo::is_valid(seg.polyline[i])) {
        throw DataError("edge " + std::to_string(seg.id) + " has invalid polyline coordinates");
      }
      if (i > 0) length += geo::haversine_distance(seg.polyline[i - 1], seg.polyline[i]);
    }
    seg.length_m = length;
    segments_[static_cast<std::size_t>(seg.id)] = std::move(seg);
  }

  outgoing_.assign(nodes_.size(), {});
  for (const auto& seg : segments_) {
    outgoing_[index_of_.at(seg.from_node)].push_back(seg.id);
  }
}

std::size_t RoadNetwork::node_index(NodeId id) const {
  const auto it = index_of_.find(id);
  if (it == index_of_.end()) {
    throw DataError("unknown node id " + std::to_string(id));
  }
  return it->second;
}

std::vector<double> RoadNetwork::distances_from(std::size_t source_index, double cap_m) const {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(nodes_.size(), kInf);
  using Entry = std::pair<double, std::size_t>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> queue;
  dist[source_index] = 0.0;
  queue.emplace(0.0, source_index);
  while (!queue.empty()) {
    const auto [d, u] = queue.top();
    queue.pop();
    if (d > dist[u]) continue;
    for (SegmentId sid : outgoing_[u]) {
      const RoadSegment& seg = segments_[static_cast<std::size_t>(sid)];
      const double nd = d + seg.length_m;
      if (nd > cap_m) continue;
      const std::size_t v = index_of_.at(seg.to_node);
      if (nd < dist[v]) {
        dist[v] = nd;
        queue.emplace(nd, v);
      }
    }
  }
  return dist;
}

std::vector<SegmentId> RoadNetwork::shortest_path(std::size_t source_index,
                                                  std::size_t target_index) const {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(nodes_.size(), kInf);
  std::vector<SegmentId> via(nodes_.size(), -1);
  using Entry = std::pair<double, std::size_t>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> queue;
  dist[source_index] = 0.0;
  queue.emplace(0.0, source_index);
  while (!queue.empty()) {
    const auto [d, u] = queue.top();
    queue.pop();
    if (d > dist[u]) continue;
    if (u == target_index) break;
    for (SegmentId sid : outgoing_[u]) {
      const RoadSegment& seg = segments_[static_cast<std::size_t>(sid)];
      const std::size_t v = index_of_.at(seg.to_node);
      const double nd = d + seg.length_m;
      // strict improvement, or equal length via a lower segment id, keeps paths deterministic
      if (nd < dist[v] || (nd == dist[v] && via[v] >= 0 && sid < via[v])) {
        dist[v] = nd;
        via[v] = sid;
        queue.emplace(nd, v);
      }
    }
  }
  std::vector<SegmentId> path;
  if (source_index == target_index || dist[target_index] == kInf) return path;
  std::size_t cur = target_index;
  while (cur != source_index) {
    const SegmentId sid = via[cur];
    path.push_back(sid);
    cur = index_of_.at(segments_[static_cast<std::size_t>(sid)].from_node);
  }
  std::reverse(path.begin(), path.end());
  return path;
}

RoadNetwork load_network(const std::filesystem::path& nodes_path,
                         const std::filesystem::path& edges_path) {
  std::vector<Node> nodes;
  {
    csv::Reader reader(nodes_path, "node_id,lat,lng");
    std::vector<std::string> f;
    while (reader.next(f)) {
      if (f.size() != 3) throw DataError(reader.where("expected 3 fields"));
      try {
        nodes.push_back({csv::parse_int(f[0], "node_id"),
                         {csv::parse_double(f[1], "lat"), csv::parse_double(f[2], "lng")}});
      } catch (const DataError& e) {
        throw DataError(reader.where(e.what()));
      }
    }
  }
  std::vector<RoadSegment> segments;
  {
    csv::Reader reader(edges_path, "edge_id,from_node,to_node,polyline");
    std::vector<std::string> f;
    while (reader.next(f)) {
      if (f.size() != 4) throw DataError(reader.where("expected 4 fields"));
      RoadSegment seg;
      try {
        seg.id = static_cast<SegmentId>(csv::parse_int(f[0], "edge_id"));
        seg.from_node = csv::parse_int(f[1], "from_node");
        seg.to_node = csv::parse_int(f[2], "to_node");
        if (!f[3].empty()) {
          for (const auto& pair : csv::split(f[3], ';')) {
            const auto ll = csv::split(pair, ' ');
            if (ll.size() != 2) throw DataError("polyline vertex must be 'lat lng'");
            seg.polyline.push_back(
                {csv::parse_double(ll[0], "polyline lat"), csv::parse_double(ll[1], "polyline lng")});
          }
        }
      } catch (const DataError& e) {
        throw DataError(reader.where(e.what()));
      }
      segments.push_back(std::move(seg));
    }
  }
  return RoadNetwork(std::move(nodes), std::move(segments));
}

void write_network(const RoadNetwork& net, const std::filesystem::path& nodes_path,
                   const std::filesystem::path& edges_path) {
  auto nodes_out = csv::open_for_write(nodes_path);
  nodes_out << "node_id,lat,lng\n";
  for (const auto& n : net.nodes()) {
    nodes_out << n.id << ',' << csv::format_double(n.position.lat) << ','
              << csv::format_double(n.position.lng) << '\n';
  }
  auto edges_out = csv::open_for_write(edges_path);
  edges_out << "edge_id,from_node,to_node,polyline\n";
  for (const auto& s : net.segments()) {
    edges_out << s.id << ',' << s.from_node << ',' << s.to_node << ',';
    for (std::size_t i = 0; i < s.polyline.size(); ++i) {
      if (i > 0) edges_out << ';';
      edges_out << csv::format_double(s.polyline[i].lat) << ' '
                << csv::format_double(s.polyline[i].lng);
    }
    edges_out << '\n';
  }
  if (!nodes_out || !edges_out) {
    throw DataError("failed writing network files");
  }
}

RoadNetwork make_grid_network(int rows, int cols, double spacing_m, GeoPoint origin) {
  if (rows < 1 || cols < 1 || rows * cols < 2 || !(spacing_m > 0.0)) {
    throw std::invalid_argument("make_grid_network: need at least 2 nodes and positive spacing");
  }
  std::vector<Node> nodes;
  nodes.reserve(static_cast<std::size_t>(rows * cols));
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      nodes.push_back({static_cast<NodeId>(r * cols + c),
                       geo::offset_by_meters(origin, r * spacing_m, c * spacing_m)});
    }
  }
  std::vector<RoadSegment> segments;
  auto add_street = [&](int a, int b) {
    for (auto [u, v] : {std::pair{a, b}, std::pair{b, a}}) {
      RoadSegment s;
      s.id = static_cast<SegmentId>(segments.size());
      s.from_node = u;
      s.to_node = v;
      s.polyline = {nodes[static_cast<std::size_t>(u)].position,
                    nodes[static_cast<std::size_t>(v)].position};
      segments.push_back(std::move(s));
    }
  };
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const int id = r * cols + c;
      if (c + 1 < cols) add_street(id, id + 1);
      if (r + 1 < rows) add_street(id, id + cols);
    }
  }
  return RoadNetwork(std::move(nodes), std::move(segments));
}

// ---------------------------------------------------------------------------
// Spatial index

namespace {

using BoxPoint = bg::model::point<double, 2, bg::cs::cartesian>;  // (lng, lat)
using Box = bg::model::box<BoxPoint>;
using Entry = std::pair<Box, SegmentId>;

constexpr double kMetersPerDegree = geo::kEarthRadiusM * std::numbers::pi / 180.0;

}  // namespace

struct SpatialIndex::Tree {
  bgi::rtree<Entry, bgi::rstar<16>> rtree;
};

SpatialIndex::SpatialIndex(const RoadNetwork& net) : net_(&net), tree_(std::make_unique<Tree>()) {
  std::vector<Entry> entries;
  entries.reserve(net.segment_count());
  for (const auto& seg : net.segments()) {
    double min_lat = 90.0, max_lat = -90.0, min_lng = 180.0, max_lng = -180.0;
    for (const auto& p : seg.polyline) {
      min_lat = std::min(min_lat, p.lat);
      max_lat = std::max(max_lat, p.lat);
      min_lng = std::min(min_lng, p.lng);
      max_lng = std::max(max_lng, p.lng);
    }
    entries.emplace_back(Box(BoxPoint(min_lng, min_lat), BoxPoint(max_lng, max_lat)), seg.id);
  }
  tree_->rtree = bgi::rtree<Entry, bgi::rstar<16>>(entries);  // bulk load
}

SpatialIndex::~SpatialIndex() = default;
SpatialIndex::SpatialIndex(SpatialIndex&&) noexcept = default;
SpatialIndex& SpatialIndex::operator=(SpatialIndex&&) noexcept = default;

std::vector<Candidate> SpatialIndex::candidates_within(const GeoPoint& p, double delta_m) const {
  // Conservative query box: a great-circle distance d bounds the latitude
  // offset by d/R and the longitude offset by d/(R cos(lat)); pad by 1%.
  const double dlat = delta_m / kMetersPerDegree * 1.01 + 1e-9;
  const double far_lat = std::min(89.9, std::abs(p.lat) + dlat);
  const double dlng = dlat / std::cos(far_lat * std::numbers::pi / 180.0);
  const Box query(BoxPoint(p.lng - dlng, p.lat - dlat), BoxPoint(p.lng + dlng, p.lat + dlat));

  std::vector<Entry> hits;
  tree_->rtree.query(bgi::intersects(query), std::back_inserter(hits));

  std::vector<Candidate> out;
  for (const auto& [box, sid] : hits) {
    const auto proj = geo::project_to_segment(p, net_->segment(sid).polyline);
    if (proj.distance_m <= delta_m) {
      out.push_back({sid, proj});
    }
  }
  std::sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    if (a.projection.distance_m != b.projection.distance_m) {
      return a.projection.distance_m < b.projection.distance_m;
    }
    return a.segment < b.segment;
  });
  return out;
}

}  // namespace diffmm
