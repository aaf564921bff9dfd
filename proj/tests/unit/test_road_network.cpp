#include <doctest.h>

#include <algorithm>
#include <random>

#include "diffmm/errors.hpp"
#include "diffmm/road_network.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace diffmm;

TEST_SUITE("road_network") {

TEST_CASE("two nodes and one edge") {
  TempDir dir;
  const auto nodes = dir.write("nodes.csv", "node_id,lat,lng\n10,41.15,-8.61\n20,41.151,-8.61\n");
  const auto edges = dir.write("edges.csv", "edge_id,from_node,to_node,polyline\n0,10,20,\n");
  const RoadNetwork net = load_network(nodes, edges);
  CHECK(net.node_count() == 2);
  CHECK(net.segment_count() == 1);
  CHECK(net.segment(0).polyline.size() == 2);
  CHECK(net.segment(0).length_m == doctest::Approx(111.195).epsilon(1e-3));
}

TEST_CASE("explicit polylines survive a write/load round trip") {
  TempDir dir;
  const auto nodes = dir.write("nodes.csv", "node_id,lat,lng\n1,41.15,-8.61\n2,41.151,-8.61\n");
  const auto edges =
      dir.write("edges.csv", "edge_id,from_node,to_node,polyline\n0,1,2,41.15 -8.61;41.1505 -8.6095;41.151 -8.61\n");
  const RoadNetwork net = load_network(nodes, edges);
  CHECK(net.segment(0).polyline.size() == 3);
  write_network(net, dir / "n2.csv", dir / "e2.csv");
  const RoadNetwork again = load_network(dir / "n2.csv", dir / "e2.csv");
  CHECK(again.segment(0).polyline == net.segment(0).polyline);
  CHECK(slurp(dir / "e2.csv") == slurp(edges));
}

TEST_CASE("grid counts") {
  const RoadNetwork net = make_grid_network(5, 5, 200.0);
  CHECK(net.node_count() == 25);
  CHECK(net.segment_count() == 2 * (2 * 5 * 4));
  const RoadNetwork net8 = make_grid_network(8, 8, 250.0);
  CHECK(net8.segment_count() == 224);
}

TEST_CASE("edge citing an absent node names the edge") {
  TempDir dir;
  const auto nodes = dir.write("nodes.csv", "node_id,lat,lng\n1,41.15,-8.61\n");
  const auto edges = dir.write("edges.csv", "edge_id,from_node,to_node,polyline\n0,1,99,\n");
  try {
    load_network(nodes, edges);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("edge 0") != std::string::npos);
    CHECK(msg.find("99") != std::string::npos);
  }
}

TEST_CASE("malformed files") {
  TempDir dir;
  const auto nodes = dir.write("nodes.csv", "node_id,lat,lng\n1,41.15,-8.61\n2,41.151,-8.61\n");
  CHECK_THROWS_AS(load_network(nodes, dir.write("a.csv", "id,from,to\n")), DataError);
  CHECK_THROWS_AS(load_network(nodes, dir.write("b.csv", "edge_id,from_node,to_node,polyline\n1,1,2,\n")), DataError);
  CHECK_THROWS_AS(load_network(nodes, dir.write("c.csv", "edge_id,from_node,to_node,polyline\n0,1,x,\n")), DataError);
  CHECK_THROWS_AS(load_network(dir / "missing.csv", dir / "c.csv"), DataError);
}

TEST_CASE("shortest paths on the grid") {
  const RoadNetwork net = make_grid_network(3, 3, 100.0);
  const auto d = net.distances_from(0, 1e9);
  CHECK(d[0] == 0.0);
  CHECK(d[8] == doctest::Approx(400.0).epsilon(1e-3));
  const auto path = net.shortest_path(0, 8);
  CHECK(path.size() == 4);
  CHECK(net.shortest_path(4, 4).empty());
  const auto capped = net.distances_from(0, 150.0);
  CHECK(std::isinf(capped[8]));
}

TEST_CASE("candidates of a point on a segment") {
  const RoadNetwork net = make_grid_network(3, 3, 200.0);
  const SpatialIndex idx(net);
  const auto& seg = net.segment(5);
  const GeoPoint mid{(seg.polyline[0].lat + seg.polyline[1].lat) / 2, (seg.polyline[0].lng + seg.polyline[1].lng) / 2};
  const auto cands = idx.candidates_within(mid, 50.0);
  const auto it = std::find_if(cands.begin(), cands.end(), [](const Candidate& c) { return c.segment == 5; });
  REQUIRE(it != cands.end());
  CHECK(it->projection.distance_m < 1e-6);
  CHECK(idx.candidates_within(geo::offset_by_meters(net.nodes()[0].position, -500, -500), 50.0).empty());
}

TEST_CASE("candidates are sorted by distance then id") {
  const RoadNetwork net = make_grid_network(4, 4, 150.0);
  const SpatialIndex idx(net);
  const auto cands = idx.candidates_within(geo::offset_by_meters(net.nodes()[5].position, 10, 20), 120.0);
  REQUIRE(cands.size() > 2);
  for (std::size_t k = 1; k < cands.size(); ++k) {
    const auto& a = cands[k - 1];
    const auto& b = cands[k];
    CHECK((a.projection.distance_m < b.projection.distance_m ||
           (a.projection.distance_m == b.projection.distance_m && a.segment < b.segment)));
  }
}

TEST_CASE("radius queries equal an exhaustive scan") {
  const RoadNetwork net = make_grid_network(6, 6, 180.0);
  const SpatialIndex idx(net);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> off(-200, 1100);
  const GeoPoint o = net.nodes()[0].position;
  for (double delta : {10.0, 50.0, 200.0}) {
    for (int k = 0; k < 300; ++k) {
      const GeoPoint p = geo::offset_by_meters(o, off(rng), off(rng));
      std::vector<SegmentId> got;
      for (const auto& c : idx.candidates_within(p, delta)) got.push_back(c.segment);
      std::sort(got.begin(), got.end());
      CHECK(got == oracle::scan_candidates(net, p, delta));
    }
  }
}

}  // TEST_SUITE
