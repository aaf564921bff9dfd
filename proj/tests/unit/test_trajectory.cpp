#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "diffmm/errors.hpp"
#include "diffmm/trajectory.hpp"
#include "temp_dir.hpp"

using namespace diffmm;

namespace {

MatchedTrajectory straight(std::size_t l, const std::string& id = "t") {
  MatchedTrajectory mt;
  mt.trajectory.id = id;
  for (std::size_t i = 0; i < l; ++i) {
    mt.trajectory.points.push_back({41.15 + 1e-4 * static_cast<double>(i), -8.61, 100.0 + 5.0 * static_cast<double>(i)});
    mt.trajectory.seq.push_back(static_cast<int>(i));
    mt.route.push_back(static_cast<SegmentId>(i % 7));
  }
  return mt;
}

std::vector<MatchedTrajectory> many(std::size_t n) {
  std::vector<MatchedTrajectory> out;
  for (std::size_t k = 0; k < n; ++k) out.push_back(straight(3, std::to_string(k)));
  return out;
}

}  // namespace

TEST_SUITE("trajectory_data") {

TEST_CASE("sparsify keeps everything when every draw succeeds") {
  const auto mt = straight(10);
  const auto out = sparsify(mt, std::nextafter(1.0, 0.0), 4);
  CHECK(out.trajectory.points == mt.trajectory.points);
  CHECK(out.trajectory.seq == mt.trajectory.seq);
  CHECK(out.route == mt.route);
}

TEST_CASE("sparsify is deterministic and keeps endpoints") {
  const auto mt = straight(10);
  const auto a = sparsify(mt, 0.5, 9);
  const auto b = sparsify(mt, 0.5, 9);
  CHECK(a.trajectory.seq == b.trajectory.seq);
  CHECK(a.trajectory.seq.front() == 0);
  CHECK(a.trajectory.seq.back() == 9);
  CHECK(a.route.size() == a.trajectory.size());
  for (std::size_t i = 0; i < a.route.size(); ++i) CHECK(a.route[i] == mt.route[static_cast<std::size_t>(a.trajectory.seq[i])]);
  CHECK(sparsify(mt, 0.5, 9, 1).trajectory.seq != sparsify(mt, 0.5, 9, 2).trajectory.seq);
}

TEST_CASE("sparsify kept count follows the binomial law") {
  const auto mt = straight(100);
  const int runs = 10000;
  double sum = 0.0;
  for (int k = 0; k < runs; ++k) sum += static_cast<double>(sparsify(mt, 0.5, 1, static_cast<std::uint64_t>(k)).trajectory.size());
  const double mean = sum / runs;
  const double sigma_of_mean = std::sqrt(98 * 0.5 * 0.5 / runs);
  CHECK(std::abs(mean - (2 + 98 * 0.5)) <= 3 * sigma_of_mean);
}

TEST_CASE("sparsify rejects bad ratios") {
  const auto mt = straight(5);
  CHECK_THROWS_AS(sparsify(mt, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(sparsify(mt, 1.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(sparsify(straight(1), 0.5, 1), std::invalid_argument);
}

TEST_CASE("sparsify_all does not depend on order") {
  auto data = many(20);
  for (auto& mt : data) mt = straight(30, mt.trajectory.id);
  const auto a = sparsify_all(data, 0.3, 5);
  std::reverse(data.begin(), data.end());
  const auto b = sparsify_all(data, 0.3, 5);
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k].trajectory.seq == b[a.size() - 1 - k].trajectory.seq);
}

TEST_CASE("split sizes") {
  auto s10 = split_dataset(many(10), 3);
  CHECK(s10.train.size() == 4);
  CHECK(s10.valid.size() == 3);
  CHECK(s10.test.size() == 3);
  auto s1000 = split_dataset(many(1000), 3);
  CHECK(s1000.train.size() == 400);
  CHECK(s1000.valid.size() == 300);
  CHECK(s1000.test.size() == 300);
  CHECK_THROWS_AS(split_dataset(many(9), 3), DataError);
}

TEST_CASE("split is a seeded partition") {
  auto ids = [](const std::vector<MatchedTrajectory>& v) {
    std::vector<std::string> out;
    for (const auto& mt : v) out.push_back(mt.trajectory.id);
    return out;
  };
  const auto a = split_dataset(many(50), 8);
  const auto b = split_dataset(many(50), 8);
  CHECK(ids(a.train) == ids(b.train));
  CHECK(ids(a.test) == ids(b.test));
  std::set<std::string> all;
  for (const auto* part : {&a.train, &a.valid, &a.test}) {
    for (const auto& id : ids(*part)) all.insert(id);
  }
  CHECK(all.size() == 50);
  CHECK(ids(split_dataset(many(50), 9).train) != ids(a.train));
}

TEST_CASE("noiseless synthetic points lie on their labelled segment") {
  const RoadNetwork net = make_grid_network(5, 5, 200.0);
  SyntheticConfig cfg;
  cfg.n_trajectories = 50;
  cfg.noise_sigma_m = 0.0;
  const auto data = generate_synthetic(net, cfg);
  REQUIRE(data.size() == 50);
  for (const auto& mt : data) {
    validate(mt, net.segment_count());
    for (std::size_t i = 0; i < mt.route.size(); ++i) {
      const auto pr = geo::project_to_segment(mt.trajectory.points[i].position(), net.segment(mt.route[i]).polyline);
      CHECK(pr.distance_m < 0.5);
    }
  }
}

TEST_CASE("synthetic data is reproducible byte for byte") {
  const RoadNetwork net = make_grid_network(5, 5, 200.0);
  SyntheticConfig cfg;
  cfg.n_trajectories = 30;
  TempDir dir;
  auto dump = [&](const std::string& name) {
    std::vector<Trajectory> trajs;
    std::vector<RouteRecord> routes;
    for (const auto& mt : generate_synthetic(net, cfg)) {
      trajs.push_back(mt.trajectory);
      routes.push_back(to_route_record(mt.trajectory, mt.route));
    }
    write_trajectories(trajs, dir / (name + "_t.csv"));
    write_routes(routes, dir / (name + "_r.csv"));
    return slurp(dir / (name + "_t.csv")) + slurp(dir / (name + "_r.csv"));
  };
  const std::string first = dump("a");
  CHECK(first == dump("b"));
  cfg.seed += 1;
  CHECK(first != dump("c"));
}

TEST_CASE("synthetic noise has the requested spread") {
  const RoadNetwork net = make_grid_network(6, 6, 200.0);
  SyntheticConfig cfg;
  cfg.n_trajectories = 1000;
  cfg.noise_sigma_m = 20.0;
  std::vector<std::vector<GeoPoint>> truth;
  const auto data = generate_synthetic(net, cfg, &truth);
  double sq = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < data.size() && n < 10000; ++k) {
    for (std::size_t i = 0; i < data[k].trajectory.size() && n < 10000; ++i, ++n) {
      const double d = geo::haversine_distance(data[k].trajectory.points[i].position(), truth[k][i]);
      sq += d * d;
    }
  }
  REQUIRE(n == 10000);
  CHECK(std::sqrt(sq / static_cast<double>(n)) == doctest::Approx(20.0 * std::sqrt(2.0)).epsilon(0.05));
}

TEST_CASE("csv round trip and join") {
  TempDir dir;
  auto data = many(3);
  std::vector<Trajectory> trajs;
  std::vector<RouteRecord> routes;
  for (const auto& mt : data) {
    trajs.push_back(mt.trajectory);
    routes.push_back(to_route_record(mt.trajectory, mt.route));
  }
  write_trajectories(trajs, dir / "t.csv");
  write_routes(routes, dir / "r.csv");
  const auto joined = join_routes(load_trajectories(dir / "t.csv"), load_routes(dir / "r.csv"));
  REQUIRE(joined.size() == 3);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(joined[k].trajectory.points == data[k].trajectory.points);
    CHECK(joined[k].route == data[k].route);
  }
  routes.pop_back();
  try {
    join_routes(trajs, routes);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find('2') != std::string::npos);
  }
}

TEST_CASE("validation errors") {
  auto mt = straight(4);
  CHECK_NOTHROW(validate(mt, 7));
  CHECK_THROWS_AS(validate(mt, 3), DataError);
  auto bad_time = mt;
  bad_time.trajectory.points[2].t = bad_time.trajectory.points[1].t;
  CHECK_THROWS_AS(validate(bad_time.trajectory), DataError);
  auto bad_coord = mt;
  bad_coord.trajectory.points[0].lat = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(validate(bad_coord.trajectory), DataError);
  CHECK_THROWS_AS(validate(Trajectory{}), DataError);
  TempDir dir;
  CHECK_THROWS_AS(load_trajectories(dir.write("x.csv", "traj_id,seq,lat,lng,t\na,0,41.1,-8.6,abc\n")), DataError);
}

}  // TEST_SUITE
