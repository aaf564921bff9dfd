#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "diffmm/errors.hpp"
#include "diffmm/hmm.hpp"
#include "diffmm/trajectory.hpp"
#include "oracles.hpp"

using namespace diffmm;

TEST_SUITE("hmm_baseline") {

TEST_CASE("emission and transition scores") {
  CHECK(hmm::emission_log_prob(0.0, 20.0) == doctest::Approx(-std::log(std::sqrt(2 * std::numbers::pi) * 20.0)));
  CHECK(hmm::emission_log_prob(20.0, 20.0) - hmm::emission_log_prob(0.0, 20.0) == doctest::Approx(-0.5));
  CHECK(hmm::transition_log_prob(300.0, 300.0, 200.0) == doctest::Approx(-std::log(200.0)));
  CHECK(hmm::transition_log_prob(500.0, 300.0, 200.0) == doctest::Approx(-1.0 - std::log(200.0)));
}

TEST_CASE("config validation") {
  hmm::HmmConfig cfg;
  CHECK_NOTHROW(hmm::validate(cfg));
  cfg.sigma_emission_m = 0.0;
  CHECK_THROWS_AS(hmm::validate(cfg), std::invalid_argument);
}

TEST_CASE("noiseless trajectories are matched exactly") {
  const RoadNetwork net = make_grid_network(5, 5, 200.0);
  const SpatialIndex idx(net);
  SyntheticConfig cfg;
  cfg.n_trajectories = 40;
  cfg.noise_sigma_m = 0.0;
  auto at_junction = [&](const GeoPoint& p) {
    for (const auto& n : net.nodes()) {
      if (geo::haversine_distance(p, n.position) < 1.0) return true;
    }
    return false;
  };
  std::size_t hits = 0, total = 0;
  for (const auto& mt : generate_synthetic(net, cfg)) {
    const auto route = hmm::match_hmm(mt.trajectory, idx);
    for (std::size_t i = 0; i < route.size(); ++i) {
      // every segment meeting at a junction fits a fix there equally well
      if (at_junction(mt.trajectory.points[i].position())) continue;
      hits += route[i] == mt.route[i];
      ++total;
    }
  }
  CHECK(total > 300);
  CHECK(hits == total);
}

TEST_CASE("a single point takes its nearest segment") {
  const RoadNetwork net = make_grid_network(3, 3, 200.0);
  const SpatialIndex idx(net);
  const GeoPoint p = geo::offset_by_meters(net.nodes()[0].position, 12.0, 90.0);
  Trajectory t{"one", {{p.lat, p.lng, 0.0}}, {0}};
  const auto route = hmm::match_hmm(t, idx);
  const auto cands = idx.candidates_within(p, 50.0);
  REQUIRE(!cands.empty());
  REQUIRE(route.size() == 1);
  CHECK(route[0] == cands.front().segment);
}

TEST_CASE("points without candidates inherit a neighbour") {
  const RoadNetwork net = make_grid_network(3, 3, 200.0);
  const SpatialIndex idx(net);
  const GeoPoint o = net.nodes()[0].position;
  const GeoPoint far = geo::offset_by_meters(o, -900, -900);
  const GeoPoint a = geo::offset_by_meters(o, 5, 60), b = geo::offset_by_meters(o, 5, 120);
  Trajectory t{"gap", {{far.lat, far.lng, 0}, {a.lat, a.lng, 5}, {far.lat, far.lng, 10}, {b.lat, b.lng, 15}}, {0, 1, 2, 3}};
  const auto route = hmm::match_hmm(t, idx);
  CHECK(route[0] == route[1]);
  CHECK(route[2] == route[1]);
  Trajectory lost{"lost", {{far.lat, far.lng, 0}}, {0}};
  CHECK_THROWS_AS(hmm::match_hmm(lost, idx), DataError);
}

TEST_CASE("viterbi equals exhaustive enumeration") {
  const RoadNetwork net = make_grid_network(3, 3, 200.0);
  const SpatialIndex idx(net);
  SyntheticConfig cfg;
  cfg.n_trajectories = 60;
  cfg.seed = 17;
  const hmm::HmmConfig hc;
  std::mt19937_64 rng(2);
  for (const auto& mt : generate_synthetic(net, cfg)) {
    Trajectory t = mt.trajectory;
    const std::size_t l = std::min<std::size_t>(t.size(), 1 + rng() % 6);
    t.points.resize(l);
    t.seq.resize(l);
    const auto lat = hmm::build_lattice(t, idx, hc);
    if (lat.candidates.empty()) continue;
    const auto vr = hmm::viterbi(lat);
    const auto en = oracle::enumerate_lattice(lat);
    CHECK(vr.log_prob == en.best);
    CHECK(hmm::joint_log_prob(lat, vr.states) == vr.log_prob);
    CHECK(vr.states == en.states);
  }
}

TEST_CASE("viterbi breaks ties towards lower segment ids") {
  hmm::Lattice lat;
  lat.point_index = {0, 1};
  lat.candidates = {{{4, {}}, {2, {}}}, {{9, {}}, {3, {}}}};
  lat.emission = {{-1.0, -1.0}, {-2.0, -2.0}};
  lat.transition = {{}, {{-0.5, -0.5}, {-0.5, -0.5}}};
  const auto vr = hmm::viterbi(lat);
  CHECK(lat.candidates[1][vr.states[1]].segment == 3);
  CHECK(lat.candidates[0][vr.states[0]].segment == 2);
  CHECK(oracle::enumerate_lattice(lat).states == vr.states);
  CHECK(oracle::enumerate_lattice(lat).maximisers == 4);
}

}  // TEST_SUITE
