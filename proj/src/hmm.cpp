#include "diffmm/hmm.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <unordered_map>

#include "diffmm/errors.hpp"

namespace diffmm::hmm {

void validate(const HmmConfig& cfg) {
  if (!(cfg.sigma_emission_m > 0.0) || !(cfg.beta_transition_m > 0.0) ||
      !(cfg.candidate_delta_m > 0.0) || !(cfg.max_route_search_m > 0.0)) {
    throw std::invalid_argument("HmmConfig: all parameters must be positive");
  }
}

double emission_log_prob(double distance_m, double sigma_m) {
  const double z = distance_m / sigma_m;
  return -0.5 * z * z - std::log(std::sqrt(2.0 * std::numbers::pi) * sigma_m);
}

double transition_log_prob(double route_m, double great_circle_m, double beta_m) {
  return -std::abs(route_m - great_circle_m) / beta_m - std::log(beta_m);
}

namespace {

double route_distance_with(const RoadNetwork& net, const Candidate& from, const Candidate& to,
                           const std::vector<double>& dist_from_exit, double cap_m) {
  const RoadSegment& a = net.segment(from.segment);
  const RoadSegment& b = net.segment(to.segment);
  const double fa = from.projection.fraction;
  const double fb = to.projection.fraction;
  if (from.segment == to.segment && fb >= fa) {
    return (fb - fa) * a.length_m;
  }
  const double between = dist_from_exit[net.node_index(b.from_node)];
  const double total = (1.0 - fa) * a.length_m + between + fb * b.length_m;
  return total <= cap_m ? total : std::numeric_limits<double>::infinity();
}

}  // namespace

double route_distance(const RoadNetwork& net, const Candidate& from, const Candidate& to,
                      double cap_m) {
  const auto dist = net.distances_from(net.node_index(net.segment(from.segment).to_node), cap_m);
  return route_distance_with(net, from, to, dist, cap_m);
}

Lattice build_lattice(const Trajectory& traj, const SpatialIndex& idx, const HmmConfig& cfg) {
  validate(cfg);
  const RoadNetwork& net = idx.network();
  Lattice lat;
  for (std::size_t i = 0; i < traj.size(); ++i) {
    auto cands = idx.candidates_within(traj.points[i].position(), cfg.candidate_delta_m);
    if (cands.empty()) continue;
    std::vector<double> em;
    em.reserve(cands.size());
    for (const auto& c : cands) em.push_back(emission_log_prob(c.projection.distance_m, cfg.sigma_emission_m));
    lat.point_index.push_back(i);
    lat.candidates.push_back(std::move(cands));
    lat.emission.push_back(std::move(em));
  }

  lat.transition.resize(lat.candidates.size());
  for (std::size_t layer = 1; layer < lat.candidates.size(); ++layer) {
    const auto& prev = lat.candidates[layer - 1];
    const auto& cur = lat.candidates[layer];
    const double gc = geo::haversine_distance(traj.points[lat.point_index[layer - 1]].position(),
                                              traj.points[lat.point_index[layer]].position());
    // one bounded Dijkstra per distinct exit node of the previous layer
    std::unordered_map<NodeId, std::vector<double>> dijkstra;
    auto& trans = lat.transition[layer];
    trans.assign(prev.size(), std::vector<double>(cur.size(), 0.0));
    for (std::size_t a = 0; a < prev.size(); ++a) {
      const NodeId exit = net.segment(prev[a].segment).to_node;
      auto it = dijkstra.find(exit);
      if (it == dijkstra.end()) {
        it = dijkstra.emplace(exit, net.distances_from(net.node_index(exit), cfg.max_route_search_m))
                 .first;
      }
      for (std::size_t b = 0; b < cur.size(); ++b) {
        double route = route_distance_with(net, prev[a], cur[b], it->second, cfg.max_route_search_m);
        if (!std::isfinite(route)) {
          route = gc + kUnreachablePenaltyCaps * cfg.max_route_search_m;
        }
        trans[a][b] = transition_log_prob(route, gc, cfg.beta_transition_m);
      }
    }
  }
  return lat;
}

ViterbiResult viterbi(const Lattice& lat) {
  ViterbiResult result;
  const std::size_t layers = lat.candidates.size();
  if (layers == 0) return result;

  std::vector<std::vector<double>> score(layers);
  std::vector<std::vector<std::size_t>> back(layers);
  score[0] = lat.emission[0];
  for (std::size_t i = 1; i < layers; ++i) {
    const auto& prev = lat.candidates[i - 1];
    const std::size_t n = lat.candidates[i].size();
    score[i].assign(n, -std::numeric_limits<double>::infinity());
    back[i].assign(n, 0);
    for (std::size_t b = 0; b < n; ++b) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      bool have = false;
      for (std::size_t a = 0; a < prev.size(); ++a) {
        const double s = score[i - 1][a] + lat.transition[i][a][b];
        if (!have || s > best || (s == best && prev[a].segment < prev[arg].segment)) {
          best = s;
          arg = a;
          have = true;
        }
      }
      score[i][b] = best + lat.emission[i][b];
      back[i][b] = arg;
    }
  }

  const auto& last = lat.candidates[layers - 1];
  std::size_t arg = 0;
  for (std::size_t b = 1; b < last.size(); ++b) {
    const double s = score[layers - 1][b];
    const double best = score[layers - 1][arg];
    if (s > best || (s == best && last[b].segment < last[arg].segment)) arg = b;
  }
  result.log_prob = score[layers - 1][arg];
  result.states.assign(layers, 0);
  result.states[layers - 1] = arg;
  for (std::size_t i = layers - 1; i > 0; --i) {
    result.states[i - 1] = back[i][result.states[i]];
  }
  return result;
}

double joint_log_prob(const Lattice& lat, const std::vector<std::size_t>& states) {
  if (states.size() != lat.candidates.size() || states.empty()) {
    throw std::invalid_argument("joint_log_prob: state sequence does not fit the lattice");
  }
  double s = lat.emission[0][states[0]];
  for (std::size_t i = 1; i < states.size(); ++i) {
    s = s + lat.transition[i][states[i - 1]][states[i]];
    s = s + lat.emission[i][states[i]];
  }
  return s;
}

std::vector<SegmentId> match_hmm(const Trajectory& traj, const SpatialIndex& idx,
                                 const HmmConfig& cfg) {
  const Lattice lat = build_lattice(traj, idx, cfg);
  if (lat.candidates.empty()) {
    throw DataError("unmatchable trajectory '" + traj.id + "': no point has candidate segments");
  }
  const ViterbiResult vr = viterbi(lat);

  std::vector<SegmentId> route(traj.size(), -1);
  for (std::size_t layer = 0; layer < vr.states.size(); ++layer) {
    route[lat.point_index[layer]] = lat.candidates[layer][vr.states[layer]].segment;
  }
  SegmentId carry = route[lat.point_index.front()];
  for (auto& r : route) {
    if (r < 0) {
      r = carry;
    } else {
      carry = r;
    }
  }
  return route;
}

}  // namespace diffmm::hmm
