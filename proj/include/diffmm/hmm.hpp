#ifndef DIFFMM_HMM_HPP_
#define DIFFMM_HMM_HPP_

#include <vector>

#include "diffmm/road_network.hpp"
#include "diffmm/trajectory.hpp"

/**
 * Hidden Markov model map matching (Newson & Krumm style).
 *
 * States are the candidate segments of each GPS point. Emission scores the
 * projection distance with a zero-mean Gaussian; transition scores the
 * difference between network route distance and great-circle distance with
 * an exponential. The Viterbi path is the matched route.
 */
namespace diffmm::hmm {

struct HmmConfig {
  double sigma_emission_m = 20.0;
  double beta_transition_m = 200.0;
  double candidate_delta_m = 50.0;
  double max_route_search_m = 5000.0;
};

/// Throws std::invalid_argument unless every field is positive.
void validate(const HmmConfig& cfg);

double emission_log_prob(double distance_m, double sigma_m);
double transition_log_prob(double route_m, double great_circle_m, double beta_m);

/// Route distance when the target is unreachable within the search cap is
/// replaced by great-circle + this many caps, a large but finite penalty.
constexpr double kUnreachablePenaltyCaps = 2.0;

/**
 * Network distance between two projected positions, measured from the
 * projection foot on `from` to the projection foot on `to`. Returns +inf when
 * the route exceeds `cap_m`.
 */
double route_distance(const RoadNetwork& net, const Candidate& from, const Candidate& to,
                      double cap_m);

/// Layered trellis over the trajectory points that have candidates.
struct Lattice {
  std::vector<std::size_t> point_index;             ///< trajectory index of each layer
  std::vector<std::vector<Candidate>> candidates;   ///< per layer
  std::vector<std::vector<double>> emission;        ///< per layer, per candidate
  /// transition[i][a][b]: layer i-1 candidate a -> layer i candidate b (transition[0] empty)
  std::vector<std::vector<std::vector<double>>> transition;
};

Lattice build_lattice(const Trajectory& traj, const SpatialIndex& idx, const HmmConfig& cfg);

struct ViterbiResult {
  std::vector<std::size_t> states;  ///< candidate index per layer
  double log_prob = 0.0;
};

/**
 * Max-probability state sequence. Ties prefer the lower segment id, both for
 * the final state and for each back-pointer.
 */
ViterbiResult viterbi(const Lattice& lattice);

/// Joint log-probability of a state sequence, summed in Viterbi order.
double joint_log_prob(const Lattice& lattice, const std::vector<std::size_t>& states);

/**
 * Matches every point to a segment. Points without candidates inherit the
 * previous matched segment (leading ones take the first matched segment).
 * Throws DataError("unmatchable trajectory") when no point has candidates.
 */
std::vector<SegmentId> match_hmm(const Trajectory& traj, const SpatialIndex& idx,
                                 const HmmConfig& cfg = {});

}  // namespace diffmm::hmm

#endif  // DIFFMM_HMM_HPP_
