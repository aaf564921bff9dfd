#ifndef DIFFMM_EVAL_HPP_
#define DIFFMM_EVAL_HPP_

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <unordered_map>
#include <string>
#include <vector>

#include "diffmm/hmm.hpp"
#include "diffmm/shortcut.hpp"

namespace diffmm {

/// Fraction of positions where the two routes agree. Throws std::invalid_argument on length mismatch.
double accuracy(const std::vector<SegmentId>& truth, const std::vector<SegmentId>& predicted);

class Matcher {
 public:
  virtual ~Matcher() = default;
  virtual std::string name() const = 0;
  /// Throws DataError when the trajectory cannot be matched at all.
  virtual std::vector<SegmentId> match(const Trajectory& traj) const = 0;
  /// One result per trajectory, empty where match() would throw DataError.
  virtual std::vector<std::optional<std::vector<SegmentId>>> match_batch(
      std::span<const Trajectory* const> trajs) const;
};

class HmmMatcher : public Matcher {
 public:
  HmmMatcher(const SpatialIndex& idx, hmm::HmmConfig cfg = {}) : idx_(idx), cfg_(cfg) {}
  std::string name() const override { return "hmm"; }
  std::vector<SegmentId> match(const Trajectory& traj) const override {
    return hmm::match_hmm(traj, idx_, cfg_);
  }

 private:
  const SpatialIndex& idx_;
  hmm::HmmConfig cfg_;
};

class DiffmmMatcher : public Matcher {
 public:
  DiffmmMatcher(const DiffMMModel<float>& model, const SpatialIndex& idx, InferenceConfig cfg = {})
      : model_(model), idx_(idx), cfg_(cfg) {}
  std::string name() const override { return "diffmm"; }
  std::vector<SegmentId> match(const Trajectory& traj) const override {
    return infer(model_, traj, idx_, cfg_);
  }
  /// Packed inference over the whole span.
  std::vector<std::optional<std::vector<SegmentId>>> match_batch(
      std::span<const Trajectory* const> trajs) const override;

 private:
  const DiffMMModel<float>& model_;
  const SpatialIndex& idx_;
  InferenceConfig cfg_;
};

/// Replays known routes; used to check the scoring path.
class EchoMatcher : public Matcher {
 public:
  explicit EchoMatcher(const std::vector<MatchedTrajectory>& data);
  std::string name() const override { return "echo"; }
  std::vector<SegmentId> match(const Trajectory& traj) const override;

 private:
  std::unordered_map<std::string, std::vector<SegmentId>> routes_;
};

struct EvalReport {
  std::string matcher;
  std::vector<std::string> ids;
  std::vector<double> accuracy;      ///< per trajectory
  std::vector<std::size_t> lengths;
  std::vector<bool> unmatchable;     ///< scored 0
  std::vector<std::vector<SegmentId>> predictions;
  double mean_accuracy = 0.0;
  double seconds_per_1000 = 0.0;     ///< matching time only
  std::string fingerprint;
};

/// Matches trajectories in order on the calling thread, kInferBatch per match_batch call, and scores them.
EvalReport run_evaluation(const Matcher& matcher, const std::vector<MatchedTrajectory>& test,
                          const std::string& fingerprint = "");

/// Rebuilds `mean_accuracy` from the per-trajectory values.
double mean_of(const std::vector<double>& values);

/// traj_id,n_points,n_correct,accuracy,unmatchable
void write_report_csv(const EvalReport& report, const std::filesystem::path& path);
std::string summary(const EvalReport& report);

/// FeatureCollection with one Point per GPS fix and one LineString per matched segment.
/// Negative ids mark unmatched points and get no LineString.
void write_geojson(const std::vector<Trajectory>& trajs, const std::vector<std::vector<SegmentId>>& routes,
                   const RoadNetwork& net, const std::filesystem::path& path);

/// Everything needed to train and score one DiffMM configuration.
struct Experiment {
  const SpatialIndex* idx = nullptr;
  std::vector<MatchedTrajectory> train;
  std::vector<MatchedTrajectory> valid;
  std::vector<MatchedTrajectory> test;
  ModelConfig model;
  TrainConfig training;
  InferenceConfig inference;
  int no_shortcut_steps = 4;  ///< Euler steps for the no_shortcut variant
};

struct ExperimentResult {
  TrainResult training;
  EvalReport report;
};

/// Trains a fresh model on `exp.train` and evaluates on `exp.test`.
ExperimentResult run_experiment(const Experiment& exp, std::unique_ptr<DiffMMModel<float>>* model_out = nullptr);

/**
 * One ablation variant. no_shortcut drops step conditioning, trains with flow
 * targets only and infers with `no_shortcut_steps` Euler steps.
 */
ExperimentResult run_ablation(Variant variant, const Experiment& exp);

struct RobustnessRow {
  std::size_t train_size = 0;
  double accuracy = 0.0;
};

struct RobustnessReport {
  std::vector<RobustnessRow> rows;
  /// Largest drop of accuracy from one size to the next larger one (0 when monotone).
  double worst_drop = 0.0;
};

/// Retrains on the first n training trajectories for each size. Throws std::invalid_argument
/// when a size exceeds the training split.
RobustnessReport run_robustness(const std::vector<std::size_t>& train_sizes, const Experiment& exp);

}  // namespace diffmm

#endif  // DIFFMM_EVAL_HPP_
