#ifndef DIFFMM_SHORTCUT_HPP_
#define DIFFMM_SHORTCUT_HPP_

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diffmm/model.hpp"

namespace diffmm {

// ---------------------------------------------------------------- identities

/// x_t = (1 - t) x0 + t x1. Throws std::invalid_argument on shape mismatch or t outside [0, 1].
template <typename T>
nn::Matrix<T> interpolate(const nn::Matrix<T>& x0, const nn::Matrix<T>& x1, double t);

/// A shortcut field s(x, t, d) with the condition already bound.
template <typename T>
using ShortcutField = std::function<nn::Matrix<T>(const nn::Matrix<T>& x, double t, double d)>;

template <typename T>
ShortcutField<T> bind_condition(const DiTDenoiser<T>& dit, const nn::Matrix<T>& cond);

/// x + s(x, t, d) d. Throws std::invalid_argument when t + d > 1 + 1e-9.
template <typename T>
nn::Matrix<T> shortcut_step(const ShortcutField<T>& s, const nn::Matrix<T>& x, double t, double d);

/// (s(x, t, d) + s(x + s(x, t, d) d, t + d, d)) / 2. Requires t + 2d <= 1 + 1e-9.
template <typename T>
nn::Matrix<T> self_consistency_target(const ShortcutField<T>& s, const nn::Matrix<T>& x, double t,
                                      double d);

/// l x |E| one-hot route matrix.
template <typename T>
nn::Matrix<T> one_hot_route(const std::vector<SegmentId>& route, Index segment_count);

// ---------------------------------------------------------------- losses

struct LossParts {
  double total = 0.0;
  double st = 0.0;
  double ce = 0.0;
};

/**
 * L_st = mean over elements of (s_pred - s_target)^2 and
 * L_ce = CrossEntropy(x_1, x_t + s_t) averaged over rows; with
 * `ce_time_scaled` the logits are x_t + (1 - t) s_t instead.
 */
template <typename T>
LossParts shortcut_losses(const nn::Matrix<T>& s_pred, const nn::Matrix<T>& s_target,
                          const nn::Matrix<T>& x_t, const nn::Matrix<T>& s_t, double t,
                          const std::vector<SegmentId>& route, bool ce_time_scaled = false);

enum class LossMode {
  kFlow,         ///< d = 0, target x_1 - x_0
  kConsistency,  ///< target from two chained d-steps, prediction at 2d
  kCombined,     ///< flow and consistency shortcut terms summed per sample
};

struct TrainingSample {
  EncoderInput input;
  std::vector<SegmentId> route;
};

struct LossConfig {
  double consistency_step = 0.5;  ///< d for consistency samples; the model is queried at 2d
  int t_grid = 8;                 ///< t drawn uniformly from {0, 1/t_grid, ...}
  bool ce_time_scaled = false;
};

/**
 * Mean loss over a batch with rows pooled across trajectories. Draws x_0 and
 * t from `rng`. When `accumulate` is set, parameter gradients of the loss are
 * added to the model's grad buffers; shortcut targets never receive gradient.
 */
template <typename T>
LossParts compute_loss(DiffMMModel<T>& model, const std::vector<const TrainingSample*>& batch,
                       LossMode mode, const LossConfig& cfg, Rng& rng, bool accumulate);

// ---------------------------------------------------------------- training

struct TrainConfig {
  int steps = 2000;
  int batch_size = 16;
  int warmup_batches = 500;  ///< k: flow-matching batches before consistency training
  bool combined_objective = false;
  double lr = 1e-3;
  double grad_clip = 1.0;  ///< global L2 norm limit before each Adam step; 0 disables
  LossConfig loss;
  std::size_t val_max = 200;  ///< validation trajectories scored per epoch (0: all)
  std::uint64_t seed = 7;
  std::filesystem::path metrics_csv;  ///< epoch,step,L,L_st,L_ce,val_acc
  std::filesystem::path steps_csv;    ///< step,L,L_st,L_ce
  bool verbose = false;
};

struct EpochRecord {
  int epoch = 0;
  int step = 0;  ///< steps completed at the end of the epoch
  LossParts loss;
  double val_acc = 0.0;
};

struct TrainResult {
  std::vector<LossParts> step_losses;
  std::vector<EpochRecord> epochs;
  double best_val_acc = -1.0;
  int best_epoch = -1;
};

std::vector<TrainingSample> make_samples(const DiffMMModel<float>& model,
                                         const std::vector<MatchedTrajectory>& data,
                                         const SpatialIndex& idx);

/**
 * Joint Adam training of encoder and denoiser. The first `warmup_batches`
 * steps use flow targets, later ones self-consistency targets. After every
 * epoch the validation accuracy of one-step inference is measured and the best
 * parameters are restored at the end. Throws NumericalError on a non-finite loss.
 */
TrainResult train(DiffMMModel<float>& model, const std::vector<TrainingSample>& train_set,
                  const std::vector<TrainingSample>& valid_set, const std::vector<std::string>& valid_ids,
                  const TrainConfig& cfg);

// ---------------------------------------------------------------- inference

struct InferenceConfig {
  int steps = 1;  ///< M; d = 1/M
  bool restrict_candidates = false;
  std::uint64_t seed = 7;
};

/// Per-row argmax with ties to the lowest id; limited to `allowed[i]` when non-empty.
template <typename T>
std::vector<SegmentId> argmax_rows(const nn::Matrix<T>& x,
                                   const std::vector<std::vector<CandidateFeature>>* allowed = nullptr);

/// M Euler steps from x ~ N(0, I) drawn from (seed, "infer", hash(traj_id)), then per-row argmax.
template <typename T>
std::vector<SegmentId> infer(const DiffMMModel<T>& model, const EncoderInput& input,
                             const std::string& traj_id, const InferenceConfig& cfg);

/// Same as infer() for several trajectories packed into one pass.
template <typename T>
std::vector<std::vector<SegmentId>> infer_batch(const DiffMMModel<T>& model,
                                                std::span<const EncoderInput* const> inputs,
                                                std::span<const std::string> ids,
                                                const InferenceConfig& cfg);

/// Trajectories per packed inference pass used by validation and evaluation.
inline constexpr std::size_t kInferBatch = 64;

template <typename T>
std::vector<SegmentId> infer(const DiffMMModel<T>& model, const Trajectory& traj,
                             const SpatialIndex& idx, const InferenceConfig& cfg) {
  return infer(model, model.prepare(traj, idx), traj.id, cfg);
}

}  // namespace diffmm

#endif  // DIFFMM_SHORTCUT_HPP_
