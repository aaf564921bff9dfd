#ifndef DIFFMM_ENCODER_HPP_
#define DIFFMM_ENCODER_HPP_

#include <span>
#include <string_view>
#include <vector>

#include "diffmm/nn/layers.hpp"
#include "diffmm/road_network.hpp"
#include "diffmm/trajectory.hpp"

namespace diffmm {

using nn::Index;

/// Model variants used by the ablation study.
enum class Variant {
  kFull,        ///< transformer point encoder, attention fusion, step-size conditioning
  kNoTrans,     ///< per-point FFN instead of the transformer encoder
  kNoAttn,      ///< uniform mean over candidates instead of attention
  kNoShortcut,  ///< no step-size conditioning; plain flow matching
};

std::string_view to_string(Variant v);
/// Accepts full, no_trans, no_attn, no_shortcut. Throws std::invalid_argument otherwise.
Variant parse_variant(std::string_view name);

struct EncoderConfig {
  int d_emb = 128;
  int n_layers = 2;
  int n_heads = 4;
  int d_a = 64;        ///< hidden width of the fusion scorer
  int ffn_mult = 4;    ///< transformer FFN width = ffn_mult * d_emb
  double delta_m = 50.0;
  /// Fourth candidate scalar (normalised distance rank), giving d_emb + 4
  /// inputs to the segment MLP; false uses the three geometric scalars only.
  bool rank_feature = true;

  int d_cond() const { return 2 * d_emb; }
  int candidate_scalars() const { return rank_feature ? 4 : 3; }
};

/// Min-max bounds for the three point features. The time feature is seconds
/// elapsed since the first point of the trajectory.
struct NormalizationBounds {
  double lat_lo = 0.0, lat_hi = 1.0;
  double lng_lo = 0.0, lng_hi = 1.0;
  double t_lo = 0.0, t_hi = 1.0;
};

/// Bounds over every point of `data` (the training split). Degenerate ranges
/// are widened so that hi > lo always holds.
NormalizationBounds compute_bounds(std::span<const MatchedTrajectory> data);

struct CandidateFeature {
  SegmentId segment = 0;
  double cos_prev = 0.0;     ///< vs p_{i-1} -> p_i; 0 for the first point
  double cos_next = 0.0;     ///< vs p_i -> p_{i+1}; 0 for the last point
  double proj_dist_m = 0.0;  ///< <= delta_m
  double rank = 0.0;         ///< distance rank / max(n - 1, 1), in [0, 1]
};

/// Parameter-free encoder input: normalised point features and candidate
/// features. Computed once per trajectory and reused across epochs.
struct EncoderInput {
  nn::Matrix<double> point_features;                     ///< l x 3
  std::vector<std::vector<CandidateFeature>> candidates;  ///< per point

  std::size_t length() const { return candidates.size(); }
};

EncoderInput prepare_encoder_input(const Trajectory& traj, const SpatialIndex& idx,
                                   const NormalizationBounds& bounds, const EncoderConfig& cfg);

/**
 * Road segment-aware trajectory encoder producing the condition matrix
 * C = [P | F] of shape l x 2 d_emb, where P is the point representation and
 * row i of F fuses the embeddings of point i's candidate segments.
 */
template <typename T>
class TrajectoryEncoder {
 public:
  using Matrix = nn::Matrix<T>;

  struct FusionCache {
    std::vector<Index> offsets;  ///< candidate rows of point i: [offsets[i], offsets[i+1])
    std::vector<Index> owner;    ///< point of each candidate row
    std::vector<SegmentId> segments;
    Matrix e1;                   ///< stacked [W^S row | scalars]
    typename nn::FeedForward<T>::Cache segment_mlp;
    Matrix embeddings;           ///< N x d_emb
    Matrix scorer_in;            ///< N x 2 d_emb
    typename nn::FeedForward<T>::Cache scorer;
    nn::ColVector<T> weights;    ///< N
  };

  struct Cache {
    Matrix x0;
    Matrix p1;
    std::vector<typename nn::TransformerEncoderLayer<T>::Cache> layers;
    typename nn::FeedForward<T>::Cache point_ffn;
    Matrix points;  ///< P, l x d_emb
    FusionCache fusion;
    nn::Segments sequences;  ///< row offsets when several inputs are packed
  };

  TrajectoryEncoder(nn::ParameterSet<T>& params, const EncoderConfig& cfg, std::size_t segment_count,
                    Variant variant);

  void init(Rng& rng);

  /// l x d_cond condition matrix.
  Matrix forward(const EncoderInput& in, Cache& cache) const;
  /// Condition matrices of several inputs stacked row-wise; input k occupies
  /// rows [cache.sequences[k], cache.sequences[k+1]).
  Matrix forward(std::span<const EncoderInput* const> inputs, Cache& cache) const;
  /// Accumulates parameter gradients from dL/dC.
  void backward(const Cache& cache, const Matrix& d_cond) const;

  /// P = TransEncoder(X0 W_1 + b_1) for l x 3 normalised features (FFN for kNoTrans).
  Matrix point_representation(const Matrix& features, Cache& cache,
                              const nn::Segments* sequences = nullptr) const;

  /// MLP embedding of candidates: rows of W^S concatenated with the scalars.
  /// Throws std::invalid_argument for a segment id outside [0, |E|).
  Matrix segment_embeddings(std::span<const CandidateFeature> cands, FusionCache& cache) const;

  /**
   * Fused representation of one point from its candidate embeddings: softmax
   * over MLP scores of [P_i | e_j] (uniform mean for kNoAttn), or the learned
   * no-candidate vector when `embeddings` has no rows. Weights land in
   * `weights_out` when non-null.
   */
  nn::RowVector<T> attention_fusion(const nn::RowVector<T>& point_row, const Matrix& embeddings,
                                    nn::ColVector<T>* weights_out = nullptr) const;

  const EncoderConfig& config() const { return cfg_; }
  Variant variant() const { return variant_; }
  std::size_t segment_count() const { return segment_count_; }

 private:
  Matrix fuse(const Matrix& points, FusionCache& fc) const;
  void fuse_backward(const FusionCache& fc, const Matrix& d_fused, Matrix& d_points) const;

  EncoderConfig cfg_;
  std::size_t segment_count_;
  Variant variant_;
  nn::Linear<T> input_;
  std::vector<nn::TransformerEncoderLayer<T>> layers_;
  nn::FeedForward<T> point_ffn_;
  nn::Parameter<T>* segment_table_;  ///< W^S, |E| x d_emb
  nn::FeedForward<T> segment_mlp_;
  nn::FeedForward<T> scorer_;
  nn::Parameter<T>* no_candidate_;
};

extern template class TrajectoryEncoder<float>;
extern template class TrajectoryEncoder<double>;

}  // namespace diffmm

#endif  // DIFFMM_ENCODER_HPP_
