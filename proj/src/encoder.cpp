#include "diffmm/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace diffmm {

using nn::ColVector;
using nn::RowVector;

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoTrans: return "no_trans";
    case Variant::kNoAttn: return "no_attn";
    case Variant::kNoShortcut: return "no_shortcut";
  }
  return "full";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::kFull, Variant::kNoTrans, Variant::kNoAttn, Variant::kNoShortcut}) {
    if (to_string(v) == name) return v;
  }
  throw std::invalid_argument("unknown variant '" + std::string(name) +
                              "' (expected full, no_trans, no_attn or no_shortcut)");
}

NormalizationBounds compute_bounds(std::span<const MatchedTrajectory> data) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  NormalizationBounds b{inf, -inf, inf, -inf, inf, -inf};
  for (const auto& mt : data) {
    const auto& pts = mt.trajectory.points;
    if (pts.empty()) continue;
    for (const auto& p : pts) {
      b.lat_lo = std::min(b.lat_lo, p.lat);
      b.lat_hi = std::max(b.lat_hi, p.lat);
      b.lng_lo = std::min(b.lng_lo, p.lng);
      b.lng_hi = std::max(b.lng_hi, p.lng);
      const double dt = p.t - pts.front().t;
      b.t_lo = std::min(b.t_lo, dt);
      b.t_hi = std::max(b.t_hi, dt);
    }
  }
  if (!(b.lat_lo <= b.lat_hi)) throw std::invalid_argument("compute_bounds: no points");
  auto widen = [](double& lo, double& hi, double pad) {
    if (hi <= lo) {
      lo -= pad;
      hi += pad;
    }
  };
  widen(b.lat_lo, b.lat_hi, 1e-3);
  widen(b.lng_lo, b.lng_hi, 1e-3);
  widen(b.t_lo, b.t_hi, 1.0);
  return b;
}

EncoderInput prepare_encoder_input(const Trajectory& traj, const SpatialIndex& idx,
                                   const NormalizationBounds& bounds, const EncoderConfig& cfg) {
  const auto& pts = traj.points;
  if (pts.empty()) throw DataError("trajectory " + traj.id + " has no points");
  const auto& net = idx.network();
  const std::size_t l = pts.size();
  EncoderInput in;
  in.point_features.resize(static_cast<Index>(l), 3);
  in.candidates.resize(l);
  for (std::size_t i = 0; i < l; ++i) {
    const auto r = static_cast<Index>(i);
    in.point_features(r, 0) = geo::min_max_normalize(pts[i].lat, bounds.lat_lo, bounds.lat_hi);
    in.point_features(r, 1) = geo::min_max_normalize(pts[i].lng, bounds.lng_lo, bounds.lng_hi);
    in.point_features(r, 2) =
        geo::min_max_normalize(pts[i].t - pts.front().t, bounds.t_lo, bounds.t_hi);

    const auto found = idx.candidates_within(pts[i].position(), cfg.delta_m);
    const double rank_den = static_cast<double>(std::max<std::size_t>(found.size(), 2) - 1);
    auto& out = in.candidates[i];
    out.reserve(found.size());
    for (std::size_t k = 0; k < found.size(); ++k) {
      const auto& seg = net.segment(found[k].segment);
      CandidateFeature f;
      f.segment = found[k].segment;
      f.proj_dist_m = found[k].projection.distance_m;
      f.rank = static_cast<double>(k) / rank_den;
      if (i > 0) {
        f.cos_prev = geo::direction_cosine(pts[i - 1].position(), pts[i].position(),
                                           seg.polyline.front(), seg.polyline.back())
                         .value;
      }
      if (i + 1 < l) {
        f.cos_next = geo::direction_cosine(pts[i].position(), pts[i + 1].position(),
                                           seg.polyline.front(), seg.polyline.back())
                         .value;
      }
      out.push_back(f);
    }
  }
  return in;
}

template <typename T>
TrajectoryEncoder<T>::TrajectoryEncoder(nn::ParameterSet<T>& params, const EncoderConfig& cfg,
                                        std::size_t segment_count, Variant variant)
    : cfg_(cfg), segment_count_(segment_count), variant_(variant) {
  if (cfg.d_emb <= 0 || cfg.d_a <= 0 || cfg.n_layers < 0 || cfg.ffn_mult <= 0 || !(cfg.delta_m > 0)) {
    throw std::invalid_argument("invalid encoder config");
  }
  if (segment_count == 0) throw std::invalid_argument("encoder needs at least one segment");
  const Index de = cfg.d_emb;
  input_ = nn::Linear<T>(params, "enc.input", 3, de);
  if (variant == Variant::kNoTrans) {
    point_ffn_ = nn::FeedForward<T>(params, "enc.point_ffn", de, cfg.ffn_mult * de);
  } else {
    for (int k = 0; k < cfg.n_layers; ++k) {
      layers_.emplace_back(params, "enc.layer" + std::to_string(k), de, cfg.n_heads,
                           cfg.ffn_mult * de);
    }
  }
  segment_table_ = &params.add("enc.segment_table", static_cast<Index>(segment_count), de);
  segment_mlp_ = nn::FeedForward<T>(params, "enc.segment_mlp", de + cfg.candidate_scalars(), de, de);
  if (variant != Variant::kNoAttn) {
    scorer_ = nn::FeedForward<T>(params, "enc.scorer", 2 * de, cfg.d_a, 1);
  }
  no_candidate_ = &params.add("enc.no_candidate", 1, de);
}

template <typename T>
void TrajectoryEncoder<T>::init(Rng& rng) {
  auto init_linear = [&](const nn::Linear<T>& lin) { nn::init_xavier(lin.weight(), rng); };
  init_linear(input_);
  for (const auto& layer : layers_) {
    nn::init_xavier(layer.attention().wq(), rng);
    nn::init_xavier(layer.attention().wk(), rng);
    nn::init_xavier(layer.attention().wv(), rng);
    nn::init_xavier(layer.attention().wo(), rng);
    init_linear(layer.ffn().inner());
    init_linear(layer.ffn().outer());
  }
  if (variant_ == Variant::kNoTrans) {
    init_linear(point_ffn_.inner());
    init_linear(point_ffn_.outer());
  }
  nn::init_xavier(*segment_table_, rng);
  init_linear(segment_mlp_.inner());
  init_linear(segment_mlp_.outer());
  if (variant_ != Variant::kNoAttn) {
    init_linear(scorer_.inner());
    init_linear(scorer_.outer());
  }
}

template <typename T>
typename TrajectoryEncoder<T>::Matrix TrajectoryEncoder<T>::point_representation(
    const Matrix& features, Cache& cache, const nn::Segments* sequences) const {
  if (features.cols() != 3 || features.rows() == 0) {
    throw std::invalid_argument("point features must be l x 3, got " + nn::shape_of(features));
  }
  cache.x0 = features;
  cache.p1 = input_.forward(features);
  if (variant_ == Variant::kNoTrans) {
    return point_ffn_.forward(cache.p1, cache.point_ffn);
  }
  cache.layers.resize(layers_.size());
  Matrix h = cache.p1;
  for (std::size_t k = 0; k < layers_.size(); ++k) h = layers_[k].forward(h, cache.layers[k], sequences);
  return h;
}

template <typename T>
typename TrajectoryEncoder<T>::Matrix TrajectoryEncoder<T>::segment_embeddings(
    std::span<const CandidateFeature> cands, FusionCache& fc) const {
  const Index de = cfg_.d_emb;
  const auto n = static_cast<Index>(cands.size());
  fc.segments.resize(cands.size());
  fc.e1.resize(n, de + cfg_.candidate_scalars());
  for (Index j = 0; j < n; ++j) {
    const auto& c = cands[static_cast<std::size_t>(j)];
    if (c.segment < 0 || static_cast<std::size_t>(c.segment) >= segment_count_) {
      throw std::invalid_argument("segment id " + std::to_string(c.segment) + " out of range [0, " +
                                  std::to_string(segment_count_) + ")");
    }
    fc.segments[static_cast<std::size_t>(j)] = c.segment;
    fc.e1.row(j).head(de) = segment_table_->value.row(c.segment);
    fc.e1(j, de) = static_cast<T>(c.cos_prev);
    fc.e1(j, de + 1) = static_cast<T>(c.cos_next);
    fc.e1(j, de + 2) = static_cast<T>(c.proj_dist_m / cfg_.delta_m);
    if (cfg_.rank_feature) fc.e1(j, de + 3) = static_cast<T>(c.rank);
  }
  if (n == 0) {
    fc.embeddings.resize(0, de);
    return fc.embeddings;
  }
  fc.embeddings = segment_mlp_.forward(fc.e1, fc.segment_mlp);
  return fc.embeddings;
}

namespace {

template <typename T>
void softmax_range(const nn::Matrix<T>& scores, Index begin, Index end, ColVector<T>& w) {
  T mx = scores(begin, 0);
  for (Index j = begin + 1; j < end; ++j) mx = std::max(mx, scores(j, 0));
  T sum = 0;
  for (Index j = begin; j < end; ++j) {
    w(j) = std::exp(scores(j, 0) - mx);
    sum += w(j);
  }
  for (Index j = begin; j < end; ++j) w(j) /= sum;
}

}  // namespace

template <typename T>
RowVector<T> TrajectoryEncoder<T>::attention_fusion(const RowVector<T>& point_row,
                                                    const Matrix& embeddings,
                                                    ColVector<T>* weights_out) const {
  const Index de = cfg_.d_emb;
  const Index n = embeddings.rows();
  if (point_row.cols() != de || (n > 0 && embeddings.cols() != de)) {
    throw std::invalid_argument("attention_fusion: expected width " + std::to_string(de));
  }
  ColVector<T> w(n);
  if (n == 0) {
    if (weights_out) *weights_out = w;
    return no_candidate_->value.row(0);
  }
  if (variant_ == Variant::kNoAttn) {
    w.setConstant(T(1) / static_cast<T>(n));
  } else {
    Matrix z(n, 2 * de);
    z.leftCols(de).rowwise() = point_row;
    z.rightCols(de) = embeddings;
    typename nn::FeedForward<T>::Cache sc;
    const Matrix mu = scorer_.forward(z, sc);
    softmax_range(mu, 0, n, w);
  }
  if (weights_out) *weights_out = w;
  return w.transpose() * embeddings;
}

template <typename T>
typename TrajectoryEncoder<T>::Matrix TrajectoryEncoder<T>::fuse(const Matrix& points,
                                                                 FusionCache& fc) const {
  const Index de = cfg_.d_emb;
  const Index l = points.rows();
  const Index n = fc.embeddings.rows();
  fc.weights.resize(n);
  if (n > 0 && variant_ != Variant::kNoAttn) {
    fc.scorer_in.resize(n, 2 * de);
    for (Index j = 0; j < n; ++j) fc.scorer_in.row(j).head(de) = points.row(fc.owner[j]);
    fc.scorer_in.rightCols(de) = fc.embeddings;
    const Matrix mu = scorer_.forward(fc.scorer_in, fc.scorer);
    for (Index i = 0; i < l; ++i) {
      if (fc.offsets[i + 1] > fc.offsets[i]) softmax_range(mu, fc.offsets[i], fc.offsets[i + 1], fc.weights);
    }
  } else {
    for (Index i = 0; i < l; ++i) {
      const Index cnt = fc.offsets[i + 1] - fc.offsets[i];
      for (Index j = fc.offsets[i]; j < fc.offsets[i + 1]; ++j) fc.weights(j) = T(1) / static_cast<T>(cnt);
    }
  }
  Matrix fused(l, de);
  for (Index i = 0; i < l; ++i) {
    const Index b = fc.offsets[i], e = fc.offsets[i + 1];
    if (b == e) {
      fused.row(i) = no_candidate_->value.row(0);
      continue;
    }
    fused.row(i) = fc.weights.segment(b, e - b).transpose() * fc.embeddings.middleRows(b, e - b);
  }
  return fused;
}

template <typename T>
typename TrajectoryEncoder<T>::Matrix TrajectoryEncoder<T>::forward(const EncoderInput& in,
                                                                    Cache& cache) const {
  const EncoderInput* one[] = {&in};
  return forward(std::span<const EncoderInput* const>(one), cache);
}

template <typename T>
typename TrajectoryEncoder<T>::Matrix TrajectoryEncoder<T>::forward(
    std::span<const EncoderInput* const> inputs, Cache& cache) const {
  if (inputs.empty()) throw std::invalid_argument("empty encoder input");
  const Index de = cfg_.d_emb;
  auto& seq = cache.sequences;
  seq.assign(1, 0);
  for (const auto* in : inputs) {
    const auto l = static_cast<Index>(in->length());
    if (l == 0 || in->point_features.rows() != l) throw std::invalid_argument("empty encoder input");
    seq.push_back(seq.back() + l);
  }
  const Index rows = seq.back();
  Matrix features(rows, 3);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    features.middleRows(seq[k], seq[k + 1] - seq[k]) = inputs[k]->point_features.template cast<T>();
  }
  cache.points = point_representation(features, cache, inputs.size() > 1 ? &seq : nullptr);

  auto& fc = cache.fusion;
  fc.offsets.assign(static_cast<std::size_t>(rows) + 1, 0);
  std::vector<CandidateFeature> flat;
  fc.owner.clear();
  Index i = 0;
  for (const auto* in : inputs) {
    for (const auto& c : in->candidates) {
      flat.insert(flat.end(), c.begin(), c.end());
      fc.owner.insert(fc.owner.end(), c.size(), i);
      fc.offsets[i + 1] = fc.offsets[i] + static_cast<Index>(c.size());
      ++i;
    }
  }
  segment_embeddings(flat, fc);

  Matrix out(rows, 2 * de);
  out.leftCols(de) = cache.points;
  out.rightCols(de) = fuse(cache.points, fc);
  return out;
}

template <typename T>
void TrajectoryEncoder<T>::fuse_backward(const FusionCache& fc, const Matrix& d_fused,
                                         Matrix& d_points) const {
  const Index de = cfg_.d_emb;
  const Index l = d_fused.rows();
  const Index n = fc.embeddings.rows();
  Matrix d_emb = Matrix::Zero(n, de);
  Matrix d_mu(n, 1);
  for (Index i = 0; i < l; ++i) {
    const Index b = fc.offsets[i], e = fc.offsets[i + 1];
    if (b == e) {
      no_candidate_->grad.row(0) += d_fused.row(i);
      continue;
    }
    T wg = 0;
    for (Index j = b; j < e; ++j) {
      d_emb.row(j) += fc.weights(j) * d_fused.row(i);
      const T g = fc.embeddings.row(j).dot(d_fused.row(i));
      d_mu(j, 0) = g;
      wg += fc.weights(j) * g;
    }
    for (Index j = b; j < e; ++j) d_mu(j, 0) = fc.weights(j) * (d_mu(j, 0) - wg);
  }
  if (n == 0) return;
  if (variant_ != Variant::kNoAttn) {
    const Matrix dz = scorer_.backward(fc.scorer, d_mu);
    for (Index j = 0; j < n; ++j) d_points.row(fc.owner[j]) += dz.row(j).head(de);
    d_emb += dz.rightCols(de);
  }
  const Matrix de1 = segment_mlp_.backward(fc.segment_mlp, d_emb);
  for (Index j = 0; j < n; ++j) {
    segment_table_->grad.row(fc.segments[static_cast<std::size_t>(j)]) += de1.row(j).head(de);
  }
}

template <typename T>
void TrajectoryEncoder<T>::backward(const Cache& cache, const Matrix& d_cond) const {
  const Index de = cfg_.d_emb;
  if (d_cond.cols() != 2 * de || d_cond.rows() != cache.points.rows()) {
    throw std::invalid_argument("encoder backward: gradient " + nn::shape_of(d_cond) +
                                " does not match condition " +
                                nn::shape_str(cache.points.rows(), 2 * de));
  }
  Matrix d_points = d_cond.leftCols(de);
  fuse_backward(cache.fusion, d_cond.rightCols(de), d_points);
  Matrix dh = d_points;
  if (variant_ == Variant::kNoTrans) {
    dh = point_ffn_.backward(cache.point_ffn, dh);
  } else {
    for (std::size_t k = layers_.size(); k-- > 0;) dh = layers_[k].backward(cache.layers[k], dh);
  }
  input_.backward_params(cache.x0, dh);
}

template class TrajectoryEncoder<float>;
template class TrajectoryEncoder<double>;

}  // namespace diffmm
