#include "diffmm/shortcut.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>
#include <stdexcept>

#include <boost/random/normal_distribution.hpp>

#include "diffmm/csv.hpp"

namespace diffmm {

using nn::Matrix;

namespace {

constexpr double kTimeSlack = 1e-9;

/// Standard normal noise. Draws come from a 32-bit engine seeded off `rng`.
template <typename T>
Matrix<T> gaussian(Index rows, Index cols, Rng& rng) {
  const std::uint64_t a = rng(), b = rng();
  std::seed_seq seq{a & 0xffffffffu, a >> 32, b & 0xffffffffu, b >> 32};
  std::mt19937 eng(seq);
  boost::random::normal_distribution<T> n(T(0), T(1));
  Matrix<T> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(eng);
  return m;
}

}  // namespace

template <typename T>
Matrix<T> interpolate(const Matrix<T>& x0, const Matrix<T>& x1, double t) {
  if (x0.rows() != x1.rows() || x0.cols() != x1.cols()) {
    throw std::invalid_argument("interpolate: shapes " + nn::shape_of(x0) + " and " + nn::shape_of(x1));
  }
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("interpolate: t outside [0, 1]");
  if (t == 0.0) return x0;
  if (t == 1.0) return x1;
  return static_cast<T>(1.0 - t) * x0 + static_cast<T>(t) * x1;
}

template <typename T>
ShortcutField<T> bind_condition(const DiTDenoiser<T>& dit, const Matrix<T>& cond) {
  return [&dit, cond](const Matrix<T>& x, double t, double d) { return dit.forward(x, t, d, cond); };
}

template <typename T>
Matrix<T> shortcut_step(const ShortcutField<T>& s, const Matrix<T>& x, double t, double d) {
  if (t + d > 1.0 + kTimeSlack) {
    throw std::invalid_argument("shortcut step overshoots t = 1 (t=" + std::to_string(t) +
                                ", d=" + std::to_string(d) + ")");
  }
  if (d == 0.0) return x;
  return x + s(x, t, d) * static_cast<T>(d);
}

template <typename T>
Matrix<T> self_consistency_target(const ShortcutField<T>& s, const Matrix<T>& x, double t, double d) {
  if (t + 2.0 * d > 1.0 + kTimeSlack) {
    throw std::invalid_argument("self-consistency target needs t + 2d <= 1 (t=" + std::to_string(t) +
                                ", d=" + std::to_string(d) + ")");
  }
  const Matrix<T> s_t = s(x, t, d);
  const Matrix<T> x_next = x + s_t * static_cast<T>(d);
  const Matrix<T> s_next = s(x_next, t + d, d);
  return (s_t + s_next) * T(0.5);
}

template <typename T>
Matrix<T> one_hot_route(const std::vector<SegmentId>& route, Index segment_count) {
  Matrix<T> x = Matrix<T>::Zero(static_cast<Index>(route.size()), segment_count);
  for (std::size_t i = 0; i < route.size(); ++i) {
    if (route[i] < 0 || route[i] >= segment_count) {
      throw std::invalid_argument("route segment id " + std::to_string(route[i]) + " out of range");
    }
    x(static_cast<Index>(i), route[i]) = T(1);
  }
  return x;
}

template <typename T>
LossParts shortcut_losses(const Matrix<T>& s_pred, const Matrix<T>& s_target, const Matrix<T>& x_t,
                          const Matrix<T>& s_t, double t, const std::vector<SegmentId>& route,
                          bool ce_time_scaled) {
  if (s_pred.rows() != s_target.rows() || s_pred.cols() != s_target.cols()) {
    throw std::invalid_argument("shortcut loss: shapes " + nn::shape_of(s_pred) + " and " +
                                nn::shape_of(s_target));
  }
  LossParts out;
  out.st = (s_pred - s_target).template cast<double>().squaredNorm() / static_cast<double>(s_pred.size());
  const T scale = ce_time_scaled ? static_cast<T>(1.0 - t) : T(1);
  const Matrix<T> logits = x_t + s_t * scale;
  out.ce = nn::cross_entropy<T>(route, logits);
  out.total = out.st + out.ce;
  return out;
}

template <typename T>
LossParts compute_loss(DiffMMModel<T>& model, const std::vector<const TrainingSample*>& batch,
                       LossMode mode, const LossConfig& cfg, Rng& rng, bool accumulate) {
  if (batch.empty()) throw std::invalid_argument("compute_loss: empty batch");
  if (cfg.t_grid < 1) throw std::invalid_argument("compute_loss: t_grid must be positive");
  const auto& enc = model.encoder();
  const auto& dit = model.denoiser();
  const auto n_seg = static_cast<Index>(model.segment_count());
  const double d = cfg.consistency_step;
  if (mode != LossMode::kFlow && !(d > 0.0 && 2.0 * d <= 1.0 + kTimeSlack)) {
    throw std::invalid_argument("consistency step must lie in (0, 1/2]");
  }
  const bool flow = mode == LossMode::kFlow || mode == LossMode::kCombined;
  const bool cons = mode == LossMode::kConsistency || mode == LossMode::kCombined;
  // grid points t = k / t_grid with t + 2d <= 1
  const int cons_points =
      static_cast<int>(std::floor((1.0 - 2.0 * d) * cfg.t_grid + kTimeSlack)) + 1;

  const std::size_t nb = batch.size();
  std::vector<const EncoderInput*> inputs;
  nn::Segments seq{0};
  std::vector<SegmentId> route;
  for (const TrainingSample* sample : batch) {
    const auto l = static_cast<Index>(sample->route.size());
    if (static_cast<Index>(sample->input.length()) != l) {
      throw std::invalid_argument("training sample route and input lengths differ");
    }
    inputs.push_back(&sample->input);
    seq.push_back(seq.back() + l);
    route.insert(route.end(), sample->route.begin(), sample->route.end());
  }
  const Index rows = seq.back();
  const double st_norm = static_cast<double>(rows) * static_cast<double>(n_seg);

  typename TrajectoryEncoder<T>::Cache enc_cache;
  const Matrix<T> cond = enc.forward(std::span<const EncoderInput* const>(inputs), enc_cache);
  const Matrix<T> x1 = one_hot_route<T>(route, n_seg);
  Matrix<T> x0(rows, n_seg);
  std::vector<double> t_flow(nb, 0.0), t_cons(nb, 0.0);
  std::uniform_int_distribution<int> pick_flow(0, cfg.t_grid - 1);
  std::uniform_int_distribution<int> pick_cons(0, std::max(cons_points, 1) - 1);
  for (std::size_t k = 0; k < nb; ++k) {
    x0.middleRows(seq[k], seq[k + 1] - seq[k]) = gaussian<T>(seq[k + 1] - seq[k], n_seg, rng);
    if (flow) t_flow[k] = static_cast<double>(pick_flow(rng)) / cfg.t_grid;
    if (cons) t_cons[k] = static_cast<double>(pick_cons(rng)) / cfg.t_grid;
  }
  auto interpolate_all = [&](const std::vector<double>& t) {
    Matrix<T> xt(rows, n_seg);
    for (std::size_t k = 0; k < nb; ++k) {
      const Index b = seq[k], n = seq[k + 1] - seq[k];
      xt.middleRows(b, n) = interpolate<T>(x0.middleRows(b, n), x1.middleRows(b, n), t[k]);
    }
    return xt;
  };
  auto ce_scale = [&](double t) { return cfg.ce_time_scaled ? static_cast<T>(1.0 - t) : T(1); };

  LossParts sum;
  Matrix<T> dcond = Matrix<T>::Zero(cond.rows(), cond.cols());
  auto add_ce = [&](const Matrix<T>& xt, const Matrix<T>& st, const std::vector<double>& t, Matrix<T>& ds) {
    Matrix<T> logits = xt;
    for (std::size_t k = 0; k < nb; ++k) {
      const Index b = seq[k], n = seq[k + 1] - seq[k];
      logits.middleRows(b, n) += st.middleRows(b, n) * ce_scale(t[k]);
    }
    Matrix<T> g;
    sum.ce += nn::cross_entropy<T>(route, logits, accumulate ? &g : nullptr);
    if (!accumulate) return;
    for (std::size_t k = 0; k < nb; ++k) {
      const Index b = seq[k], n = seq[k + 1] - seq[k];
      ds.middleRows(b, n) += g.middleRows(b, n) * ce_scale(t[k]);
    }
  };

  if (flow) {
    const std::vector<double> zero(nb, 0.0);
    const Matrix<T> xt = interpolate_all(t_flow);
    typename DiTDenoiser<T>::Cache cache;
    const Matrix<T> s = dit.forward(xt, seq, t_flow, zero, cond, cache);
    const Matrix<T> diff = s - (x1 - x0);
    sum.st += diff.template cast<double>().squaredNorm() / st_norm;
    Matrix<T> ds = diff * static_cast<T>(2.0 / st_norm);
    add_ce(xt, s, t_flow, ds);
    if (accumulate) dcond += dit.backward(cache, ds);
  }
  if (cons) {
    const std::vector<double> step(nb, d), step2(nb, 2.0 * d);
    std::vector<double> t_next(nb);
    for (std::size_t k = 0; k < nb; ++k) t_next[k] = t_cons[k] + d;
    const Matrix<T> xt = interpolate_all(t_cons);
    typename DiTDenoiser<T>::Cache cache_t;
    const Matrix<T> s_t = dit.forward(xt, seq, t_cons, step, cond, cache_t);
    const Matrix<T> x_next = xt + s_t * static_cast<T>(d);
    typename DiTDenoiser<T>::Cache scratch;
    const Matrix<T> s_next = dit.forward(x_next, seq, t_next, step, cond, scratch);
    const Matrix<T> target = (s_t + s_next) * T(0.5);
    typename DiTDenoiser<T>::Cache cache_2d;
    const Matrix<T> s_2d = dit.forward(xt, seq, t_cons, step2, cond, cache_2d);
    const Matrix<T> diff = s_2d - target;
    sum.st += diff.template cast<double>().squaredNorm() / st_norm;
    if (accumulate) dcond += dit.backward(cache_2d, Matrix<T>(diff * static_cast<T>(2.0 / st_norm)));
    if (mode == LossMode::kConsistency) {
      Matrix<T> ds = Matrix<T>::Zero(rows, n_seg);
      add_ce(xt, s_t, t_cons, ds);
      if (accumulate) dcond += dit.backward(cache_t, ds);
    }
  }
  if (accumulate) enc.backward(enc_cache, dcond);
  sum.total = sum.st + sum.ce;
  if (!std::isfinite(sum.total)) {
    throw NumericalError("non-finite loss (L_st=" + std::to_string(sum.st) +
                         ", L_ce=" + std::to_string(sum.ce) + ")");
  }
  return sum;
}

std::vector<TrainingSample> make_samples(const DiffMMModel<float>& model,
                                         const std::vector<MatchedTrajectory>& data,
                                         const SpatialIndex& idx) {
  std::vector<TrainingSample> out;
  out.reserve(data.size());
  for (const auto& mt : data) {
    validate(mt, model.segment_count());
    out.push_back({model.prepare(mt.trajectory, idx), mt.route});
  }
  return out;
}

namespace {

double validation_accuracy(const DiffMMModel<float>& model, const std::vector<TrainingSample>& valid,
                           const std::vector<std::string>& ids, std::size_t limit, std::uint64_t seed) {
  const std::size_t n = limit == 0 ? valid.size() : std::min(limit, valid.size());
  if (n == 0) return 0.0;
  InferenceConfig ic;
  ic.seed = seed;
  double acc = 0.0;
  for (std::size_t b = 0; b < n; b += kInferBatch) {
    const std::size_t e = std::min(n, b + kInferBatch);
    std::vector<const EncoderInput*> inputs;
    for (std::size_t k = b; k < e; ++k) inputs.push_back(&valid[k].input);
    const auto preds = infer_batch(model, std::span<const EncoderInput* const>(inputs),
                                   std::span<const std::string>(ids.data() + b, e - b), ic);
    for (std::size_t k = b; k < e; ++k) {
      const auto& pred = preds[k - b];
      std::size_t hits = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == valid[k].route[i];
      acc += static_cast<double>(hits) / static_cast<double>(pred.size());
    }
  }
  return acc / static_cast<double>(n);
}

void clip_grad_norm(nn::ParameterSet<float>& params, double limit) {
  double sq = 0.0;
  for (const auto& p : params) sq += p.grad.cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm <= limit) return;
  const auto scale = static_cast<float>(limit / norm);
  for (auto& p : params) p.grad *= scale;
}

}  // namespace

TrainResult train(DiffMMModel<float>& model, const std::vector<TrainingSample>& train_set,
                  const std::vector<TrainingSample>& valid_set, const std::vector<std::string>& valid_ids,
                  const TrainConfig& cfg) {
  if (train_set.empty()) throw std::invalid_argument("training split is empty");
  if (valid_ids.size() != valid_set.size()) throw std::invalid_argument("validation ids/samples differ");
  if (cfg.batch_size < 1 || cfg.steps < 0) throw std::invalid_argument("invalid training config");

  std::ofstream metrics, steps_out;
  if (!cfg.metrics_csv.empty()) {
    metrics = csv::open_for_write(cfg.metrics_csv);
    metrics << "epoch,step,L,L_st,L_ce,val_acc\n";
  }
  if (!cfg.steps_csv.empty()) {
    steps_out = csv::open_for_write(cfg.steps_csv);
    steps_out << "step,L,L_st,L_ce\n";
  }

  auto& params = model.params();
  nn::AdamConfig adam;
  adam.lr = cfg.lr;
  Rng order_rng = make_rng(cfg.seed, "train", 0);
  Rng noise_rng = make_rng(cfg.seed, "train", 1);

  const std::size_t n = train_set.size();
  const auto bsz = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t batches_per_epoch = (n + bsz - 1) / bsz;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  std::vector<nn::Matrix<float>> best;
  LossParts epoch_sum;
  int epoch_steps = 0;
  int epoch = 0;
  std::size_t batch_in_epoch = 0;

  for (int step = 0; step < cfg.steps; ++step) {
    if (batch_in_epoch == 0) std::shuffle(order.begin(), order.end(), order_rng);
    std::vector<const TrainingSample*> batch;
    for (std::size_t k = batch_in_epoch * bsz; k < std::min(n, (batch_in_epoch + 1) * bsz); ++k) {
      batch.push_back(&train_set[order[k]]);
    }
    const LossMode mode = cfg.combined_objective        ? LossMode::kCombined
                          : step < cfg.warmup_batches ? LossMode::kFlow
                                                      : LossMode::kConsistency;
    params.zero_grad();
    LossParts loss;
    try {
      loss = compute_loss(model, batch, mode, cfg.loss, noise_rng, true);
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (cfg.grad_clip > 0.0) clip_grad_norm(params, cfg.grad_clip);
    nn::adam_step(params, adam);
    result.step_losses.push_back(loss);
    if (steps_out.is_open()) {
      steps_out << step << ',' << csv::format_double(loss.total) << ',' << csv::format_double(loss.st)
                << ',' << csv::format_double(loss.ce) << '\n';
    }
    epoch_sum.total += loss.total;
    epoch_sum.st += loss.st;
    epoch_sum.ce += loss.ce;
    ++epoch_steps;

    ++batch_in_epoch;
    const bool last = step + 1 == cfg.steps;
    if (batch_in_epoch == batches_per_epoch || last) {
      EpochRecord rec;
      rec.epoch = epoch;
      rec.step = step + 1;
      rec.loss = {epoch_sum.total / epoch_steps, epoch_sum.st / epoch_steps, epoch_sum.ce / epoch_steps};
      rec.val_acc = validation_accuracy(model, valid_set, valid_ids, cfg.val_max, cfg.seed);
      result.epochs.push_back(rec);
      if (rec.val_acc > result.best_val_acc) {
        result.best_val_acc = rec.val_acc;
        result.best_epoch = epoch;
        best.clear();
        for (const auto& p : params) best.push_back(p.value);
      }
      if (metrics.is_open()) {
        metrics << rec.epoch << ',' << rec.step << ',' << csv::format_double(rec.loss.total) << ','
                << csv::format_double(rec.loss.st) << ',' << csv::format_double(rec.loss.ce) << ','
                << csv::format_double(rec.val_acc) << '\n';
      }
      if (cfg.verbose) {
        std::cerr << "epoch " << rec.epoch << " step " << rec.step << " L " << rec.loss.total << " L_st "
                  << rec.loss.st << " L_ce " << rec.loss.ce << " val_acc " << rec.val_acc << '\n';
      }
      epoch_sum = {};
      epoch_steps = 0;
      batch_in_epoch = 0;
      ++epoch;
    }
  }
  if (!best.empty()) {
    std::size_t k = 0;
    for (auto& p : params) p.value = best[k++];
  }
  return result;
}

template <typename T>
std::vector<SegmentId> argmax_rows(const Matrix<T>& x,
                                   const std::vector<std::vector<CandidateFeature>>* allowed) {
  std::vector<SegmentId> out(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i) {
    SegmentId best = -1;
    T best_v = 0;
    auto consider = [&](SegmentId j) {
      const T v = x(i, j);
      if (best < 0 || v > best_v || (v == best_v && j < best)) {
        best = j;
        best_v = v;
      }
    };
    const std::vector<CandidateFeature>* cands =
        allowed ? &(*allowed)[static_cast<std::size_t>(i)] : nullptr;
    if (cands && !cands->empty()) {
      for (const auto& c : *cands) consider(c.segment);
    } else {
      for (Index j = 0; j < x.cols(); ++j) consider(static_cast<SegmentId>(j));
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

template <typename T>
std::vector<std::vector<SegmentId>> infer_batch(const DiffMMModel<T>& model,
                                                std::span<const EncoderInput* const> inputs,
                                                std::span<const std::string> ids,
                                                const InferenceConfig& cfg) {
  if (cfg.steps < 1) throw std::invalid_argument("inference needs at least one step");
  if (inputs.size() != ids.size()) throw std::invalid_argument("infer_batch: inputs and ids differ");
  if (inputs.empty()) return {};
  typename TrajectoryEncoder<T>::Cache enc_cache;
  const Matrix<T> cond = model.encoder().forward(inputs, enc_cache);
  const nn::Segments seq = enc_cache.sequences;
  const auto n_seg = static_cast<Index>(model.segment_count());
  Matrix<T> x(cond.rows(), n_seg);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Rng rng = make_rng(cfg.seed, "infer", fnv1a64(ids[k]));
    x.middleRows(seq[k], seq[k + 1] - seq[k]) = gaussian<T>(seq[k + 1] - seq[k], n_seg, rng);
  }
  const double d = 1.0 / cfg.steps;
  std::vector<double> tv(inputs.size()), dv(inputs.size(), d);
  typename DiTDenoiser<T>::Cache cache;
  for (int k = 0; k < cfg.steps; ++k) {
    std::fill(tv.begin(), tv.end(), k * d);
    x += model.denoiser().forward(x, seq, tv, dv, cond, cache) * static_cast<T>(d);
  }
  nn::check_finite(x, "inference output");
  std::vector<std::vector<SegmentId>> out;
  out.reserve(inputs.size());
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Matrix<T> xk = x.middleRows(seq[k], seq[k + 1] - seq[k]);
    out.push_back(argmax_rows(xk, cfg.restrict_candidates ? &inputs[k]->candidates : nullptr));
  }
  return out;
}

template <typename T>
std::vector<SegmentId> infer(const DiffMMModel<T>& model, const EncoderInput& input,
                             const std::string& traj_id, const InferenceConfig& cfg) {
  const EncoderInput* in[] = {&input};
  const std::string id[] = {traj_id};
  return infer_batch(model, std::span<const EncoderInput* const>(in), std::span<const std::string>(id), cfg)
      .front();
}

#define DIFFMM_SHORTCUT_INSTANTIATE(T)                                                                 \
  template Matrix<T> interpolate(const Matrix<T>&, const Matrix<T>&, double);                         \
  template ShortcutField<T> bind_condition(const DiTDenoiser<T>&, const Matrix<T>&);                  \
  template Matrix<T> shortcut_step(const ShortcutField<T>&, const Matrix<T>&, double, double);        \
  template Matrix<T> self_consistency_target(const ShortcutField<T>&, const Matrix<T>&, double,       \
                                             double);                                                 \
  template Matrix<T> one_hot_route(const std::vector<SegmentId>&, Index);                             \
  template LossParts shortcut_losses(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,            \
                                     const Matrix<T>&, double, const std::vector<SegmentId>&, bool);  \
  template LossParts compute_loss(DiffMMModel<T>&, const std::vector<const TrainingSample*>&,         \
                                  LossMode, const LossConfig&, Rng&, bool);                           \
  template std::vector<SegmentId> argmax_rows(const Matrix<T>&,                                       \
                                              const std::vector<std::vector<CandidateFeature>>*);     \
  template std::vector<SegmentId> infer(const DiffMMModel<T>&, const EncoderInput&,                   \
                                        const std::string&, const InferenceConfig&);                  \
  template std::vector<std::vector<SegmentId>> infer_batch(                                           \
      const DiffMMModel<T>&, std::span<const EncoderInput* const>, std::span<const std::string>,      \
      const InferenceConfig&);

DIFFMM_SHORTCUT_INSTANTIATE(float)
DIFFMM_SHORTCUT_INSTANTIATE(double)
#undef DIFFMM_SHORTCUT_INSTANTIATE

}  // namespace diffmm
