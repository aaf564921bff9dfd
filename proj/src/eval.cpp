#include "diffmm/eval.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "diffmm/csv.hpp"
#include "diffmm/nn/checkpoint.hpp"

namespace diffmm {

double accuracy(const std::vector<SegmentId>& truth, const std::vector<SegmentId>& predicted) {
  if (truth.size() != predicted.size()) {
    throw std::invalid_argument("accuracy: route lengths differ (" + std::to_string(truth.size()) +
                                " vs " + std::to_string(predicted.size()) + ")");
  }
  if (truth.empty()) throw std::invalid_argument("accuracy: empty route");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == predicted[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

EchoMatcher::EchoMatcher(const std::vector<MatchedTrajectory>& data) {
  for (const auto& mt : data) routes_[mt.trajectory.id] = mt.route;
}

std::vector<SegmentId> EchoMatcher::match(const Trajectory& traj) const {
  auto it = routes_.find(traj.id);
  if (it == routes_.end()) throw DataError("no route for trajectory " + traj.id);
  return it->second;
}

double mean_of(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

std::vector<std::optional<std::vector<SegmentId>>> Matcher::match_batch(
    std::span<const Trajectory* const> trajs) const {
  std::vector<std::optional<std::vector<SegmentId>>> out;
  for (const Trajectory* t : trajs) {
    try {
      out.emplace_back(match(*t));
    } catch (const DataError&) {
      out.emplace_back(std::nullopt);
    }
  }
  return out;
}

std::vector<std::optional<std::vector<SegmentId>>> DiffmmMatcher::match_batch(
    std::span<const Trajectory* const> trajs) const {
  std::vector<std::optional<std::vector<SegmentId>>> out(trajs.size());
  std::vector<EncoderInput> prepared;
  std::vector<std::string> ids;
  std::vector<std::size_t> slot;
  prepared.reserve(trajs.size());
  for (std::size_t k = 0; k < trajs.size(); ++k) {
    try {
      prepared.push_back(model_.prepare(*trajs[k], idx_));
    } catch (const DataError&) {
      continue;
    }
    ids.push_back(trajs[k]->id);
    slot.push_back(k);
  }
  std::vector<const EncoderInput*> inputs;
  for (const auto& p : prepared) inputs.push_back(&p);
  auto routes = infer_batch(model_, std::span<const EncoderInput* const>(inputs),
                            std::span<const std::string>(ids), cfg_);
  for (std::size_t k = 0; k < slot.size(); ++k) out[slot[k]] = std::move(routes[k]);
  return out;
}

EvalReport run_evaluation(const Matcher& matcher, const std::vector<MatchedTrajectory>& test,
                          const std::string& fingerprint) {
  using Clock = std::chrono::steady_clock;
  EvalReport r;
  r.matcher = matcher.name();
  r.fingerprint = fingerprint;
  Clock::duration spent{};
  for (std::size_t b = 0; b < test.size(); b += kInferBatch) {
    const std::size_t e = std::min(test.size(), b + kInferBatch);
    std::vector<const Trajectory*> chunk;
    for (std::size_t k = b; k < e; ++k) chunk.push_back(&test[k].trajectory);
    const auto t0 = Clock::now();
    auto preds = matcher.match_batch(chunk);
    spent += Clock::now() - t0;
    for (std::size_t k = b; k < e; ++k) {
      const auto& mt = test[k];
      auto& pred = preds[k - b];
      r.ids.push_back(mt.trajectory.id);
      r.lengths.push_back(mt.route.size());
      r.unmatchable.push_back(!pred.has_value());
      r.accuracy.push_back(pred ? accuracy(mt.route, *pred) : 0.0);
      r.predictions.push_back(pred ? std::move(*pred) : std::vector<SegmentId>{});
    }
  }
  r.mean_accuracy = mean_of(r.accuracy);
  if (!test.empty()) {
    r.seconds_per_1000 =
        std::chrono::duration<double>(spent).count() * 1000.0 / static_cast<double>(test.size());
  }
  return r;
}

void write_report_csv(const EvalReport& report, const std::filesystem::path& path) {
  auto out = csv::open_for_write(path);
  out << "traj_id,n_points,n_correct,accuracy,unmatchable\n";
  for (std::size_t k = 0; k < report.ids.size(); ++k) {
    const auto correct = static_cast<std::size_t>(
        std::llround(report.accuracy[k] * static_cast<double>(report.lengths[k])));
    out << report.ids[k] << ',' << report.lengths[k] << ',' << correct << ','
        << csv::format_double(report.accuracy[k]) << ',' << (report.unmatchable[k] ? 1 : 0) << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

std::string summary(const EvalReport& report) {
  std::ostringstream s;
  const auto failed = std::count(report.unmatchable.begin(), report.unmatchable.end(), true);
  s << "matcher: " << report.matcher << '\n'
    << "trajectories: " << report.ids.size() << '\n'
    << "unmatchable: " << failed << '\n'
    << "mean accuracy: " << report.mean_accuracy << '\n'
    << "seconds per 1000 trajectories: " << report.seconds_per_1000 << '\n';
  if (!report.fingerprint.empty()) s << "config: " << report.fingerprint << '\n';
  return s.str();
}

void write_geojson(const std::vector<Trajectory>& trajs, const std::vector<std::vector<SegmentId>>& routes,
                   const RoadNetwork& net, const std::filesystem::path& path) {
  if (trajs.size() != routes.size()) throw std::invalid_argument("write_geojson: size mismatch");
  nlohmann::json fc = {{"type", "FeatureCollection"}, {"features", nlohmann::json::array()}};
  auto& features = fc["features"];
  for (std::size_t k = 0; k < trajs.size(); ++k) {
    const auto& tr = trajs[k];
    for (std::size_t i = 0; i < tr.points.size(); ++i) {
      const auto& p = tr.points[i];
      features.push_back({{"type", "Feature"},
                          {"geometry", {{"type", "Point"}, {"coordinates", {p.lng, p.lat}}}},
                          {"properties",
                           {{"kind", "gps_point"},
                            {"traj_id", tr.id},
                            {"seq", tr.seq.empty() ? static_cast<int>(i) : tr.seq[i]},
                            {"t", p.t},
                            {"edge_id", routes[k].at(i)}}}});
    }
    std::vector<SegmentId> distinct;
    for (SegmentId s : routes[k]) {
      if (s >= 0 && (distinct.empty() || distinct.back() != s)) distinct.push_back(s);
    }
    for (SegmentId s : distinct) {
      nlohmann::json coords = nlohmann::json::array();
      for (const auto& g : net.segment(s).polyline) coords.push_back({g.lng, g.lat});
      features.push_back({{"type", "Feature"},
                          {"geometry", {{"type", "LineString"}, {"coordinates", coords}}},
                          {"properties", {{"kind", "matched_segment"}, {"traj_id", tr.id}, {"edge_id", s}}}});
    }
  }
  auto out = csv::open_for_write(path);
  out << fc.dump(1) << '\n';
  if (!out) throw DataError("failed writing " + path.string());
}

namespace {

std::string fingerprint(const Experiment& exp) {
  nlohmann::json j = to_json(exp.model);
  const auto& t = exp.training;
  j["train"] = {{"steps", t.steps},
                {"batch_size", t.batch_size},
                {"warmup_batches", t.warmup_batches},
                {"combined", t.combined_objective},
                {"lr", t.lr},
                {"seed", t.seed},
                {"n_train", exp.train.size()}};
  j["infer"] = {{"steps", exp.inference.steps},
                {"restrict", exp.inference.restrict_candidates},
                {"seed", exp.inference.seed}};
  return nn::config_hash(j);
}

}  // namespace

ExperimentResult run_experiment(const Experiment& exp, std::unique_ptr<DiffMMModel<float>>* model_out) {
  if (!exp.idx) throw std::invalid_argument("experiment has no spatial index");
  if (exp.train.empty()) throw std::invalid_argument("experiment has no training data");
  const auto& net = exp.idx->network();
  auto model = std::make_unique<DiffMMModel<float>>(exp.model, net.segment_count(), compute_bounds(exp.train));
  model->init(exp.training.seed);
  const auto train_samples = make_samples(*model, exp.train, *exp.idx);
  const auto valid_samples = make_samples(*model, exp.valid, *exp.idx);
  std::vector<std::string> valid_ids;
  for (const auto& mt : exp.valid) valid_ids.push_back(mt.trajectory.id);

  ExperimentResult res;
  res.training = train(*model, train_samples, valid_samples, valid_ids, exp.training);
  DiffmmMatcher matcher(*model, *exp.idx, exp.inference);
  res.report = run_evaluation(matcher, exp.test, fingerprint(exp));
  if (model_out) *model_out = std::move(model);
  return res;
}

ExperimentResult run_ablation(Variant variant, const Experiment& exp) {
  Experiment e = exp;
  e.model.variant = variant;
  if (variant == Variant::kNoShortcut) {
    e.model.dit.step_conditioning = false;
    e.training.warmup_batches = e.training.steps;
    e.training.combined_objective = false;
    e.inference.steps = exp.no_shortcut_steps;
  }
  return run_experiment(e);
}

RobustnessReport run_robustness(const std::vector<std::size_t>& train_sizes, const Experiment& exp) {
  RobustnessReport rep;
  for (std::size_t n : train_sizes) {
    if (n == 0 || n > exp.train.size()) {
      throw std::invalid_argument("training size " + std::to_string(n) + " outside [1, " +
                                  std::to_string(exp.train.size()) + "]");
    }
    Experiment e = exp;
    e.train.assign(exp.train.begin(), exp.train.begin() + static_cast<std::ptrdiff_t>(n));
    rep.rows.push_back({n, run_experiment(e).report.mean_accuracy});
  }
  std::vector<RobustnessRow> sorted = rep.rows;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.train_size < b.train_size; });
  for (std::size_t k = 1; k < sorted.size(); ++k) {
    rep.worst_drop = std::max(rep.worst_drop, sorted[k - 1].accuracy - sorted[k].accuracy);
  }
  return rep;
}

}  // namespace diffmm
