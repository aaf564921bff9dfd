#include <doctest.h>

#include <cmath>
#include <random>

#include "diffmm/eval.hpp"
#include "gradient_suite.hpp"
#include "temp_dir.hpp"

using namespace diffmm;
using nn::Matrix;

namespace {

ShortcutField<double> constant_field(const Matrix<double>& v) {
  return [v](const Matrix<double>&, double, double) { return v; };
}

/// 5x5 grid city with a small model trained on it, shared by the inference tests.
struct Trained {
  RoadNetwork net = make_grid_network(5, 5, 200.0);
  SpatialIndex idx{net};
  DatasetSplit split;
  std::unique_ptr<DiffMMModel<float>> model;
  TrainResult result;

  Trained(double noise, int steps) {
    SyntheticConfig sc;
    sc.n_trajectories = 200;
    sc.noise_sigma_m = noise;
    sc.step_interval_s = 4.3;  // keeps fixes off junctions after the first
    sc.seed = 3;
    split = split_dataset(generate_synthetic(net, sc), 3);
    model = std::make_unique<DiffMMModel<float>>(small_config(), net.segment_count(), compute_bounds(split.train));
    model->init(3);
    result = train(*model, make_samples(*model, split.train, idx), make_samples(*model, split.valid, idx),
                   ids(split.valid), train_config(steps));
  }

  static ModelConfig small_config() {
    ModelConfig cfg;
    cfg.encoder.d_emb = 32;
    cfg.encoder.d_a = 32;
    cfg.encoder.ffn_mult = 2;
    cfg.dit.d_model = 32;
    cfg.dit.ffn_mult = 2;
    return cfg;
  }

  static TrainConfig train_config(int steps) {
    TrainConfig tc;
    tc.steps = steps;
    tc.batch_size = 16;
    tc.combined_objective = true;
    tc.seed = 3;
    tc.val_max = 60;
    return tc;
  }

  static std::vector<std::string> ids(const std::vector<MatchedTrajectory>& v) {
    std::vector<std::string> out;
    for (const auto& mt : v) out.push_back(mt.trajectory.id);
    return out;
  }
};

const Trained& noiseless() {
  static const Trained t(0.0, 800);
  return t;
}

double moving_average(const std::vector<LossParts>& l, std::size_t from) {
  double s = 0.0;
  for (std::size_t k = from; k < from + 10; ++k) s += l[k].total;
  return s / 10.0;
}

}  // namespace

TEST_SUITE("shortcut_model") {

TEST_CASE("interpolation endpoints and midpoint") {
  std::mt19937_64 rng(1);
  const Matrix<double> x0 = oracle::random_matrix(3, 5, rng), x1 = oracle::random_matrix(3, 5, rng);
  CHECK(interpolate<double>(x0, x1, 0.0) == x0);
  CHECK(interpolate<double>(x0, x1, 1.0) == x1);
  const Matrix<double> mid = interpolate<double>(x0, x1, 0.5);
  for (Index k = 0; k < mid.size(); ++k) CHECK(mid.data()[k] == 0.5 * x0.data()[k] + 0.5 * x1.data()[k]);
  CHECK_THROWS_AS(interpolate<double>(x0, x1, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(interpolate<double>(x0, Matrix<double>(2, 5), 0.5), std::invalid_argument);
}

TEST_CASE("denoiser starts at zero and is deterministic") {
  DiffMMModel<double> model(gradient_suite::tiny_config(), 12, {});
  model.init(2);
  std::mt19937_64 rng(2);
  const Matrix<double> x = oracle::random_matrix(3, 12, rng), c = oracle::random_matrix(3, 16, rng);
  CHECK(model.denoiser().forward(x, 0.25, 0.5, c).isZero(0.0));
  gradient_suite::jitter(model.params(), rng);
  const Matrix<double> a = model.denoiser().forward(x, 0.25, 0.5, c);
  CHECK(a == model.denoiser().forward(x, 0.25, 0.5, c));
  CHECK(a.rows() == 3);
  CHECK(a.cols() == 12);
  CHECK_THROWS_AS(model.denoiser().forward(x, 1.25, 0.5, c), std::invalid_argument);
}

TEST_CASE("packed denoiser equals separate passes") {
  DiffMMModel<double> model(gradient_suite::tiny_config(), 12, {});
  model.init(3);
  std::mt19937_64 rng(3);
  gradient_suite::jitter(model.params(), rng);
  const Matrix<double> x = oracle::random_matrix(5, 12, rng), c = oracle::random_matrix(5, 16, rng);
  const std::vector<double> t{0.25, 0.75}, d{0.5, 0.125};
  DiTDenoiser<double>::Cache cache;
  const Matrix<double> packed = model.denoiser().forward(x, {0, 2, 5}, t, d, c, cache);
  const auto& dit = model.denoiser();
  CHECK((packed.topRows(2) - dit.forward(x.topRows(2), 0.25, 0.5, c.topRows(2))).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((packed.bottomRows(3) - dit.forward(x.bottomRows(3), 0.75, 0.125, c.bottomRows(3))).cwiseAbs().maxCoeff() <
        1e-12);
}

TEST_CASE("denoiser gradients") {
  const auto r = gradient_suite::check_denoiser(4);
  INFO(r.worst);
  CHECK(r.max_rel_err <= 1e-4);
}

TEST_CASE("shortcut steps with a constant field") {
  Matrix<double> v(2, 3), x(2, 3);
  v << 0.5, -1.25, 2.0, 0.75, 3.0, -0.5;
  x << 1.0, 2.0, -3.0, 0.25, 0.0, 4.5;
  const auto s = constant_field(v);
  CHECK(shortcut_step<double>(s, x, 0.3, 0.0) == x);
  const Matrix<double> one = shortcut_step<double>(s, x, 0.0, 0.5);
  const Matrix<double> two = shortcut_step<double>(s, shortcut_step<double>(s, x, 0.0, 0.25), 0.25, 0.25);
  CHECK(one == two);

  std::mt19937_64 rng(5);
  const Matrix<double> rv = oracle::random_matrix(4, 6, rng), rx = oracle::random_matrix(4, 6, rng);
  const auto rs = constant_field(rv);
  const Matrix<double> a = shortcut_step<double>(rs, rx, 0.1, 0.3);
  const Matrix<double> b = shortcut_step<double>(rs, shortcut_step<double>(rs, rx, 0.1, 0.15), 0.25, 0.15);
  CHECK((a - b).cwiseAbs().maxCoeff() <= 4 * std::numeric_limits<double>::epsilon() * (rx.cwiseAbs().maxCoeff() + 1));
  CHECK_THROWS_AS(shortcut_step<double>(rs, rx, 0.8, 0.3), std::invalid_argument);
}

TEST_CASE("self-consistency target of a constant field is the field") {
  std::mt19937_64 rng(6);
  const Matrix<double> v = oracle::random_matrix(3, 7, rng), x = oracle::random_matrix(3, 7, rng);
  const Matrix<double> target = self_consistency_target<double>(constant_field(v), x, 0.25, 0.25);
  CHECK(target.rows() == 3);
  CHECK(target.cols() == 7);
  CHECK(target == v);
  CHECK_THROWS_AS(self_consistency_target<double>(constant_field(v), x, 0.75, 0.25), std::invalid_argument);

  DiffMMModel<double> model(gradient_suite::tiny_config(), 12, {});
  model.init(7);
  gradient_suite::jitter(model.params(), rng);
  const Matrix<double> c = oracle::random_matrix(3, 16, rng), xe = oracle::random_matrix(3, 12, rng);
  const auto field = bind_condition(model.denoiser(), c);
  CHECK(self_consistency_target<double>(field, xe, 0.0, 0.5) == self_consistency_target<double>(field, xe, 0.0, 0.5));
}

TEST_CASE("loss of the exact flow") {
  std::mt19937_64 rng(8);
  const std::vector<SegmentId> route{3, 0, 11};
  const Matrix<double> x1 = one_hot_route<double>(route, 12);
  const Matrix<double> x0 = oracle::random_matrix(3, 12, rng);
  const Matrix<double> v = x1 - x0;
  const LossParts l = shortcut_losses<double>(v, v, x0, v, 0.0, route);
  CHECK(l.st == 0.0);
  const double ce = std::log(std::exp(1.0) + 11.0) - 1.0;
  CHECK(l.ce == doctest::Approx(ce).epsilon(1e-12));
  CHECK(l.total == doctest::Approx(ce).epsilon(1e-12));
  const LossParts scaled = shortcut_losses<double>(v, v, x0, v, 0.0, route, true);
  CHECK(scaled.ce == doctest::Approx(ce).epsilon(1e-12));
}

TEST_CASE("zero prediction loss matches its expectation") {
  DiffMMModel<double> model(gradient_suite::tiny_config(), 12, {});
  model.init(9);
  std::vector<TrainingSample> samples;
  for (unsigned k = 0; k < 40; ++k) samples.push_back({gradient_suite::tiny_input(5, k), {1, 2, 3, 4, 5}});
  std::vector<const TrainingSample*> batch;
  for (const auto& s : samples) batch.push_back(&s);
  Rng rng = make_rng(1, "test");
  double st = 0.0;
  const int reps = 25;
  for (int k = 0; k < reps; ++k) {
    const LossParts l = compute_loss(model, batch, LossMode::kFlow, LossConfig{}, rng, false);
    CHECK(l.st >= 0.0);
    CHECK(l.ce >= 0.0);
    st += l.st;
  }
  // E[(x1 - x0)^2] per element
  CHECK(st / reps == doctest::Approx(1.0 + 1.0 / 12.0).epsilon(0.02));
}

TEST_CASE("losses are never negative") {
  DiffMMModel<double> model(gradient_suite::tiny_config(), 12, {});
  model.init(10);
  std::mt19937_64 jit(10);
  gradient_suite::jitter(model.params(), jit);
  const TrainingSample a{gradient_suite::tiny_input(3, 1), {0, 4, 8}}, b{gradient_suite::tiny_input(2, 2), {11, 11}};
  const std::vector<const TrainingSample*> batch{&a, &b};
  Rng rng = make_rng(2, "test");
  for (auto mode : {LossMode::kFlow, LossMode::kConsistency, LossMode::kCombined}) {
    for (int k = 0; k < 10; ++k) {
      const LossParts l = compute_loss(model, batch, mode, LossConfig{}, rng, k % 2 == 0);
      CHECK(l.st >= 0.0);
      CHECK(l.ce >= 0.0);
      CHECK(l.total == l.st + l.ce);
    }
  }
}

TEST_CASE("composite loss gradients") {
  for (bool scaled : {false, true}) {
    const auto r = gradient_suite::check_composite(12, scaled);
    INFO(r.name << " worst at " << r.worst);
    CHECK(r.max_rel_err <= 1e-4);
  }
}

TEST_CASE("argmax ties and restriction") {
  Matrix<double> x(2, 4);
  x << 1.0, 3.0, 3.0, 0.0, 0.5, 0.2, 0.1, 0.4;
  CHECK(argmax_rows(x) == std::vector<SegmentId>{1, 0});
  const std::vector<std::vector<CandidateFeature>> allowed{{{2, 0, 0, 0, 0}, {3, 0, 0, 0, 0}}, {}};
  CHECK(argmax_rows(x, &allowed) == std::vector<SegmentId>{2, 0});
}

TEST_CASE("training on noiseless data") {
  const auto& t = noiseless();
  const auto& l = t.result.step_losses;
  REQUIRE(l.size() == 800);
  CHECK(moving_average(l, l.size() - 10) <= 0.5 * moving_average(l, 0));

  InferenceConfig ic;
  ic.restrict_candidates = true;
  DiffMMModel<float> untrained(Trained::small_config(), t.net.segment_count(), compute_bounds(t.split.train));
  untrained.init(3);
  const double before = run_evaluation(DiffmmMatcher(untrained, t.idx, ic), t.split.test).mean_accuracy;
  const EvalReport rep = run_evaluation(DiffmmMatcher(*t.model, t.idx, ic), t.split.test);
  const double open = run_evaluation(DiffmmMatcher(*t.model, t.idx), t.split.test).mean_accuracy;
  MESSAGE("noiseless one-step accuracy " << rep.mean_accuracy << " (untrained " << before << ", unrestricted " << open
                                         << ")");
  CHECK(rep.mean_accuracy >= 0.75);
  CHECK(rep.mean_accuracy >= before + 0.3);
  for (std::size_t k = 0; k < rep.predictions.size(); ++k) {
    CHECK(rep.predictions[k].size() == t.split.test[k].trajectory.size());
    for (SegmentId s : rep.predictions[k]) {
      CHECK(s >= 0);
      CHECK(static_cast<std::size_t>(s) < t.net.segment_count());
    }
  }
}

TEST_CASE("one and two inference steps both give valid routes") {
  const auto& t = noiseless();
  InferenceConfig one, two;
  two.steps = 2;
  std::size_t agree = 0, total = 0;
  for (const auto& mt : t.split.test) {
    const auto a = infer(*t.model, mt.trajectory, t.idx, one);
    const auto b = infer(*t.model, mt.trajectory, t.idx, two);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) agree += a[i] == b[i];
    total += a.size();
  }
  MESSAGE("M=1 vs M=2 agreement " << static_cast<double>(agree) / static_cast<double>(total));
  CHECK(total > 0);
}

TEST_CASE("batched inference equals one at a time") {
  const auto& t = noiseless();
  std::vector<EncoderInput> inputs;
  std::vector<std::string> ids;
  for (std::size_t k = 0; k < 9; ++k) {
    inputs.push_back(t.model->prepare(t.split.test[k].trajectory, t.idx));
    ids.push_back(t.split.test[k].trajectory.id);
  }
  std::vector<const EncoderInput*> ptrs;
  for (const auto& in : inputs) ptrs.push_back(&in);
  const auto batch = infer_batch(*t.model, std::span<const EncoderInput* const>(ptrs), std::span<const std::string>(ids),
                                 InferenceConfig{});
  for (std::size_t k = 0; k < inputs.size(); ++k) CHECK(batch[k] == infer(*t.model, inputs[k], ids[k], InferenceConfig{}));
}

TEST_CASE("checkpoints reproduce inference") {
  const auto& t = noiseless();
  TempDir dir;
  t.model->save(dir / "m.ckpt", {{"note", "test"}});
  const auto loaded = DiffMMModel<float>::load(dir / "m.ckpt");
  CHECK(loaded->segment_count() == t.net.segment_count());
  for (std::size_t k = 0; k < 5; ++k) {
    const auto& tr = t.split.test[k].trajectory;
    CHECK(infer(*loaded, tr, t.idx, InferenceConfig{}) == infer(*t.model, tr, t.idx, InferenceConfig{}));
  }
}

TEST_CASE("flow-only schedule and determinism") {
  RoadNetwork net = make_grid_network(4, 4, 200.0);
  SpatialIndex idx(net);
  SyntheticConfig sc;
  sc.n_trajectories = 40;
  const auto split = split_dataset(generate_synthetic(net, sc), 1);
  auto run = [&](TrainConfig tc) {
    DiffMMModel<float> model(Trained::small_config(), net.segment_count(), compute_bounds(split.train));
    model.init(tc.seed);
    auto res = train(model, make_samples(model, split.train, idx), make_samples(model, split.valid, idx),
                     Trained::ids(split.valid), tc);
    std::vector<SegmentId> routes;
    for (const auto& mt : split.test) {
      const auto r = infer(model, mt.trajectory, idx, InferenceConfig{});
      routes.insert(routes.end(), r.begin(), r.end());
    }
    return std::make_pair(res, routes);
  };
  TrainConfig tc;
  tc.steps = 30;
  tc.warmup_batches = 1000;
  const auto [flow, flow_routes] = run(tc);
  CHECK(flow.step_losses.size() == 30);
  CHECK(flow_routes.size() > 0);

  tc.combined_objective = true;
  const auto [a, ra] = run(tc);
  const auto [b, rb] = run(tc);
  REQUIRE(a.step_losses.size() == b.step_losses.size());
  for (std::size_t k = 0; k < a.step_losses.size(); ++k) CHECK(a.step_losses[k].total == b.step_losses[k].total);
  CHECK(ra == rb);
}

}  // TEST_SUITE
