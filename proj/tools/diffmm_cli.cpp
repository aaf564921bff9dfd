#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "diffmm/eval.hpp"
#include "diffmm/runtime.hpp"

namespace fs = std::filesystem;
using namespace diffmm;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

enum class LogLevel { kQuiet, kInfo, kDebug };

LogLevel log_level() {
  const char* v = std::getenv("DIFFMM_LOG");
  if (!v) return LogLevel::kInfo;
  const std::string s = v;
  if (s == "quiet") return LogLevel::kQuiet;
  if (s == "debug") return LogLevel::kDebug;
  return LogLevel::kInfo;
}

std::ostream& info() {
  static std::ostream null(nullptr);
  return log_level() == LogLevel::kQuiet ? null : std::cerr;
}

// Paths of the four data files, defaulting to <dir>/nodes.csv etc.
struct DataPaths {
  fs::path dir = ".";
  fs::path nodes, edges, trajectories, routes;

  void add_to(CLI::App* cmd, bool with_routes) {
    cmd->add_option("--data", dir, "Directory holding nodes.csv, edges.csv, trajectories.csv, routes.csv");
    cmd->add_option("--nodes", nodes, "Node file (default <data>/nodes.csv)");
    cmd->add_option("--edges", edges, "Edge file (default <data>/edges.csv)");
    cmd->add_option("--trajectories", trajectories, "Trajectory file (default <data>/trajectories.csv)");
    if (with_routes) cmd->add_option("--routes", routes, "Route file (default <data>/routes.csv)");
  }

  void resolve() {
    if (nodes.empty()) nodes = dir / "nodes.csv";
    if (edges.empty()) edges = dir / "edges.csv";
    if (trajectories.empty()) trajectories = dir / "trajectories.csv";
    if (routes.empty()) routes = dir / "routes.csv";
  }
};

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw DataError(what + " not found: " + p.string());
}

std::pair<int, int> parse_grid(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw CLI::ValidationError("--grid", "expected RxC, e.g. 8x8");
  try {
    return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw CLI::ValidationError("--grid", "expected RxC, e.g. 8x8");
  }
}

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  std::string grid = "8x8";
  double spacing = 250.0;
  SyntheticConfig synth;
  fs::path out = ".";
};

void cmd_generate(const GenerateArgs& a) {
  const auto [rows, cols] = parse_grid(a.grid);
  if (rows < 2 || cols < 2) throw std::invalid_argument("--grid needs at least 2x2 intersections");
  const RoadNetwork net = make_grid_network(rows, cols, a.spacing);
  const auto data = generate_synthetic(net, a.synth);
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw DataError("cannot create output directory " + a.out.string() + ": " + ec.message());
  write_network(net, a.out / "nodes.csv", a.out / "edges.csv");
  std::vector<Trajectory> trajs;
  std::vector<RouteRecord> routes;
  for (const auto& mt : data) {
    trajs.push_back(mt.trajectory);
    routes.push_back(to_route_record(mt.trajectory, mt.route));
  }
  write_trajectories(trajs, a.out / "trajectories.csv");
  write_routes(routes, a.out / "routes.csv");
  info() << "wrote " << net.segment_count() << " segments and " << data.size() << " trajectories to "
         << a.out.string() << '\n';
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  DataPaths data;
  fs::path checkpoint;
  std::string variant = "full";
  std::size_t train_size = 0;
  double sparsify = 0.0;
  double mix_sparse = 0.0;
  ModelConfig model;
  TrainConfig train;
};

void cmd_train(TrainArgs a) {
  a.data.resolve();
  require_file(a.data.nodes, "node file");
  require_file(a.data.edges, "edge file");
  require_file(a.data.trajectories, "trajectory file");
  require_file(a.data.routes, "route file");
  a.model.variant = parse_variant(a.variant);
  if (a.model.variant == Variant::kNoShortcut) a.train.warmup_batches = a.train.steps;

  const RoadNetwork net = load_network(a.data.nodes, a.data.edges);
  const SpatialIndex idx(net);
  auto all = join_routes(load_trajectories(a.data.trajectories), load_routes(a.data.routes));
  for (const auto& mt : all) validate(mt, net.segment_count());
  DatasetSplit split = split_dataset(std::move(all), a.train.seed);
  if (a.train_size > 0) {
    if (a.train_size > split.train.size()) {
      throw std::invalid_argument("--train-size " + std::to_string(a.train_size) + " exceeds the " +
                                  std::to_string(split.train.size()) + " training trajectories");
    }
    split.train.resize(a.train_size);
  }
  if (a.sparsify > 0.0) {
    split.train = sparsify_all(split.train, a.sparsify, a.train.seed);
    split.valid = sparsify_all(split.valid, a.sparsify, a.train.seed);
  } else if (a.mix_sparse > 0.0) {
    auto extra = sparsify_all(split.train, a.mix_sparse, a.train.seed);
    for (auto& mt : extra) {
      mt.trajectory.id += "~sparse";
      split.train.push_back(std::move(mt));
    }
  }

  DiffMMModel<float> model(a.model, net.segment_count(), compute_bounds(split.train));
  model.init(a.train.seed);
  const auto train_set = make_samples(model, split.train, idx);
  const auto valid_set = make_samples(model, split.valid, idx);
  std::vector<std::string> valid_ids;
  for (const auto& mt : split.valid) valid_ids.push_back(mt.trajectory.id);
  a.train.verbose = log_level() == LogLevel::kDebug;
  info() << "training " << to_string(a.model.variant) << " on " << train_set.size() << " trajectories, "
         << model.params().element_count() << " parameters\n";
  const TrainResult res = train(model, train_set, valid_set, valid_ids, a.train);
  model.save(a.checkpoint, {{"seed", a.train.seed},
                            {"steps", a.train.steps},
                            {"n_train", train_set.size()},
                            {"best_epoch", res.best_epoch},
                            {"best_val_acc", res.best_val_acc}});
  const auto& first = res.step_losses.front();
  const auto& last = res.step_losses.back();
  info() << "loss " << first.total << " -> " << last.total << ", best validation accuracy "
         << res.best_val_acc << " (epoch " << res.best_epoch << ")\n"
         << "checkpoint written to " << a.checkpoint.string() << '\n';
}

// ---------------------------------------------------------------- match

struct MatchArgs {
  DataPaths data;
  std::string method = "hmm";
  fs::path checkpoint;
  InferenceConfig inference;
  hmm::HmmConfig hmm;
  double sparsify = 0.0;
  std::string split = "all";
  std::uint64_t seed = 7;
  fs::path out = "matched.csv";
  fs::path geojson;
  int threads = 1;
};

std::vector<MatchedTrajectory> select_trajectories(const MatchArgs& a, std::size_t segment_count) {
  const auto trajs = load_trajectories(a.data.trajectories);
  std::vector<MatchedTrajectory> items;
  const bool have_routes = fs::is_regular_file(a.data.routes);
  if (have_routes) {
    items = join_routes(trajs, load_routes(a.data.routes));
    for (const auto& mt : items) validate(mt, segment_count);
  } else {
    // routes only ride along through split/sparsify
    for (const auto& t : trajs) {
      validate(t);
      items.push_back({t, std::vector<SegmentId>(t.size(), 0)});
    }
  }
  if (a.split != "all") {
    DatasetSplit s = split_dataset(std::move(items), a.seed);
    items = a.split == "train" ? std::move(s.train) : a.split == "valid" ? std::move(s.valid) : std::move(s.test);
  }
  if (a.sparsify > 0.0) items = sparsify_all(items, a.sparsify, a.seed);
  return items;
}

void cmd_match(MatchArgs a) {
  a.data.resolve();
  require_file(a.data.nodes, "node file");
  require_file(a.data.edges, "edge file");
  require_file(a.data.trajectories, "trajectory file");
  const RoadNetwork net = load_network(a.data.nodes, a.data.edges);
  const SpatialIndex idx(net);

  std::unique_ptr<DiffMMModel<float>> model;
  std::unique_ptr<Matcher> matcher;
  if (a.method == "hmm") {
    hmm::validate(a.hmm);
    matcher = std::make_unique<HmmMatcher>(idx, a.hmm);
  } else {
    if (a.checkpoint.empty()) throw CLI::ValidationError("--checkpoint", "required for --method diffmm");
    require_file(a.checkpoint, "checkpoint");
    model = DiffMMModel<float>::load(a.checkpoint);
    if (model->segment_count() != net.segment_count()) {
      throw DataError("checkpoint was trained on " + std::to_string(model->segment_count()) +
                      " segments, network has " + std::to_string(net.segment_count()));
    }
    a.inference.seed = a.seed;
    matcher = std::make_unique<DiffmmMatcher>(*model, idx, a.inference);
  }

  const auto items = select_trajectories(a, net.segment_count());
  std::vector<const Trajectory*> trajs;
  for (const auto& mt : items) trajs.push_back(&mt.trajectory);
  std::vector<std::optional<std::vector<SegmentId>>> results(trajs.size());

  // contiguous shares per thread; results do not depend on the thread count
  const std::size_t n_threads = std::max<std::size_t>(1, std::min<std::size_t>(a.threads, trajs.size()));
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t b = begin; b < end; b += kInferBatch) {
      const std::size_t e = std::min(end, b + kInferBatch);
      auto part = matcher->match_batch(std::span<const Trajectory* const>(trajs.data() + b, e - b));
      std::move(part.begin(), part.end(), results.begin() + static_cast<std::ptrdiff_t>(b));
    }
  };
  if (n_threads == 1) {
    work(0, trajs.size());
  } else {
    std::vector<std::jthread> pool;
    const std::size_t share = (trajs.size() + n_threads - 1) / n_threads;
    for (std::size_t k = 0; k < n_threads; ++k) {
      const std::size_t b = k * share, e = std::min(trajs.size(), b + share);
      if (b < e) pool.emplace_back(work, b, e);
    }
  }

  std::vector<RouteRecord> records;
  std::vector<Trajectory> plain;
  std::vector<std::vector<SegmentId>> routes;
  std::size_t failed = 0;
  for (std::size_t k = 0; k < trajs.size(); ++k) {
    std::vector<SegmentId> r;
    if (results[k]) {
      r = std::move(*results[k]);
    } else {
      r.assign(trajs[k]->size(), -1);
      ++failed;
    }
    records.push_back(to_route_record(*trajs[k], r));
    plain.push_back(*trajs[k]);
    routes.push_back(std::move(r));
  }
  write_routes(records, a.out);
  if (!a.geojson.empty()) write_geojson(plain, routes, net, a.geojson);
  info() << matcher->name() << " matched " << trajs.size() - failed << " of " << trajs.size()
         << " trajectories into " << a.out.string() << '\n';
  if (failed > 0) info() << failed << " unmatchable trajectories written with edge_id -1\n";
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
  fs::path truth;
  fs::path predicted;
  fs::path report;
  std::string name = "predicted";
  bool subset = false;
};

void cmd_evaluate(const EvaluateArgs& a) {
  require_file(a.truth, "truth route file");
  require_file(a.predicted, "predicted route file");
  const auto truth = load_routes(a.truth);
  const auto pred = load_routes(a.predicted);
  std::map<std::string, const RouteRecord*> by_id;
  for (const auto& r : truth) by_id[r.traj_id] = &r;
  std::set<std::string> pred_ids;
  std::vector<std::string> missing;
  for (const auto& r : pred) {
    pred_ids.insert(r.traj_id);
    if (!by_id.contains(r.traj_id)) missing.push_back(r.traj_id + " (not in truth)");
  }
  for (const auto& r : truth) {
    if (!a.subset && !pred_ids.contains(r.traj_id)) missing.push_back(r.traj_id + " (not predicted)");
  }
  if (!missing.empty()) {
    std::string msg = "trajectory ids differ between truth and prediction:";
    for (std::size_t k = 0; k < missing.size() && k < 20; ++k) msg += "\n  " + missing[k];
    if (missing.size() > 20) msg += "\n  ... " + std::to_string(missing.size() - 20) + " more";
    throw DataError(msg);
  }

  EvalReport rep;
  rep.matcher = a.name;
  for (const auto& p : pred) {
    std::map<int, SegmentId> t;
    for (const auto& row : by_id.at(p.traj_id)->rows) t[row.seq] = row.edge;
    std::vector<SegmentId> want, got;
    bool unmatched = !p.rows.empty();
    for (const auto& row : p.rows) {
      const auto it = t.find(row.seq);
      if (it == t.end()) {
        throw DataError("trajectory " + p.traj_id + ": seq " + std::to_string(row.seq) + " has no ground truth");
      }
      want.push_back(it->second);
      got.push_back(row.edge);
      unmatched = unmatched && row.edge < 0;
    }
    rep.ids.push_back(p.traj_id);
    rep.lengths.push_back(want.size());
    rep.unmatchable.push_back(unmatched);
    rep.accuracy.push_back(want.empty() ? 0.0 : accuracy(want, got));
    rep.predictions.push_back(std::move(got));
  }
  rep.mean_accuracy = mean_of(rep.accuracy);
  if (!a.report.empty()) write_report_csv(rep, a.report);
  std::cout << summary(rep) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Map matching of GPS trajectories with an HMM baseline and a one-step diffusion matcher"};
  app.set_config("--config", "", "TOML/INI file with option values; command-line flags take precedence");
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write a synthetic grid city with noisy trajectories");
  g->add_option("--grid", gen.grid, "Intersections as RxC")->capture_default_str();
  g->add_option("--spacing", gen.spacing, "Block length in meters")->capture_default_str()->check(CLI::PositiveNumber);
  g->add_option("--n", gen.synth.n_trajectories, "Number of trajectories")->capture_default_str();
  g->add_option("--noise", gen.synth.noise_sigma_m, "GPS noise sigma in meters")->capture_default_str()->check(CLI::NonNegativeNumber);
  g->add_option("--interval", gen.synth.step_interval_s, "Seconds between fixes")->capture_default_str()->check(CLI::PositiveNumber);
  g->add_option("--speed", gen.synth.speed_mps, "Travel speed in m/s")->capture_default_str()->check(CLI::PositiveNumber);
  g->add_option("--seed", gen.synth.seed, "Root seed")->required();
  g->add_option("--out", gen.out, "Output directory")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the diffusion matcher and write a checkpoint");
  tr.data.add_to(t, true);
  t->add_option("--checkpoint", tr.checkpoint, "Checkpoint to write")->required();
  t->add_option("--variant", tr.variant, "full, no_trans, no_attn or no_shortcut")->capture_default_str();
  t->add_option("--train-size", tr.train_size, "Use only the first N training trajectories (0: all)");
  t->add_option("--sparsify", tr.sparsify, "Train and validate on sparsified trajectories")->check(CLI::Range(0.0, 1.0));
  t->add_option("--mix-sparse", tr.mix_sparse, "Add a sparsified copy of each training trajectory")->check(CLI::Range(0.0, 1.0));
  t->add_option("--steps", tr.train.steps, "Training steps")->capture_default_str();
  t->add_option("--batch-size", tr.train.batch_size, "Trajectories per batch")->capture_default_str();
  t->add_option("--warmup", tr.train.warmup_batches, "Flow-matching batches before self-consistency")->capture_default_str();
  t->add_flag("--combined", tr.train.combined_objective, "Flow and self-consistency targets in every batch");
  t->add_option("--lr", tr.train.lr, "Adam learning rate")->capture_default_str();
  t->add_option("--grad-clip", tr.train.grad_clip, "Global gradient norm limit (0: off)")->capture_default_str();
  t->add_option("--consistency-step", tr.train.loss.consistency_step, "d for self-consistency targets")->capture_default_str();
  t->add_option("--t-grid", tr.train.loss.t_grid, "t is drawn from k / t-grid")->capture_default_str();
  t->add_flag("--ce-time-scaled", tr.train.loss.ce_time_scaled, "Use x_t + (1 - t) s_t as cross-entropy logits");
  t->add_option("--val-max", tr.train.val_max, "Validation trajectories scored per epoch (0: all)")->capture_default_str();
  t->add_option("--metrics", tr.train.metrics_csv, "Per-epoch metrics CSV");
  t->add_option("--steps-csv", tr.train.steps_csv, "Per-step loss CSV");
  t->add_option("--d-model", tr.model.dit.d_model, "Denoiser width")->capture_default_str();
  t->add_option("--dit-blocks", tr.model.dit.n_blocks, "Denoiser blocks")->capture_default_str();
  t->add_option("--dit-heads", tr.model.dit.n_heads, "Denoiser attention heads")->capture_default_str();
  t->add_option("--dit-ffn-mult", tr.model.dit.ffn_mult, "Denoiser FFN width multiplier")->capture_default_str();
  t->add_option("--d-emb", tr.model.encoder.d_emb, "Encoder width")->capture_default_str();
  t->add_option("--enc-layers", tr.model.encoder.n_layers, "Encoder transformer layers")->capture_default_str();
  t->add_option("--enc-heads", tr.model.encoder.n_heads, "Encoder attention heads")->capture_default_str();
  t->add_option("--enc-ffn-mult", tr.model.encoder.ffn_mult, "Encoder FFN width multiplier")->capture_default_str();
  t->add_option("--d-a", tr.model.encoder.d_a, "Hidden width of the candidate scorer")->capture_default_str();
  t->add_option("--delta", tr.model.encoder.delta_m, "Candidate radius in meters")->capture_default_str();
  t->add_option("--seed", tr.train.seed, "Root seed (split, init, batches, noise)")->required();

  MatchArgs ma;
  auto* m = app.add_subcommand("match", "Match trajectories to road segments");
  ma.data.add_to(m, true);
  m->add_option("--method", ma.method, "hmm or diffmm")->capture_default_str()->check(CLI::IsMember({"hmm", "diffmm"}));
  m->add_option("--checkpoint", ma.checkpoint, "Checkpoint for --method diffmm");
  m->add_option("--steps", ma.inference.steps, "Euler steps M for diffmm")->capture_default_str()->check(CLI::PositiveNumber);
  m->add_flag("--restrict-candidates", ma.inference.restrict_candidates, "Argmax over each point's candidate segments only");
  m->add_option("--sparsify", ma.sparsify, "Keep each interior point with this probability")->check(CLI::Range(0.0, 1.0));
  m->add_option("--split", ma.split, "all, train, valid or test")->capture_default_str()->check(CLI::IsMember({"all", "train", "valid", "test"}));
  m->add_option("--sigma", ma.hmm.sigma_emission_m, "HMM emission sigma in meters")->capture_default_str();
  m->add_option("--beta", ma.hmm.beta_transition_m, "HMM transition scale in meters")->capture_default_str();
  m->add_option("--hmm-delta", ma.hmm.candidate_delta_m, "HMM candidate radius in meters")->capture_default_str();
  m->add_option("--out", ma.out, "Route CSV to write")->capture_default_str();
  m->add_option("--geojson", ma.geojson, "Also write a GeoJSON FeatureCollection");
  m->add_option("--threads", ma.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  m->add_option("--seed", ma.seed, "Seed for split, sparsification and inference noise")->capture_default_str();

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Score predicted routes against ground truth");
  e->add_option("--truth", ev.truth, "Ground-truth route CSV")->required();
  e->add_option("--pred", ev.predicted, "Predicted route CSV")->required();
  e->add_option("--report", ev.report, "Per-trajectory report CSV");
  e->add_flag("--subset", ev.subset, "Allow truth trajectories that were not predicted");
  e->add_option("--name", ev.name, "Label used in the summary")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) cmd_generate(gen);
    if (*t) cmd_train(tr);
    if (*m) cmd_match(ma);
    if (*e) cmd_evaluate(ev);
  } catch (const CLI::Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsage;
  } catch (const std::invalid_argument& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsage;
  } catch (const NumericalError& err) {
    std::cerr << "numerical failure: " << err.what() << '\n';
    return kNumerical;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kData;
  }
  return kOk;
}
