// s2d: train a steering vector, calibrate and run the detector, evaluate,
// and run the synthetic experiments.
//
// Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <s2d/config.hpp>
#include <s2d/dataio.hpp>
#include <s2d/detector.hpp>
#include <s2d/errors.hpp>
#include <s2d/linear_observer.hpp>
#include <s2d/metrics.hpp>
#include <s2d/remote_observer.hpp>
#include <s2d/simlab/experiments.hpp>
#include <s2d/simlab/tasks.hpp>
#include <s2d/toy_transformer.hpp>
#include <s2d/trainer.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Usage-level failure: maps to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ObserverSpec {
  std::string kind = "toy";
  s2d::ToyTransformerConfig toy;
  int linear_dim = 16;
  int linear_vocab = 64;
  std::uint64_t linear_seed = 0;
  std::string remote_cmd;
};

struct CalibrationSpec {
  std::string method = "quantile";
  double alpha = 0.05;
  std::optional<double> delta = 0.05;
};

struct RunConfig {
  fs::path base_dir = ".";
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
  ObserverSpec observer;
  s2d::TrainConfig train;
  std::optional<fs::path> data_train, data_calibration, data_test;
  std::optional<fs::path> state, detector;
  CalibrationSpec calibration;
  std::optional<std::string> experiment;
  json sim_params = json::object();
};

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string format = "binary";
  std::string observer;
  std::string remote_cmd;
  std::string input;
};

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

ObserverSpec read_observer(s2d::ConfigReader r) {
  ObserverSpec o;
  o.kind = r.get_or<std::string>("kind", o.kind);
  if (r.has("toy")) o.toy = s2d::simlab::toy_config_from_reader(r.child("toy"), o.toy);
  if (r.has("linear")) {
    auto l = r.child("linear");
    o.linear_dim = l.get_or("dim", o.linear_dim);
    o.linear_vocab = l.get_or("vocab", o.linear_vocab);
    o.linear_seed = l.get_or<std::uint64_t>("seed", o.linear_seed);
    l.finish();
  }
  o.remote_cmd = r.get_or<std::string>("remote_cmd", o.remote_cmd);
  r.finish();
  return o;
}

RunConfig load_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  if (!fs::exists(path)) throw UsageError("config file not found: " + path);
  json j;
  try {
    j = json::parse(s2d::read_file(path));
  } catch (const json::parse_error& e) {
    throw s2d::ConfigError(path + ": " + e.what());
  }
  rc.base_dir = fs::path(path).parent_path();
  if (rc.base_dir.empty()) rc.base_dir = ".";
  s2d::ConfigReader r(j, "");
  if (r.has("seed")) rc.seed = r.get<std::uint64_t>("seed");
  if (r.has("out")) rc.out = resolve(rc.base_dir, r.get<std::string>("out"));
  if (r.has("observer")) rc.observer = read_observer(r.child("observer"));
  if (r.has("train")) rc.train = s2d::simlab::train_config_from_reader(r.child("train"), rc.train);
  if (r.has("data")) {
    auto d = r.child("data");
    for (auto [key, slot] : {std::pair{"train", &rc.data_train}, std::pair{"calibration", &rc.data_calibration},
                             std::pair{"test", &rc.data_test}})
      if (d.has(key)) *slot = resolve(rc.base_dir, d.get<std::string>(key));
    d.finish();
  }
  if (r.has("state")) rc.state = resolve(rc.base_dir, r.get<std::string>("state"));
  if (r.has("detector")) rc.detector = resolve(rc.base_dir, r.get<std::string>("detector"));
  if (r.has("calibration")) {
    auto c = r.child("calibration");
    rc.calibration.method = c.get_or<std::string>("method", rc.calibration.method);
    rc.calibration.alpha = c.get_or("alpha", rc.calibration.alpha);
    if (c.has("delta")) rc.calibration.delta = c.get<double>("delta");
    c.finish();
  }
  if (r.has("simulate")) {
    auto s = r.child("simulate");
    rc.experiment = s.get<std::string>("experiment");
    if (s.has("params")) rc.sim_params = s.get<json>("params");
    s.finish();
  }
  r.finish();
  return rc;
}

void apply_flags(RunConfig& rc, const Flags& f) {
  if (f.seed) rc.seed = f.seed;
  if (!f.out.empty()) rc.out = f.out;
  if (!f.observer.empty()) rc.observer.kind = f.observer;
  if (!f.remote_cmd.empty()) rc.observer.remote_cmd = f.remote_cmd;
  if (rc.seed) rc.train.seed = *rc.seed;
  if (rc.observer.kind != "toy" && rc.observer.kind != "linear" && rc.observer.kind != "remote")
    throw UsageError("--observer must be toy, linear or remote");
  if (f.format != "binary" && f.format != "jsonl") throw UsageError("--format must be binary or jsonl");
}

const fs::path& require(const std::optional<fs::path>& p, const char* key) {
  if (!p) throw s2d::ConfigError(std::string("missing required key '") + key + "'");
  return *p;
}

fs::path out_dir(const RunConfig& rc) {
  const fs::path& dir = require(rc.out, "out");
  fs::create_directories(dir);
  return dir;
}

void require_file(const fs::path& p, const char* key) {
  if (!fs::exists(p)) throw UsageError(std::string(key) + ": file not found: " + p.string());
}

std::unique_ptr<s2d::Observer> make_observer(const ObserverSpec& o) {
  if (o.kind == "toy") return std::make_unique<s2d::ToyTransformer>(o.toy);
  if (o.kind == "linear") return std::make_unique<s2d::LinearSphereObserver>(o.linear_dim, o.linear_vocab, o.linear_seed);
  if (o.remote_cmd.empty()) throw s2d::ConfigError("missing required key 'observer.remote_cmd' (or --remote-cmd)");
  return std::make_unique<s2d::RemoteObserver>(o.remote_cmd);
}

/// Representations of a dataset file: token files go through the observer under v.
s2d::RepresentationDataset load_representations(const fs::path& path, const RunConfig& rc, const s2d::SteeringVector& v,
                                                const char* key) {
  require_file(path, key);
  if (fs::file_size(path) == 0) throw UsageError(std::string(key) + ": dataset is empty: " + path.string());
  if (s2d::is_token_file(path)) {
    const auto tokens = s2d::read_tokens(path);
    if (tokens.items.empty()) throw UsageError(std::string(key) + ": dataset is empty: " + path.string());
    const auto obs = make_observer(rc.observer);
    s2d::require_same_dim(v.size(), obs->dim(), "observer vs steering vector");
    return s2d::represent_tokens(tokens.items, *obs, v, rc.train.extraction);
  }
  auto ds = s2d::read_representations(path);
  if (ds.empty()) throw UsageError(std::string(key) + ": dataset is empty: " + path.string());
  return ds;
}

void write_reps(const s2d::RepresentationDataset& ds, const fs::path& stem, const std::string& format) {
  if (format == "binary")
    s2d::write_binary(ds, fs::path(stem).concat(".bin"));
  else
    s2d::write_jsonl(ds, fs::path(stem).concat(".jsonl"));
}

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

// ---------------------------------------------------------------------------

int cmd_train(RunConfig& rc, const Flags& f) {
  const fs::path& data_path = require(rc.data_train, "data.train");
  require_file(data_path, "data.train");
  const auto tokens = s2d::read_tokens(data_path);
  if (tokens.items.empty()) throw UsageError("data.train: dataset is empty");
  const auto obs = make_observer(rc.observer);
  const fs::path dir = out_dir(rc);
  const auto result = s2d::train(tokens.items, *obs, rc.train);
  s2d::write_state(result.state, rc.train.kappa, dir / "state.json");
  s2d::write_file_atomic(dir / "train_report.json", s2d::to_json(result.report).dump(2) + "\n");
  s2d::write_file_atomic(dir / "timing.json", json{{"train_wall_time_s", result.report.wall_time_s}}.dump(2) + "\n");
  write_reps(s2d::represent_tokens(tokens.items, *obs, result.state.v, rc.train.extraction), dir / "train_reps", f.format);
  std::cerr << "trained " << result.state.step << " steps; final loss " << fmt(result.state.loss_history.back())
            << ", prototype gap " << fmt(result.state.proto_gap()) << "; wrote " << (dir / "state.json").string()
            << "\n";
  return 0;
}

int cmd_calibrate(RunConfig& rc, const Flags&) {
  const fs::path dir = out_dir(rc);
  const fs::path state_path = rc.state ? *rc.state : dir / "state.json";
  require_file(state_path, "state");
  const auto loaded = s2d::read_state(state_path);
  const auto ds = load_representations(require(rc.data_calibration, "data.calibration"), rc, loaded.state.v,
                                       "data.calibration");
  s2d::require_same_dim(ds.dim, loaded.state.v.size(), "calibration data vs steering state");
  const s2d::ClassPair pair = loaded.state.pair(loaded.kappa);
  std::vector<double> scores, null_scores;
  std::vector<int> labels;
  for (const auto& r : ds.records) {
    const double s = s2d::score(s2d::UnitVector::from_normalized(r.f), pair);
    scores.push_back(s);
    labels.push_back(r.label);
    if (r.label == 0) null_scores.push_back(s);
  }
  s2d::DetectorArtifact art{loaded.state.v, pair, {}, std::nullopt, {}};
  const auto& c = rc.calibration;
  if (c.method == "quantile") {
    if (null_scores.empty()) throw UsageError("data.calibration: no label-0 (null) records");
    if (null_scores.size() < scores.size())
      s2d::warn("calibrate: ignoring " + std::to_string(scores.size() - null_scores.size()) + " label-1 records");
    art.tau = s2d::calibrate_quantile(null_scores, c.alpha);
    art.alpha = c.alpha;
    art.calib = {"quantile", null_scores.size(), c.delta};
    std::size_t fp = 0;
    for (double s : null_scores) fp += static_cast<std::size_t>(s2d::decide(art.tau, s));
    std::cerr << "tau " << (art.tau.sentinel ? std::string("sentinel (never reject)") : fmt(art.tau.value))
              << "; calibration FPR " << fmt(static_cast<double>(fp) / null_scores.size());
    if (c.delta) std::cerr << "; band " << fmt(s2d::dkw_band(null_scores.size(), *c.delta));
    std::cerr << "\n";
  } else if (c.method == "youden") {
    const auto y = s2d::calibrate_youden(scores, labels);
    art.tau = y.tau;
    art.calib = {"youden", scores.size(), std::nullopt};
    std::cerr << "tau " << fmt(y.tau.value) << "; J " << fmt(y.j) << " (TPR " << fmt(y.tpr) << ", FPR " << fmt(y.fpr)
              << ")\n";
  } else {
    throw s2d::ConfigError("calibration.method must be 'quantile' or 'youden'");
  }
  s2d::write_detector(art, dir / "detector.json");
  return 0;
}

s2d::DetectorArtifact load_detector(const RunConfig& rc) {
  const fs::path path = rc.detector ? *rc.detector : require(rc.out, "detector") / "detector.json";
  require_file(path, "detector");
  return s2d::read_detector(path);
}

fs::path test_input(const RunConfig& rc, const Flags& f) {
  return f.input.empty() ? require(rc.data_test, "data.test") : fs::path(f.input);
}

int cmd_detect(RunConfig& rc, const Flags& f) {
  const auto art = load_detector(rc);
  const auto ds = load_representations(test_input(rc, f), rc, art.v, "data.test");
  s2d::require_same_dim(ds.dim, art.dim(), "input data vs detector");
  std::cout << "score,decision\n";
  for (const auto& r : ds.records) {
    const double s = s2d::score_representation(art, s2d::UnitVector::from_normalized(r.f));
    std::cout << s2d::simlab::csv_num(s) << ',' << s2d::decide(art, s) << '\n';
  }
  std::cout.flush();
  return 0;
}

int cmd_eval(RunConfig& rc, const Flags& f) {
  const auto art = load_detector(rc);
  const auto ds = load_representations(test_input(rc, f), rc, art.v, "data.test");
  s2d::require_same_dim(ds.dim, art.dim(), "input data vs detector");
  std::vector<double> pos, neg;
  for (const auto& r : ds.records)
    (r.label == 1 ? pos : neg).push_back(s2d::score_representation(art, s2d::UnitVector::from_normalized(r.f)));
  if (pos.empty() || neg.empty()) throw UsageError("data.test: evaluation needs both labels");
  const fs::path dir = out_dir(rc);
  const auto m = s2d::evaluate_scores(art.tau, pos, neg);
  s2d::write_file_atomic(dir / "metrics.json", s2d::to_json(m).dump(2) + "\n");
  s2d::write_file_atomic(dir / "roc.csv", s2d::roc_csv(s2d::roc(pos, neg)));
  std::cerr << "AUROC " << fmt(m.auroc) << "; TPR@1% " << fmt(m.tpr_at_1e2) << "; Type-I " << fmt(m.errors.type_i)
            << "; Type-II " << fmt(m.errors.type_ii) << "\n";
  return 0;
}

int cmd_simulate(RunConfig& rc, const Flags& f) {
  using namespace s2d::simlab;
  if (!rc.experiment) throw s2d::ConfigError("missing required key 'simulate.experiment'");
  json params = rc.sim_params;
  if (!params.is_object()) throw s2d::ConfigError("simulate.params must be an object");
  if (rc.seed) params["seed"] = *rc.seed;
  const fs::path dir = out_dir(rc);
  const std::string& name = *rc.experiment;
  fs::path written;
  if (name == "type_i") {
    const auto r = exp_type_i_control(type_i_config_from_json(params));
    written = write_results(dir, name, to_json(r), to_csv(r));
    std::cerr << "coverage " << fmt(r.coverage) << " (band " << fmt(r.band) << ")\n";
  } else if (name == "tracking") {
    const auto r = exp_tracking(tracking_config_from_json(params));
    written = write_results(dir, name, to_json(r), to_csv(r));
    for (const auto& s : r.summary)
      std::cerr << "rho " << fmt(s.rho) << ": final error " << fmt(s.mean_final) << ", plateau " << fmt(s.mean_plateau)
                << "\n";
  } else if (name == "shift") {
    const auto r = exp_shift(shift_config_from_json(params));
    written = write_results(dir, name, to_json(r), to_csv(r));
    std::cerr << "bound held in " << (r.all_hold ? "all" : "NOT all") << " " << r.runs.size() << " runs\n";
  } else if (name == "separability") {
    const auto r = exp_separability(separability_config_from_json(params));
    written = write_results(dir, name, to_json(r), to_csv(r));
    std::cerr << "AUROC learned " << fmt(r.auroc_learned) << " vs frozen " << fmt(r.auroc_frozen) << "; gap "
              << fmt(r.gap_learned) << " vs " << fmt(r.gap_frozen) << "\n";
  } else if (name == "gen_reps") {
    s2d::ConfigReader r(params, "simulate.params");
    const int d = r.get_or("d", 16);
    const double kappa = r.get_or("kappa", 10.0);
    const double sep = r.get_or("separation", 0.6);
    const auto n = r.get_or<std::size_t>("n_per_class", 1000);
    const auto seed = r.get_or<std::uint64_t>("seed", 0);
    r.finish();
    if (d < 2) throw s2d::ConfigError("simulate.params.d must be >= 2");
    s2d::Vector m1 = s2d::Vector::Zero(d);
    m1[0] = std::cos(sep);
    m1[1] = std::sin(sep);
    const SyntheticRepTask task(s2d::VmfModel(s2d::UnitVector::basis(d, 0), kappa),
                                s2d::VmfModel(s2d::UnitVector(m1), kappa));
    write_reps(gen_representations(task, n, seed), dir / "reps", f.format);
    written = dir / (f.format == "binary" ? "reps.bin" : "reps.jsonl");
  } else if (name == "gen_tokens") {
    s2d::ConfigReader r(params, "simulate.params");
    const int vocab = r.get_or("vocab", 64);
    const double mix = r.get_or("mix", 0.3);
    const auto n = r.get_or<std::size_t>("n_per_class", 200);
    const int min_len = r.get_or("min_len", 8);
    const int max_len = r.get_or("max_len", 16);
    const auto task_seed = r.get_or<std::uint64_t>("task_seed", 7);
    const auto seed = r.get_or<std::uint64_t>("seed", 0);
    r.finish();
    const auto task = overlapping_token_task(vocab, mix, task_seed, min_len, max_len);
    s2d::write_tokens({vocab, gen_token_sequences(task, n, seed), std::nullopt}, dir / "tokens.jsonl");
    written = dir / "tokens.jsonl";
  } else {
    throw s2d::ConfigError("simulate.experiment must be one of type_i, tracking, shift, separability, gen_reps, "
                           "gen_tokens (got '" + name + "')");
  }
  std::cout << written.string() << "\n";
  return 0;
}

int cmd_serve(RunConfig& rc, const Flags&) {
  if (rc.observer.kind == "remote") throw UsageError("serve: the remote observer cannot be served");
  const auto obs = make_observer(rc.observer);
  return s2d::serve_observer(*obs, std::cin, std::cout);
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"s2d: steered-representation detector of generated text"};
  app.require_subcommand(1);
  Flags flags;
  app.add_option("--config", flags.config, "JSON run configuration");
  app.add_option("--seed", flags.seed, "Seed (overrides the config)");
  app.add_option("--out", flags.out, "Output directory (overrides the config)");
  app.add_option("--format", flags.format, "Representation output format: binary or jsonl");
  app.add_option("--observer", flags.observer, "Observer backend: toy, linear or remote");
  app.add_option("--remote-cmd", flags.remote_cmd, "Command that starts a remote observer backend");

  struct Sub {
    const char* name;
    const char* help;
    int (*run)(RunConfig&, const Flags&);
  };
  const Sub subs[] = {
      {"train", "Fit the steering vector and class prototypes", cmd_train},
      {"calibrate", "Calibrate the detector threshold", cmd_calibrate},
      {"detect", "Score a dataset and print score,decision CSV", cmd_detect},
      {"eval", "Write detection metrics and the ROC curve", cmd_eval},
      {"simulate", "Run a synthetic experiment by name", cmd_simulate},
      {"serve", "Answer the observer protocol on stdin/stdout", cmd_serve},
  };
  std::vector<CLI::App*> apps;
  for (const auto& s : subs) {
    auto* sub = app.add_subcommand(s.name, s.help);
    sub->fallthrough();
    if (std::string(s.name) == "detect" || std::string(s.name) == "eval")
      sub->add_option("--input", flags.input, "Dataset to score (overrides data.test)");
    apps.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    for (std::size_t i = 0; i < apps.size(); ++i) {
      if (!apps[i]->parsed()) continue;
      RunConfig rc = load_config(flags.config);
      apply_flags(rc, flags);
      return subs[i].run(rc, flags);
    }
  } catch (const UsageError& e) {
    std::cerr << "s2d: error: " << e.what() << "\n";
    return 2;
  } catch (const s2d::ConfigError& e) {
    std::cerr << "s2d: config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "s2d: error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
