#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mnmef/checkpoint.hpp"
#include "mnmef/config.hpp"
#include "mnmef/dynamics.hpp"
#include "mnmef/eval.hpp"
#include "mnmef/mnmef.hpp"
#include "mnmef/trajectory_store.hpp"
#include "mnmef/training.hpp"
#include "mnmef/verify.hpp"

namespace fs = std::filesystem;
using namespace mnmef;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::kConfig:
    case ErrorKind::kPrecondition:
      return kExitConfig;
    case ErrorKind::kData:
    case ErrorKind::kDimMismatch:
    case ErrorKind::kShapeMismatch:
    case ErrorKind::kIndexOutOfRange:
    case ErrorKind::kDegenerateTruth:
      return kExitData;
    case ErrorKind::kDivergence:
    case ErrorKind::kNonFinite:
    case ErrorKind::kAllDiverged:
    case ErrorKind::kNotSPD:
    case ErrorKind::kEigFailure:
      return kExitDivergence;
    default:
      return kExitFailure;
  }
}

/// Settings gathered from the command line before the config file is read.
struct Invocation {
  std::string config_path;
  std::map<std::string, std::string> overrides;
};

void setting(CLI::App* app, Invocation& inv, const std::string& flags, const std::string& key,
             const std::string& help) {
  app->add_option_function<std::string>(
      flags, [&inv, key](const std::string& v) { inv.overrides[key] = v; }, help);
}

void toggle(CLI::App* app, Invocation& inv, const std::string& flags, const std::string& key,
            const std::string& help) {
  app->add_flag_callback(flags, [&inv, key] { inv.overrides[key] = "true"; }, help);
}

Config resolve(const Invocation& inv, const std::string& command) {
  Config c = inv.config_path.empty() ? Config{} : Config::from_file(inv.config_path);
  for (const auto& [k, v] : inv.overrides) c.set(k, v);
  c.set("command", command);
  c.get_string("command", command);
  return c;
}

/// Writes the resolved settings next to the outputs and warns about keys
/// that no part of the command consulted.
void finish_config(const Config& c, const fs::path& out) {
  c.write_snapshot(out / "resolved_config.txt");
  for (const auto& k : c.unused_keys()) std::cerr << "warning: setting '" << k << "' is not used by this command\n";
}

std::size_t default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

SystemSpec system_from_config(Config& c) {
  const SystemKind kind = parse_system(c.get_string("system", "lorenz63"));
  const NoiseLevels noise{c.get_double("sigma_y", 1.0),
                          c.get_double("sigma_v", kind == SystemKind::kLinear ? 0.01 : 0.0)};
  require(noise.sigma_y > 0.0 && noise.sigma_v >= 0.0, ErrorKind::kConfig, "noise levels must be positive");
  switch (kind) {
    case SystemKind::kLorenz63: return lorenz63_system(noise);
    case SystemKind::kLorenz96: return lorenz96_system(noise, 40, 8.0, 4, c.get_size("obs_offset", 0));
    case SystemKind::kKs: return ks_system(noise, {}, 8, c.get_size("obs_offset", 0));
    case SystemKind::kLinear: return linear_system(noise);
  }
  fail(ErrorKind::kConfig, "unknown system");
}

struct LoadedData {
  StoreManifest manifest;
  SystemSpec spec;
  std::vector<TruthRun> runs;
};

/// Loads the store named by `data`; `trajectories` keeps a prefix of it
/// (0 keeps everything).
LoadedData load_data(Config& c, std::size_t default_limit = 0) {
  LoadedData d;
  const fs::path dir = c.require_string("data");
  d.runs = load_store(dir, &d.manifest);
  d.spec = system_from_manifest(d.manifest);
  const std::size_t limit = c.get_size("trajectories", default_limit);
  if (limit > 0) {
    require(limit <= d.runs.size(), ErrorKind::kConfig,
            "requested " + std::to_string(limit) + " trajectories but the store holds " +
                std::to_string(d.runs.size()));
    d.runs.resize(limit);
  }
  return d;
}

LossKind parse_loss(const std::string& s) {
  if (s == "normalized") return LossKind::kNormalized;
  if (s == "unnormalized") return LossKind::kUnnormalized;
  fail(ErrorKind::kConfig, "unknown loss '" + s + "' (normalized|unnormalized)");
}

std::string loss_name(LossKind k) { return k == LossKind::kNormalized ? "normalized" : "unnormalized"; }

void print_epoch(const EpochLog& e) {
  std::printf("epoch %4zu  loss %.6g  wall %.1fs\n", e.epoch, e.train_loss, e.wall_seconds);
  std::fflush(stdout);
}

std::string fmt(double v) { return csv::number(v); }

// ---------------------------------------------------------------------------

int cmd_gen_data(Config& c) {
  const SystemSpec spec = system_from_config(c);
  const fs::path out = c.require_string("out");
  const std::size_t count = c.get_size("traj", 16);
  const std::size_t steps = c.get_size("len", 100);
  const std::uint64_t seed = c.get_u64("seed", 0);
  BurnIn burn;
  burn.min_steps = c.get_size("burn_min", burn.min_steps);
  burn.max_steps = c.get_size("burn_max", burn.max_steps);
  require(burn.min_steps <= burn.max_steps, ErrorKind::kConfig, "burn_min exceeds burn_max");
  const std::string mode = c.get_string("mode", "per-trajectory");
  require(mode == "per-trajectory" || mode == "single", ErrorKind::kConfig,
          "mode must be per-trajectory or single");
  require(count >= 1 && steps >= 1, ErrorKind::kConfig, "traj and len must be >= 1");
  const auto runs = generate_dataset(spec, count, steps, seed, burn,
                                     mode == "single" ? TrajectoryMode::kSingleLongTrajectory
                                                      : TrajectoryMode::kPerTrajectoryBurnIn);
  save_store(out, spec, runs, seed,
             {{"burn_min", std::to_string(burn.min_steps)},
              {"burn_max", std::to_string(burn.max_steps)},
              {"mode", mode}});
  finish_config(c, out);
  std::printf("wrote %zu %s trajectories of length %zu to %s\n", count, spec.name.c_str(), steps, out.c_str());
  return kExitOk;
}

TrainConfig train_config(Config& c, const TrainConfig& defaults) {
  TrainConfig tc = defaults;
  tc.members = c.get_size("members", defaults.members);
  tc.epochs = c.get_size("epochs", defaults.epochs);
  tc.batch = c.get_size("batch", defaults.batch);
  tc.lr = c.get_double("lr", defaults.lr);
  tc.weight_decay = c.get_double("weight_decay", defaults.weight_decay);
  tc.detach_horizon = c.get_size("detach_horizon", defaults.detach_horizon);
  tc.seed = c.get_u64("seed", defaults.seed);
  tc.workers = c.get_size("workers", default_workers());
  tc.loss = parse_loss(c.get_string("loss", loss_name(defaults.loss)));
  tc.init_cov = c.get_double("init_cov", defaults.init_cov);
  require(tc.members >= 2 && tc.batch >= 1 && tc.detach_horizon >= 1 && tc.lr > 0.0, ErrorKind::kConfig,
          "members >= 2, batch >= 1, detach_horizon >= 1 and lr > 0 are required");
  return tc;
}

CheckpointMeta training_meta(const TrainConfig& tc, const std::string& data, const std::string& stage) {
  CheckpointMeta meta;
  meta.detach_horizon = tc.detach_horizon;
  meta.extra = {{"stage", stage},
                {"members", std::to_string(tc.members)},
                {"epochs", std::to_string(tc.epochs)},
                {"batch", std::to_string(tc.batch)},
                {"lr", fmt(tc.lr)},
                {"weight_decay", fmt(tc.weight_decay)},
                {"seed", std::to_string(tc.seed)},
                {"loss", loss_name(tc.loss)},
                {"data", data}};
  return meta;
}

int cmd_pretrain(Config& c) {
  LoadedData d = load_data(c);
  const fs::path out = c.require_string("out");
  const TrainConfig tc = train_config(c, TrainConfig{});
  ModelConfig mc;
  mc.activation = parse_activation(c.get_string("activation", activation_name(mc.activation)));
  mc.loc_output = parse_loc_output(c.get_string("bounded_layer", loc_output_name(mc.loc_output)));
  mc.zero_init_heads = c.get_bool("zero_init_heads", mc.zero_init_heads);
  mc.init_seed = c.get_u64("init_seed", tc.seed);
  MnmefModel model = make_model(d.spec, mc);
  model.clamp = c.get_double("clamp", d.spec.clamp);
  d.spec.clamp = model.clamp;
  finish_config(c, out);
  const CheckpointMeta meta = training_meta(tc, c.resolved().at("data"), "pretrain");
  std::vector<EpochLog> log;
  pretrain(model, d.spec, d.runs, tc, [&](const EpochLog& e, const MnmefModel& m) {
    print_epoch(e);
    log.push_back(e);
    save_checkpoint(out / "model.ckpt", m, meta);
    write_training_log(out / "training_log.csv", log);
  });
  std::printf("checkpoint %s\n", (out / "model.ckpt").c_str());
  return kExitOk;
}

int cmd_finetune(Config& c) {
  const fs::path ckpt = c.require_string("checkpoint");
  const std::size_t stored = read_manifest(c.require_string("data")).count;
  LoadedData d = load_data(c, std::max<std::size_t>(1, stored / 2));
  const fs::path out = c.require_string("out");
  LoadedCheckpoint lc = load_checkpoint(ckpt, d.spec);
  auto extra = [&](const std::string& k, const std::string& fallback) {
    const auto it = lc.meta.extra.find(k);
    return it == lc.meta.extra.end() ? fallback : it->second;
  };
  TrainConfig pre;
  try {
    pre.lr = std::stod(extra("lr", "1e-3"));
    pre.batch = std::stoul(extra("batch", "32"));
  } catch (const std::exception&) {
    fail(ErrorKind::kData, "checkpoint sidecar has a malformed lr or batch");
  }
  pre.detach_horizon = lc.meta.detach_horizon;
  pre.loss = parse_loss(extra("loss", "normalized"));
  pre.seed = std::stoull(extra("seed", "0"));
  const TrainConfig tc = train_config(c, finetune_config(pre, 40));
  d.spec.clamp = lc.model.clamp;
  finish_config(c, out);
  CheckpointMeta meta = training_meta(tc, c.resolved().at("data"), "finetune");
  meta.extra["pretrained"] = ckpt.string();
  std::vector<EpochLog> log;
  finetune(lc.model, d.spec, d.runs, tc, [&](const EpochLog& e, const MnmefModel& m) {
    print_epoch(e);
    log.push_back(e);
    save_checkpoint(out / "model.ckpt", m, meta);
    write_training_log(out / "training_log.csv", log);
  });
  std::printf("checkpoint %s\n", (out / "model.ckpt").c_str());
  return kExitOk;
}

FilterSettings filter_settings(Config& c, Method method) {
  FilterSettings fs;
  fs.method = method;
  fs.members = c.get_size("members", 10);
  fs.init_cov = c.get_double("init_cov", 1.0);
  if (method == Method::kIenkf) {
    fs.ienkf_max_iter = c.get_size("ienkf_max_iter", fs.ienkf_max_iter);
    fs.ienkf_tol = c.get_double("ienkf_tol", fs.ienkf_tol);
  }
  return fs;
}

int cmd_run_filter(Config& c) {
  const Method method = parse_method(c.get_string("method", "enkf"));
  LoadedData d = load_data(c);
  const fs::path out = c.require_string("out");
  FilterSettings fs = filter_settings(c, method);
  fs.alpha = c.get_double("alpha", 1.0);
  fs.radius = c.get_double("radius", method == Method::kLetkf ? 4.0 : kNoLocalization);
  std::optional<MnmefModel> model;
  if (method == Method::kMnmef) {
    const bool zero = c.get_bool("zero_heads", false);
    fs.step_options.zero_heads = zero;
    fs.step_options.zero_inflation = c.get_bool("zero_inflation", false);
    if (c.has("checkpoint") || !zero) {
      model = load_checkpoint(c.require_string("checkpoint"), d.spec).model;
    } else {
      model = make_model(d.spec);
    }
    fs.model = &*model;
  }
  const std::uint64_t seed = c.get_u64("seed", 0);
  const std::size_t workers = c.get_size("workers", default_workers());
  finish_config(c, out);
  std::vector<RunRecord> records;
  const MetricReport rep = evaluate_filter(d.spec, d.runs, fs, seed, workers, &records);
  write_metrics_csv(out / "metrics.csv", rep);
  write_summary_csv(out / "summary.csv", {rep});
  for (const auto& r : records) write_run_record_csv(run_record_path(out / "records", r.trajectory), r);
  std::printf("%s on %s: N=%zu mean R-RMSE %s std %s (%zu diverged of %zu)\n", rep.method.c_str(),
              rep.system.c_str(), rep.members, fmt(rep.mean).c_str(), fmt(rep.std).c_str(), rep.diverged,
              rep.values.size());
  return rep.diverged > 0 ? kExitDivergence : kExitOk;
}

int cmd_grid_search(Config& c) {
  const Method method = parse_method(c.get_string("method", "enkf"));
  require(method != Method::kMnmef, ErrorKind::kConfig, "grid search tunes the classical filters only");
  LoadedData d = load_data(c);
  const fs::path out = c.require_string("out");
  const FilterSettings base = filter_settings(c, method);
  const auto alphas = c.get_doubles("alphas", {1.0, 1.05, 1.1, 1.15, 1.2});
  const auto radii = c.get_doubles("radii", method == Method::kLetkf ? std::vector<double>{1, 2, 3, 4}
                                                                      : std::vector<double>{kNoLocalization});
  const std::uint64_t seed = c.get_u64("seed", 0);
  const std::size_t workers = c.get_size("workers", default_workers());
  finish_config(c, out);
  const GridResult g = grid_search(d.spec, d.runs, base, alphas, radii, seed, workers);
  write_heatmap_csv(out / "heatmap.csv", g);
  std::ofstream best(out / "best.txt");
  best << "method = " << method_name(method) << "\nalpha = " << fmt(g.best.alpha) << "\nradius = " << fmt(g.best.radius)
       << "\nmean_r_rmse = " << fmt(g.best.mean) << "\n";
  std::printf("best alpha %s radius %s mean R-RMSE %s\n", fmt(g.best.alpha).c_str(), fmt(g.best.radius).c_str(),
              fmt(g.best.mean).c_str());
  return kExitOk;
}

int cmd_evaluate(Config& c) {
  LoadedData d = load_data(c);
  const fs::path estimates = c.require_string("estimates");
  const fs::path out = c.require_string("out");
  MetricReport rep;
  rep.method = c.get_string("method", "estimate");
  rep.system = d.spec.name;
  rep.members = c.get_size("members", 0);
  rep.sigma_y = std::sqrt(d.spec.obs_cov(0, 0));
  rep.seed = c.get_u64("seed", 0);
  const bool has_benchmark = c.has("benchmark");
  const double benchmark = c.get_double("benchmark", 0.0);
  finish_config(c, out);
  for (std::size_t i = 0; i < d.runs.size(); ++i) {
    const Matrix est = read_run_record_csv(run_record_path(estimates, i));
    const Matrix truth = analysis_truth(d.runs[i]);
    require(est.rows() == truth.rows() && est.cols() == truth.cols(), ErrorKind::kData,
            "estimate " + run_record_path(estimates, i).string() + " does not match the trajectory shape");
    rep.values.push_back(all_finite(est) ? r_rmse(est, truth) : std::numeric_limits<double>::quiet_NaN());
  }
  rep.summarize();
  write_metrics_csv(out / "metrics.csv", rep);
  write_summary_csv(out / "summary.csv", {rep});
  std::printf("mean R-RMSE %s std %s over %zu trajectories\n", fmt(rep.mean).c_str(), fmt(rep.std).c_str(),
              rep.values.size());
  if (has_benchmark)
    std::printf("relative improvement over %s: %s\n", fmt(benchmark).c_str(),
                fmt(relative_improvement(rep.mean, benchmark)).c_str());
  return rep.diverged > 0 ? kExitDivergence : kExitOk;
}

int cmd_linear_exp(Config& c) {
  const fs::path out = c.require_string("out");
  LinearExperimentConfig lc;
  TrainConfig defaults;
  defaults.trajectories = 256;
  defaults.epochs = 20;
  lc.train = train_config(c, defaults);
  lc.train.trajectories = c.get_size("trajectories", defaults.trajectories);
  lc.test_trajectories = c.get_size("test_trajectories", lc.test_trajectories);
  lc.test_steps = c.get_size("test_steps", lc.test_steps);
  lc.train.steps = c.get_size("len", lc.train.steps);
  lc.data_seed = c.get_u64("data_seed", lc.data_seed);
  lc.eval_seed = c.get_u64("eval_seed", lc.eval_seed);
  lc.burn = BurnIn::fixed(c.get_size("burn_in", 100));
  lc.model.init_seed = lc.train.seed;
  std::vector<std::string> names;
  for (const auto& s : linear_settings()) names.push_back(s.name);
  const std::string wanted = c.get_string("settings", "all");
  if (wanted != "all") {
    std::vector<LinearSetting> chosen;
    std::stringstream ss(wanted);
    std::string item;
    while (std::getline(ss, item, ';')) {
      bool found = false;
      for (const auto& s : linear_settings())
        if (s.name == item) {
          chosen.push_back(s);
          found = true;
        }
      require(found, ErrorKind::kConfig, "unknown linear setting '" + item + "'");
    }
    lc.settings = chosen;
  }
  finish_config(c, out);
  const auto curve = linear_experiment(lc, [](const LinearCurvePoint& p) {
    std::printf("%-9s epoch %3zu  W2 %s  baseline %s\n", p.setting.c_str(), p.epoch, fmt(p.w2).c_str(),
                fmt(p.baseline_w2).c_str());
    std::fflush(stdout);
  });
  write_linear_curve_csv(out / "linear_curve.csv", curve);
  return kExitOk;
}

int cmd_verify(Config& c) {
  const bool quick = c.get_bool("quick", false);
  const std::size_t workers = c.get_size("workers", default_workers());
  const std::string out = c.get_string("out", "");
  if (!out.empty()) finish_config(c, out);
  std::vector<verify::CheckResult> results;
  auto report = [&](verify::CheckResult r) {
    std::printf("%s  %-24s %s (value %s, bound %s)\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str(),
                fmt(r.value).c_str(), fmt(r.threshold).c_str());
    std::fflush(stdout);
    results.push_back(std::move(r));
  };
  report(verify::enkf_reduction_check(quick ? 5 : 50));
  report(verify::permutation_check());
  report(verify::primitive_gradient_check(quick ? 3 : 20));
  report(verify::end_to_end_gradient_check());
  report(verify::distance_table_check());
  report(verify::kalman_consistency_check(quick ? 256 : 1024, 1, quick ? 20 : 100, 2.0, 505, workers));
  if (!out.empty()) {
    std::ofstream os(fs::path(out) / "verify.txt");
    for (const auto& r : results)
      os << (r.passed ? "PASS" : "FAIL") << "," << r.name << "," << fmt(r.value) << "," << fmt(r.threshold) << "\n";
  }
  for (const auto& r : results)
    if (!r.passed) return kExitFailure;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ensemble Kalman filters and the measure-neural-mapping enhanced ensemble filter"};
  app.require_subcommand(1);
  Invocation inv;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", inv.config_path, "key = value settings file; flags override it");
    setting(sub, inv, "--out", "out", "output directory");
    setting(sub, inv, "--seed", "seed", "random seed");
  };
  auto training = [&](CLI::App* sub, bool reads_store = true) {
    if (reads_store) setting(sub, inv, "--data", "data", "training trajectory store");
    setting(sub, inv, "--trajectories,-M", "trajectories", "number of training trajectories to use");
    setting(sub, inv, "--members,-N", "members", "ensemble size");
    setting(sub, inv, "--epochs", "epochs", "training epochs");
    setting(sub, inv, "--batch", "batch", "mini-batch size");
    setting(sub, inv, "--lr", "lr", "learning rate");
    setting(sub, inv, "--weight-decay", "weight_decay", "decoupled weight decay");
    setting(sub, inv, "--detach-horizon,--j0", "detach_horizon", "gradient detach horizon J0");
    setting(sub, inv, "--loss", "loss", "normalized | unnormalized");
    setting(sub, inv, "--workers", "workers", "worker threads");
    setting(sub, inv, "--init-cov", "init_cov", "initial ensemble variance");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "simulate truth trajectories and observations");
  common(gen);
  setting(gen, inv, "--system", "system", "lorenz63 | lorenz96 | ks | linear");
  setting(gen, inv, "--traj", "traj", "number of trajectories");
  setting(gen, inv, "--len", "len", "observations per trajectory");
  setting(gen, inv, "--sigma-y", "sigma_y", "observation noise std");
  setting(gen, inv, "--sigma-v", "sigma_v", "process noise std");
  setting(gen, inv, "--burn-min", "burn_min", "minimum burn-in steps");
  setting(gen, inv, "--burn-max", "burn_max", "maximum burn-in steps");
  gen->add_option_function<std::string>(
      "--burn-in", [&](const std::string& v) { inv.overrides["burn_min"] = inv.overrides["burn_max"] = v; },
      "fixed burn-in steps");
  setting(gen, inv, "--mode", "mode", "per-trajectory | single");
  setting(gen, inv, "--obs-offset", "obs_offset", "first observed coordinate (lorenz96, ks)");

  CLI::App* pre = app.add_subcommand("pretrain", "train every partition of the learned filter");
  common(pre);
  training(pre);
  setting(pre, inv, "--activation", "activation", "relu | logistic");
  setting(pre, inv, "--bounded-layer", "bounded_layer", "logistic | softmax");
  setting(pre, inv, "--zero-init-heads", "zero_init_heads", "start head output layers at zero");
  setting(pre, inv, "--init-seed", "init_seed", "weight initialization seed");
  setting(pre, inv, "--clamp", "clamp", "member magnitude clamp");

  CLI::App* ft = app.add_subcommand("finetune", "retrain the heads for a new ensemble size");
  common(ft);
  training(ft);
  setting(ft, inv, "--checkpoint", "checkpoint", "pretrained checkpoint");

  CLI::App* rf = app.add_subcommand("run-filter", "run a filter over a trajectory store");
  common(rf);
  setting(rf, inv, "--data", "data", "test trajectory store");
  setting(rf, inv, "--trajectories,-M", "trajectories", "number of trajectories to use");
  setting(rf, inv, "--method", "method", "enkf | esrf | letkf | ienkf | mnmef");
  setting(rf, inv, "--members,-N", "members", "ensemble size");
  setting(rf, inv, "--alpha", "alpha", "multiplicative inflation");
  setting(rf, inv, "--radius", "radius", "localization radius (inf disables)");
  setting(rf, inv, "--checkpoint", "checkpoint", "learned filter checkpoint");
  toggle(rf, inv, "--zero-heads", "zero_heads", "zero every head output (reduces to the EnKF)");
  toggle(rf, inv, "--zero-inflation", "zero_inflation", "disable the learned inflation");
  setting(rf, inv, "--ienkf-max-iter", "ienkf_max_iter", "IEnKF iteration cap");
  setting(rf, inv, "--ienkf-tol", "ienkf_tol", "IEnKF increment tolerance");
  setting(rf, inv, "--workers", "workers", "worker threads");
  setting(rf, inv, "--init-cov", "init_cov", "initial ensemble variance");

  CLI::App* gs = app.add_subcommand("grid-search", "tune inflation and localization radius");
  common(gs);
  setting(gs, inv, "--data", "data", "test trajectory store");
  setting(gs, inv, "--trajectories,-M", "trajectories", "number of trajectories to use");
  setting(gs, inv, "--method", "method", "enkf | esrf | letkf | ienkf");
  setting(gs, inv, "--members,-N", "members", "ensemble size");
  setting(gs, inv, "--alphas", "alphas", "comma-separated inflation grid");
  setting(gs, inv, "--radii", "radii", "comma-separated radius grid");
  setting(gs, inv, "--ienkf-max-iter", "ienkf_max_iter", "IEnKF iteration cap");
  setting(gs, inv, "--ienkf-tol", "ienkf_tol", "IEnKF increment tolerance");
  setting(gs, inv, "--workers", "workers", "worker threads");
  setting(gs, inv, "--init-cov", "init_cov", "initial ensemble variance");

  CLI::App* ev = app.add_subcommand("evaluate", "score stored estimates against the truth");
  common(ev);
  setting(ev, inv, "--data", "data", "truth trajectory store");
  setting(ev, inv, "--trajectories,-M", "trajectories", "number of trajectories to use");
  setting(ev, inv, "--estimates", "estimates", "directory of per-trajectory estimate CSVs");
  setting(ev, inv, "--method", "method", "label for the metrics rows");
  setting(ev, inv, "--members,-N", "members", "label for the metrics rows");
  setting(ev, inv, "--benchmark", "benchmark", "benchmark mean R-RMSE for the relative improvement");

  CLI::App* lin = app.add_subcommand("linear-exp", "train on the linear-Gaussian system and track W2");
  common(lin);
  training(lin, false);
  setting(lin, inv, "--len", "len", "training trajectory length");
  setting(lin, inv, "--test-trajectories", "test_trajectories", "held-out trajectories");
  setting(lin, inv, "--test-len", "test_steps", "held-out trajectory length");
  setting(lin, inv, "--data-seed", "data_seed", "data generation seed");
  setting(lin, inv, "--eval-seed", "eval_seed", "evaluation noise seed");
  setting(lin, inv, "--burn-in", "burn_in", "burn-in steps");
  setting(lin, inv, "--settings", "settings", "';'-separated subset of NL2 (WD);NL2;L2 (WD);L2, or all");

  CLI::App* ver = app.add_subcommand("verify", "run the oracle and property checks");
  ver->add_option("-c,--config", inv.config_path, "key = value settings file");
  setting(ver, inv, "--out", "out", "optional output directory");
  toggle(ver, inv, "--quick", "quick", "smaller case counts");
  setting(ver, inv, "--workers", "workers", "worker threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  const std::vector<std::pair<CLI::App*, int (*)(Config&)>> commands{
      {gen, cmd_gen_data},    {pre, cmd_pretrain}, {ft, cmd_finetune},     {rf, cmd_run_filter},
      {gs, cmd_grid_search},  {ev, cmd_evaluate},  {lin, cmd_linear_exp}, {ver, cmd_verify}};
  try {
    for (const auto& [sub, fn] : commands) {
      if (!sub->parsed()) continue;
      Config c = resolve(inv, sub->get_name());
      return fn(c);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
