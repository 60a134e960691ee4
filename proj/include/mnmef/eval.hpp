#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mnmef/checkpoint.hpp"
#include "mnmef/dynamics.hpp"
#include "mnmef/filters.hpp"
#include "mnmef/mnmef.hpp"
#include "mnmef/numerics.hpp"
#include "mnmef/training.hpp"

namespace mnmef {

// ---------------------------------------------------------------------------
// Metrics

/// Σ_j |v̄_j - v†_j| / Σ_j |v†_j| over matching rows.
inline double r_rmse(const Matrix& estimate, const Matrix& truth) {
  require(estimate.rows() == truth.rows() && estimate.cols() == truth.cols(), ErrorKind::kDimMismatch,
          "r_rmse: shapes differ");
  double num = 0.0, den = 0.0;
  for (std::size_t j = 0; j < truth.rows(); ++j) {
    num += norm2(sub(estimate.row(j), truth.row(j)));
    den += norm2(truth.row(j));
  }
  require(den > 0.0, ErrorKind::kDegenerateTruth, "r_rmse: truth has zero norm");
  return num / den;
}

/// (benchmark - ours) / benchmark; negative when ours is worse.
inline double relative_improvement(double ours, double benchmark) {
  require(benchmark != 0.0, ErrorKind::kDivideByZero, "relative_improvement: zero benchmark");
  return (benchmark - ours) / benchmark;
}

/// 2-Wasserstein distance between N(m1, C1) and N(m2, C2).
inline double w2_gaussian(std::span<const double> m1, const Matrix& c1, std::span<const double> m2,
                          const Matrix& c2) {
  require(m1.size() == m2.size() && c1.rows() == m1.size() && c2.rows() == m2.size(), ErrorKind::kDimMismatch,
          "w2_gaussian: dimensions");
  const double mean_part = std::pow(norm2(sub(m1, m2)), 2);
  const Matrix s2 = sym_sqrt(c2);
  const Matrix cross = sym_sqrt(symmetrized(matmul(matmul(s2, c1), s2)));
  const double tr = std::max(0.0, trace(c1) + trace(c2) - 2.0 * trace(cross));
  return std::sqrt(mean_part + tr);
}

struct MetricReport {
  std::string method;
  std::string system;
  std::size_t members = 0;
  double sigma_y = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> values;  // per-trajectory R-RMSE, NaN for diverged runs
  double mean = 0.0;
  double std = 0.0;
  std::size_t diverged = 0;

  /// Mean and population std over the stored values; NaN if any run diverged.
  void summarize() {
    diverged = static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](double v) { return !std::isfinite(v); }));
    if (values.empty() || diverged > 0) {
      mean = std = std::numeric_limits<double>::quiet_NaN();
      return;
    }
    double s = 0.0;
    for (double v : values) s += v;
    mean = s / static_cast<double>(values.size());
    double q = 0.0;
    for (double v : values) q += (v - mean) * (v - mean);
    std = std::sqrt(q / static_cast<double>(values.size()));
  }
};

// ---------------------------------------------------------------------------
// Filter harness

enum class Method { kEnkf, kEsrf, kLetkf, kIenkf, kMnmef };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::kEnkf: return "enkf";
    case Method::kEsrf: return "esrf";
    case Method::kLetkf: return "letkf";
    case Method::kIenkf: return "ienkf";
    case Method::kMnmef: return "mnmef";
  }
  return "unknown";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::kEnkf, Method::kEsrf, Method::kLetkf, Method::kIenkf, Method::kMnmef})
    if (method_name(m) == s) return m;
  fail(ErrorKind::kConfig, "unknown method '" + s + "'");
}

inline constexpr double kNoLocalization = std::numeric_limits<double>::infinity();

struct FilterSettings {
  Method method = Method::kEnkf;
  std::size_t members = 10;
  double alpha = 1.0;                 // multiplicative inflation after the analysis
  double radius = kNoLocalization;    // Gaspari-Cohn radius; infinite disables localization
  std::size_t ienkf_max_iter = 10;
  double ienkf_tol = 1e-5;
  double init_cov = 1.0;              // C0 = init_cov * I
  const MnmefModel* model = nullptr;  // required for the learned filter
  StepOptions step_options;
};

struct RunRecord {
  std::size_t trajectory = 0;
  Matrix means;  // J x d_v analysis means
  bool diverged = false;
  std::string failure;
  double r_rmse = std::numeric_limits<double>::quiet_NaN();
};

/// v†_1..v†_J, the states the analysis means are compared against.
inline Matrix analysis_truth(const TruthRun& run) {
  Matrix out(run.length(), run.states.cols());
  for (std::size_t j = 0; j < run.length(); ++j)
    std::copy(run.states.row(j + 1).begin(), run.states.row(j + 1).end(), out.row(j).begin());
  return out;
}

using StepObserver = std::function<void(std::size_t step, const StateEnsemble& analysis)>;

/// Assimilates every observation of `truth` from an initial ensemble drawn
/// around v†_0. Noise is drawn from `rng` in the order: initial ensemble, then
/// per step process noise and observation perturbations.
inline RunRecord run_filter(const SystemSpec& spec, const TruthRun& truth, const FilterSettings& fs, RngStream& rng,
                            const StepObserver& observer = {}) {
  require(fs.members >= 2, ErrorKind::kConfig, "ensemble size must be >= 2");
  require(fs.alpha >= 1.0, ErrorKind::kConfig, "inflation must be >= 1");
  if (fs.method == Method::kMnmef) require(fs.model != nullptr, ErrorKind::kConfig, "learned filter needs a model");
  if (fs.method == Method::kLetkf)
    require(std::isfinite(fs.radius), ErrorKind::kConfig, "LETKF needs a finite localization radius");
  const std::size_t steps = truth.length();
  RunRecord rec;
  rec.trajectory = truth.stream;
  rec.means = Matrix(steps, spec.state_dim, std::numeric_limits<double>::quiet_NaN());
  std::optional<LocalizationSpec> loc;
  if (std::isfinite(fs.radius)) {
    require(spec.spatial, ErrorKind::kConfig, "localization needs a spatial system");
    loc = LocalizationSpec::periodic(spec.state_dim, fs.radius);
  }
  StateEnsemble e = initial_ensemble(truth.states.row(0), scaled_identity(spec.state_dim, fs.init_cov), fs.members, rng);
  try {
    for (std::size_t j = 0; j < steps; ++j) {
      const auto y = truth.observations.row(j);
      switch (fs.method) {
        case Method::kEnkf: e = enkf_analysis(predict(e, spec, rng), y, spec.obs, spec.obs_cov, rng, loc); break;
        case Method::kEsrf: e = esrf_analysis(predict(e, spec, rng), y, spec.obs, spec.obs_cov); break;
        case Method::kLetkf: e = letkf_analysis(predict(e, spec, rng), y, spec.obs, spec.obs_cov, *loc); break;
        case Method::kIenkf:
          e = ienkf_analysis(e, spec.step, spec.obs, spec.obs_cov, y, fs.ienkf_max_iter, fs.ienkf_tol);
          break;
        case Method::kMnmef: e = mnmef_step(*fs.model, spec, e, y, rng, fs.step_options); break;
      }
      if (fs.alpha != 1.0) e = apply_inflation(e, fs.alpha);
      require(all_finite(e), ErrorKind::kNonFinite, "ensemble diverged");
      const Vector m = ensemble_mean(e);
      std::copy(m.begin(), m.end(), rec.means.row(j).begin());
      if (observer) observer(j, e);
    }
  } catch (const Error& err) {
    if (err.kind() != ErrorKind::kNonFinite && err.kind() != ErrorKind::kNotSPD &&
        err.kind() != ErrorKind::kEigFailure)
      throw;
    rec.diverged = true;
    rec.failure = err.what();
    return rec;
  }
  rec.r_rmse = r_rmse(rec.means, analysis_truth(truth));
  return rec;
}

/// Runs the filter on every test trajectory; trajectory i uses stream (seed, i).
inline MetricReport evaluate_filter(const SystemSpec& spec, const std::vector<TruthRun>& runs,
                                    const FilterSettings& fs, std::uint64_t seed, std::size_t workers = 1,
                                    std::vector<RunRecord>* records = nullptr) {
  MetricReport rep;
  rep.method = method_name(fs.method);
  rep.system = spec.name;
  rep.members = fs.members;
  rep.sigma_y = std::sqrt(spec.obs_cov(0, 0));
  rep.seed = seed;
  std::vector<RunRecord> recs(runs.size());
  parallel_for(runs.size(), workers, [&](std::size_t i) {
    RngStream rng(seed, i);
    recs[i] = run_filter(spec, runs[i], fs, rng);
    recs[i].trajectory = i;
  });
  for (const auto& r : recs) rep.values.push_back(r.r_rmse);
  rep.summarize();
  if (records) *records = std::move(recs);
  return rep;
}

// ---------------------------------------------------------------------------
// Grid search over inflation and localization radius

struct GridCell {
  double alpha = 1.0;
  double radius = kNoLocalization;
  double mean = 0.0;  // NaN when any trajectory diverged
};

struct GridResult {
  GridCell best;
  std::vector<GridCell> cells;  // sorted by (alpha, radius)
};

/// Evaluates every (alpha, radius) cell and returns the lowest mean R-RMSE,
/// breaking ties by smaller alpha and then smaller radius.
inline GridResult grid_search(const SystemSpec& spec, const std::vector<TruthRun>& runs, FilterSettings base,
                              std::vector<double> alphas, std::vector<double> radii, std::uint64_t seed,
                              std::size_t workers = 1) {
  require(!alphas.empty(), ErrorKind::kConfig, "grid search needs at least one alpha");
  if (radii.empty()) radii.push_back(kNoLocalization);
  std::sort(alphas.begin(), alphas.end());
  std::sort(radii.begin(), radii.end());
  GridResult res;
  for (double a : alphas) {
    for (double r : radii) {
      FilterSettings fs = base;
      fs.alpha = a;
      fs.radius = r;
      res.cells.push_back({a, r, evaluate_filter(spec, runs, fs, seed, workers).mean});
    }
  }
  bool found = false;
  for (const auto& c : res.cells) {
    if (!std::isfinite(c.mean)) continue;
    if (!found || c.mean < res.best.mean) {
      res.best = c;
      found = true;
    }
  }
  if (!found) fail(ErrorKind::kAllDiverged, "every grid cell diverged");
  return res;
}

// ---------------------------------------------------------------------------
// CSV output

namespace csv {

inline std::ofstream open(const std::filesystem::path& path, const std::string& header, bool append = false) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const bool fresh = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream os(path, append ? std::ios::app : std::ios::trunc);
  require(static_cast<bool>(os), ErrorKind::kData, "cannot write " + path.string());
  os.precision(17);
  if (fresh) os << header << "\n";
  return os;
}

inline std::string number(double v) { return binio::format_number(v); }

}  // namespace csv

inline void write_metrics_csv(const std::filesystem::path& path, const MetricReport& rep, bool append = false) {
  auto os = csv::open(path, "method,system,N,sigma_y,seed,trajectory_id,r_rmse", append);
  for (std::size_t i = 0; i < rep.values.size(); ++i)
    os << rep.method << "," << rep.system << "," << rep.members << "," << csv::number(rep.sigma_y) << ","
       << rep.seed << "," << i << "," << csv::number(rep.values[i]) << "\n";
}

inline void write_summary_csv(const std::filesystem::path& path, const std::vector<MetricReport>& reps,
                              bool append = false) {
  auto os = csv::open(path, "method,system,N,sigma_y,mean,std", append);
  for (const auto& r : reps)
    os << r.method << "," << r.system << "," << r.members << "," << csv::number(r.sigma_y) << ","
       << csv::number(r.mean) << "," << csv::number(r.std) << "\n";
}

inline void write_heatmap_csv(const std::filesystem::path& path, const GridResult& g) {
  auto os = csv::open(path, "alpha,radius,mean_r_rmse");
  for (const auto& c : g.cells)
    os << csv::number(c.alpha) << "," << csv::number(c.radius) << "," << csv::number(c.mean) << "\n";
}

/// Analysis means of one run, one row per assimilation step; rows after a
/// divergence hold nan.
inline void write_run_record_csv(const std::filesystem::path& path, const RunRecord& rec) {
  std::string header = "step";
  for (std::size_t i = 0; i < rec.means.cols(); ++i) header += ",v" + std::to_string(i);
  auto os = csv::open(path, header);
  for (std::size_t j = 0; j < rec.means.rows(); ++j) {
    os << j + 1;
    for (double v : rec.means.row(j)) os << "," << csv::number(v);
    os << "\n";
  }
}

inline std::filesystem::path run_record_path(const std::filesystem::path& dir, std::size_t index) {
  char name[32];
  std::snprintf(name, sizeof name, "traj_%06zu.csv", index);
  return dir / name;
}

/// Reads a file written by write_run_record_csv back into a J x d matrix.
inline Matrix read_run_record_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::kData, "cannot open " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), ErrorKind::kData, "empty record " + path.string());
  const std::size_t cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  require(cols > 0, ErrorKind::kData, "record has no state columns: " + path.string());
  Vector data;
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t k = 0;
    while (std::getline(ss, cell, ',')) {
      if (k++ == 0) continue;
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      require(end != cell.c_str(), ErrorKind::kData, "bad number '" + cell + "' in " + path.string());
      data.push_back(v);
    }
    require(k == cols + 1, ErrorKind::kData, "ragged row in " + path.string());
    ++rows;
  }
  return Matrix(rows, cols, std::move(data));
}

// ---------------------------------------------------------------------------
// Linear-Gaussian experiment

/// Time-averaged W2 between a filter's ensemble Gaussian and the exact Kalman
/// posterior, over all steps of all trajectories.
struct W2Evaluation {
  double filter_w2 = 0.0;
  double baseline_w2 = 0.0;  // i.i.d. samples from the Kalman Gaussian, same N
  bool diverged = false;
};

inline W2Evaluation evaluate_w2(const SystemSpec& spec, const std::vector<TruthRun>& runs, const FilterSettings& fs,
                                std::uint64_t seed, std::size_t workers = 1) {
  require(!spec.linear_model.empty(), ErrorKind::kPrecondition, "W2 evaluation needs a linear system");
  const Matrix hm = spec.obs.as_matrix();
  std::vector<double> fw(runs.size(), 0.0), bw(runs.size(), 0.0);
  std::vector<char> div(runs.size(), 0);
  parallel_for(runs.size(), workers, [&](std::size_t i) {
    const TruthRun& run = runs[i];
    // Exact filtering distributions for this trajectory.
    std::vector<KalmanBelief> beliefs;
    KalmanBelief b{Vector(run.states.row(0).begin(), run.states.row(0).end()),
                   scaled_identity(spec.state_dim, fs.init_cov)};
    for (std::size_t j = 0; j < run.length(); ++j) {
      b = kalman_step(b, spec.linear_model, hm, spec.process_cov, spec.obs_cov, run.observations.row(j));
      beliefs.push_back(b);
    }
    RngStream rng(seed, i);
    double acc = 0.0;
    const RunRecord rec = run_filter(spec, run, fs, rng, [&](std::size_t j, const StateEnsemble& e) {
      acc += w2_gaussian(ensemble_mean(e), ensemble_covariance(e), beliefs[j].mean, beliefs[j].cov);
    });
    div[i] = rec.diverged ? 1 : 0;
    fw[i] = rec.diverged ? std::numeric_limits<double>::quiet_NaN() : acc / static_cast<double>(run.length());
    RngStream brng(seed ^ 0xb45e11e5u, i);
    double bacc = 0.0;
    for (std::size_t j = 0; j < run.length(); ++j) {
      const StateEnsemble s = initial_ensemble(beliefs[j].mean, beliefs[j].cov, fs.members, brng);
      bacc += w2_gaussian(ensemble_mean(s), ensemble_covariance(s), beliefs[j].mean, beliefs[j].cov);
    }
    bw[i] = bacc / static_cast<double>(run.length());
  });
  W2Evaluation out;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    out.diverged = out.diverged || div[i];
    out.filter_w2 += fw[i];
    out.baseline_w2 += bw[i];
  }
  out.filter_w2 /= static_cast<double>(runs.size());
  out.baseline_w2 /= static_cast<double>(runs.size());
  return out;
}

struct LinearSetting {
  std::string name;
  LossKind loss = LossKind::kNormalized;
  double weight_decay = 0.0;
};

/// NL2 / L2 are the normalized / unnormalized losses; WD adds weight decay 1e-2.
inline std::vector<LinearSetting> linear_settings() {
  return {{"NL2 (WD)", LossKind::kNormalized, 1e-2},
          {"NL2", LossKind::kNormalized, 0.0},
          {"L2 (WD)", LossKind::kUnnormalized, 1e-2},
          {"L2", LossKind::kUnnormalized, 0.0}};
}

struct LinearCurvePoint {
  std::string setting;
  std::size_t epoch = 0;
  double w2 = 0.0;  // NaN after divergence
  double baseline_w2 = 0.0;
};

struct LinearExperimentConfig {
  TrainConfig train;             // members, epochs, trajectories, ...
  std::size_t test_trajectories = 16;
  std::size_t test_steps = 100;
  std::uint64_t data_seed = 11;
  std::uint64_t eval_seed = 12;
  BurnIn burn = BurnIn::fixed(100);
  ModelConfig model;
  std::vector<LinearSetting> settings = linear_settings();
};

/// Trains the learned filter on the linear system under each loss setting and
/// records the W2 gap to the Kalman filter after every epoch.
inline std::vector<LinearCurvePoint> linear_experiment(const LinearExperimentConfig& cfg,
                                                       const std::function<void(const LinearCurvePoint&)>& progress = {}) {
  const SystemSpec spec = linear_system({1.0, 0.01});
  const auto train_runs = generate_dataset(spec, cfg.train.trajectories, cfg.train.steps, cfg.data_seed, cfg.burn);
  const auto test_runs = generate_dataset(spec, cfg.test_trajectories, cfg.test_steps, cfg.data_seed + 1, cfg.burn);
  std::vector<LinearCurvePoint> curve;
  for (const auto& setting : cfg.settings) {
    MnmefModel model = make_model(spec, cfg.model);
    TrainConfig tc = cfg.train;
    tc.loss = setting.loss;
    tc.weight_decay = setting.weight_decay;
    FilterSettings fs;
    fs.method = Method::kMnmef;
    fs.members = tc.members;
    fs.model = &model;
    bool exploded = false;
    auto record = [&](std::size_t epoch) {
      LinearCurvePoint p{setting.name, epoch, std::numeric_limits<double>::quiet_NaN(), 0.0};
      const W2Evaluation ev = evaluate_w2(spec, test_runs, fs, cfg.eval_seed, tc.workers);
      p.baseline_w2 = ev.baseline_w2;
      if (!exploded && !ev.diverged && std::isfinite(ev.filter_w2)) p.w2 = ev.filter_w2;
      curve.push_back(p);
      if (progress) progress(p);
    };
    try {
      train(model, spec, train_runs, tc, [&](const EpochLog& e, const MnmefModel&) { record(e.epoch); });
    } catch (const Error& err) {
      if (err.kind() != ErrorKind::kDivergence) throw;
      exploded = true;
      const std::size_t done = curve.empty() || curve.back().setting != setting.name ? 0 : curve.back().epoch + 1;
      for (std::size_t e = done; e <= tc.epochs; ++e) {
        LinearCurvePoint p{setting.name, e, std::numeric_limits<double>::quiet_NaN(),
                           curve.empty() ? 0.0 : curve.back().baseline_w2};
        curve.push_back(p);
        if (progress) progress(p);
      }
    }
  }
  return curve;
}

inline void write_linear_curve_csv(const std::filesystem::path& path, const std::vector<LinearCurvePoint>& curve) {
  auto os = csv::open(path, "setting,epoch,w2,baseline_w2");
  for (const auto& p : curve)
    os << p.setting << "," << p.epoch << "," << csv::number(p.w2) << "," << csv::number(p.baseline_w2) << "\n";
}

}  // namespace mnmef
