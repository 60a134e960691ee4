#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "mnmef/autodiff.hpp"
#include "mnmef/dynamics.hpp"
#include "mnmef/eval.hpp"
#include "mnmef/filters.hpp"
#include "mnmef/mnmef.hpp"
#include "mnmef/training.hpp"

namespace mnmef::verify {

/// Outcome of one oracle or property check.
struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;      // measured error or statistic
  double threshold = 0.0;  // bound the value is compared against
  std::string detail;
};

inline Matrix random_matrix(std::size_t r, std::size_t c, RngStream& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data()) v = scale * rng.normal();
  return m;
}

/// Ensemble of `members` states scattered around a point on the attractor.
inline StateEnsemble attractor_ensemble(const SystemSpec& spec, std::size_t members, RngStream& rng,
                                        double spread = 1.0) {
  const Vector centre = burn_in(spec, rng, BurnIn::fixed(spec.kind == SystemKind::kKs ? 50 : 200));
  StateEnsemble e(members, spec.state_dim);
  for (std::size_t n = 0; n < members; ++n)
    for (std::size_t i = 0; i < spec.state_dim; ++i) e(n, i) = centre[i] + spread * rng.normal();
  return e;
}

inline std::vector<SystemSpec> all_systems(double sigma_y = 1.0, double sigma_v = 0.0) {
  return {lorenz63_system({sigma_y, sigma_v}), lorenz96_system({sigma_y, sigma_v}), ks_system({sigma_y, sigma_v}),
          linear_system({sigma_y, sigma_v})};
}

// ---------------------------------------------------------------------------
// EnKF reduction

/// Max-abs difference between the learned step with zeroed heads and the
/// perturbed-observation EnKF fed the same ξ and η, over `cases` random cases.
inline double enkf_reduction_error(const SystemSpec& spec, std::size_t cases, std::uint64_t seed,
                                   std::size_t members = 10) {
  MnmefModel model = make_model(spec);
  zero_heads(model);
  double worst = 0.0;
  for (std::size_t c = 0; c < cases; ++c) {
    RngStream rng(seed, c);
    const StateEnsemble e = attractor_ensemble(spec, members, rng);
    Vector y(spec.obs_dim);
    for (double& v : y) v = 3.0 * rng.normal();
    const StepNoise noise = draw_step_noise(spec, members, rng);
    const StateEnsemble ours = mnmef_step(model, spec, e, y, noise);
    const StateEnsemble ref =
        enkf_analysis_with_noise(predict_with_noise(e, spec, noise.process), y, spec.obs, spec.obs_cov, noise.obs);
    worst = std::max(worst, max_abs_diff(ours, ref));
  }
  return worst;
}

inline CheckResult enkf_reduction_check(std::size_t cases = 50, std::uint64_t seed = 101) {
  CheckResult r{"enkf reduction", true, 0.0, 1e-10, ""};
  for (const SystemSpec& s : all_systems(1.0, 1e-3)) {
    const double err = enkf_reduction_error(s, cases, seed);
    r.value = std::max(r.value, err);
    r.detail += s.name + "=" + csv::number(err) + " ";
  }
  r.passed = r.value <= r.threshold;
  return r;
}

// ---------------------------------------------------------------------------
// Permutation invariance

inline std::vector<std::size_t> random_permutation(std::size_t n, RngStream& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.uniform_int(0, i - 1)]);
  return p;
}

inline Matrix permute_rows(const Matrix& m, const std::vector<std::size_t>& perm) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) std::copy(m.row(perm[i]).begin(), m.row(perm[i]).end(), out.row(i).begin());
  return out;
}

/// Largest change of f_v and of the analysis mean when members (and their
/// noise draws) are reordered, for every ensemble size in `sizes`.
inline CheckResult permutation_check(const std::vector<std::size_t>& sizes = {2, 5, 16, 33}, std::uint64_t seed = 202,
                                     std::size_t trials = 3) {
  CheckResult r{"permutation invariance", true, 0.0, 1e-12, ""};
  const SystemSpec spec = lorenz96_system({1.0, 1e-3});
  ModelConfig cfg;
  cfg.zero_init_heads = false;
  cfg.init_seed = seed;
  const MnmefModel model = make_model(spec, cfg);
  double worst_fv = 0.0, worst_mean = 0.0;
  for (std::size_t n : sizes) {
    for (std::size_t t = 0; t < trials; ++t) {
      RngStream rng(seed, n * 100 + t);
      const StateEnsemble e = attractor_ensemble(spec, n, rng);
      Matrix pairs(n, spec.state_dim + spec.obs_dim);
      for (std::size_t k = 0; k < n; ++k) {
        std::copy(e.row(k).begin(), e.row(k).end(), pairs.row(k).begin());
        const Vector hx = spec.h(e.row(k));
        std::copy(hx.begin(), hx.end(), pairs.row(k).begin() + spec.state_dim);
      }
      const auto perm = random_permutation(n, rng);
      const Vector f0 = encode_ensemble_value(model.st, model.params, pairs);
      const Vector f1 = encode_ensemble_value(model.st, model.params, permute_rows(pairs, perm));
      worst_fv = std::max(worst_fv, max_abs_diff(Matrix(1, f0.size(), f0), Matrix(1, f1.size(), f1)));

      Vector y(spec.obs_dim);
      for (double& v : y) v = 3.0 * rng.normal();
      const StepNoise noise = draw_step_noise(spec, n, rng);
      const StepNoise pnoise{permute_rows(noise.process, perm), permute_rows(noise.obs, perm)};
      const Vector m0 = ensemble_mean(mnmef_step(model, spec, e, y, noise));
      const Vector m1 = ensemble_mean(mnmef_step(model, spec, permute_rows(e, perm), y, pnoise));
      worst_mean = std::max(worst_mean, max_abs_diff(Matrix(1, m0.size(), m0), Matrix(1, m1.size(), m1)));
    }
  }
  r.value = std::max(worst_fv, worst_mean);
  r.detail = "f_v=" + csv::number(worst_fv) + " mean=" + csv::number(worst_mean);
  r.passed = r.value <= r.threshold;
  return r;
}

// ---------------------------------------------------------------------------
// Gradient checks

/// Builds the output of an op from its inputs on a tape.
using OpFn = std::function<ad::Tensor(ad::Tape&, const std::vector<ad::Tensor>&)>;

struct GradCase {
  std::string name;
  OpFn op;
  std::function<std::vector<Matrix>(RngStream&)> inputs;
};

/// Relative error ‖g_ad − g_fd‖ / ‖g_fd‖ of the gradient of Σ R∘op(x) with
/// respect to every input, R a fixed random weighting.
inline double gradient_error(const OpFn& op, const std::vector<Matrix>& inputs, RngStream& rng, double h = 1e-5) {
  Matrix weights;
  auto loss_value = [&](const std::vector<Matrix>& xs) {
    ad::Tape tape(false);
    std::vector<ad::Tensor> ts;
    for (const auto& x : xs) ts.push_back(tape.constant(x));
    const ad::Tensor out = op(tape, ts);
    if (weights.empty()) weights = random_matrix(out.rows(), out.cols(), rng);
    return ad::sum(ad::mul(out, tape.constant(weights))).value()(0, 0);
  };
  loss_value(inputs);

  ad::Tape tape;
  std::vector<ad::Tensor> ts;
  for (std::size_t i = 0; i < inputs.size(); ++i) ts.push_back(tape.parameter(inputs[i], static_cast<long>(i)));
  const ad::Tensor loss = ad::sum(ad::mul(op(tape, ts), tape.constant(weights)));
  const auto grads = tape.backward(loss);

  double diff2 = 0.0, ref2 = 0.0;
  std::vector<Matrix> xs = inputs;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto it = grads.find(static_cast<long>(i));
    for (std::size_t k = 0; k < xs[i].size(); ++k) {
      const double orig = xs[i].data()[k];
      xs[i].data()[k] = orig + h;
      const double up = loss_value(xs);
      xs[i].data()[k] = orig - h;
      const double down = loss_value(xs);
      xs[i].data()[k] = orig;
      const double fd = (up - down) / (2.0 * h);
      const double ad_g = it == grads.end() ? 0.0 : it->second.data()[k];
      diff2 += (ad_g - fd) * (ad_g - fd);
      ref2 += fd * fd;
    }
  }
  return std::sqrt(diff2) / std::max(std::sqrt(ref2), 1e-300);
}

inline std::vector<GradCase> primitive_cases() {
  using T = ad::Tensor;
  using V = std::vector<T>;
  auto mats = [](std::vector<std::pair<std::size_t, std::size_t>> shapes) {
    return [shapes](RngStream& rng) {
      std::vector<Matrix> out;
      for (auto [r, c] : shapes) out.push_back(random_matrix(r, c, rng));
      return out;
    };
  };
  static const SystemSpec l63 = lorenz63_system();
  std::vector<GradCase> cases;
  cases.push_back({"matmul", [](ad::Tape&, const V& x) { return ad::matmul(x[0], x[1]); }, mats({{4, 6}, {6, 3}})});
  cases.push_back({"matmul_tn", [](ad::Tape&, const V& x) { return ad::matmul_tn(x[0], x[1]); }, mats({{4, 6}, {4, 3}})});
  cases.push_back({"transpose", [](ad::Tape&, const V& x) { return ad::transpose(x[0]); }, mats({{4, 6}})});
  cases.push_back({"add", [](ad::Tape&, const V& x) { return ad::add(x[0], x[1]); }, mats({{4, 6}, {4, 6}})});
  cases.push_back({"sub", [](ad::Tape&, const V& x) { return ad::sub(x[0], x[1]); }, mats({{4, 6}, {4, 6}})});
  cases.push_back({"mul", [](ad::Tape&, const V& x) { return ad::mul(x[0], x[1]); }, mats({{4, 6}, {4, 6}})});
  cases.push_back({"scale", [](ad::Tape&, const V& x) { return ad::scale(x[0], -1.7); }, mats({{4, 6}})});
  cases.push_back({"add_row", [](ad::Tape&, const V& x) { return ad::add_row(x[0], x[1]); }, mats({{4, 6}, {1, 6}})});
  cases.push_back({"sub_row", [](ad::Tape&, const V& x) { return ad::sub_row(x[0], x[1]); }, mats({{4, 6}, {1, 6}})});
  cases.push_back({"repeat_rows", [](ad::Tape&, const V& x) { return ad::repeat_rows(x[0], 4); }, mats({{1, 6}})});
  cases.push_back({"mean_rows", [](ad::Tape&, const V& x) { return ad::mean_rows(x[0]); }, mats({{4, 6}})});
  cases.push_back({"sum", [](ad::Tape&, const V& x) { return ad::sum(x[0]); }, mats({{4, 6}})});
  cases.push_back({"concat_cols", [](ad::Tape&, const V& x) { return ad::concat_cols({x[0], x[1], x[0]}); },
                   mats({{4, 6}, {4, 2}})});
  cases.push_back({"slice_cols", [](ad::Tape&, const V& x) { return ad::slice_cols(x[0], 1, 4); }, mats({{4, 6}})});
  cases.push_back({"select_cols", [](ad::Tape&, const V& x) { return ad::select_cols(x[0], {5, 0, 2, 2}); },
                   mats({{4, 6}})});
  cases.push_back({"gather",
                   [](ad::Tape&, const V& x) {
                     return ad::gather(x[0], 4, 6, {0, 1, 2, 3, 4, 0, 1, 1, 2, 3, 4, 4, 0, 0, 0, 2, 2, 2,
                                                    3, 3, 4, 1, 2, 0});
                   },
                   mats({{1, 5}})});
  cases.push_back({"reshape", [](ad::Tape&, const V& x) { return ad::reshape(x[0], 3, 8); }, mats({{4, 6}})});
  cases.push_back({"exp", [](ad::Tape&, const V& x) { return ad::exp(x[0]); }, mats({{4, 6}})});
  cases.push_back({"relu", [](ad::Tape&, const V& x) { return ad::relu(x[0]); }, mats({{4, 6}})});
  cases.push_back({"logistic", [](ad::Tape&, const V& x) { return ad::logistic(x[0]); }, mats({{4, 6}})});
  cases.push_back({"softmax_rows", [](ad::Tape&, const V& x) { return ad::softmax_rows(x[0]); }, mats({{4, 6}})});
  cases.push_back({"layer_norm_rows", [](ad::Tape&, const V& x) { return ad::layer_norm_rows(x[0], x[1], x[2]); },
                   mats({{4, 6}, {1, 6}, {1, 6}})});
  cases.push_back({"clamp_abs", [](ad::Tape&, const V& x) { return ad::clamp_abs(x[0], 0.8); }, mats({{4, 6}})});
  cases.push_back({"solve_spd",
                   [](ad::Tape& t, const V& x) {
                     // A = S + Sᵀ + 12 I stays SPD and keeps perturbations symmetric.
                     const T a = ad::add(ad::add(x[0], ad::transpose(x[0])), t.constant(scaled_identity(5, 12.0)));
                     return ad::solve_spd(a, x[1]);
                   },
                   mats({{5, 5}, {5, 6}})});
  cases.push_back({"multihead_attention",
                   [](ad::Tape&, const V& x) { return ad::multihead_attention(x[0], x[1], x[2], 2); },
                   mats({{4, 6}, {5, 6}, {5, 6}})});
  cases.push_back({"map_rows",
                   [](ad::Tape&, const V& x) { return ad::map_rows(x[0], l63.step, l63.step_vjp); },
                   [](RngStream& rng) {
                     Matrix m = random_matrix(4, 3, rng, 3.0);
                     return std::vector<Matrix>{m};
                   }});
  return cases;
}

/// Worst relative error of every primitive over `seeds` random draws.
inline CheckResult primitive_gradient_check(std::size_t seeds = 20, std::uint64_t seed = 303) {
  CheckResult r{"primitive gradients", true, 0.0, 1e-5, ""};
  std::string worst_name;
  for (const auto& c : primitive_cases()) {
    double worst = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
      RngStream rng(seed, s);
      worst = std::max(worst, gradient_error(c.op, c.inputs(rng), rng));
    }
    if (worst >= r.value) {
      r.value = worst;
      worst_name = c.name;
    }
  }
  r.detail = "worst op " + worst_name;
  r.passed = r.value < r.threshold;
  return r;
}

/// Directional finite-difference check of a full 2-step trajectory loss, one
/// random direction per parameter partition, on a small periodic system with
/// every head active.
inline CheckResult end_to_end_gradient_check(std::uint64_t seed = 404, std::size_t steps = 2,
                                             std::size_t members = 3) {
  CheckResult r{"end-to-end gradient", true, 0.0, 1e-4, ""};
  const SystemSpec spec = lorenz96_system({1.0, 1e-3}, 4, 8.0, 2, 0);
  ModelConfig cfg;
  cfg.zero_init_heads = false;
  cfg.init_seed = seed;
  MnmefModel model = make_model(spec, cfg);
  // Keep the heads small so the toy stays far from the clamp.
  for (std::size_t id = 0; id < model.params.size(); ++id)
    if (model.params.entry(id).partition != Partition::kSetTransformer)
      for (double& v : model.params.value(id).data()) v *= 0.1;
  RngStream data_rng(seed, 1);
  const TruthRun run = generate_truth(spec, steps, data_rng, BurnIn::fixed(100));
  auto loss_at = [&](bool grad) {
    RngStream rng(seed, 2);
    return truncated_unroll(model, spec, run, members, steps, rng, grad);
  };
  const UnrollResult base = loss_at(true);
  for (std::size_t p = 0; p < kPartitionCount; ++p) {
    const auto part = static_cast<Partition>(p);
    if (model.params.partition_size(part) == 0) continue;
    RngStream drng(seed, 10 + p);
    std::vector<std::pair<std::size_t, Matrix>> dir;
    double dn2 = 0.0, analytic = 0.0;
    for (std::size_t id = 0; id < model.params.size(); ++id) {
      if (model.params.entry(id).partition != part) continue;
      const Matrix& v = model.params.value(id);
      Matrix d = random_matrix(v.rows(), v.cols(), drng);
      for (double x : d.data()) dn2 += x * x;
      dir.emplace_back(id, std::move(d));
    }
    for (auto& [id, d] : dir) {
      for (double& x : d.data()) x /= std::sqrt(dn2);
      const auto it = base.grads.find(static_cast<long>(id));
      if (it != base.grads.end())
        for (std::size_t k = 0; k < d.size(); ++k) analytic += it->second.data()[k] * d.data()[k];
    }
    auto shift = [&](double eps) {
      for (auto& [id, d] : dir)
        for (std::size_t k = 0; k < d.size(); ++k) model.params.value(id).data()[k] += eps * d.data()[k];
    };
    const double h = 1e-5;
    shift(h);
    const double up = loss_at(false).loss;
    shift(-2.0 * h);
    const double down = loss_at(false).loss;
    shift(h);
    const double fd = (up - down) / (2.0 * h);
    const double err = std::abs(analytic - fd) / std::max(std::abs(fd), 1e-12);
    r.value = std::max(r.value, err);
    r.detail += partition_name(part) + "=" + csv::number(err) + " ";
  }
  r.passed = r.value < r.threshold;
  return r;
}

// ---------------------------------------------------------------------------
// Localization table

inline CheckResult distance_table_check() {
  CheckResult r{"localization table", true, 0.0, 0.0, ""};
  const SystemSpec spec = lorenz96_system();
  const DistanceTable t = make_distance_table(spec);
  bool ok = t.size() == 21;
  for (std::size_t i = 0; ok && i < t.size(); ++i) ok = t.values[i] == static_cast<double>(i);
  const MnmefModel model = make_model(spec);
  ad::Tape tape(false);
  ParamBinder pb(tape, model.params);
  const Vector fv(model.config.st_dim, 0.5);
  const Localization loc = learned_localization(pb, model, tape.constant(Matrix(1, fv.size(), fv)));
  ok = ok && loc.l1.rows() == 40 && loc.l1.cols() == 10 && loc.l2.rows() == 10 && loc.l2.cols() == 10;
  r.value = static_cast<double>(t.size());
  r.detail = "N_D=" + std::to_string(t.size()) + " L1=" + std::to_string(loc.l1.rows()) + "x" +
             std::to_string(loc.l1.cols()) + " L2=" + std::to_string(loc.l2.rows()) + "x" +
             std::to_string(loc.l2.cols());
  r.passed = ok;
  return r;
}

// ---------------------------------------------------------------------------
// Kalman consistency

/// Untrained learned filter (heads start at zero) against the exact Kalman
/// filter on the linear system: time-averaged W2 must stay within `factor`
/// times that of i.i.d. sampling from the Kalman Gaussian.
inline CheckResult kalman_consistency_check(std::size_t members = 1024, std::size_t trajectories = 2,
                                            std::size_t steps = 100, double factor = 2.0, std::uint64_t seed = 505,
                                            std::size_t workers = 1) {
  CheckResult r{"kalman consistency", true, 0.0, 0.0, ""};
  const SystemSpec spec = linear_system({1.0, 0.01});
  const auto runs = generate_dataset(spec, trajectories, steps, seed, BurnIn::fixed(100));
  const MnmefModel model = make_model(spec);
  FilterSettings fs;
  fs.method = Method::kMnmef;
  fs.members = members;
  fs.model = &model;
  const W2Evaluation ev = evaluate_w2(spec, runs, fs, seed + 1, workers);
  r.value = ev.filter_w2;
  r.threshold = factor * ev.baseline_w2;
  r.detail = "filter W2=" + csv::number(ev.filter_w2) + " sampling W2=" + csv::number(ev.baseline_w2);
  r.passed = !ev.diverged && ev.filter_w2 <= r.threshold;
  return r;
}

}  // namespace mnmef::verify
