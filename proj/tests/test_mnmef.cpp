#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "mnmef/checkpoint.hpp"
#include "mnmef/filters.hpp"
#include "mnmef/mnmef.hpp"
#include "mnmef/verify.hpp"
#include "test_util.hpp"

using namespace mnmef;
using mnmef::testing::max_abs_diff_vec;
using mnmef::testing::random_matrix;

namespace {

/// Narrow network so that tests touching every parameter stay fast.
ModelConfig small_config(bool zero_init = false, std::uint64_t seed = 3) {
  ModelConfig c;
  c.width = 8;
  c.heads = 2;
  c.seed_len = 2;
  c.st_dim = 6;
  c.head_hidden = 12;
  c.activation = Activation::kLogistic;
  c.zero_init_heads = zero_init;
  c.init_seed = seed;
  return c;
}

ModelConfig random_heads(std::uint64_t seed = 5) {
  ModelConfig c;
  c.zero_init_heads = false;
  c.init_seed = seed;
  return c;
}

Matrix permute_rows(const Matrix& m, const std::vector<std::size_t>& perm) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) std::copy(m.row(perm[i]).begin(), m.row(perm[i]).end(), out.row(i).begin());
  return out;
}

/// Encoding and corrections of a plain forecast ensemble.
struct Parts {
  Vector fv;
  Matrix w, z;
};

Parts eval_parts(const MnmefModel& m, const SystemSpec& spec, const Matrix& forecast, std::span<const double> y) {
  ad::Tape t(false);
  ParamBinder pb(t, m.params);
  const auto f = t.constant(forecast);
  const auto hx = ad::select_cols(f, spec.obs.indices());
  const auto fv = encode_forecast(pb, m, f, hx);
  const auto [w, z] = corrections(pb, m, f, hx, t.constant(repeat_row(y, forecast.rows())), fv);
  return {fv.value().data(), w.value(), z.value()};
}

Matrix eval_gain(const Matrix& forecast, const SystemSpec& spec, const Matrix& w, const Matrix& z) {
  ad::Tape t(false);
  const auto f = t.constant(forecast);
  return learned_gain(f, ad::select_cols(f, spec.obs.indices()), t.constant(w), t.constant(z),
                      t.constant(spec.obs_cov), std::nullopt)
      .value();
}

struct LocValues {
  Matrix g, l1, l2;
};

LocValues eval_localization(const MnmefModel& m, const Matrix& forecast, const SystemSpec& spec) {
  ad::Tape t(false);
  ParamBinder pb(t, m.params);
  const auto f = t.constant(forecast);
  const auto fv = encode_forecast(pb, m, f, ad::select_cols(f, spec.obs.indices()));
  const Localization loc = learned_localization(pb, m, fv);
  return {loc.weights.value(), loc.l1.value(), loc.l2.value()};
}

}  // namespace

// [TRIVIAL] zero-initialised output layer gives zero corrections.
TEST(Corrections, ZeroHeadGivesZero) {
  const SystemSpec spec = lorenz96_system();
  const MnmefModel m = make_model(spec);
  RngStream rng(1, 0);
  const Matrix e = verify::attractor_ensemble(spec, 6, rng);
  const Parts p = eval_parts(m, spec, e, spec.h(e.row(0)));
  for (double v : p.w.data()) EXPECT_EQ(v, 0.0);
  for (double v : p.z.data()) EXPECT_EQ(v, 0.0);
}

// [TRIVIAL] (ŵ, ẑ) have one row per member and widths (d_v, d_y) for every system.
TEST(Corrections, ShapesForEverySystem) {
  RngStream rng(2, 0);
  for (const SystemSpec& spec : verify::all_systems()) {
    const MnmefModel m = make_model(spec, small_config());
    const Matrix e = verify::attractor_ensemble(spec, 4, rng);
    const Parts p = eval_parts(m, spec, e, spec.h(e.row(1)));
    EXPECT_EQ(p.w.rows(), 4u) << spec.name;
    EXPECT_EQ(p.w.cols(), spec.state_dim) << spec.name;
    EXPECT_EQ(p.z.rows(), 4u) << spec.name;
    EXPECT_EQ(p.z.cols(), spec.obs_dim) << spec.name;
    EXPECT_EQ(p.fv.size(), 6u);
  }
}

// [DERIVED] finite-difference sensitivity: perturbing y† moves the corrections.
TEST(Corrections, DependOnObservation) {
  const SystemSpec spec = lorenz63_system();
  const MnmefModel m = make_model(spec, random_heads());
  RngStream rng(3, 0);
  const Matrix e = verify::attractor_ensemble(spec, 5, rng);
  Vector y = spec.h(e.row(0));
  const Parts a = eval_parts(m, spec, e, y);
  y[0] += 1e-4;
  const Parts b = eval_parts(m, spec, e, y);
  EXPECT_GT(max_abs_diff_vec(a.w.data(), b.w.data()) + max_abs_diff_vec(a.z.data(), b.z.data()), 1e-9);
  EXPECT_EQ(max_abs_diff_vec(a.fv, b.fv), 0.0);
}

// [DERIVED] without corrections the gain equals the classical EnKF gain.
TEST(LearnedGain, ReducesToEnkfGain) {
  RngStream rng(4, 0);
  for (const SystemSpec& spec : verify::all_systems()) {
    const Matrix e = verify::attractor_ensemble(spec, 12, rng);
    const Matrix k = eval_gain(e, spec, Matrix(12, spec.state_dim), Matrix(12, spec.obs_dim));
    const Matrix ref = enkf_gain(e, spec.obs, spec.obs_cov);
    EXPECT_LT(max_abs_diff_vec(k.data(), ref.data()), 1e-12) << spec.name;
  }
}

// [TRIVIAL] ẑ cancelling the observation anomalies makes K^(2) and K^(1) vanish, so K = K^(1) Γ^{-1} = 0.
TEST(LearnedGain, CancelledAnomaliesGiveZeroGain) {
  const SystemSpec spec = lorenz96_system();
  RngStream rng(5, 0);
  const Matrix e = verify::attractor_ensemble(spec, 8, rng);
  const Matrix hx = observe_ensemble(e, spec.obs);
  const Vector hbar = ensemble_mean(hx);
  Matrix z(8, spec.obs_dim);
  for (std::size_t n = 0; n < 8; ++n)
    for (std::size_t i = 0; i < spec.obs_dim; ++i) z(n, i) = hbar[i] - hx(n, i);
  const Matrix k = eval_gain(e, spec, random_matrix(8, spec.state_dim, rng), z);
  for (double v : k.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

// [DERIVED] N=3, d_v=2, d_y=1: direct summation of the corrected outer products.
TEST(LearnedGain, MatchesSummationOracle) {
  SystemSpec spec = linear_system();
  spec.state_dim = 2;
  spec.obs = make_subsampling(2, 2, 0, 1);
  spec.obs_dim = 1;
  spec.obs_cov = scaled_identity(1, 0.7);
  RngStream rng(6, 0);
  const Matrix v = random_matrix(3, 2, rng), w = random_matrix(3, 2, rng), z = random_matrix(3, 1, rng);
  const double m0 = (v(0, 0) + v(1, 0) + v(2, 0)) / 3.0, m1 = (v(0, 1) + v(1, 1) + v(2, 1)) / 3.0;
  double k1_0 = 0.0, k1_1 = 0.0, k2 = 0.0;
  for (std::size_t n = 0; n < 3; ++n) {
    const double q = v(n, 0) - m0 + z(n, 0);
    k1_0 += (v(n, 0) - m0 + w(n, 0)) * q / 3.0;
    k1_1 += (v(n, 1) - m1 + w(n, 1)) * q / 3.0;
    k2 += q * q / 3.0;
  }
  const Matrix k = eval_gain(v, spec, w, z);
  ASSERT_EQ(k.rows(), 2u);
  ASSERT_EQ(k.cols(), 1u);
  EXPECT_NEAR(k(0, 0), k1_0 / (k2 + 0.7), 1e-13);
  EXPECT_NEAR(k(1, 0), k1_1 / (k2 + 0.7), 1e-13);
}

// [DERIVED] λ_min(K^(2) + Γ) ≥ λ_min(Γ) for random corrections on every system.
TEST(LearnedGain, ShiftedCovarianceBoundedBelow) {
  RngStream rng(7, 0);
  for (const SystemSpec& spec : verify::all_systems(0.5)) {
    for (int rep = 0; rep < 10; ++rep) {
      const std::size_t n = 2 + rng.uniform_int(0, 20);
      const Matrix e = verify::attractor_ensemble(spec, n, rng);
      const Matrix hx = observe_ensemble(e, spec.obs);
      const Vector hbar = ensemble_mean(hx);
      Matrix q = random_matrix(n, spec.obs_dim, rng, 3.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < spec.obs_dim; ++j) q(i, j) += hx(i, j) - hbar[j];
      Matrix k2 = matmul(transpose(q), q);
      for (double& x : k2.data()) x /= static_cast<double>(n);
      EXPECT_GE(min_eigenvalue(k2 + spec.obs_cov), min_eigenvalue(spec.obs_cov) - 1e-12) << spec.name;
    }
  }
}

// [PAPER] Lorenz '96 with stride 4: 21 distances {0..20}, L^(1) 40x10, L^(2) 10x10.
TEST(DistanceTable, Lorenz96Layout) {
  const SystemSpec spec = lorenz96_system();
  const DistanceTable t = make_distance_table(spec);
  ASSERT_EQ(t.size(), 21u);
  for (std::size_t i = 0; i < 21; ++i) EXPECT_EQ(t.values[i], static_cast<double>(i));
  EXPECT_EQ(t.l1.size(), 400u);
  EXPECT_EQ(t.l2.size(), 100u);
}

// [TRIVIAL] models for non-spatial systems carry no localization head.
TEST(DistanceTable, NoLocalizationWithoutGeometry) {
  EXPECT_FALSE(make_model(lorenz63_system(), small_config()).loc.has_value());
  EXPECT_FALSE(make_model(linear_system(), small_config()).loc.has_value());
  EXPECT_TRUE(make_model(ks_system(), small_config()).loc.has_value());
}

// [PAPER] every taper entry is the learned weight at the periodic distance d(k, 4l).
TEST(Localization, TapersAreDistanceLookups) {
  const SystemSpec spec = lorenz96_system();
  const MnmefModel m = make_model(spec, random_heads());
  RngStream rng(8, 0);
  const LocValues lv = eval_localization(m, verify::attractor_ensemble(spec, 7, rng), spec);
  ASSERT_EQ(lv.l1.rows(), 40u);
  ASSERT_EQ(lv.l1.cols(), 10u);
  ASSERT_EQ(lv.l2.rows(), 10u);
  ASSERT_EQ(lv.l2.cols(), 10u);
  for (std::size_t k = 0; k < 40; ++k)
    for (std::size_t l = 0; l < 10; ++l) {
      const std::size_t d = std::min<std::size_t>((k > 4 * l ? k - 4 * l : 4 * l - k), 40 - (k > 4 * l ? k - 4 * l : 4 * l - k));
      EXPECT_EQ(lv.l1(k, l), lv.g(0, d));
    }
  for (std::size_t k = 0; k < 10; ++k)
    for (std::size_t l = 0; l < 10; ++l) {
      const std::size_t a = 4 * std::max(k, l) - 4 * std::min(k, l);
      EXPECT_EQ(lv.l2(k, l), lv.g(0, std::min<std::size_t>(a, 40 - a)));
    }
}

// [TRIVIAL] both bounded output layers stay within [0, 2] on random inputs.
TEST(Localization, WeightsStayInRange) {
  RngStream rng(9, 0);
  for (LocOutput mode : {LocOutput::kLogistic, LocOutput::kSoftmax}) {
    for (const SystemSpec& spec : {lorenz96_system(), ks_system()}) {
      ModelConfig cfg = random_heads(11);
      cfg.loc_output = mode;
      const MnmefModel m = make_model(spec, cfg);
      for (int rep = 0; rep < 5; ++rep) {
        const LocValues lv = eval_localization(m, verify::attractor_ensemble(spec, 3 + rep, rng, 5.0), spec);
        for (double g : lv.g.data()) {
          EXPECT_GE(g, 0.0);
          EXPECT_LE(g, 2.0);
        }
      }
    }
  }
}

// [TRIVIAL] zeroed localization head gives ĝ ≡ 1.
TEST(Localization, ZeroHeadIsUnit) {
  const SystemSpec spec = lorenz96_system();
  const MnmefModel m = make_model(spec);
  RngStream rng(10, 0);
  const LocValues lv = eval_localization(m, verify::attractor_ensemble(spec, 5, rng), spec);
  for (double g : lv.g.data()) EXPECT_EQ(g, 1.0);
}

// [TRIVIAL] zero inflation weights give û = 0 with one d_v row per member.
TEST(Inflation, ZeroHeadGivesZero) {
  const SystemSpec spec = lorenz96_system();
  const MnmefModel m = make_model(spec);
  RngStream rng(11, 0);
  const Matrix e = verify::attractor_ensemble(spec, 4, rng);
  ad::Tape t(false);
  ParamBinder pb(t, m.params);
  const auto f = t.constant(e);
  const auto u = learned_inflation(pb, m, f, encode_forecast(pb, m, f, ad::select_cols(f, spec.obs.indices())));
  ASSERT_EQ(u.rows(), 4u);
  ASSERT_EQ(u.cols(), 40u);
  for (double v : u.value().data()) EXPECT_EQ(v, 0.0);
}

// [DERIVED] directional finite difference of a two-step loss along θ_infl.
TEST(Inflation, GradientReachesInflationHead) {
  const SystemSpec spec = lorenz63_system();
  MnmefModel m = make_model(spec, small_config());
  RngStream rng(12, 0);
  const Matrix e0 = verify::attractor_ensemble(spec, 4, rng);
  const Vector y1 = spec.h(e0.row(0)), y2 = spec.h(e0.row(1));
  const StepNoise n1 = draw_step_noise(spec, 4, rng), n2 = draw_step_noise(spec, 4, rng);
  auto loss_of = [&](const MnmefModel& model, ad::Tape& t, ParamBinder& pb) {
    ad::Tensor x = mnmef_step(pb, model, spec, t.constant(e0), y1, n1);
    x = mnmef_step(pb, model, spec, x, y2, n2);
    return ad::sum(ad::mul(x, x));
  };
  ad::Tape t;
  ParamBinder pb(t, m.params);
  const auto grads = t.backward(loss_of(m, t, pb));

  std::vector<Matrix> dir(m.params.size());
  double analytic = 0.0;
  for (std::size_t id = 0; id < m.params.size(); ++id) {
    if (m.params.entry(id).partition != Partition::kInflation) continue;
    dir[id] = random_matrix(m.params.value(id).rows(), m.params.value(id).cols(), rng);
    const auto it = grads.find(static_cast<long>(id));
    ASSERT_NE(it, grads.end());
    for (std::size_t k = 0; k < dir[id].size(); ++k) analytic += dir[id].data()[k] * it->second.data()[k];
  }
  auto shifted = [&](double h) {
    MnmefModel c = m;
    for (std::size_t id = 0; id < c.params.size(); ++id)
      if (!dir[id].empty())
        for (std::size_t k = 0; k < dir[id].size(); ++k) c.params.value(id).data()[k] += h * dir[id].data()[k];
    ad::Tape tt(false);
    ParamBinder pbb(tt, c.params);
    return loss_of(c, tt, pbb).value()(0, 0);
  };
  const double h = 1e-6;
  const double fd = (shifted(h) - shifted(-h)) / (2.0 * h);
  EXPECT_GT(std::abs(analytic), 1e-6);
  EXPECT_LT(std::abs(analytic - fd) / std::abs(fd), 1e-5);
}

// [DERIVED] zero heads: the learned step is predict + perturbed-observation EnKF on the same draws.
TEST(MnmefStep, ZeroHeadsEqualEnkf) {
  RngStream rng(13, 0);
  for (const SystemSpec& spec : verify::all_systems(1.0, 0.1)) {
    const MnmefModel m = make_model(spec);
    for (std::size_t n : {2u, 7u, 20u}) {
      const Matrix e = verify::attractor_ensemble(spec, n, rng);
      const Vector y = spec.h(verify::attractor_ensemble(spec, 1, rng).row(0));
      const StepNoise noise = draw_step_noise(spec, n, rng);
      const Matrix got = mnmef_step(m, spec, e, y, noise);
      const Matrix forecast = predict_with_noise(e, spec, noise.process);
      const Matrix ref = enkf_analysis_with_noise(forecast, y, spec.obs, spec.obs_cov, noise.obs);
      EXPECT_LT(max_abs_diff_vec(got.data(), ref.data()), 1e-10) << spec.name << " N=" << n;
      StepOptions bypass;
      bypass.zero_heads = true;
      const Matrix got_bypass = mnmef_step(make_model(spec, small_config()), spec, e, y, noise, bypass);
      EXPECT_LT(max_abs_diff_vec(got_bypass.data(), ref.data()), 1e-10) << spec.name << " N=" << n;
    }
  }
}

// [DERIVED] with a vanishing gain the step is forecast + û, then clamped.
TEST(MnmefStep, VanishingGainLeavesForecastPlusInflation) {
  SystemSpec spec = lorenz63_system();
  spec.obs_cov = scaled_identity(spec.obs_dim, 1e14);
  const MnmefModel m = make_model(spec, random_heads());
  RngStream rng(14, 0);
  const Matrix e = verify::attractor_ensemble(spec, 6, rng);
  StepNoise noise{draw_noise(6, scaled_identity(3, 0.01), rng), Matrix(6, spec.obs_dim)};
  const Vector y = spec.h(e.row(2));
  const Matrix got = mnmef_step(m, spec, e, y, noise);

  ad::Tape t(false);
  ParamBinder pb(t, m.params);
  const auto f = t.constant(predict_with_noise(e, spec, noise.process));
  const auto fv = encode_forecast(pb, m, f, ad::select_cols(f, spec.obs.indices()));
  const Matrix expected = ad::clamp_abs(ad::add(f, learned_inflation(pb, m, f, fv)), m.clamp).value();
  EXPECT_LT(max_abs_diff_vec(got.data(), expected.data()), 1e-8);
}

// [PAPER] entries beyond the clamp are replaced by ±clamp, sign kept.
TEST(MnmefStep, ClampKeepsSign) {
  SystemSpec spec = lorenz96_system();
  spec.step = [](std::span<const double> v) { return Vector(v.begin(), v.end()); };
  spec.obs_cov = scaled_identity(spec.obs_dim, 1e14);
  const MnmefModel m = make_model(spec);
  Matrix e(3, 40, 1.0);
  e(0, 5) = 25.0;
  e(1, 7) = -31.0;
  e(2, 0) = 19.5;
  const StepNoise noise{Matrix(3, 40), Matrix(3, 10)};
  const Matrix out = mnmef_step(m, spec, e, Vector(10, 0.0), noise);
  EXPECT_EQ(out(0, 5), 20.0);
  EXPECT_EQ(out(1, 7), -20.0);
  EXPECT_NEAR(out(2, 0), 19.5, 1e-9);
  EXPECT_NEAR(out(1, 3), 1.0, 1e-9);
}

// [DERIVED] permuting members with their noise rows permutes the output; the mean is invariant.
TEST(MnmefStep, PermutationEquivariant) {
  RngStream rng(15, 0);
  for (const SystemSpec& spec : {lorenz63_system(), lorenz96_system()}) {
    const MnmefModel m = make_model(spec, random_heads(17));
    for (std::size_t n : {2u, 5u, 16u}) {
      const Matrix e = verify::attractor_ensemble(spec, n, rng);
      const Vector y = spec.h(e.row(0));
      const StepNoise noise = draw_step_noise(spec, n, rng);
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      std::reverse(perm.begin(), perm.end());
      std::swap(perm[0], perm[n / 2]);
      const StepNoise pn{permute_rows(noise.process, perm), permute_rows(noise.obs, perm)};
      const Matrix a = mnmef_step(m, spec, e, y, noise);
      const Matrix b = mnmef_step(m, spec, permute_rows(e, perm), y, pn);
      EXPECT_LT(max_abs_diff_vec(permute_rows(a, perm).data(), b.data()), 1e-10) << spec.name << " N=" << n;
      EXPECT_LT(max_abs_diff_vec(ensemble_mean(a), ensemble_mean(b)), 1e-10) << spec.name << " N=" << n;
    }
  }
}

// [TRIVIAL]
TEST(MnmefStep, RejectsMismatchedInputs) {
  const SystemSpec l63 = lorenz63_system();
  const MnmefModel m = make_model(l63, small_config());
  RngStream rng(16, 0);
  const Matrix e = verify::attractor_ensemble(l63, 3, rng);
  EXPECT_ERROR_KIND(mnmef_step(m, l63, e, Vector(2, 0.0), rng), kDimMismatch);
  const SystemSpec lin = linear_system();
  EXPECT_ERROR_KIND(mnmef_step(m, lin, Matrix(3, lin.state_dim), Vector(lin.obs_dim, 0.0), rng), kDimMismatch);
  EXPECT_ERROR_KIND(mnmef_step(m, l63, Matrix(1, 3), Vector(1, 0.0), rng), kPrecondition);
}

// [TRIVIAL] one parameter set serves several ensemble sizes.
TEST(MnmefStep, AnyEnsembleSize) {
  const SystemSpec spec = lorenz96_system();
  const MnmefModel m = make_model(spec, random_heads());
  RngStream rng(17, 0);
  for (std::size_t n : {5u, 15u, 40u}) {
    const Matrix out = mnmef_step(m, spec, verify::attractor_ensemble(spec, n, rng), Vector(10, 1.0), rng);
    EXPECT_EQ(out.rows(), n);
    for (double v : out.data()) ASSERT_TRUE(std::isfinite(v));
  }
}

// [TRIVIAL] saving and loading keeps every weight bit for bit.
TEST(Checkpoint, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "mnmef_ckpt_test";
  std::filesystem::remove_all(dir);
  const SystemSpec spec = lorenz96_system();
  ModelConfig cfg = small_config();
  cfg.loc_output = LocOutput::kSoftmax;
  const MnmefModel m = make_model(spec, cfg);
  CheckpointMeta meta;
  meta.detach_horizon = 7;
  meta.extra["members"] = "10";
  save_checkpoint(dir / "m.ckpt", m, meta);
  const LoadedCheckpoint c = load_checkpoint(dir / "m.ckpt", spec);
  ASSERT_EQ(c.model.params.size(), m.params.size());
  for (std::size_t id = 0; id < m.params.size(); ++id) {
    EXPECT_EQ(c.model.params.entry(id).name, m.params.entry(id).name);
    EXPECT_EQ(c.model.params.value(id).data(), m.params.value(id).data());
  }
  EXPECT_EQ(c.model.config.loc_output, LocOutput::kSoftmax);
  EXPECT_EQ(c.model.clamp, 20.0);
  EXPECT_EQ(c.meta.detach_horizon, 7u);
  EXPECT_EQ(c.meta.extra.at("members"), "10");
  std::filesystem::remove_all(dir);
}

// [TRIVIAL] wrong system, corrupt header and missing sidecar are data errors.
TEST(Checkpoint, RejectsBadFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "mnmef_ckpt_bad";
  std::filesystem::remove_all(dir);
  const SystemSpec spec = lorenz63_system();
  save_checkpoint(dir / "m.ckpt", make_model(spec, small_config()));
  EXPECT_ERROR_KIND(load_checkpoint(dir / "m.ckpt", lorenz96_system()), kData);
  {
    std::fstream f(dir / "m.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  EXPECT_ERROR_KIND(load_checkpoint(dir / "m.ckpt", spec), kData);
  std::filesystem::remove(sidecar_path(dir / "m.ckpt"));
  EXPECT_ERROR_KIND(load_checkpoint(dir / "m.ckpt", spec), kData);
  std::filesystem::remove_all(dir);
}
