#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mnmef/autodiff.hpp"
#include "mnmef/dynamics.hpp"
#include "mnmef/filters.hpp"
#include "mnmef/nn.hpp"
#include "mnmef/numerics.hpp"
#include "mnmef/set_transformer.hpp"

namespace mnmef {

/// Bounded output layer of the localization head; both map into [0, 2].
enum class LocOutput { kLogistic, kSoftmax };

inline std::string loc_output_name(LocOutput m) { return m == LocOutput::kLogistic ? "logistic" : "softmax"; }

inline LocOutput parse_loc_output(const std::string& s) {
  if (s == "logistic") return LocOutput::kLogistic;
  if (s == "softmax") return LocOutput::kSoftmax;
  fail(ErrorKind::kConfig, "unknown bounded-layer mode '" + s + "'");
}

/// Unique pairwise distances and the lookup tables that expand a per-distance
/// weight vector into the state-observation and observation-observation tapers.
struct DistanceTable {
  Vector values;                   // sorted unique distances
  std::vector<std::size_t> l1;     // d_v x d_y, row-major, index into values
  std::vector<std::size_t> l2;     // d_y x d_y
  std::size_t state_dim = 0;
  std::size_t obs_dim = 0;

  std::size_t size() const noexcept { return values.size(); }
};

inline DistanceTable make_distance_table(const SystemSpec& spec) {
  DistanceTable t;
  t.state_dim = spec.state_dim;
  t.obs_dim = spec.obs_dim;
  const auto idx = spec.obs.indices();
  std::vector<double> d1(spec.state_dim * spec.obs_dim), d2(spec.obs_dim * spec.obs_dim);
  for (std::size_t k = 0; k < spec.state_dim; ++k)
    for (std::size_t l = 0; l < spec.obs_dim; ++l) d1[k * spec.obs_dim + l] = spec.distance(k, idx[l]);
  for (std::size_t k = 0; k < spec.obs_dim; ++k)
    for (std::size_t l = 0; l < spec.obs_dim; ++l) d2[k * spec.obs_dim + l] = spec.distance(idx[k], idx[l]);
  t.values = d1;
  t.values.insert(t.values.end(), d2.begin(), d2.end());
  std::sort(t.values.begin(), t.values.end());
  t.values.erase(std::unique(t.values.begin(), t.values.end()), t.values.end());
  auto lookup = [&](double d) {
    return static_cast<std::size_t>(std::lower_bound(t.values.begin(), t.values.end(), d) - t.values.begin());
  };
  for (double d : d1) t.l1.push_back(lookup(d));
  for (double d : d2) t.l2.push_back(lookup(d));
  return t;
}

struct ModelConfig {
  std::size_t width = 64;
  std::size_t heads = 8;
  std::size_t seed_len = 16;
  std::size_t st_dim = 64;
  std::size_t head_hidden = 128;
  Activation activation = Activation::kRelu;
  LocOutput loc_output = LocOutput::kLogistic;
  bool zero_init_heads = true;  // final head layers start at zero: the untrained filter is the EnKF
  double ln_eps = 1e-5;
  std::uint64_t init_seed = 0;
};

/// Learned filter: set-transformer encoder plus gain, inflation and
/// localization heads. Localization exists only for spatial systems.
struct MnmefModel {
  std::string system;
  std::size_t state_dim = 0;
  std::size_t obs_dim = 0;
  double clamp = 0.0;
  ModelConfig config;
  ParamStore params;
  SetTransformer st;
  Mlp gain;
  Mlp infl;
  std::optional<Mlp> loc;
  DistanceTable table;
};

inline MnmefModel make_model(const SystemSpec& spec, const ModelConfig& cfg = {}) {
  MnmefModel m;
  m.system = spec.name;
  m.state_dim = spec.state_dim;
  m.obs_dim = spec.obs_dim;
  m.clamp = spec.clamp;
  m.config = cfg;
  RngStream rng(cfg.init_seed, 0x5e7);
  SetTransformerConfig sc;
  sc.input_dim = spec.state_dim + spec.obs_dim;
  sc.width = cfg.width;
  sc.heads = cfg.heads;
  sc.seed_len = cfg.seed_len;
  sc.output_dim = cfg.st_dim;
  sc.activation = cfg.activation;
  sc.ln_eps = cfg.ln_eps;
  m.st = make_set_transformer(m.params, sc, rng);
  const std::size_t dv = spec.state_dim, dy = spec.obs_dim, h = cfg.head_hidden, f = cfg.st_dim;
  m.gain = make_mlp(m.params, "gain", Partition::kGain, {dv + 2 * dy + f, h, dv + dy}, cfg.activation, rng,
                    cfg.zero_init_heads);
  m.infl = make_mlp(m.params, "infl", Partition::kInflation, {dv + f, h, dv}, cfg.activation, rng,
                    cfg.zero_init_heads);
  if (spec.spatial) {
    m.table = make_distance_table(spec);
    m.loc = make_mlp(m.params, "loc", Partition::kLocalization, {f, h, m.table.size()}, cfg.activation, rng,
                     cfg.zero_init_heads);
  }
  return m;
}

/// Sets every head weight and bias to zero. With logistic output this makes the
/// localization weights exactly 1, so the step reduces to the EnKF.
inline void zero_heads(MnmefModel& m) {
  for (std::size_t id = 0; id < m.params.size(); ++id)
    if (m.params.entry(id).partition != Partition::kSetTransformer)
      std::fill(m.params.value(id).data().begin(), m.params.value(id).data().end(), 0.0);
}

// ---------------------------------------------------------------------------
// Components of the learned analysis

/// f_v: encoding of the forecast pairs {(v̂_n, h(v̂_n))}.
inline ad::Tensor encode_forecast(ParamBinder& pb, const MnmefModel& m, ad::Tensor forecast, ad::Tensor hx) {
  return encode_ensemble(pb, m.st, ad::concat_cols({forecast, hx}));
}

/// Per-member gain corrections (ŵ_n, ẑ_n) from [v̂_n; h(v̂_n); y†; f_v].
inline std::pair<ad::Tensor, ad::Tensor> corrections(ParamBinder& pb, const MnmefModel& m, ad::Tensor forecast,
                                                     ad::Tensor hx, ad::Tensor y_rows, ad::Tensor fv) {
  const std::size_t n = forecast.rows();
  const ad::Tensor in = ad::concat_cols({forecast, hx, y_rows, ad::repeat_rows(fv, n)});
  const ad::Tensor out = apply(pb, m.gain, in);
  return {ad::slice_cols(out, 0, m.state_dim), ad::slice_cols(out, m.state_dim, m.state_dim + m.obs_dim)};
}

/// Per-distance weights ĝ in [0, 2] and the tapers built from them.
struct Localization {
  ad::Tensor weights;  // 1 x N_D
  ad::Tensor l1;       // d_v x d_y
  ad::Tensor l2;       // d_y x d_y
};

inline Localization learned_localization(ParamBinder& pb, const MnmefModel& m, ad::Tensor fv) {
  require(m.loc.has_value(), ErrorKind::kPrecondition, "model has no localization head");
  ad::Tensor raw = apply(pb, *m.loc, fv);
  ad::Tensor g = m.config.loc_output == LocOutput::kLogistic ? ad::logistic(raw) : ad::softmax_rows(raw);
  g = ad::scale(g, 2.0);
  return {g, ad::gather(g, m.state_dim, m.obs_dim, m.table.l1), ad::gather(g, m.obs_dim, m.obs_dim, m.table.l2)};
}

/// û_n from [v_n; f_v]; the observation does not enter.
inline ad::Tensor learned_inflation(ParamBinder& pb, const MnmefModel& m, ad::Tensor analysis, ad::Tensor fv) {
  return apply(pb, m.infl, ad::concat_cols({analysis, ad::repeat_rows(fv, analysis.rows())}));
}

/// Kᵀ for K = (K1 ∘ L1)(K2 ∘ L2 + Γ)^{-1}, where K1 and K2 are the 1/N
/// outer-product sums of corrected state and observation anomalies.
inline ad::Tensor learned_gain_transposed(ad::Tensor forecast, ad::Tensor hx, ad::Tensor w, ad::Tensor z,
                                          ad::Tensor gamma, const std::optional<Localization>& loc) {
  const std::size_t n = forecast.rows();
  require(n >= 2, ErrorKind::kPrecondition, "learned gain needs at least two members");
  const double inv_n = 1.0 / static_cast<double>(n);
  const ad::Tensor p = ad::add(ad::sub_row(forecast, ad::mean_rows(forecast)), w);
  const ad::Tensor q = ad::add(ad::sub_row(hx, ad::mean_rows(hx)), z);
  ad::Tensor k1 = ad::scale(ad::matmul_tn(p, q), inv_n);
  ad::Tensor k2 = ad::scale(ad::matmul_tn(q, q), inv_n);
  if (loc) {
    k1 = ad::mul(k1, loc->l1);
    k2 = ad::mul(k2, loc->l2);
  }
  return ad::solve_spd(ad::add(k2, gamma), ad::transpose(k1));
}

inline ad::Tensor learned_gain(ad::Tensor forecast, ad::Tensor hx, ad::Tensor w, ad::Tensor z, ad::Tensor gamma,
                               const std::optional<Localization>& loc) {
  return ad::transpose(learned_gain_transposed(forecast, hx, w, z, gamma, loc));
}

// ---------------------------------------------------------------------------
// One assimilation step

struct StepNoise {
  Matrix process;  // N x d_v, ξ
  Matrix obs;      // N x d_y, η
};

/// Draws ξ then η, in the same order the classical filters consume them.
inline StepNoise draw_step_noise(const SystemSpec& spec, std::size_t members, RngStream& rng) {
  StepNoise s;
  s.process = draw_noise(members, spec.process_cov, rng);
  s.obs = draw_noise(members, spec.obs_cov, rng);
  return s;
}

struct StepOptions {
  bool zero_heads = false;      // ŵ = ẑ = 0, ĝ ≡ 1, û = 0: the perturbed-observation EnKF
  bool zero_inflation = false;  // û = 0 only
};

inline Matrix repeat_row(std::span<const double> y, std::size_t n) {
  Matrix m(n, y.size());
  for (std::size_t i = 0; i < n; ++i) std::copy(y.begin(), y.end(), m.row(i).begin());
  return m;
}

/// Predict with Ψ + ξ, extend with h + η, encode, correct the gain, localize,
/// update every member, add the learned inflation and clamp with sign kept.
inline ad::Tensor mnmef_step(ParamBinder& pb, const MnmefModel& m, const SystemSpec& spec, ad::Tensor ensemble,
                             std::span<const double> y, const StepNoise& noise, const StepOptions& opt = {}) {
  ad::Tape& tape = pb.tape();
  const std::size_t n = ensemble.rows();
  require(ensemble.cols() == spec.state_dim && y.size() == spec.obs_dim, ErrorKind::kDimMismatch,
          "mnmef_step: ensemble or observation size");
  require(m.state_dim == spec.state_dim && m.obs_dim == spec.obs_dim, ErrorKind::kDimMismatch,
          "mnmef_step: model built for another system");
  require(noise.process.rows() == n && noise.obs.rows() == n, ErrorKind::kDimMismatch, "mnmef_step: noise rows");

  const ad::Tensor forecast =
      ad::add(ad::map_rows(ensemble, spec.step, spec.step_vjp), tape.constant(noise.process));
  const ad::Tensor hx = ad::select_cols(forecast, spec.obs.indices());
  const ad::Tensor y_rows = tape.constant(repeat_row(y, n));
  const ad::Tensor innovation = ad::sub(y_rows, ad::add(hx, tape.constant(noise.obs)));
  const ad::Tensor gamma = tape.constant(spec.obs_cov);

  ad::Tensor out;
  if (opt.zero_heads) {
    const ad::Tensor w0 = tape.constant(Matrix(n, spec.state_dim));
    const ad::Tensor z0 = tape.constant(Matrix(n, spec.obs_dim));
    const ad::Tensor kt = learned_gain_transposed(forecast, hx, w0, z0, gamma, std::nullopt);
    out = ad::add(forecast, ad::matmul(innovation, kt));
  } else {
    const ad::Tensor fv = encode_forecast(pb, m, forecast, hx);
    const auto [w, z] = corrections(pb, m, forecast, hx, y_rows, fv);
    std::optional<Localization> loc;
    if (m.loc) loc = learned_localization(pb, m, fv);
    const ad::Tensor kt = learned_gain_transposed(forecast, hx, w, z, gamma, loc);
    out = ad::add(forecast, ad::matmul(innovation, kt));
    if (!opt.zero_inflation) out = ad::add(out, learned_inflation(pb, m, out, fv));
  }
  out = ad::clamp_abs(out, m.clamp);
  require(all_finite(out.value()), ErrorKind::kNonFinite, "mnmef_step produced non-finite members");
  return out;
}

/// Inference convenience: one step on plain matrices without recording gradients.
inline StateEnsemble mnmef_step(const MnmefModel& m, const SystemSpec& spec, const StateEnsemble& ensemble,
                                std::span<const double> y, const StepNoise& noise, const StepOptions& opt = {}) {
  ad::Tape tape(false);
  ParamBinder pb(tape, m.params);
  return mnmef_step(pb, m, spec, tape.constant(ensemble), y, noise, opt).value();
}

inline StateEnsemble mnmef_step(const MnmefModel& m, const SystemSpec& spec, const StateEnsemble& ensemble,
                                std::span<const double> y, RngStream& rng, const StepOptions& opt = {}) {
  return mnmef_step(m, spec, ensemble, y, draw_step_noise(spec, ensemble.rows(), rng), opt);
}

/// f_v for a plain ensemble of pairs, without gradients.
inline Vector encode_ensemble_value(const SetTransformer& st, const ParamStore& ps, const Matrix& pairs) {
  ad::Tape tape(false);
  ParamBinder pb(tape, ps);
  return encode_ensemble(pb, st, tape.constant(pairs)).value().data();
}

}  // namespace mnmef
