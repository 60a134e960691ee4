#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mnmef/error.hpp"
#include "mnmef/ks.hpp"
#include "mnmef/numerics.hpp"

namespace mnmef {

// ---------------------------------------------------------------------------
// Right-hand sides and integrators

inline Vector lorenz63_rhs(std::span<const double> v, double sigma = 10.0, double rho = 28.0,
                           double beta = 8.0 / 3.0) {
  require(v.size() == 3, ErrorKind::kDimMismatch, "lorenz63 state must have 3 entries");
  return {sigma * (v[1] - v[0]), v[0] * (rho - v[2]) - v[1], v[0] * v[1] - beta * v[2]};
}

/// du_i/dt = (u_{i+1} - u_{i-2}) u_{i-1} - u_i + F with cyclic indices.
inline Vector lorenz96_rhs(std::span<const double> v, double forcing = 8.0) {
  const std::size_t d = v.size();
  require(d >= 4, ErrorKind::kDimMismatch, "lorenz96 needs at least 4 variables");
  Vector out(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double up1 = v[(i + 1) % d];
    const double um1 = v[(i + d - 1) % d];
    const double um2 = v[(i + d - 2) % d];
    out[i] = (up1 - um2) * um1 - v[i] + forcing;
  }
  return out;
}

using Rhs = std::function<Vector(std::span<const double>)>;

/// One classical fourth-order Runge-Kutta step of size h.
inline Vector rk4_step(const Rhs& rhs, std::span<const double> v, double h) {
  require(h > 0.0, ErrorKind::kPrecondition, "rk4 step must be positive");
  const std::size_t d = v.size();
  Vector tmp(d);
  const Vector k1 = rhs(v);
  for (std::size_t i = 0; i < d; ++i) tmp[i] = v[i] + 0.5 * h * k1[i];
  const Vector k2 = rhs(tmp);
  for (std::size_t i = 0; i < d; ++i) tmp[i] = v[i] + 0.5 * h * k2[i];
  const Vector k3 = rhs(tmp);
  for (std::size_t i = 0; i < d; ++i) tmp[i] = v[i] + h * k3[i];
  const Vector k4 = rhs(tmp);
  Vector out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = v[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  require(all_finite(out), ErrorKind::kNonFinite, "rk4 produced non-finite values");
  return out;
}

/// Composes `substeps` RK4 steps of size dt / substeps.
inline Vector rk4_integrate(const Rhs& rhs, std::span<const double> v, double dt, std::size_t substeps) {
  require(substeps >= 1, ErrorKind::kPrecondition, "substeps must be >= 1");
  const double h = dt / static_cast<double>(substeps);
  Vector x(v.begin(), v.end());
  for (std::size_t s = 0; s < substeps; ++s) x = rk4_step(rhs, x, h);
  return x;
}

/// Vector-Jacobian product of an RHS: (v, g) -> J_f(v)ᵀ g.
using RhsVjp = std::function<Vector(std::span<const double>, std::span<const double>)>;

inline Vector lorenz63_rhs_vjp(std::span<const double> v, std::span<const double> g, double sigma = 10.0,
                               double rho = 28.0, double beta = 8.0 / 3.0) {
  return {-sigma * g[0] + (rho - v[2]) * g[1] + v[1] * g[2], sigma * g[0] - g[1] + v[0] * g[2],
          -v[0] * g[1] - beta * g[2]};
}

inline Vector lorenz96_rhs_vjp(std::span<const double> v, std::span<const double> g) {
  const std::size_t d = v.size();
  Vector out(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    const std::size_t ip1 = (i + 1) % d, im1 = (i + d - 1) % d, im2 = (i + d - 2) % d;
    out[ip1] += g[i] * v[im1];
    out[im2] -= g[i] * v[im1];
    out[im1] += g[i] * (v[ip1] - v[im2]);
    out[i] -= g[i];
  }
  return out;
}

/// Reverse-mode sweep through rk4_integrate: returns (d x_out / d v)ᵀ g.
inline Vector rk4_integrate_vjp(const Rhs& rhs, const RhsVjp& rhs_vjp, std::span<const double> v, double dt,
                                std::size_t substeps, std::span<const double> g) {
  const double h = dt / static_cast<double>(substeps);
  const std::size_t d = v.size();
  std::vector<Vector> starts;
  starts.reserve(substeps);
  Vector x(v.begin(), v.end());
  for (std::size_t s = 0; s < substeps; ++s) {
    starts.push_back(x);
    x = rk4_step(rhs, x, h);
  }
  Vector gx(g.begin(), g.end());
  Vector x2(d), x3(d), x4(d);
  for (std::size_t s = substeps; s-- > 0;) {
    const Vector& x0 = starts[s];
    const Vector k1 = rhs(x0);
    for (std::size_t i = 0; i < d; ++i) x2[i] = x0[i] + 0.5 * h * k1[i];
    const Vector k2 = rhs(x2);
    for (std::size_t i = 0; i < d; ++i) x3[i] = x0[i] + 0.5 * h * k2[i];
    const Vector k3 = rhs(x3);
    for (std::size_t i = 0; i < d; ++i) x4[i] = x0[i] + h * k3[i];
    Vector gk1(d), gk2(d), gk3(d), gk4(d);
    for (std::size_t i = 0; i < d; ++i) {
      gk1[i] = h / 6.0 * gx[i];
      gk2[i] = h / 3.0 * gx[i];
      gk3[i] = h / 3.0 * gx[i];
      gk4[i] = h / 6.0 * gx[i];
    }
    Vector gin = gx;
    const Vector g4 = rhs_vjp(x4, gk4);
    for (std::size_t i = 0; i < d; ++i) {
      gin[i] += g4[i];
      gk3[i] += h * g4[i];
    }
    const Vector g3 = rhs_vjp(x3, gk3);
    for (std::size_t i = 0; i < d; ++i) {
      gin[i] += g3[i];
      gk2[i] += 0.5 * h * g3[i];
    }
    const Vector g2 = rhs_vjp(x2, gk2);
    for (std::size_t i = 0; i < d; ++i) {
      gin[i] += g2[i];
      gk1[i] += 0.5 * h * g2[i];
    }
    const Vector g1 = rhs_vjp(x0, gk1);
    for (std::size_t i = 0; i < d; ++i) gin[i] += g1[i];
    gx = std::move(gin);
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Observation operator

/// Coordinate subsampling h(v) = (v[offset], v[offset + stride], ...).
struct ObsOperator {
  std::size_t state_dim = 0;
  std::size_t stride = 1;
  std::size_t offset = 0;
  std::size_t count = 0;

  std::size_t index(std::size_t i) const { return offset + i * stride; }

  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = index(i);
    return idx;
  }

  Vector apply(std::span<const double> v) const {
    require(v.size() == state_dim, ErrorKind::kDimMismatch, "observation operator input size");
    Vector y(count);
    for (std::size_t i = 0; i < count; ++i) y[i] = v[index(i)];
    return y;
  }

  Matrix as_matrix() const {
    Matrix h(count, state_dim);
    for (std::size_t i = 0; i < count; ++i) h(i, index(i)) = 1.0;
    return h;
  }
};

inline ObsOperator make_subsampling(std::size_t state_dim, std::size_t stride, std::size_t offset,
                                    std::size_t count) {
  require(stride >= 1, ErrorKind::kPrecondition, "stride must be >= 1");
  require(count >= 1 && offset + (count - 1) * stride < state_dim, ErrorKind::kIndexOutOfRange,
          "observed index beyond state dimension");
  return {state_dim, stride, offset, count};
}

/// Default count takes every stride-th coordinate starting at offset.
inline ObsOperator make_subsampling(std::size_t state_dim, std::size_t stride, std::size_t offset = 0) {
  require(stride >= 1, ErrorKind::kPrecondition, "stride must be >= 1");
  require(offset < state_dim, ErrorKind::kIndexOutOfRange, "offset beyond state dimension");
  return make_subsampling(state_dim, stride, offset, (state_dim - offset + stride - 1) / stride);
}

inline Vector subsample_obs(std::span<const double> v, std::size_t stride, std::size_t offset,
                            std::size_t count) {
  return make_subsampling(v.size(), stride, offset, count).apply(v);
}

inline Vector subsample_obs(std::span<const double> v, std::size_t stride, std::size_t offset = 0) {
  return make_subsampling(v.size(), stride, offset).apply(v);
}

inline double periodic_distance(std::size_t k, std::size_t l, std::size_t period) {
  const std::size_t d = k > l ? k - l : l - k;
  return static_cast<double>(std::min(d, period - d));
}

// ---------------------------------------------------------------------------
// System bundles

enum class SystemKind { kLorenz63, kLorenz96, kKs, kLinear };

inline std::string system_name(SystemKind k) {
  switch (k) {
    case SystemKind::kLorenz63: return "lorenz63";
    case SystemKind::kLorenz96: return "lorenz96";
    case SystemKind::kKs: return "ks";
    case SystemKind::kLinear: return "linear";
  }
  return "unknown";
}

inline SystemKind parse_system(const std::string& s) {
  if (s == "lorenz63" || s == "l63") return SystemKind::kLorenz63;
  if (s == "lorenz96" || s == "l96") return SystemKind::kLorenz96;
  if (s == "ks") return SystemKind::kKs;
  if (s == "linear") return SystemKind::kLinear;
  fail(ErrorKind::kConfig, "unknown system '" + s + "'");
}

struct SystemSpec {
  SystemKind kind = SystemKind::kLorenz63;
  std::string name;
  std::size_t state_dim = 0;
  std::size_t obs_dim = 0;
  std::function<Vector(std::span<const double>)> step;  // deterministic, one observation interval
  std::function<Vector(std::span<const double>, std::span<const double>)> step_vjp;  // (v, g) -> J_step(v)ᵀ g
  ObsOperator obs;
  Matrix process_cov;  // Σ
  Matrix obs_cov;      // Γ
  double dt = 0.0;
  std::size_t substeps = 1;
  double clamp = 0.0;        // |member entry| bound applied by the learned filter
  bool spatial = false;      // periodic spatial grid, localization applies
  Matrix linear_model;       // A for the linear system, empty otherwise
  std::function<Vector(RngStream&)> base_state;  // start of the burn-in
  std::map<std::string, double> params;          // recorded in manifests

  Vector h(std::span<const double> v) const { return obs.apply(v); }

  double distance(std::size_t k, std::size_t l) const {
    return spatial ? periodic_distance(k, l, state_dim) : (k == l ? 0.0 : 1.0);
  }
};

struct NoiseLevels {
  double sigma_y = 1.0;
  double sigma_v = 0.0;
};

inline Matrix scaled_identity(std::size_t n, double s) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = s;
  return m;
}

inline SystemSpec lorenz63_system(NoiseLevels noise = {}, double sigma = 10.0, double rho = 28.0,
                                  double beta = 8.0 / 3.0) {
  SystemSpec s;
  s.kind = SystemKind::kLorenz63;
  s.name = "lorenz63";
  s.state_dim = 3;
  s.obs = make_subsampling(3, 3, 0, 1);  // observe x only
  s.obs_dim = 1;
  s.dt = 0.15;
  s.substeps = 5;
  s.clamp = 60.0;
  s.step = [=](std::span<const double> v) {
    return rk4_integrate([=](std::span<const double> x) { return lorenz63_rhs(x, sigma, rho, beta); }, v, 0.15, 5);
  };
  s.step_vjp = [=](std::span<const double> v, std::span<const double> g) {
    return rk4_integrate_vjp([=](std::span<const double> x) { return lorenz63_rhs(x, sigma, rho, beta); },
                             [=](std::span<const double> x, std::span<const double> gg) {
                               return lorenz63_rhs_vjp(x, gg, sigma, rho, beta);
                             },
                             v, 0.15, 5, g);
  };
  s.process_cov = scaled_identity(3, noise.sigma_v * noise.sigma_v);
  s.obs_cov = scaled_identity(1, noise.sigma_y * noise.sigma_y);
  s.base_state = [](RngStream& rng) { return rng.normals(3); };
  s.params = {{"sigma", sigma}, {"rho", rho}, {"beta", beta}, {"dt", 0.15}, {"substeps", 5},
              {"sigma_y", noise.sigma_y}, {"sigma_v", noise.sigma_v}, {"obs_stride", 3}, {"obs_offset", 0}};
  return s;
}

inline SystemSpec lorenz96_system(NoiseLevels noise = {}, std::size_t dim = 40, double forcing = 8.0,
                                  std::size_t obs_stride = 4, std::size_t obs_offset = 0) {
  SystemSpec s;
  s.kind = SystemKind::kLorenz96;
  s.name = "lorenz96";
  s.state_dim = dim;
  s.obs = make_subsampling(dim, obs_stride, obs_offset);
  s.obs_dim = s.obs.count;
  s.dt = 0.15;
  s.substeps = 5;
  s.clamp = 20.0;
  s.spatial = true;
  s.step = [=](std::span<const double> v) {
    return rk4_integrate([=](std::span<const double> x) { return lorenz96_rhs(x, forcing); }, v, 0.15, 5);
  };
  s.step_vjp = [=](std::span<const double> v, std::span<const double> g) {
    return rk4_integrate_vjp([=](std::span<const double> x) { return lorenz96_rhs(x, forcing); },
                             [](std::span<const double> x, std::span<const double> gg) {
                               return lorenz96_rhs_vjp(x, gg);
                             },
                             v, 0.15, 5, g);
  };
  s.process_cov = scaled_identity(dim, noise.sigma_v * noise.sigma_v);
  s.obs_cov = scaled_identity(s.obs_dim, noise.sigma_y * noise.sigma_y);
  s.base_state = [dim](RngStream& rng) {
    Vector x = rng.normals(dim);
    for (double& v : x) v += 5.0;
    return x;
  };
  s.params = {{"F", forcing}, {"dim", static_cast<double>(dim)}, {"dt", 0.15}, {"substeps", 5},
              {"sigma_y", noise.sigma_y}, {"sigma_v", noise.sigma_v},
              {"obs_stride", static_cast<double>(obs_stride)}, {"obs_offset", static_cast<double>(obs_offset)}};
  return s;
}

inline SystemSpec ks_system(NoiseLevels noise = {}, KsConfig cfg = {}, std::size_t obs_stride = 8,
                            std::size_t obs_offset = 0) {
  SystemSpec s;
  s.kind = SystemKind::kKs;
  s.name = "ks";
  s.state_dim = cfg.grid;
  s.obs = make_subsampling(cfg.grid, obs_stride, obs_offset);
  s.obs_dim = s.obs.count;
  s.dt = cfg.dt;
  s.substeps = cfg.substeps;
  s.clamp = 10.0;
  s.spatial = true;
  auto solver = std::make_shared<const KsSolver>(cfg);
  s.step = [solver](std::span<const double> v) { return solver->step(v); };
  s.step_vjp = [solver](std::span<const double> v, std::span<const double> g) { return solver->step_vjp(v, g); };
  s.process_cov = scaled_identity(cfg.grid, noise.sigma_v * noise.sigma_v);
  s.obs_cov = scaled_identity(s.obs_dim, noise.sigma_y * noise.sigma_y);
  s.base_state = [cfg](RngStream&) {
    Vector u(cfg.grid);
    for (std::size_t j = 0; j < cfg.grid; ++j) {
      const double x = static_cast<double>(j) * cfg.length / static_cast<double>(cfg.grid);
      u[j] = std::cos(2.0 * x / cfg.length) * (1.0 + std::sin(2.0 * x / cfg.length));
    }
    return u;
  };
  s.params = {{"L", cfg.length}, {"grid", static_cast<double>(cfg.grid)}, {"dt", cfg.dt},
              {"substeps", static_cast<double>(cfg.substeps)}, {"sigma_y", noise.sigma_y},
              {"sigma_v", noise.sigma_v}, {"obs_stride", static_cast<double>(obs_stride)},
              {"obs_offset", static_cast<double>(obs_offset)}};
  return s;
}

/// Block-diagonal 2x2 rotations; every eigenvalue lies on the unit circle.
inline Matrix block_rotation(std::span<const double> angles) {
  Matrix a(2 * angles.size(), 2 * angles.size());
  for (std::size_t b = 0; b < angles.size(); ++b) {
    const double c = std::cos(angles[b]), s = std::sin(angles[b]);
    a(2 * b, 2 * b) = c;
    a(2 * b, 2 * b + 1) = -s;
    a(2 * b + 1, 2 * b) = s;
    a(2 * b + 1, 2 * b + 1) = c;
  }
  return a;
}

inline const std::vector<double>& default_rotation_angles() {
  static const std::vector<double> angles{0.05, 0.11, 0.17, 0.23, 0.29};
  return angles;
}

/// Linear-Gaussian system v' = A v + ξ, y = H v + η with H observing every other coordinate.
inline SystemSpec linear_system(NoiseLevels noise = {1.0, 0.01},
                                std::span<const double> angles = default_rotation_angles()) {
  SystemSpec s;
  s.kind = SystemKind::kLinear;
  s.name = "linear";
  s.linear_model = block_rotation(angles);
  s.state_dim = s.linear_model.rows();
  s.obs = make_subsampling(s.state_dim, 2, 0);
  s.obs_dim = s.obs.count;
  s.dt = 1.0;
  s.substeps = 1;
  s.clamp = 1e6;
  const Matrix a = s.linear_model;
  s.step = [a](std::span<const double> v) { return matvec(a, v); };
  const Matrix at = transpose(a);
  s.step_vjp = [at](std::span<const double>, std::span<const double> g) { return matvec(at, g); };
  s.process_cov = scaled_identity(s.state_dim, noise.sigma_v * noise.sigma_v);
  s.obs_cov = scaled_identity(s.obs_dim, noise.sigma_y * noise.sigma_y);
  const std::size_t d = s.state_dim;
  s.base_state = [d](RngStream& rng) { return rng.normals(d); };
  s.params = {{"dim", static_cast<double>(d)}, {"sigma_y", noise.sigma_y}, {"sigma_v", noise.sigma_v},
              {"obs_stride", 2}, {"obs_offset", 0}};
  for (std::size_t b = 0; b < angles.size(); ++b) s.params["angle" + std::to_string(b)] = angles[b];
  return s;
}

inline SystemSpec make_system(SystemKind kind, NoiseLevels noise) {
  switch (kind) {
    case SystemKind::kLorenz63: return lorenz63_system(noise);
    case SystemKind::kLorenz96: return lorenz96_system(noise);
    case SystemKind::kKs: return ks_system(noise);
    case SystemKind::kLinear: return linear_system(noise);
  }
  fail(ErrorKind::kConfig, "unknown system kind");
}

// ---------------------------------------------------------------------------
// Truth trajectories

struct TruthRun {
  Matrix states;        // (J+1) x d_v, row j is v†_j
  Matrix observations;  // J x d_y, row j-1 is y†_j
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;

  std::size_t length() const { return observations.rows(); }
  bool operator==(const TruthRun&) const = default;
};

struct BurnIn {
  std::size_t min_steps = 1000;
  std::size_t max_steps = 500000;

  static BurnIn fixed(std::size_t n) { return {n, n}; }
};

/// Adds N(0, cov) noise in place; a zero covariance draws nothing.
inline void add_noise(std::span<double> x, const Matrix& factor, bool zero, RngStream& rng) {
  if (zero) return;
  const Vector z = rng.normals(factor.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto r = factor.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) s += r[j] * z[j];
    x[i] += s;
  }
}

inline bool is_zero(const Matrix& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](double v) { return v == 0.0; });
}

/// Propagates J observation intervals from v0 with process noise added once
/// per interval, observing each new state with N(0, Γ) noise.
inline TruthRun generate_truth_from(const SystemSpec& spec, std::span<const double> v0, std::size_t steps,
                                    RngStream& rng) {
  require(steps >= 1, ErrorKind::kPrecondition, "trajectory length must be >= 1");
  require(v0.size() == spec.state_dim, ErrorKind::kDimMismatch, "initial state size");
  TruthRun run;
  run.seed = rng.seed();
  run.stream = rng.stream_id();
  run.states = Matrix(steps + 1, spec.state_dim);
  run.observations = Matrix(steps, spec.obs_dim);
  const Matrix sig_f = covariance_factor(spec.process_cov);
  const Matrix gam_f = covariance_factor(spec.obs_cov);
  const bool sig_zero = is_zero(spec.process_cov), gam_zero = is_zero(spec.obs_cov);
  Vector v(v0.begin(), v0.end());
  std::copy(v.begin(), v.end(), run.states.row(0).begin());
  for (std::size_t j = 1; j <= steps; ++j) {
    v = spec.step(v);
    add_noise(v, sig_f, sig_zero, rng);
    require(all_finite(v), ErrorKind::kNonFinite, "truth trajectory diverged");
    std::copy(v.begin(), v.end(), run.states.row(j).begin());
    Vector y = spec.h(v);
    add_noise(y, gam_f, gam_zero, rng);
    std::copy(y.begin(), y.end(), run.observations.row(j - 1).begin());
  }
  return run;
}

inline Vector burn_in(const SystemSpec& spec, RngStream& rng, BurnIn burn) {
  Vector v = spec.base_state(rng);
  const std::size_t n = burn.min_steps == burn.max_steps ? burn.min_steps
                                                         : rng.uniform_int(burn.min_steps, burn.max_steps);
  for (std::size_t i = 0; i < n; ++i) v = spec.step(v);
  return v;
}

/// Burns in from the system's base state, then emits J+1 states and J observations.
inline TruthRun generate_truth(const SystemSpec& spec, std::size_t steps, RngStream& rng, BurnIn burn = {}) {
  require(steps >= 1, ErrorKind::kPrecondition, "trajectory length must be >= 1");
  const Vector v0 = burn_in(spec, rng, burn);
  return generate_truth_from(spec, v0, steps, rng);
}

enum class TrajectoryMode { kPerTrajectoryBurnIn, kSingleLongTrajectory };

/// M trajectories; trajectory m owns stream id m, or all are consecutive
/// windows of one long run in single-trajectory mode.
inline std::vector<TruthRun> generate_dataset(const SystemSpec& spec, std::size_t count, std::size_t steps,
                                              std::uint64_t seed, BurnIn burn = {},
                                              TrajectoryMode mode = TrajectoryMode::kPerTrajectoryBurnIn) {
  std::vector<TruthRun> runs;
  runs.reserve(count);
  if (mode == TrajectoryMode::kPerTrajectoryBurnIn) {
    for (std::size_t m = 0; m < count; ++m) {
      RngStream rng(seed, m);
      runs.push_back(generate_truth(spec, steps, rng, burn));
    }
    return runs;
  }
  RngStream rng(seed, 0);
  Vector v = burn_in(spec, rng, burn);
  for (std::size_t m = 0; m < count; ++m) {
    TruthRun run = generate_truth_from(spec, v, steps, rng);
    v.assign(run.states.row(steps).begin(), run.states.row(steps).end());
    // next window starts one interval after this one ends
    v = spec.step(v);
    runs.push_back(std::move(run));
  }
  return runs;
}

}  // namespace mnmef
