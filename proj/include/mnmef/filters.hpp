#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "mnmef/dynamics.hpp"
#include "mnmef/error.hpp"
#include "mnmef/numerics.hpp"

namespace mnmef {

/// N members stored as rows of an N x d_v matrix. Member order carries no
/// meaning; every statistic below is a plain average over rows.
using StateEnsemble = Matrix;

inline Vector ensemble_mean(const StateEnsemble& e) {
  Vector m(e.cols(), 0.0);
  for (std::size_t n = 0; n < e.rows(); ++n)
    for (std::size_t i = 0; i < e.cols(); ++i) m[i] += e(n, i);
  for (double& v : m) v /= static_cast<double>(e.rows());
  return m;
}

inline StateEnsemble ensemble_anomalies(const StateEnsemble& e) {
  const Vector m = ensemble_mean(e);
  StateEnsemble a = e;
  for (std::size_t n = 0; n < e.rows(); ++n)
    for (std::size_t i = 0; i < e.cols(); ++i) a(n, i) -= m[i];
  return a;
}

/// Empirical covariance with 1/N normalization.
inline Matrix ensemble_covariance(const StateEnsemble& e) {
  const StateEnsemble a = ensemble_anomalies(e);
  Matrix c = matmul(transpose(a), a);
  for (double& v : c.data()) v /= static_cast<double>(e.rows());
  return c;
}

inline StateEnsemble observe_ensemble(const StateEnsemble& e, const ObsOperator& h) {
  StateEnsemble out(e.rows(), h.count);
  for (std::size_t n = 0; n < e.rows(); ++n) {
    const Vector y = h.apply(e.row(n));
    std::copy(y.begin(), y.end(), out.row(n).begin());
  }
  return out;
}

/// Draws an N x dim matrix of N(0, cov) rows, member by member.
inline Matrix draw_noise(std::size_t members, const Matrix& cov, RngStream& rng) {
  Matrix out(members, cov.rows());
  if (is_zero(cov)) return out;
  const Matrix f = covariance_factor(cov);
  for (std::size_t n = 0; n < members; ++n) add_noise(out.row(n), f, false, rng);
  return out;
}

/// Ψ(v) + ξ for every member, with ξ supplied explicitly (N x d_v).
inline StateEnsemble predict_with_noise(const StateEnsemble& e, const SystemSpec& spec, const Matrix& process_noise) {
  require(process_noise.rows() == e.rows() && process_noise.cols() == e.cols(), ErrorKind::kDimMismatch,
          "process noise shape");
  StateEnsemble out(e.rows(), e.cols());
  for (std::size_t n = 0; n < e.rows(); ++n) {
    Vector v = spec.step(e.row(n));
    for (std::size_t i = 0; i < v.size(); ++i) out(n, i) = v[i] + process_noise(n, i);
  }
  return out;
}

inline StateEnsemble predict(const StateEnsemble& e, const SystemSpec& spec, RngStream& rng) {
  return predict_with_noise(e, spec, draw_noise(e.rows(), spec.process_cov, rng));
}

/// v_n ~ N(mean, C0) for n = 1..N.
inline StateEnsemble initial_ensemble(std::span<const double> mean, const Matrix& cov, std::size_t members,
                                      RngStream& rng) {
  StateEnsemble e(members, mean.size());
  const Matrix noise = draw_noise(members, cov, rng);
  for (std::size_t n = 0; n < members; ++n)
    for (std::size_t i = 0; i < mean.size(); ++i) e(n, i) = mean[i] + noise(n, i);
  return e;
}

// ---------------------------------------------------------------------------
// Inflation and localization

/// v_n <- v_n + (alpha - 1)(v_n - mean).
inline StateEnsemble apply_inflation(const StateEnsemble& e, double alpha) {
  require(alpha >= 1.0, ErrorKind::kPrecondition, "inflation factor must be >= 1");
  const Vector m = ensemble_mean(e);
  StateEnsemble out = e;
  for (std::size_t n = 0; n < e.rows(); ++n)
    for (std::size_t i = 0; i < e.cols(); ++i) out(n, i) = m[i] + alpha * (e(n, i) - m[i]);
  return out;
}

/// Gaspari-Cohn fifth-order taper of normalized distance r, support [0, 2).
inline double gaspari_cohn(double r) {
  require(r >= 0.0, ErrorKind::kPrecondition, "gaspari_cohn distance must be nonnegative");
  if (r >= 2.0) return 0.0;
  if (r <= 1.0) {
    return -0.25 * std::pow(r, 5) + 0.5 * std::pow(r, 4) + 0.625 * std::pow(r, 3) - 5.0 / 3.0 * r * r + 1.0;
  }
  return std::pow(r, 5) / 12.0 - 0.5 * std::pow(r, 4) + 0.625 * std::pow(r, 3) + 5.0 / 3.0 * r * r - 5.0 * r +
         4.0 - 2.0 / (3.0 * r);
}

struct LocalizationSpec {
  std::function<double(std::size_t, std::size_t)> distance;
  double radius = 1.0;
  double radius_scale = std::sqrt(10.0 / 3.0);

  double weight(std::size_t k, std::size_t l) const {
    if (std::isinf(radius)) return 1.0;
    return gaspari_cohn(distance(k, l) / (radius * radius_scale));
  }

  static LocalizationSpec periodic(std::size_t period, double radius) {
    return {[period](std::size_t k, std::size_t l) { return periodic_distance(k, l, period); }, radius,
            std::sqrt(10.0 / 3.0)};
  }
};

/// Tapers for the state-observation (d_v x d_y) and observation-observation
/// (d_y x d_y) covariance blocks.
inline std::pair<Matrix, Matrix> localization_matrices(const LocalizationSpec& loc, const ObsOperator& h) {
  const auto idx = h.indices();
  Matrix lvh(h.state_dim, h.count), lhh(h.count, h.count);
  for (std::size_t k = 0; k < h.state_dim; ++k)
    for (std::size_t i = 0; i < h.count; ++i) lvh(k, i) = loc.weight(k, idx[i]);
  for (std::size_t i = 0; i < h.count; ++i)
    for (std::size_t j = 0; j < h.count; ++j) lhh(i, j) = loc.weight(idx[i], idx[j]);
  return {lvh, lhh};
}

// ---------------------------------------------------------------------------
// Perturbed-observation EnKF

struct EnkfCovariances {
  Matrix cvh;  // d_v x d_y
  Matrix chh;  // d_y x d_y
};

inline EnkfCovariances enkf_covariances(const StateEnsemble& forecast, const StateEnsemble& hx) {
  const std::size_t n = forecast.rows();
  const StateEnsemble av = ensemble_anomalies(forecast);
  const StateEnsemble ah = ensemble_anomalies(hx);
  EnkfCovariances c{matmul(transpose(av), ah), matmul(transpose(ah), ah)};
  for (double& v : c.cvh.data()) v /= static_cast<double>(n);
  for (double& v : c.chh.data()) v /= static_cast<double>(n);
  return c;
}

/// K = (Cvh ∘ Lvh)(Chh ∘ Lhh + Γ)^{-1}, solved by Cholesky.
inline Matrix enkf_gain(const StateEnsemble& forecast, const ObsOperator& h, const Matrix& gamma,
                        const std::optional<LocalizationSpec>& loc = std::nullopt) {
  require(forecast.rows() >= 2, ErrorKind::kPrecondition, "EnKF needs at least two members");
  auto [cvh, chh] = enkf_covariances(forecast, observe_ensemble(forecast, h));
  if (loc) {
    const auto [lvh, lhh] = localization_matrices(*loc, h);
    cvh = hadamard(cvh, lvh);
    chh = hadamard(chh, lhh);
  }
  // (Chh + Γ) symmetric, so K = ((Chh + Γ)^{-1} Cvhᵀ)ᵀ.
  return transpose(solve_spd(chh + gamma, transpose(cvh)));
}

/// Perturbed-observation analysis with the observation perturbations η_n given
/// as rows of `obs_noise`.
inline StateEnsemble enkf_analysis_with_noise(const StateEnsemble& forecast, std::span<const double> y,
                                              const ObsOperator& h, const Matrix& gamma, const Matrix& obs_noise,
                                              const std::optional<LocalizationSpec>& loc = std::nullopt) {
  require(y.size() == h.count && gamma.rows() == h.count, ErrorKind::kDimMismatch, "EnKF observation size");
  require(obs_noise.rows() == forecast.rows() && obs_noise.cols() == h.count, ErrorKind::kDimMismatch,
          "EnKF perturbation shape");
  const Matrix k = enkf_gain(forecast, h, gamma, loc);
  StateEnsemble out = forecast;
  for (std::size_t n = 0; n < forecast.rows(); ++n) {
    const Vector hx = h.apply(forecast.row(n));
    Vector innov(h.count);
    for (std::size_t i = 0; i < h.count; ++i) innov[i] = y[i] - (hx[i] + obs_noise(n, i));
    const Vector dv = matvec(k, innov);
    for (std::size_t i = 0; i < dv.size(); ++i) out(n, i) += dv[i];
  }
  return out;
}

inline StateEnsemble enkf_analysis(const StateEnsemble& forecast, std::span<const double> y, const ObsOperator& h,
                                   const Matrix& gamma, RngStream& rng,
                                   const std::optional<LocalizationSpec>& loc = std::nullopt) {
  const Matrix eta = draw_noise(forecast.rows(), gamma, rng);
  return enkf_analysis_with_noise(forecast, y, h, gamma, eta, loc);
}

// ---------------------------------------------------------------------------
// Deterministic square-root filters (ensemble-space symmetric transform)

namespace detail {

/// Ensemble-space quantities for the transform update with per-observation
/// precision weights `obs_weight` (1/γ_i, possibly tapered).
struct TransformUpdate {
  Vector w;  // mean increment weights (length N)
  Matrix t;  // symmetric transform (N x N)
};

inline TransformUpdate transform_update(const Matrix& s, std::span<const double> scaled_innov) {
  // s: d_y x N normalized observation anomalies, scaled_innov: d_y
  const std::size_t n = s.cols();
  Matrix m = matmul(transpose(s), s);
  for (std::size_t i = 0; i < n; ++i) m(i, i) += 1.0;
  Vector rhs(n, 0.0);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < s.rows(); ++i) rhs[k] += s(i, k) * scaled_innov[i];
  const SymEig eig = sym_eig(m);
  TransformUpdate out{Vector(n, 0.0), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    const double lam = eig.values[k];
    if (!(lam > 0.0)) fail(ErrorKind::kNotSPD, "transform matrix not positive definite");
    double proj = 0.0;
    for (std::size_t i = 0; i < n; ++i) proj += eig.vectors(i, k) * rhs[i];
    const double inv_sqrt = 1.0 / std::sqrt(lam);
    for (std::size_t i = 0; i < n; ++i) {
      out.w[i] += eig.vectors(i, k) * proj / lam;
      for (std::size_t j = 0; j < n; ++j) out.t(i, j) += eig.vectors(i, k) * inv_sqrt * eig.vectors(j, k);
    }
  }
  out.t = symmetrized(out.t);
  return out;
}

inline Vector diagonal_of(const Matrix& gamma) {
  Vector d(gamma.rows());
  for (std::size_t i = 0; i < gamma.rows(); ++i) {
    for (std::size_t j = 0; j < gamma.cols(); ++j)
      if (i != j && gamma(i, j) != 0.0) fail(ErrorKind::kPrecondition, "observation covariance must be diagonal");
    require(gamma(i, i) > 0.0, ErrorKind::kNotSPD, "observation variance must be positive");
    d[i] = gamma(i, i);
  }
  return d;
}

}  // namespace detail

/// Square-root analysis: the mean moves with the Kalman gain and anomalies are
/// right-multiplied by (I + SᵀS)^{-1/2}, so the analysis covariance equals
/// (I - KH) C for linear h.
inline StateEnsemble esrf_analysis(const StateEnsemble& forecast, std::span<const double> y, const ObsOperator& h,
                                   const Matrix& gamma) {
  const std::size_t n = forecast.rows();
  require(n >= 2, ErrorKind::kPrecondition, "ESRF needs at least two members");
  require(y.size() == h.count, ErrorKind::kDimMismatch, "ESRF observation size");
  const Matrix gi = sym_inv_sqrt(gamma);
  const StateEnsemble hx = observe_ensemble(forecast, h);
  const Vector hbar = ensemble_mean(hx);
  const StateEnsemble ah = ensemble_anomalies(hx);
  const StateEnsemble av = ensemble_anomalies(forecast);
  const double sq = std::sqrt(static_cast<double>(n));
  Matrix s = matmul(gi, transpose(ah));
  for (double& v : s.data()) v /= sq;
  const Vector innov = matvec(gi, sub(y, hbar));
  const auto upd = detail::transform_update(s, innov);
  const Vector xbar = ensemble_mean(forecast);
  // members: xbar + Av w / sqrt(N) + (Av^T T)_n
  const Matrix at = matmul(transpose(av), upd.t);  // d_v x N
  StateEnsemble out(n, forecast.cols());
  for (std::size_t i = 0; i < forecast.cols(); ++i) {
    double shift = 0.0;
    for (std::size_t m = 0; m < n; ++m) shift += av(m, i) * upd.w[m];
    shift /= sq;
    for (std::size_t m = 0; m < n; ++m) out(m, i) = xbar[i] + shift + at(i, m);
  }
  return out;
}

/// Local ETKF: each state coordinate gets its own ensemble-space analysis with
/// observation precisions tapered by Gaspari-Cohn weights of their distance.
/// A coordinate with no observation in the taper support keeps its forecast.
inline StateEnsemble letkf_analysis(const StateEnsemble& forecast, std::span<const double> y, const ObsOperator& h,
                                    const Matrix& gamma, const LocalizationSpec& loc, double alpha = 1.0) {
  const std::size_t n = forecast.rows();
  const std::size_t dv = forecast.cols();
  require(n >= 2, ErrorKind::kPrecondition, "LETKF needs at least two members");
  require(y.size() == h.count, ErrorKind::kDimMismatch, "LETKF observation size");
  const Vector var = detail::diagonal_of(gamma);
  const auto idx = h.indices();
  const StateEnsemble hx = observe_ensemble(forecast, h);
  const Vector hbar = ensemble_mean(hx);
  const StateEnsemble ah = ensemble_anomalies(hx);
  const StateEnsemble av = ensemble_anomalies(forecast);
  const Vector xbar = ensemble_mean(forecast);
  const double sq = std::sqrt(static_cast<double>(n));

  StateEnsemble out = forecast;
  std::vector<double> rho(h.count);
  std::vector<double> last_rho;
  detail::TransformUpdate upd;
  for (std::size_t k = 0; k < dv; ++k) {
    bool any = false;
    for (std::size_t i = 0; i < h.count; ++i) {
      rho[i] = loc.weight(k, idx[i]);
      any = any || rho[i] > 0.0;
    }
    if (!any) continue;  // EmptyLocalObs: forecast kept at this coordinate
    if (rho != last_rho) {
      Matrix s(h.count, n);
      Vector innov(h.count);
      for (std::size_t i = 0; i < h.count; ++i) {
        const double wgt = std::sqrt(rho[i] / var[i]);
        for (std::size_t m = 0; m < n; ++m) s(i, m) = wgt * ah(m, i) / sq;
        innov[i] = wgt * (y[i] - hbar[i]);
      }
      upd = detail::transform_update(s, innov);
      last_rho = rho;
    }
    double shift = 0.0;
    for (std::size_t m = 0; m < n; ++m) shift += av(m, k) * upd.w[m];
    shift /= sq;
    for (std::size_t m = 0; m < n; ++m) {
      double a = 0.0;
      for (std::size_t l = 0; l < n; ++l) a += av(l, k) * upd.t(l, m);
      out(m, k) = xbar[k] + shift + a;
    }
  }
  return alpha == 1.0 ? out : apply_inflation(out, alpha);
}

// ---------------------------------------------------------------------------
// Iterative EnKF (ensemble-space Gauss-Newton on the lag-1 objective)

struct IenkfResult {
  StateEnsemble analysis;
  std::size_t iterations = 0;
  double last_increment = 0.0;
};

/// Minimizes ½|w|² + ½|Γ^{-1/2}(y - h(Ψ(x0 + A0 w)))|² over ensemble weights w,
/// re-propagating the transformed previous analysis each iteration; the
/// returned ensemble is the propagated converged bundle.
inline IenkfResult ienkf_analysis_detailed(const StateEnsemble& prev_analysis,
                                           const std::function<Vector(std::span<const double>)>& step,
                                           const ObsOperator& h, const Matrix& gamma, std::span<const double> y,
                                           std::size_t max_iter = 10, double tol = 1e-5) {
  require(max_iter >= 1, ErrorKind::kPrecondition, "IEnKF max_iter must be >= 1");
  const std::size_t n = prev_analysis.rows();
  const std::size_t dv = prev_analysis.cols();
  require(n >= 2, ErrorKind::kPrecondition, "IEnKF needs at least two members");
  const Matrix gi = sym_inv_sqrt(gamma);
  const Vector x0 = ensemble_mean(prev_analysis);
  const StateEnsemble a0 = ensemble_anomalies(prev_analysis);
  const double sq = std::sqrt(static_cast<double>(n));

  Vector w(n, 0.0);
  Matrix t = Matrix::identity(n);
  Matrix t_inv = Matrix::identity(n);

  auto bundle = [&](const Vector& wv, const Matrix& tm) {
    StateEnsemble e(n, dv);
    const Matrix at = matmul(transpose(a0), tm);  // d_v x N
    for (std::size_t i = 0; i < dv; ++i) {
      double shift = 0.0;
      for (std::size_t m = 0; m < n; ++m) shift += a0(m, i) * wv[m];
      shift /= sq;
      for (std::size_t m = 0; m < n; ++m) e(m, i) = x0[i] + shift + at(i, m);
    }
    return e;
  };
  auto propagate = [&](const StateEnsemble& e) {
    StateEnsemble out(n, dv);
    for (std::size_t m = 0; m < n; ++m) {
      const Vector v = step(e.row(m));
      require(all_finite(v), ErrorKind::kNonFinite, "IEnKF propagation diverged");
      std::copy(v.begin(), v.end(), out.row(m).begin());
    }
    return out;
  };

  IenkfResult result;
  for (std::size_t it = 0; it < max_iter; ++it) {
    const StateEnsemble e1 = propagate(bundle(w, t));
    const StateEnsemble hx = observe_ensemble(e1, h);
    const Vector hbar = ensemble_mean(hx);
    const StateEnsemble ah = ensemble_anomalies(hx);
    // S = Γ^{-1/2} Y T^{-1} / sqrt(N): sensitivity with respect to the initial weights
    Matrix s = matmul(matmul(gi, transpose(ah)), t_inv);
    for (double& v : s.data()) v /= sq;
    const Vector innov = matvec(gi, sub(y, hbar));
    Matrix hess = matmul(transpose(s), s);
    for (std::size_t i = 0; i < n; ++i) hess(i, i) += 1.0;
    Vector grad(w);
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < s.rows(); ++i) grad[k] -= s(i, k) * innov[i];
    Matrix g(n, 1, grad);
    const Matrix dw = solve_spd(symmetrized(hess), g);
    for (std::size_t k = 0; k < n; ++k) w[k] -= dw(k, 0);
    t = sym_inv_sqrt(hess);
    t_inv = sym_sqrt(hess);
    result.iterations = it + 1;
    result.last_increment = frobenius_norm(dw);
    require(all_finite(w), ErrorKind::kNonFinite, "IEnKF weights diverged");
    if (result.last_increment < tol) break;
  }
  result.analysis = propagate(bundle(w, t));
  return result;
}

inline StateEnsemble ienkf_analysis(const StateEnsemble& prev_analysis,
                                    const std::function<Vector(std::span<const double>)>& step,
                                    const ObsOperator& h, const Matrix& gamma, std::span<const double> y,
                                    std::size_t max_iter = 10, double tol = 1e-5) {
  return ienkf_analysis_detailed(prev_analysis, step, h, gamma, y, max_iter, tol).analysis;
}

// ---------------------------------------------------------------------------
// Exact Kalman filter

struct KalmanBelief {
  Vector mean;
  Matrix cov;
};

inline KalmanBelief kalman_predict(const KalmanBelief& b, const Matrix& a, const Matrix& sigma) {
  return {matvec(a, b.mean), symmetrized(matmul(matmul(a, b.cov), transpose(a)) + sigma)};
}

inline KalmanBelief kalman_update(const KalmanBelief& b, const Matrix& hm, const Matrix& gamma,
                                  std::span<const double> y) {
  const Matrix pht = matmul(b.cov, transpose(hm));
  const Matrix s = symmetrized(matmul(hm, pht) + gamma);
  const Matrix k = transpose(solve_spd(s, transpose(pht)));
  const Vector innov = sub(y, matvec(hm, b.mean));
  KalmanBelief out;
  out.mean = b.mean;
  const Vector dm = matvec(k, innov);
  for (std::size_t i = 0; i < dm.size(); ++i) out.mean[i] += dm[i];
  out.cov = symmetrized(b.cov - matmul(k, matmul(hm, b.cov)));
  return out;
}

/// Predict with (A, Σ) then condition on y with (H, Γ).
inline KalmanBelief kalman_step(const KalmanBelief& b, const Matrix& a, const Matrix& hm, const Matrix& sigma,
                                const Matrix& gamma, std::span<const double> y) {
  return kalman_update(kalman_predict(b, a, sigma), hm, gamma, y);
}

}  // namespace mnmef
