#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <mutex>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include <fftw3.h>

#include "mnmef/error.hpp"
#include "mnmef/numerics.hpp"

namespace mnmef {

using Complex = std::complex<double>;

namespace detail {

/// One in-place FFTW plan per (length, direction), built on first use.
/// Planning is serialized; executing a cached plan is thread-safe.
inline fftw_plan fft_plan(std::size_t n, bool inverse) {
  static std::mutex mu;
  static std::map<std::pair<std::size_t, bool>, fftw_plan> plans;
  const std::lock_guard<std::mutex> lock(mu);
  auto it = plans.find({n, inverse});
  if (it != plans.end()) return it->second;
  fftw_complex* buf = fftw_alloc_complex(n);
  const fftw_plan p = fftw_plan_dft_1d(static_cast<int>(n), buf, buf, inverse ? FFTW_BACKWARD : FFTW_FORWARD,
                                       FFTW_ESTIMATE | FFTW_UNALIGNED);
  fftw_free(buf);
  require(p != nullptr, ErrorKind::kPrecondition, "fftw could not plan a transform of this length");
  plans.emplace(std::make_pair(n, inverse), p);
  return p;
}

}  // namespace detail

/// In-place complex FFT; `inverse` applies the 1/n normalization.
inline void fft_inplace(std::vector<Complex>& a, bool inverse) {
  const std::size_t n = a.size();
  require(n > 0, ErrorKind::kDimMismatch, "fft length must be positive");
  auto* data = reinterpret_cast<fftw_complex*>(a.data());
  fftw_execute_dft(detail::fft_plan(n, inverse), data, data);
  if (inverse)
    for (auto& x : a) x /= static_cast<double>(n);
}

struct KsConfig {
  std::size_t grid = 128;
  double length = 32.0 * std::numbers::pi;
  double dt = 1.0;
  std::size_t substeps = 4;
  bool dealias = true;
  bool nonlinear = true;  // false integrates only u_t = -u_xx - u_xxxx
};

/// Kuramoto-Sivashinsky u_t + u_xxxx + u_xx + u u_x = 0 on a periodic grid,
/// pseudo-spectral in space and ETDRK4 in time. The phi-function coefficients
/// are evaluated by a 32-point contour mean to avoid cancellation near L h = 0.
class KsSolver {
 public:
  explicit KsSolver(KsConfig cfg = {}) : cfg_(cfg) {
    const std::size_t n = cfg_.grid;
    require(n >= 4 && (n & (n - 1)) == 0, ErrorKind::kDimMismatch, "KS grid must be a power of two");
    require(cfg_.substeps >= 1 && cfg_.dt > 0.0, ErrorKind::kPrecondition, "KS step size");
    const double h = cfg_.dt / static_cast<double>(cfg_.substeps);
    wavenumber_.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      const long m = j < n / 2 ? static_cast<long>(j) : (j == n / 2 ? 0L : static_cast<long>(j) - static_cast<long>(n));
      wavenumber_[j] = 2.0 * std::numbers::pi / cfg_.length * static_cast<double>(m);
    }
    linear_.resize(n);
    e_.resize(n); e2_.resize(n); q_.resize(n); f1_.resize(n); f2_.resize(n); f3_.resize(n);
    g_.resize(n);
    mask_.assign(n, 1.0);
    constexpr int kContour = 32;
    for (std::size_t j = 0; j < n; ++j) {
      const double k = wavenumber_[j];
      const double lk = k * k - k * k * k * k;
      linear_[j] = lk;
      e_[j] = std::exp(h * lk);
      e2_[j] = std::exp(h * lk / 2.0);
      Complex q = 0, f1 = 0, f2 = 0, f3 = 0;
      for (int m = 1; m <= kContour; ++m) {
        const Complex r = std::exp(Complex(0.0, std::numbers::pi * (m - 0.5) / kContour));
        const Complex lr = h * lk + r;
        const Complex elr = std::exp(lr);
        q += (std::exp(lr / 2.0) - 1.0) / lr;
        f1 += (-4.0 - lr + elr * (4.0 - 3.0 * lr + lr * lr)) / (lr * lr * lr);
        f2 += (2.0 + lr + elr * (-2.0 + lr)) / (lr * lr * lr);
        f3 += (-4.0 - 3.0 * lr - lr * lr + elr * (4.0 - lr)) / (lr * lr * lr);
      }
      q_[j] = h * (q / static_cast<double>(kContour)).real();
      f1_[j] = h * (f1 / static_cast<double>(kContour)).real();
      f2_[j] = h * (f2 / static_cast<double>(kContour)).real();
      f3_[j] = h * (f3 / static_cast<double>(kContour)).real();
      g_[j] = Complex(0.0, -0.5 * k);
      const long m = j < n / 2 ? static_cast<long>(j) : static_cast<long>(j) - static_cast<long>(n);
      if (cfg_.dealias && 3 * std::abs(m) > static_cast<long>(n)) mask_[j] = 0.0;
    }
  }

  const KsConfig& config() const noexcept { return cfg_; }
  std::span<const double> wavenumbers() const noexcept { return wavenumber_; }
  /// Linear symbol k^2 - k^4 per Fourier mode.
  std::span<const double> linear_symbol() const noexcept { return linear_; }

  /// Advances grid values by one observation interval (`substeps` ETDRK4 steps).
  Vector step(std::span<const double> u) const {
    require(u.size() == cfg_.grid, ErrorKind::kDimMismatch, "KS state size");
    std::vector<Complex> v(u.begin(), u.end());
    fft_inplace(v, false);
    for (std::size_t s = 0; s < cfg_.substeps; ++s) v = etdrk4(v);
    fft_inplace(v, true);
    Vector out(cfg_.grid);
    for (std::size_t j = 0; j < cfg_.grid; ++j) out[j] = v[j].real();
    require(all_finite(out), ErrorKind::kNonFinite, "KS step produced non-finite values");
    return out;
  }

  /// (d step(u) / d u)ᵀ g, by a reverse sweep through the spectral stages.
  Vector step_vjp(std::span<const double> u, std::span<const double> g) const {
    require(u.size() == cfg_.grid && g.size() == cfg_.grid, ErrorKind::kDimMismatch, "KS state size");
    const std::size_t n = cfg_.grid;
    const double dn = static_cast<double>(n);
    std::vector<std::vector<Complex>> starts;
    std::vector<Complex> v(u.begin(), u.end());
    fft_inplace(v, false);
    for (std::size_t s = 0; s < cfg_.substeps; ++s) {
      starts.push_back(v);
      v = etdrk4(v);
    }
    // adjoint of Re(IFFT(.)): FFT(g) / n
    std::vector<Complex> gv(g.begin(), g.end());
    fft_inplace(gv, false);
    for (auto& x : gv) x /= dn;
    for (std::size_t s = cfg_.substeps; s-- > 0;) gv = etdrk4_vjp(starts[s], gv);
    // adjoint of u -> FFT(u) for real u: Re(n IFFT(.))
    fft_inplace(gv, true);
    Vector out(n);
    for (std::size_t j = 0; j < n; ++j) out[j] = gv[j].real() * dn;
    return out;
  }

 private:
  std::vector<Complex> nonlinear(const std::vector<Complex>& v) const {
    const std::size_t n = cfg_.grid;
    std::vector<Complex> out(n, Complex(0.0, 0.0));
    if (!cfg_.nonlinear) return out;
    std::vector<Complex> phys = v;
    fft_inplace(phys, true);
    for (auto& x : phys) x = Complex(x.real() * x.real(), 0.0);
    fft_inplace(phys, false);
    for (std::size_t j = 0; j < n; ++j) out[j] = g_[j] * phys[j] * mask_[j];
    return out;
  }

  std::vector<Complex> etdrk4(const std::vector<Complex>& v) const {
    const std::size_t n = cfg_.grid;
    const auto nv = nonlinear(v);
    std::vector<Complex> a(n), b(n), c(n), out(n);
    for (std::size_t j = 0; j < n; ++j) a[j] = e2_[j] * v[j] + q_[j] * nv[j];
    const auto na = nonlinear(a);
    for (std::size_t j = 0; j < n; ++j) b[j] = e2_[j] * v[j] + q_[j] * na[j];
    const auto nb = nonlinear(b);
    for (std::size_t j = 0; j < n; ++j) c[j] = e2_[j] * a[j] + q_[j] * (2.0 * nb[j] - nv[j]);
    const auto nc = nonlinear(c);
    for (std::size_t j = 0; j < n; ++j)
      out[j] = e_[j] * v[j] + nv[j] * f1_[j] + 2.0 * (na[j] + nb[j]) * f2_[j] + nc[j] * f3_[j];
    return out;
  }

  /// Adjoint of the nonlinear term linearized at v, applied to gbar.
  std::vector<Complex> nonlinear_vjp(const std::vector<Complex>& v, const std::vector<Complex>& gbar) const {
    const std::size_t n = cfg_.grid;
    const double dn = static_cast<double>(n);
    std::vector<Complex> out(n, Complex(0.0, 0.0));
    if (!cfg_.nonlinear) return out;
    std::vector<Complex> phys = v;
    fft_inplace(phys, true);
    std::vector<Complex> a(n);
    for (std::size_t j = 0; j < n; ++j) a[j] = std::conj(g_[j]) * mask_[j] * gbar[j];
    fft_inplace(a, true);  // adjoint of the unnormalized FFT on real input is Re(n IFFT)
    for (std::size_t j = 0; j < n; ++j) out[j] = Complex(2.0 * phys[j].real() * a[j].real() * dn, 0.0);
    fft_inplace(out, false);  // adjoint of IFFT is FFT / n
    for (auto& x : out) x /= dn;
    return out;
  }

  std::vector<Complex> etdrk4_vjp(const std::vector<Complex>& v, const std::vector<Complex>& go) const {
    const std::size_t n = cfg_.grid;
    const auto nv = nonlinear(v);
    std::vector<Complex> a(n), b(n), c(n);
    for (std::size_t j = 0; j < n; ++j) a[j] = e2_[j] * v[j] + q_[j] * nv[j];
    const auto na = nonlinear(a);
    for (std::size_t j = 0; j < n; ++j) b[j] = e2_[j] * v[j] + q_[j] * na[j];
    const auto nb = nonlinear(b);
    for (std::size_t j = 0; j < n; ++j) c[j] = e2_[j] * a[j] + q_[j] * (2.0 * nb[j] - nv[j]);

    std::vector<Complex> gv(n), gnv(n), gna(n), gnb(n), gnc(n), ga(n);
    for (std::size_t j = 0; j < n; ++j) {
      gv[j] = e_[j] * go[j];
      gnv[j] = f1_[j] * go[j];
      gna[j] = 2.0 * f2_[j] * go[j];
      gnb[j] = 2.0 * f2_[j] * go[j];
      gnc[j] = f3_[j] * go[j];
    }
    const auto gc = nonlinear_vjp(c, gnc);
    for (std::size_t j = 0; j < n; ++j) {
      ga[j] = e2_[j] * gc[j];
      gnb[j] += 2.0 * q_[j] * gc[j];
      gnv[j] -= q_[j] * gc[j];
    }
    const auto gb = nonlinear_vjp(b, gnb);
    for (std::size_t j = 0; j < n; ++j) {
      gv[j] += e2_[j] * gb[j];
      gna[j] += q_[j] * gb[j];
    }
    const auto gaa = nonlinear_vjp(a, gna);
    for (std::size_t j = 0; j < n; ++j) {
      ga[j] += gaa[j];
      gv[j] += e2_[j] * ga[j];
      gnv[j] += q_[j] * ga[j];
    }
    const auto gvv = nonlinear_vjp(v, gnv);
    for (std::size_t j = 0; j < n; ++j) gv[j] += gvv[j];
    return gv;
  }

  KsConfig cfg_;
  std::vector<double> wavenumber_, linear_;
  std::vector<double> e_, e2_, q_, f1_, f2_, f3_, mask_;
  std::vector<Complex> g_;
};

}  // namespace mnmef
