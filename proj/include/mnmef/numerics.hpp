#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mnmef/error.hpp"

namespace mnmef {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles. Storage is exposed so hot loops and the
/// Eigen kernels can work on it without copies.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, Vector data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, ErrorKind::kDimMismatch, "matrix data length");
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      require(r.size() == cols_, ErrorKind::kDimMismatch, "ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }
  static Matrix diagonal(std::initializer_list<double> d) {
    return diagonal(std::span<const double>(d.begin(), d.size()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  Vector& data() noexcept { return data_; }
  const Vector& data() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<EigenRowMajor> as_eigen(Matrix& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}
inline Eigen::Map<const EigenRowMajor> as_eigen(const Matrix& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

template <typename Derived>
Matrix from_eigen(const Eigen::MatrixBase<Derived>& e) {
  Matrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
  as_eigen(m) = e;
  return m;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), ErrorKind::kDimMismatch,
          "matmul " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " * " +
              std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  Matrix c(a.rows(), b.cols());
  if (a.cols() == 0) return c;
  as_eigen(c).noalias() = as_eigen(a) * as_eigen(b);
  return c;
}

inline Vector matvec(const Matrix& a, std::span<const double> x) {
  require(a.cols() == x.size(), ErrorKind::kDimMismatch, "matvec");
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    const auto r = a.row(i);
    for (std::size_t j = 0; j < x.size(); ++j) s += r[j] * x[j];
    y[i] = s;
  }
  return y;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::kDimMismatch, "matrix add");
  Matrix c = a;
  for (std::size_t k = 0; k < c.size(); ++k) c.data()[k] += b.data()[k];
  return c;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::kDimMismatch, "matrix sub");
  Matrix c = a;
  for (std::size_t k = 0; k < c.size(); ++k) c.data()[k] -= b.data()[k];
  return c;
}

inline Matrix operator*(double s, const Matrix& a) {
  Matrix c = a;
  for (double& v : c.data()) v *= s;
  return c;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::kDimMismatch, "hadamard");
  Matrix c = a;
  for (std::size_t k = 0; k < c.size(); ++k) c.data()[k] *= b.data()[k];
  return c;
}

inline double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::kDimMismatch, "max_abs_diff");
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.data()[k] - b.data()[k]));
  return m;
}

inline double trace(const Matrix& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < std::min(a.rows(), a.cols()); ++i) s += a(i, i);
  return s;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}
inline bool all_finite(const Matrix& m) { return all_finite(std::span<const double>(m.data())); }

inline bool is_symmetric(const Matrix& a, double tol) {
  if (a.rows() != a.cols()) return false;
  double scale = 1.0;
  for (double v : a.data()) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j)
      if (std::abs(a(i, j) - a(j, i)) > tol * scale) return false;
  return true;
}

inline Matrix symmetrized(const Matrix& a) {
  Matrix s = a;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) s(i, j) = 0.5 * (a(i, j) + a(j, i));
  return s;
}

/// Solves A X = B for symmetric positive-definite A by Cholesky factorization.
inline Matrix solve_spd(const Matrix& a, const Matrix& b) {
  require(a.rows() == a.cols(), ErrorKind::kDimMismatch, "solve_spd: A not square");
  require(a.rows() == b.rows(), ErrorKind::kDimMismatch, "solve_spd: B rows");
  require(is_symmetric(a, 1e-10), ErrorKind::kNotSPD, "solve_spd: A not symmetric");
  Eigen::LLT<EigenRowMajor> llt(as_eigen(a));
  if (llt.info() != Eigen::Success) fail(ErrorKind::kNotSPD, "solve_spd: non-positive pivot");
  // LLT reports success on some semi-definite inputs; reject zero pivots explicitly.
  const auto& l = llt.matrixLLT();
  for (Eigen::Index i = 0; i < l.rows(); ++i)
    if (!(l(i, i) > 0.0) || !std::isfinite(l(i, i)))
      fail(ErrorKind::kNotSPD, "solve_spd: non-positive pivot");
  Matrix x(b.rows(), b.cols());
  if (b.cols() > 0) as_eigen(x) = llt.solve(as_eigen(b));
  return x;
}

struct SymEig {
  Vector values;   // ascending
  Matrix vectors;  // columns are eigenvectors
};

inline SymEig sym_eig(const Matrix& a) {
  require(a.rows() == a.cols(), ErrorKind::kDimMismatch, "sym_eig: not square");
  require(all_finite(a), ErrorKind::kNonFinite, "sym_eig: non-finite input");
  Eigen::SelfAdjointEigenSolver<EigenRowMajor> es(as_eigen(symmetrized(a)));
  if (es.info() != Eigen::Success) fail(ErrorKind::kEigFailure, "sym_eig did not converge");
  SymEig out;
  out.values.assign(es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size());
  out.vectors = from_eigen(es.eigenvectors());
  return out;
}

/// V f(Λ) Vᵀ for a symmetric matrix.
template <typename F>
Matrix sym_apply(const Matrix& a, F&& f) {
  const SymEig eig = sym_eig(a);
  const std::size_t n = a.rows();
  Matrix out(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const double fk = f(eig.values[k]);
    for (std::size_t i = 0; i < n; ++i) {
      const double vik = eig.vectors(i, k) * fk;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += vik * eig.vectors(j, k);
    }
  }
  return symmetrized(out);
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues from
/// roundoff are clamped to zero.
inline Matrix sym_sqrt(const Matrix& a) {
  return sym_apply(a, [](double l) { return std::sqrt(std::max(l, 0.0)); });
}

/// Inverse principal square root of a symmetric positive-definite matrix.
inline Matrix sym_inv_sqrt(const Matrix& a) {
  return sym_apply(a, [](double l) {
    if (!(l > 0.0)) fail(ErrorKind::kNotSPD, "sym_inv_sqrt: non-positive eigenvalue");
    return 1.0 / std::sqrt(l);
  });
}

inline double min_eigenvalue(const Matrix& a) { return sym_eig(a).values.front(); }

// ---------------------------------------------------------------------------
// Counter-based random numbers

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Draw k of stream (seed, stream_id) is a pure function of (seed, stream_id, k),
/// so results never depend on which thread consumes a stream.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t counter = 0)
      : seed_(seed), stream_id_(stream_id), counter_(counter),
        key_(splitmix64(splitmix64(seed) ^ splitmix64(stream_id + 0x632be59bd9b4e019ULL))) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() {
    const std::uint64_t c = counter_++;
    return splitmix64(key_ ^ splitmix64(c * 0xd1342543de82ef95ULL + 1));
  }

  /// Uniform on the open interval (0, 1).
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi_inclusive) {
    const std::uint64_t span = hi_inclusive - lo + 1;
    return lo + static_cast<std::uint64_t>(uniform() * static_cast<double>(span)) % span;
  }

  /// Standard normal via Box-Muller; consumes exactly two counter values.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  Vector normals(std::size_t n) {
    Vector z(n);
    for (double& v : z) v = normal();
    return z;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t counter_;
  std::uint64_t key_;
};

/// mean + factor * z with z ~ N(0, I).
inline Vector sample_gaussian(RngStream& rng, std::span<const double> mean, const Matrix& cov_factor) {
  require(cov_factor.rows() == mean.size(), ErrorKind::kDimMismatch, "sample_gaussian: factor rows");
  const Vector z = rng.normals(cov_factor.cols());
  Vector out(mean.begin(), mean.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto r = cov_factor.row(i);
    for (std::size_t j = 0; j < z.size(); ++j) out[i] += r[j] * z[j];
  }
  return out;
}

/// Lower Cholesky factor L with A = L Lᵀ.
inline Matrix cholesky_factor(const Matrix& a) {
  require(a.rows() == a.cols(), ErrorKind::kDimMismatch, "cholesky: not square");
  Eigen::LLT<EigenRowMajor> llt(as_eigen(a));
  if (llt.info() != Eigen::Success) fail(ErrorKind::kNotSPD, "cholesky: non-positive pivot");
  return from_eigen(EigenRowMajor(llt.matrixL()));
}

/// Factor usable by sample_gaussian for a PSD covariance (zero covariance allowed).
inline Matrix covariance_factor(const Matrix& cov) {
  bool zero = std::all_of(cov.data().begin(), cov.data().end(), [](double v) { return v == 0.0; });
  if (zero) return Matrix(cov.rows(), cov.cols());
  bool diag = true;
  for (std::size_t i = 0; i < cov.rows() && diag; ++i)
    for (std::size_t j = 0; j < cov.cols(); ++j)
      if (i != j && cov(i, j) != 0.0) { diag = false; break; }
  if (diag) {
    Matrix f(cov.rows(), cov.cols());
    for (std::size_t i = 0; i < cov.rows(); ++i) f(i, i) = std::sqrt(std::max(cov(i, i), 0.0));
    return f;
  }
  return sym_sqrt(cov);
}

// ---------------------------------------------------------------------------
// Small vector helpers

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline Vector sub(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::kDimMismatch, "vector sub");
  Vector c(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] - b[i];
  return c;
}

}  // namespace mnmef
