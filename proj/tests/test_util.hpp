#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <cstddef>
#include <vector>

#include "mnmef/error.hpp"
#include "mnmef/numerics.hpp"

namespace mnmef::testing {

inline Matrix random_matrix(std::size_t r, std::size_t c, RngStream& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data()) v = scale * rng.normal();
  return m;
}

/// M Mᵀ + shift I, comfortably positive definite.
inline Matrix random_spd(std::size_t n, RngStream& rng, double shift = 1.0) {
  const Matrix m = random_matrix(n, n, rng);
  Matrix a = matmul(m, transpose(m));
  for (std::size_t i = 0; i < n; ++i) a(i, i) += shift;
  return a;
}

inline double max_abs_diff_vec(std::span<const double> a, std::span<const double> b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double relative_frobenius(const Matrix& a, const Matrix& b) {
  return frobenius_norm(a - b) / std::max(1e-300, frobenius_norm(b));
}

}  // namespace mnmef::testing

/// Asserts that `stmt` throws mnmef::Error of the given kind.
#define EXPECT_ERROR_KIND(stmt, k)                                       \
  do {                                                                   \
    try {                                                                \
      stmt;                                                              \
      ADD_FAILURE() << "expected " #k " from " #stmt;                    \
    } catch (const ::mnmef::Error& e) {                                  \
      EXPECT_EQ(e.kind(), ::mnmef::ErrorKind::k) << e.what();            \
    }                                                                    \
  } while (0)
