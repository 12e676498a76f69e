#pragma once

// Independent oracles shared by the unit tests. Nothing here calls the library
// routine it is used to check.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <random>

#include "strategem/sc_core.hpp"

namespace strategem::testing {

inline Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<long>(v.size()));
  long i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

inline Vector random_vector(std::mt19937_64& rng, long d, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Vector v(d);
  for (long k = 0; k < d; ++k) v[k] = n(rng);
  return v;
}

/// Random SPD matrix via B B^T + 0.5 I, symmetrized.
inline Matrix random_spd(std::mt19937_64& rng, long d) {
  Matrix b(d, d);
  for (long c = 0; c < d; ++c) b.col(c) = random_vector(rng, d);
  Matrix m = b * b.transpose() / static_cast<double>(d) + 0.5 * Matrix::Identity(d, d);
  return 0.5 * (m + m.transpose());
}

/// Central differences with step h.
inline Vector central_difference(const std::function<double(const Vector&)>& f, const Vector& x,
                                 double h = 1e-5) {
  Vector g(x.size());
  for (long k = 0; k < x.size(); ++k) {
    Vector xp = x, xm = x;
    xp[k] += h;
    xm[k] -= h;
    g[k] = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

inline double relative_error(const Vector& a, const Vector& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-8});
  return (a - b).norm() / scale;
}

/// Full-pivot LU solve, a different factorization from the library's Cholesky.
inline Vector dense_solve(const Matrix& a, const Vector& b) { return a.fullPivLu().solve(b); }

}  // namespace strategem::testing
