#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "xstop/error.hpp"

namespace xstop {

/// Thomas algorithm for lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i].
/// lower[0] and upper[n-1] are ignored.  Stable without pivoting when the
/// matrix is diagonally dominant.
inline void solve_tridiagonal(std::span<const double> lower, std::span<const double> diag,
                              std::span<const double> upper, std::span<const double> rhs,
                              std::span<double> x, std::vector<double>& scratch) {
  const std::size_t n = diag.size();
  if (lower.size() != n || upper.size() != n || rhs.size() != n || x.size() != n)
    throw UsageError("tridiagonal system size mismatch");
  if (n == 0) return;
  scratch.resize(n);
  double denom = diag[0];
  if (denom == 0.0) throw SolverError("zero pivot in tridiagonal solve");
  scratch[0] = upper[0] / denom;
  x[0] = rhs[0] / denom;
  for (std::size_t i = 1; i < n; ++i) {
    denom = diag[i] - lower[i] * scratch[i - 1];
    if (denom == 0.0) throw SolverError("zero pivot in tridiagonal solve");
    scratch[i] = upper[i] / denom;
    x[i] = (rhs[i] - lower[i] * x[i - 1]) / denom;
  }
  for (std::size_t i = n - 1; i-- > 0;) x[i] -= scratch[i] * x[i + 1];
}

}  // namespace xstop
