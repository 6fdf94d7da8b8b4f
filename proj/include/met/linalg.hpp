#pragma once

#include <cstdint>
#include <vector>

namespace met::linalg {

// Dense row-major helpers for the small systems in this project (normal
// equations, oracle visit distributions, covariance eigensolves). Sizes stay
// well under a few hundred, so plain O(n^3) routines are fine.

// Solve A x = b by Gaussian elimination with partial pivoting. Throws
// std::runtime_error on (numerically) singular A.
std::vector<double> solve(std::vector<double> a, std::vector<double> b, int64_t n);

// Lower Cholesky factor of SPD A. Throws on non-positive pivots.
std::vector<double> cholesky(std::vector<double> a, int64_t n);

// Solve L L^T x = b in place given the lower factor.
void cholesky_solve(const std::vector<double>& l, std::vector<double>& b, int64_t n);

double cholesky_logdet(const std::vector<double>& l, int64_t n);

// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
// Eigenvalues sorted descending; vectors[k*n..k*n+n) is the k-th eigenvector.
struct EigenResult {
  std::vector<double> values;
  std::vector<double> vectors;
};
EigenResult jacobi_eigen(std::vector<double> a, int64_t n);

}  // namespace met::linalg
