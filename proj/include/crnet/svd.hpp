#pragma once

#include <vector>

#include "crnet/matrix.hpp"

namespace crnet {

// Thin SVD, a = u * diag(sigma) * v^T with k = min(rows, cols) columns in u
// and v, sigma descending and nonnegative.
struct SvdResult {
    Matrix u;
    std::vector<double> sigma;
    Matrix v;
};

// One-sided Jacobi. Deterministic pair order, relative off-diagonal threshold
// 1e-12, at most 100 sweeps; throws if the sweep budget is exhausted or any
// input entry is not finite. Singular values below max(rows, cols) * eps
// relative to the largest are reported as exact zeros.
SvdResult svd(const Matrix& a);

// Best rank-r approximation in Frobenius norm (truncated SVD). r may be 0.
Matrix low_rank_approx(const Matrix& a, std::size_t r);

// Largest singular value. Jacobi SVD when min(rows, cols) <= 256, otherwise
// power iteration on a^T a (relative tolerance 1e-10, max 10000 iterations).
double spectral_norm(const Matrix& a);

// ||a||_F^2 / ||a||_2^2. Rejects the zero matrix.
double stable_rank(const Matrix& a);

}  // namespace crnet
