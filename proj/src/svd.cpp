#include "crnet/svd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace crnet {

namespace {

constexpr double kJacobiTol = 1e-12;
constexpr int kMaxSweeps = 100;

double col_dot(const Matrix& m, std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) s += m.at(i, a) * m.at(i, b);
    return s;
}

void rotate_cols(Matrix& m, std::size_t a, std::size_t b, double c, double s) {
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double x = m.at(i, a), y = m.at(i, b);
        m.at(i, a) = c * x - s * y;
        m.at(i, b) = s * x + c * y;
    }
}

// Hestenes one-sided Jacobi on b (rows >= cols). v accumulates rotations.
void jacobi_orthogonalize(Matrix& b, Matrix& v) {
    const std::size_t n = b.cols;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        double worst = 0.0;
        bool rotated = false;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                const double app = col_dot(b, i, i);
                const double aqq = col_dot(b, j, j);
                const double apq = col_dot(b, i, j);
                const double bound = std::sqrt(app) * std::sqrt(aqq);
                if (bound == 0.0) continue;
                worst = std::max(worst, std::fabs(apq) / bound);
                if (std::fabs(apq) <= kJacobiTol * bound) continue;
                rotated = true;
                // hypot instead of sqrt(1 + zeta^2): zeta^2 overflows once a
                // near-null column decays toward denormals, and the resulting
                // t == 0 identity rotation would spin here forever.
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(zeta) + std::hypot(1.0, zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate_cols(b, i, j, c, s);
                rotate_cols(v, i, j, c, s);
            }
        }
        if (!rotated) return;
        if (sweep == kMaxSweeps - 1)
            throw std::runtime_error("svd: Jacobi did not converge on " + std::to_string(b.rows) +
                                     "x" + std::to_string(b.cols) + " matrix after " +
                                     std::to_string(kMaxSweeps) + " sweeps, residual " +
                                     std::to_string(worst));
    }
}

// Fill u columns whose singular value vanished with vectors orthonormal to the
// existing ones, so u always has orthonormal columns.
void complete_basis(Matrix& u, std::vector<bool> have) {
    const std::size_t m = u.rows, k = u.cols;
    for (std::size_t c = 0; c < k; ++c) {
        if (have[c]) continue;
        bool done = false;
        for (std::size_t cand = 0; cand < m && !done; ++cand) {
            std::vector<double> w(m, 0.0);
            w[cand] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {  // two GS passes for accuracy
                for (std::size_t o = 0; o < k; ++o) {
                    if (!have[o]) continue;
                    double d = 0.0;
                    for (std::size_t i = 0; i < m; ++i) d += w[i] * u.at(i, o);
                    for (std::size_t i = 0; i < m; ++i) w[i] -= d * u.at(i, o);
                }
            }
            double nrm = 0.0;
            for (double x : w) nrm += x * x;
            nrm = std::sqrt(nrm);
            if (nrm > 1e-6) {
                for (std::size_t i = 0; i < m; ++i) u.at(i, c) = w[i] / nrm;
                have[c] = true;
                done = true;
            }
        }
        if (!done) throw std::runtime_error("svd: failed to complete orthonormal basis");
    }
}

SvdResult svd_tall(const Matrix& a) {
    const std::size_t n = a.cols;
    Matrix b = a;
    Matrix v(n, n);
    for (std::size_t i = 0; i < n; ++i) v.at(i, i) = 1.0;
    jacobi_orthogonalize(b, v);

    std::vector<double> sig(n);
    for (std::size_t j = 0; j < n; ++j) sig[j] = std::sqrt(col_dot(b, j, j));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sig[x] > sig[y]; });

    SvdResult r;
    r.sigma.resize(n);
    r.u = Matrix(a.rows, n);
    r.v = Matrix(n, n);
    // Below numerical rank the leftover columns are roundoff junk in random
    // directions (an exactly rank-deficient input decays them to ~1e-154), so
    // report sigma = 0 and rebuild those u columns orthonormally.
    const double smax = sig[order[0]];
    const double cutoff =
        smax * static_cast<double>(std::max(a.rows, n)) * std::numeric_limits<double>::epsilon();
    std::vector<bool> filled(n, false);
    for (std::size_t c = 0; c < n; ++c) {
        const std::size_t src = order[c];
        r.sigma[c] = sig[src];
        for (std::size_t i = 0; i < n; ++i) r.v.at(i, c) = v.at(i, src);
        if (sig[src] > cutoff) {
            for (std::size_t i = 0; i < a.rows; ++i) r.u.at(i, c) = b.at(i, src) / sig[src];
            filled[c] = true;
        } else {
            r.sigma[c] = 0.0;
        }
    }
    if (std::find(filled.begin(), filled.end(), false) != filled.end())
        complete_basis(r.u, filled);
    return r;
}

}  // namespace

SvdResult svd(const Matrix& a) {
    if (a.rows == 0 || a.cols == 0)
        throw std::invalid_argument("svd: empty matrix " + std::to_string(a.rows) + "x" +
                                    std::to_string(a.cols));
    for (double x : a.data)
        if (!std::isfinite(x)) throw std::invalid_argument("svd: non-finite entry in input");
    if (a.rows >= a.cols) return svd_tall(a);
    SvdResult t = svd_tall(transpose(a));
    SvdResult r;
    r.u = std::move(t.v);
    r.v = std::move(t.u);
    r.sigma = std::move(t.sigma);
    return r;
}

Matrix low_rank_approx(const Matrix& a, std::size_t r) {
    const std::size_t k = std::min(a.rows, a.cols);
    if (r > k)
        throw std::invalid_argument("low_rank_approx: rank " + std::to_string(r) +
                                    " exceeds min dimension " + std::to_string(k));
    Matrix out(a.rows, a.cols);
    if (r == 0) return out;
    SvdResult s = svd(a);
    for (std::size_t c = 0; c < r; ++c) {
        const double sg = s.sigma[c];
        if (sg == 0.0) break;
        for (std::size_t i = 0; i < a.rows; ++i) {
            const double ui = sg * s.u.at(i, c);
            if (ui == 0.0) continue;
            double* row = out.row(i);
            for (std::size_t j = 0; j < a.cols; ++j) row[j] += ui * s.v.at(j, c);
        }
    }
    return out;
}

double spectral_norm(const Matrix& a) {
    if (a.rows == 0 || a.cols == 0)
        throw std::invalid_argument("spectral_norm: empty matrix");
    if (std::min(a.rows, a.cols) <= 256) return svd(a).sigma[0];

    // power iteration on the Gram matrix of the narrow side
    const bool tall = a.rows >= a.cols;
    const std::size_t n = tall ? a.cols : a.rows;
    std::vector<double> v(n, 1.0 / std::sqrt(static_cast<double>(n)));
    auto apply = [&](const std::vector<double>& x, std::vector<double>& gx) {
        // gx = a^T a x (tall) or a a^T x (wide)
        std::vector<double> mid(tall ? a.rows : a.cols, 0.0);
        if (tall) {
            for (std::size_t i = 0; i < a.rows; ++i) {
                const double* r = a.row(i);
                double s = 0.0;
                for (std::size_t j = 0; j < a.cols; ++j) s += r[j] * x[j];
                mid[i] = s;
            }
            std::fill(gx.begin(), gx.end(), 0.0);
            for (std::size_t i = 0; i < a.rows; ++i) {
                const double* r = a.row(i);
                const double mi = mid[i];
                for (std::size_t j = 0; j < a.cols; ++j) gx[j] += mi * r[j];
            }
        } else {
            for (std::size_t j = 0; j < a.cols; ++j) {
                double s = 0.0;
                for (std::size_t i = 0; i < a.rows; ++i) s += a.at(i, j) * x[i];
                mid[j] = s;
            }
            std::fill(gx.begin(), gx.end(), 0.0);
            for (std::size_t i = 0; i < a.rows; ++i) {
                const double* r = a.row(i);
                double s = 0.0;
                for (std::size_t j = 0; j < a.cols; ++j) s += r[j] * mid[j];
                gx[i] = s;
            }
        }
    };
    std::vector<double> g(n);
    double lam = 0.0;
    for (int it = 0; it < 10000; ++it) {
        apply(v, g);
        double nrm = 0.0;
        for (double x : g) nrm += x * x;
        nrm = std::sqrt(nrm);
        if (nrm == 0.0) {
            // v landed in the null space; restart from a basis vector
            std::fill(v.begin(), v.end(), 0.0);
            v[static_cast<std::size_t>(it) % n] = 1.0;
            continue;
        }
        for (std::size_t i = 0; i < n; ++i) v[i] = g[i] / nrm;
        const double prev = lam;
        lam = nrm;  // ||G v|| -> lambda_max for converged v
        if (it > 0 && std::fabs(lam - prev) <= 1e-10 * lam) break;
    }
    return std::sqrt(lam);
}

double stable_rank(const Matrix& a) {
    const double fsq = frob_norm_sq(a);
    if (fsq == 0.0) throw std::invalid_argument("stable_rank: zero matrix");
    const double s1 = spectral_norm(a);
    return fsq / (s1 * s1);
}

}  // namespace crnet
