#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "qkdec/errors.hpp"
#include "qkdec/matrix.hpp"

namespace qkdec {

/// Thin singular value decomposition A = U diag(s) V^T with k = min(rows, cols).
/// Singular values are sorted descending and the sign of each left singular
/// vector is fixed so results are bit-stable for a given input.
struct SvdResult {
    Matrix u;  // m x k
    Vector s;  // k, descending, >= 0
    Matrix vt; // k x n
};

namespace detail {

inline constexpr int kJacobiMaxSweeps = 100;
inline constexpr double kJacobiTol = 1e-12;

// One-sided Jacobi on the columns of a (requires rows >= cols). Rotations are
// applied until every column pair is orthogonal relative to kJacobiTol.
inline SvdResult jacobi_svd_tall(const Matrix& a) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    Matrix b = a;
    Matrix v = Matrix::identity(n);

    bool converged = (n <= 1);
    for (int sweep = 0; sweep < kJacobiMaxSweeps && !converged; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double bp = b(i, p), bq = b(i, q);
                    alpha += bp * bp;
                    beta += bq * bq;
                    gamma += bp * bq;
                }
                const double limit = kJacobiTol * std::sqrt(alpha * beta);
                if (gamma == 0.0 || std::abs(gamma) <= limit) continue;

                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t =
                    (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double bp = b(i, p), bq = b(i, q);
                    b(i, p) = c * bp - s * bq;
                    b(i, q) = s * bp + c * bq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
                rotated = true;
            }
        }
        converged = !rotated;
    }
    if (!converged) throw NumericalError("svd: Jacobi sweeps did not converge");

    Vector norms(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s2 = 0.0;
        for (std::size_t i = 0; i < m; ++i) s2 += b(i, j) * b(i, j);
        norms[j] = std::sqrt(s2);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

    SvdResult res;
    res.u = Matrix(m, n);
    res.s = Vector(n);
    res.vt = Matrix(n, n);
    const double s_max = norms[order[0]];
    const double tiny = (s_max > 0.0 ? s_max : 1.0) * 1e-13;

    std::vector<std::size_t> degenerate;
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        res.s[j] = norms[src];
        for (std::size_t i = 0; i < n; ++i) res.vt(j, i) = v(i, src);
        if (norms[src] > tiny) {
            const double inv = 1.0 / norms[src];
            for (std::size_t i = 0; i < m; ++i) res.u(i, j) = b(i, src) * inv;
        } else {
            degenerate.push_back(j);
        }
    }

    // Columns whose singular value is numerically zero carry no usable
    // direction; complete them to an orthonormal basis from canonical
    // vectors. Unfilled slots are still all-zero, so projecting against
    // every other column is safe.
    auto orth_against_filled = [&](Vector& w, std::size_t skip) {
        for (std::size_t jj = 0; jj < n; ++jj) {
            if (jj == skip) continue;
            double proj = 0.0;
            for (std::size_t i = 0; i < m; ++i) proj += res.u(i, jj) * w[i];
            for (std::size_t i = 0; i < m; ++i) w[i] -= proj * res.u(i, jj);
        }
    };
    for (std::size_t j : degenerate) {
        double best_norm = -1.0;
        Vector best;
        for (std::size_t cand = 0; cand < m; ++cand) {
            Vector trial(m, 0.0);
            trial[cand] = 1.0;
            orth_against_filled(trial, j);
            const double tn = norm(trial);
            if (tn > best_norm) {
                best_norm = tn;
                best = std::move(trial);
            }
            if (best_norm > 0.5) break;
        }
        orth_against_filled(best, j); // second pass tightens orthogonality
        const double bn = norm(best);
        for (std::size_t i = 0; i < m; ++i) res.u(i, j) = best[i] / bn;
        res.s[j] = 0.0;
    }
    return res;
}

inline void apply_sign_convention(SvdResult& r) {
    const std::size_t m = r.u.rows();
    const std::size_t k = r.s.size();
    const std::size_t n = r.vt.cols();
    for (std::size_t j = 0; j < k; ++j) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < m; ++i) {
            const double a = std::abs(r.u(i, j));
            if (a > best) { // strict: ties keep the lowest index
                best = a;
                arg = i;
            }
        }
        if (r.u(arg, j) < 0.0) {
            for (std::size_t i = 0; i < m; ++i) r.u(i, j) = -r.u(i, j);
            for (std::size_t i = 0; i < n; ++i) r.vt(j, i) = -r.vt(j, i);
        }
    }
}

} // namespace detail

inline SvdResult svd(const Matrix& a) {
    if (a.rows() == 0 || a.cols() == 0) throw DimensionError("svd: empty matrix");
    if (!all_finite(a)) throw NumericalError("svd: input has non-finite entries");

    SvdResult res;
    if (a.rows() >= a.cols()) {
        res = detail::jacobi_svd_tall(a);
    } else {
        // A = (A^T)^T: factor the transpose and swap the roles of U and V.
        SvdResult t = detail::jacobi_svd_tall(transpose(a));
        res.u = transpose(t.vt);
        res.s = std::move(t.s);
        res.vt = transpose(t.u);
    }
    detail::apply_sign_convention(res);
    return res;
}

/// Rank-k reconstruction U diag(s) V^T; with full k this inverts svd() up to
/// floating-point error.
inline Matrix svd_reconstruct(const SvdResult& r) {
    Matrix us = r.u;
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= r.s[j];
    return matmul(us, r.vt);
}

} // namespace qkdec
