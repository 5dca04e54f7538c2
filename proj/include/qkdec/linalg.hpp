#pragma once

#include <cmath>
#include <cstddef>

#include "qkdec/errors.hpp"
#include "qkdec/matrix.hpp"
#include "qkdec/rng.hpp"
#include "qkdec/svd.hpp"

namespace qkdec {

/// Project n points (rows) onto the top-k principal directions of the
/// mean-centered cloud. Returns the n x k score matrix; components are
/// ordered by descending explained variance.
inline Matrix pca(const Matrix& points, std::size_t k) {
    const std::size_t n = points.rows();
    const std::size_t d = points.cols();
    if (n < 2) throw DimensionError("pca: need at least 2 points");
    if (k > d) throw DimensionError("pca: k exceeds point dimension");
    if (k > std::min(n, d))
        throw DimensionError("pca: k exceeds the number of principal directions");

    Vector mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = points.row(i);
        for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
    }
    for (double& v : mean) v /= static_cast<double>(n);

    Matrix centered(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) centered(i, j) = points(i, j) - mean[j];

    const SvdResult dec = svd(centered);
    Matrix scores(n, k);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < k; ++c) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += centered(i, j) * dec.vt(c, j);
            scores(i, c) = s;
        }
    return scores;
}

/// Modified Gram-Schmidt with a second orthogonalization pass. Columns whose
/// residual drops below drop_tol (relative to the input column norm) are
/// discarded, so the result can have fewer columns than the input.
inline Matrix orthonormalize_columns(const Matrix& a, double drop_tol = 1e-10) {
    const std::size_t m = a.rows();
    std::vector<Vector> kept;
    for (std::size_t j = 0; j < a.cols(); ++j) {
        Vector w = a.col_copy(j);
        const double original = norm(w);
        if (original == 0.0) continue;
        for (int pass = 0; pass < 2; ++pass) {
            for (const Vector& q : kept) {
                double proj = 0.0;
                for (std::size_t i = 0; i < m; ++i) proj += q[i] * w[i];
                for (std::size_t i = 0; i < m; ++i) w[i] -= proj * q[i];
            }
        }
        const double wn = norm(w);
        if (wn <= drop_tol * original) continue;
        for (double& v : w) v /= wn;
        kept.push_back(std::move(w));
    }
    Matrix q(m, kept.size());
    for (std::size_t j = 0; j < kept.size(); ++j)
        for (std::size_t i = 0; i < m; ++i) q(i, j) = kept[j][i];
    return q;
}

/// d x r matrix with orthonormal columns obtained by orthonormalizing a
/// standard-Gaussian draw. Deterministic per rng state.
inline Matrix random_orthonormal(Rng& rng, std::size_t d, std::size_t r) {
    if (r > d) throw DimensionError("random_orthonormal: r exceeds d");
    Matrix g(d, r);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < r; ++j) g(i, j) = rng.gaussian();
    Matrix q = orthonormalize_columns(g, 1e-10);
    if (q.cols() != r)
        throw NumericalError("random_orthonormal: degenerate Gaussian draw");
    return q;
}

/// Orthogonal projector Q Q^T onto the column space of a basis with
/// orthonormal columns.
inline Matrix projector_from_basis(const Matrix& basis) {
    return matmul(basis, transpose(basis));
}

} // namespace qkdec
