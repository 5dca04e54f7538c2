#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "qkdec/assignment.hpp"
#include "qkdec/attention.hpp"
#include "qkdec/contrastive.hpp"
#include "qkdec/datagen.hpp"
#include "qkdec/errors.hpp"
#include "qkdec/linalg.hpp"
#include "qkdec/matrix.hpp"
#include "qkdec/svd.hpp"

namespace qkdec {

/// Estimated rank and paired query-/key-space bases of one feature. query_basis
/// columns span the feature's directions for queries, key_basis for keys.
struct SubspaceBasis {
    std::size_t rank = 0;
    Matrix query_basis;           // head_dim x rank
    Matrix key_basis;             // head_dim x rank
    Vector singular_values;       // full spectrum, descending
    double energy_threshold = 0.99;
};

/// SVD of the contrastive covariance; the rank is the smallest k whose top-k
/// squared singular values reach the energy threshold (the crossing value is
/// included).
inline SubspaceBasis estimate_rank(const DeltaC& delta_c, double threshold = 0.99) {
    if (delta_c.count == 0) throw EmptyEstimateError("estimate_rank: empty estimate");
    if (frobenius_norm(delta_c.delta) == 0.0)
        throw ZeroMatrixError("estimate_rank: all-zero contrastive covariance");

    const SvdResult dec = svd(delta_c.delta);
    double total = 0.0;
    for (double s : dec.s) total += s * s;

    std::size_t rank = dec.s.size();
    double cum = 0.0;
    for (std::size_t k = 0; k < dec.s.size(); ++k) {
        cum += dec.s[k] * dec.s[k];
        if (cum >= threshold * total) {
            rank = k + 1;
            break;
        }
    }

    SubspaceBasis basis;
    basis.rank = rank;
    basis.energy_threshold = threshold;
    basis.singular_values = dec.s;
    basis.query_basis = Matrix(dec.u.rows(), rank);
    basis.key_basis = Matrix(dec.vt.cols(), rank);
    for (std::size_t j = 0; j < rank; ++j) {
        for (std::size_t i = 0; i < dec.u.rows(); ++i) basis.query_basis(i, j) = dec.u(i, j);
        for (std::size_t i = 0; i < dec.vt.cols(); ++i) basis.key_basis(i, j) = dec.vt(j, i);
    }
    return basis;
}

/// Bilinear coupling of latent coordinates through the head:
/// g = stacked_selector_map^T w_q^T w_k stacked_payload_map. Row/column blocks
/// follow the (latent1 | latent2) order.
struct InteractionMatrix {
    Matrix g; // (rank1 + rank2) x (rank1 + rank2)
    std::size_t rank1_block = 0;
    std::size_t rank2_block = 0;
};

inline InteractionMatrix interaction_matrix(const AttentionHead& head,
                                            const LatentMaps& maps) {
    const Matrix selector_stack = maps.stacked_selector_map(); // d x (r1+r2)
    const Matrix payload_stack = maps.stacked_payload_map();   // d x (r1+r2)
    const Matrix qk = matmul_at(head.w_q, head.w_k);           // d x d
    InteractionMatrix out;
    out.g = matmul_at(selector_stack, matmul(qk, payload_stack));
    out.rank1_block = maps.payload_map1.cols();
    out.rank2_block = maps.payload_map2.cols();
    return out;
}

/// Fraction of squared interaction mass lying off the matched diagonal after
/// the columns are optimally matched to rows by |g|. 0 means perfectly split
/// features; values toward 1 mean heavy superposition.
inline double superposition_score(const InteractionMatrix& im) {
    const Matrix& g = im.g;
    if (g.rows() != g.cols()) throw DimensionError("superposition_score: square g required");
    const std::vector<std::size_t> match = max_abs_assignment(g);
    double total = 0.0;
    for (double v : g.data()) total += v * v;
    if (total == 0.0) return 0.0;
    double diag = 0.0;
    for (std::size_t i = 0; i < g.rows(); ++i) diag += g(i, match[i]) * g(i, match[i]);
    return (total - diag) / total;
}

/// Pooled PCA view of a feature subspace: query coordinates in the query
/// basis and key coordinates in the key basis, stacked into one point cloud
/// (queries first), jointly centered by pca(). Rows of `roles` label the rows
/// of `scores`.
struct SubspacePca {
    Matrix scores;
    std::vector<std::string> roles;
};

inline SubspacePca subspace_pca(const Matrix& queries, const Matrix& keys,
                                const SubspaceBasis& basis, std::size_t components) {
    if (queries.cols() != basis.query_basis.rows() ||
        keys.cols() != basis.key_basis.rows())
        throw DimensionError("subspace_pca: head_dim mismatch");
    if (components > basis.rank)
        throw DimensionError("subspace_pca: more components than basis rank");

    Matrix pooled(queries.rows() + keys.rows(), basis.rank);
    for (std::size_t i = 0; i < queries.rows(); ++i)
        for (std::size_t j = 0; j < basis.rank; ++j) {
            double s = 0.0;
            for (std::size_t a = 0; a < queries.cols(); ++a)
                s += queries(i, a) * basis.query_basis(a, j);
            pooled(i, j) = s;
        }
    for (std::size_t i = 0; i < keys.rows(); ++i)
        for (std::size_t j = 0; j < basis.rank; ++j) {
            double s = 0.0;
            for (std::size_t a = 0; a < keys.cols(); ++a)
                s += keys(i, a) * basis.key_basis(a, j);
            pooled(queries.rows() + i, j) = s;
        }

    SubspacePca out;
    out.scores = pca(pooled, components);
    out.roles.assign(queries.rows(), "query");
    out.roles.insert(out.roles.end(), keys.rows(), "key");
    return out;
}

} // namespace qkdec
