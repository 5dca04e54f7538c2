#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "qkdec/decompose.hpp"
#include "qkdec/errors.hpp"
#include "qkdec/matrix.hpp"

namespace qkdec {

struct LabeledBasis {
    std::string label;
    SubspaceBasis basis;
};

/// Iterative split of a query vector into per-feature components plus a
/// residual. Projection order is the caller's; overlap between subspaces is
/// credited to the earlier feature.
struct QueryDecomposition {
    struct Component {
        std::string label;
        Vector part;
    };
    std::vector<Component> components;
    Vector residual;
};

/// Stable sort by ascending basis rank; the usual default order, since
/// lower-rank features claim less of any overlap.
inline std::vector<LabeledBasis> sort_by_rank_ascending(std::vector<LabeledBasis> bases) {
    std::stable_sort(bases.begin(), bases.end(),
                     [](const LabeledBasis& a, const LabeledBasis& b) {
                         return a.basis.rank < b.basis.rank;
                     });
    return bases;
}

inline QueryDecomposition decompose_query(const Vector& query,
                                          const std::vector<LabeledBasis>& bases) {
    QueryDecomposition out;
    Vector remainder = query;
    for (const LabeledBasis& lb : bases) {
        if (lb.basis.query_basis.rows() != query.size())
            throw DimensionError("decompose_query: head_dim mismatch");
        // P w computed as U (U^T w); cheaper and better conditioned than
        // materializing U U^T.
        const Vector coords = tmatvec(lb.basis.query_basis, remainder);
        const Vector part = matvec(lb.basis.query_basis, coords);
        for (std::size_t i = 0; i < remainder.size(); ++i) remainder[i] -= part[i];
        out.components.push_back({lb.label, part});
    }
    out.residual = std::move(remainder);
    return out;
}

/// Per-key attention logits split by feature. parts[f][i] is feature f's
/// contribution to key i's logit; total = sum of parts + residual_part,
/// exactly as linearity demands.
struct LogitAttribution {
    Vector total;                                        // per key
    std::vector<std::pair<std::string, Vector>> parts;   // per feature, per key
    Vector residual_part;                                // per key
};

inline LogitAttribution attribute_logits(const Matrix& keys,
                                         const QueryDecomposition& decomposition) {
    const std::size_t head_dim = keys.cols();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    auto logits_for = [&](const Vector& q_part) {
        Vector l(keys.rows());
        for (std::size_t i = 0; i < keys.rows(); ++i)
            l[i] = dot(keys.row(i), q_part) * inv_sqrt;
        return l;
    };

    LogitAttribution out;
    Vector full(head_dim, 0.0);
    for (const auto& comp : decomposition.components) {
        if (comp.part.size() != head_dim)
            throw DimensionError("attribute_logits: head_dim mismatch");
        out.parts.emplace_back(comp.label, logits_for(comp.part));
        for (std::size_t i = 0; i < head_dim; ++i) full[i] += comp.part[i];
    }
    for (std::size_t i = 0; i < head_dim; ++i) full[i] += decomposition.residual[i];
    out.residual_part = logits_for(decomposition.residual);
    out.total = logits_for(full);
    return out;
}

} // namespace qkdec
