#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "qkdec/errors.hpp"
#include "qkdec/matrix.hpp"

namespace qkdec {

/// Minimum-cost perfect assignment on a square cost matrix (Hungarian
/// algorithm with potentials, O(n^3)). Returns the column matched to each row.
inline std::vector<std::size_t> min_cost_assignment(const Matrix& cost) {
    if (cost.rows() != cost.cols()) throw DimensionError("assignment: square matrix required");
    const std::size_t n = cost.rows();
    const double inf = std::numeric_limits<double>::infinity();

    // 1-based arrays per the classic potentials formulation.
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> match(n + 1, 0); // column -> row
    std::vector<std::size_t> way(n + 1, 0);

    for (std::size_t i = 1; i <= n; ++i) {
        match[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = match[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<std::size_t> row_to_col(n);
    for (std::size_t j = 1; j <= n; ++j) row_to_col[match[j] - 1] = j - 1;
    return row_to_col;
}

/// Column-to-row matching that maximizes the total |values| picked on the
/// matched diagonal.
inline std::vector<std::size_t> max_abs_assignment(const Matrix& values) {
    Matrix cost(values.rows(), values.cols());
    for (std::size_t i = 0; i < values.size(); ++i)
        cost.data()[i] = -std::abs(values.data()[i]);
    return min_cost_assignment(cost);
}

} // namespace qkdec
