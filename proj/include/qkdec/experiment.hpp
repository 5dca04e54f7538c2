#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "qkdec/attention.hpp"
#include "qkdec/contrastive.hpp"
#include "qkdec/datagen.hpp"
#include "qkdec/decompose.hpp"
#include "qkdec/training.hpp"

namespace qkdec {

/// Stable per-cell seed for grid runs: a pure function of the base seed and
/// the cell coordinates, unrelated across neighboring cells.
inline std::uint64_t derive_cell_seed(std::uint64_t base, std::uint64_t r1,
                                      std::uint64_t r2, std::uint64_t rep) {
    return Rng(base).substream(r1).substream(r2).substream(rep).next_u64();
}

/// Monte-Carlo contrastive covariance followed by the rank rule.
inline SubspaceBasis estimate_latent_basis(const TaskConfig& cfg, const LatentMaps& maps,
                                           const AttentionHead& head, LatentTarget target,
                                           std::size_t n_triplets, std::uint64_t seed,
                                           std::size_t workers = 1, double threshold = 0.99) {
    const DeltaC d = estimate_delta_c(cfg, maps, head, target, n_triplets, Rng(seed), workers);
    return estimate_rank(d, threshold);
}

struct CellConfig {
    TaskConfig task;
    TrainConfig train;
    std::size_t estimation_triplets = 100000;
    std::size_t eval_samples = 10240;
    std::uint64_t eval_seed = 0x9d5f;
    std::uint64_t estimation_seed = 0xe57a;
};

/// Everything the sweep records per grid cell: what rank the decomposition
/// recovered for each latent, the trained head's accuracy, and the
/// superposition score of the interaction matrix.
struct CellResult {
    std::size_t rank1 = 0;
    std::size_t rank2 = 0;
    std::size_t recovered_rank1 = 0;
    std::size_t recovered_rank2 = 0;
    double accuracy = 0.0;
    double superposition = 0.0;
    std::size_t trained_batches = 0;
};

inline CellResult run_cell(const CellConfig& cell) {
    Rng maps_rng(cell.task.seed);
    const LatentMaps maps = build_maps(cell.task, maps_rng);
    auto [head, report] = train(cell.task, cell.train, maps);

    CellResult out;
    out.rank1 = cell.task.rank1;
    out.rank2 = cell.task.rank2;
    out.trained_batches = report.total_batches;
    out.recovered_rank1 = estimate_latent_basis(cell.task, maps, head, LatentTarget::latent1,
                                                cell.estimation_triplets,
                                                cell.estimation_seed)
                              .rank;
    out.recovered_rank2 = estimate_latent_basis(cell.task, maps, head, LatentTarget::latent2,
                                                cell.estimation_triplets,
                                                cell.estimation_seed + 1)
                              .rank;
    out.accuracy =
        accuracy(head, batch(cell.task, maps, Rng(cell.eval_seed), cell.eval_samples));
    out.superposition = superposition_score(interaction_matrix(head, maps));
    return out;
}

} // namespace qkdec
