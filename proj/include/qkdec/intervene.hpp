#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "qkdec/attention.hpp"
#include "qkdec/datagen.hpp"
#include "qkdec/decompose.hpp"
#include "qkdec/errors.hpp"
#include "qkdec/linalg.hpp"
#include "qkdec/matrix.hpp"
#include "qkdec/rng.hpp"

namespace qkdec {

/// Which key-space subspaces to swap during an intervention. When
/// use_random_baseline is set, the listed bases are ignored and a random
/// orthonormal basis of baseline_rank (seeded) is used instead.
struct InterventionSpec {
    std::vector<SubspaceBasis> bases;
    bool use_random_baseline = false;
    std::size_t baseline_rank = 0;
    std::uint64_t seed = 0;
};

struct InterventionResult {
    Vector attn_before;
    Vector attn_after;
    std::size_t source_index = 0;
    std::size_t target_index = 0;
    double mass_shifted = 0.0; // attn_after[target] - attn_before[target]
};

namespace detail {

inline void require_projector(const Matrix& p) {
    if (p.rows() != p.cols()) throw ProjectorError("projector must be square");
    for (std::size_t i = 0; i < p.rows(); ++i)
        for (std::size_t j = i + 1; j < p.cols(); ++j)
            if (std::abs(p(i, j) - p(j, i)) > 1e-10)
                throw ProjectorError("projector is not symmetric");
    const Matrix pp = matmul(p, p);
    if (max_abs(subtract(pp, p)) > 1e-10)
        throw ProjectorError("projector is not idempotent");
}

} // namespace detail

/// Exchange the projector components of two keys, leaving the orthogonal
/// complement of each untouched.
inline std::pair<Vector, Vector> swap_keys(const Vector& key_a, const Vector& key_b,
                                           const Matrix& projector) {
    detail::require_projector(projector);
    if (key_a.size() != projector.rows() || key_b.size() != projector.rows())
        throw DimensionError("swap_keys: key dimension mismatch");
    Vector diff(key_a.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = key_b[i] - key_a[i];
    const Vector step = matvec(projector, diff);
    Vector out_a = key_a, out_b = key_b;
    for (std::size_t i = 0; i < diff.size(); ++i) {
        out_a[i] += step[i];
        out_b[i] -= step[i];
    }
    return {out_a, out_b};
}

/// Union of the key-space bases, re-orthonormalized; trained bases need not
/// be mutually orthogonal. Empty input gives the zero projector.
inline Matrix combined_key_projector(const std::vector<SubspaceBasis>& bases) {
    if (bases.empty()) return Matrix(0, 0);
    Matrix stacked = bases.front().key_basis;
    for (std::size_t i = 1; i < bases.size(); ++i) {
        if (bases[i].key_basis.rows() != stacked.rows())
            throw DimensionError("combined_key_projector: head_dim mismatch");
        stacked = hconcat(stacked, bases[i].key_basis);
    }
    return projector_from_basis(orthonormalize_columns(stacked));
}

inline Matrix projector_for_spec(const InterventionSpec& spec, std::size_t head_dim) {
    if (spec.use_random_baseline) {
        Rng rng = Rng(spec.seed).substream(0xba5e11e);
        return projector_from_basis(random_orthonormal(rng, head_dim, spec.baseline_rank));
    }
    Matrix p = combined_key_projector(spec.bases);
    if (p.empty()) return Matrix(head_dim, head_dim); // zero projector: no-op
    if (p.rows() != head_dim) throw DimensionError("projector_for_spec: head_dim mismatch");
    return p;
}

/// Swap the projected components of the keys at the sample's target timestep
/// and a randomly drawn other timestep, then recompute attention with the
/// modified keys only (query and values untouched).
inline InterventionResult run_intervention(const AttentionHead& head, const Sample& sample,
                                           const InterventionSpec& spec, Rng& rng) {
    const std::size_t T = sample.payload_embeds.rows();
    if (T < 2) throw NotEnoughKeysError("run_intervention: need at least 2 keys");

    InterventionResult res;
    res.source_index = sample.target_index;
    const std::size_t draw = rng.bounded(T - 1);
    res.target_index = draw >= res.source_index ? draw + 1 : draw;

    const Vector query = matvec(head.w_q, sample.selector_embed);
    Matrix keys = matmul_bt(sample.payload_embeds, head.w_k);
    res.attn_before = attention_weights(query, keys);

    const Matrix projector = projector_for_spec(spec, head.w_k.rows());
    auto [new_src, new_tgt] =
        swap_keys(keys.row_copy(res.source_index), keys.row_copy(res.target_index), projector);
    for (std::size_t j = 0; j < keys.cols(); ++j) {
        keys(res.source_index, j) = new_src[j];
        keys(res.target_index, j) = new_tgt[j];
    }
    res.attn_after = attention_weights(query, keys);
    res.mass_shifted = res.attn_after[res.target_index] - res.attn_before[res.target_index];
    return res;
}

/// One row of the intervention summary table.
struct ConditionSummary {
    std::string condition;
    double mean_shift = 0.0;
    double ci_low = 0.0;  // 95% normal-approximation interval; equal to the
    double ci_high = 0.0; // mean when n < 2
    double mean_attn_after = 0.0; // mean post-intervention attention at target
    std::size_t n = 0;
};

/// Evaluates the six standard conditions (each latent basis, both, and
/// rank-matched random baselines) on a shared set of freshly generated test
/// samples. Sample i and its swap partner come from substreams of `seed`, so
/// the table is deterministic and conditions are paired.
inline std::vector<ConditionSummary> intervention_suite(
    const AttentionHead& head, const TaskConfig& cfg, const LatentMaps& maps,
    const SubspaceBasis& basis1, const SubspaceBasis& basis2, std::size_t n_samples,
    std::uint64_t seed, std::size_t workers = 1) {
    if (n_samples == 0) throw EmptyEstimateError("intervention_suite: n_samples must be positive");

    struct Condition {
        std::string name;
        Matrix projector;          // fixed feature projector, or empty when random
        std::size_t random_rank = 0; // per-sample random subspace of this rank
    };
    const std::size_t head_dim = head.w_k.rows();
    std::vector<Condition> conditions;
    conditions.push_back(
        {"latent1", projector_for_spec({{basis1}, false, 0, seed}, head_dim), 0});
    conditions.push_back(
        {"latent2", projector_for_spec({{basis2}, false, 0, seed}, head_dim), 0});
    conditions.push_back(
        {"latent1+latent2", projector_for_spec({{basis1, basis2}, false, 0, seed}, head_dim),
         0});
    conditions.push_back({"random_r1", Matrix(), basis1.rank});
    conditions.push_back({"random_r2", Matrix(), basis2.rank});
    conditions.push_back({"random_r1+r2", Matrix(), basis1.rank + basis2.rank});

    const Rng sample_root = Rng(seed).substream(1);
    const Rng swap_root = Rng(seed).substream(2);
    const Rng basis_root = Rng(seed).substream(3);
    const std::size_t n_cond = conditions.size();

    struct Shard {
        std::vector<double> sum, sum_sq, sum_after;
    };
    const std::size_t shard_count = std::min<std::size_t>(64, n_samples);
    std::vector<Shard> shards(shard_count);
    for (Shard& sh : shards) {
        sh.sum.assign(n_cond, 0.0);
        sh.sum_sq.assign(n_cond, 0.0);
        sh.sum_after.assign(n_cond, 0.0);
    }

    auto run_shard = [&](std::size_t s) {
        const std::size_t lo = n_samples * s / shard_count;
        const std::size_t hi = n_samples * (s + 1) / shard_count;
        for (std::size_t i = lo; i < hi; ++i) {
            Rng srng = sample_root.substream(i);
            const Sample sm = sample(cfg, maps, srng);
            const Vector query = matvec(head.w_q, sm.selector_embed);
            const Matrix keys = matmul_bt(sm.payload_embeds, head.w_k);
            const Vector before = attention_weights(query, keys);

            Rng trng = swap_root.substream(i);
            const std::size_t T = keys.rows();
            const std::size_t draw = trng.bounded(T - 1);
            const std::size_t tgt = draw >= sm.target_index ? draw + 1 : draw;

            // random baselines draw a fresh subspace per sample so the
            // condition mean averages over subspaces, not one lucky draw
            Rng brng = basis_root.substream(i);

            for (std::size_t c = 0; c < n_cond; ++c) {
                const Condition& cond = conditions[c];
                Matrix projector;
                if (cond.random_rank > 0)
                    projector = projector_from_basis(
                        random_orthonormal(brng, head_dim, cond.random_rank));
                Matrix modified = keys;
                auto [new_src, new_tgt] =
                    swap_keys(keys.row_copy(sm.target_index), keys.row_copy(tgt),
                              cond.random_rank > 0 ? projector : cond.projector);
                for (std::size_t j = 0; j < keys.cols(); ++j) {
                    modified(sm.target_index, j) = new_src[j];
                    modified(tgt, j) = new_tgt[j];
                }
                const Vector after = attention_weights(query, modified);
                const double shift = after[tgt] - before[tgt];
                shards[s].sum[c] += shift;
                shards[s].sum_sq[c] += shift * shift;
                shards[s].sum_after[c] += after[tgt];
            }
        }
    };

    if (workers <= 1 || shard_count == 1) {
        for (std::size_t s = 0; s < shard_count; ++s) run_shard(s);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        const std::size_t n_threads = std::min(workers, shard_count);
        for (std::size_t t = 0; t < n_threads; ++t)
            pool.emplace_back([&] {
                for (;;) {
                    const std::size_t s = next.fetch_add(1);
                    if (s >= shard_count) return;
                    run_shard(s);
                }
            });
        for (std::thread& th : pool) th.join();
    }

    std::vector<ConditionSummary> table(n_cond);
    for (std::size_t c = 0; c < n_cond; ++c) {
        double sum = 0.0, sum_sq = 0.0, sum_after = 0.0;
        for (std::size_t s = 0; s < shard_count; ++s) { // fixed merge order
            sum += shards[s].sum[c];
            sum_sq += shards[s].sum_sq[c];
            sum_after += shards[s].sum_after[c];
        }
        ConditionSummary& row = table[c];
        row.condition = conditions[c].name;
        row.n = n_samples;
        row.mean_shift = sum / static_cast<double>(n_samples);
        row.mean_attn_after = sum_after / static_cast<double>(n_samples);
        if (n_samples >= 2) {
            const double var =
                (sum_sq - sum * sum / static_cast<double>(n_samples)) /
                static_cast<double>(n_samples - 1);
            const double half = 1.96 * std::sqrt(std::max(var, 0.0) /
                                                 static_cast<double>(n_samples));
            row.ci_low = row.mean_shift - half;
            row.ci_high = row.mean_shift + half;
        } else {
            row.ci_low = row.ci_high = row.mean_shift;
        }
    }
    return table;
}

} // namespace qkdec
