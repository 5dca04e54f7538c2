#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "qkdec/attention.hpp"
#include "qkdec/datagen.hpp"
#include "qkdec/errors.hpp"
#include "qkdec/matrix.hpp"
#include "qkdec/rng.hpp"

namespace qkdec {

enum class LatentTarget { latent1, latent2 };

inline std::string to_string(LatentTarget t) {
    return t == LatentTarget::latent1 ? "latent1" : "latent2";
}

/// A (query, matching key, contrasting key) triple for one target latent.
/// The non-target latent is held fixed across the two keys; payload label and
/// noise are drawn fresh per key. Latent fields carry the generator's ground
/// truth for diagnostics and are empty for triplets built from dumps.
struct Triplet {
    Vector query;
    Vector key_pos;
    Vector key_neg;

    Vector query_target_latent;
    Vector pos_target_latent;
    Vector neg_target_latent;
    Vector held_fixed_latent;
};

/// Contrast condition covariances and their difference. mean_pos/mean_neg are
/// raw means of q k^T outer products; no mean-centering anywhere.
struct DeltaC {
    Matrix mean_pos;
    Matrix mean_neg;
    Matrix delta;
    std::size_t count = 0;
    std::string target;
};

namespace detail {

inline Vector draw_latent(const TaskConfig& cfg, std::size_t rank, Rng& rng) {
    Vector z(rank);
    if (cfg.variant == Variant::discrete)
        for (double& v : z) v = rng.sign();
    else
        for (double& v : z) v = rng.gaussian();
    return z;
}

inline Vector draw_noise(const TaskConfig& cfg, Rng& rng) {
    Vector e(cfg.embed_dim);
    for (double& v : e) v = cfg.noise_sigma * rng.gaussian();
    return e;
}

} // namespace detail

inline Triplet make_triplet(const TaskConfig& cfg, const LatentMaps& maps,
                            const AttentionHead& head, LatentTarget target, Rng& rng) {
    const std::size_t target_rank = target == LatentTarget::latent1 ? cfg.rank1 : cfg.rank2;
    const std::size_t held_rank = target == LatentTarget::latent1 ? cfg.rank2 : cfg.rank1;

    // Query from a fresh selector embedding.
    const Vector z1_query = detail::draw_latent(cfg, cfg.rank1, rng);
    const Vector z2_query = detail::draw_latent(cfg, cfg.rank2, rng);
    const Vector noise_q = detail::draw_noise(cfg, rng);
    const Vector selector = selector_embedding(maps, z1_query, z2_query, noise_q);

    const Vector& z_target = target == LatentTarget::latent1 ? z1_query : z2_query;

    // One shared draw of the held-fixed latent for both keys.
    const Vector z_held = detail::draw_latent(cfg, held_rank, rng);

    auto key_from = [&](const Vector& z_tgt, Rng& r) {
        const int label = static_cast<int>(r.bounded(cfg.payload_classes));
        const Vector noise = detail::draw_noise(cfg, r);
        const Vector& z1 = target == LatentTarget::latent1 ? z_tgt : z_held;
        const Vector& z2 = target == LatentTarget::latent1 ? z_held : z_tgt;
        return matvec(head.w_k, payload_embedding(maps, z1, z2, label, noise));
    };

    Triplet t;
    t.query = matvec(head.w_q, selector);
    t.key_pos = key_from(z_target, rng);

    // Contrast draw: discrete rejects until any coordinate differs; a fresh
    // continuous draw differs almost surely.
    Vector z_contrast;
    if (cfg.variant == Variant::discrete) {
        do {
            z_contrast = detail::draw_latent(cfg, target_rank, rng);
        } while (z_contrast == z_target);
    } else {
        z_contrast = detail::draw_latent(cfg, target_rank, rng);
    }
    t.key_neg = key_from(z_contrast, rng);

    t.query_target_latent = z_target;
    t.pos_target_latent = z_target;
    t.neg_target_latent = std::move(z_contrast);
    t.held_fixed_latent = z_held;
    return t;
}

/// Streaming accumulator of the two covariance conditions. add() keeps raw
/// sums; finalize() divides once, so shards merged count-weighted agree with
/// a single pass.
class DeltaCAccumulator {
public:
    explicit DeltaCAccumulator(std::string target) : target_(std::move(target)) {}

    void add(const Triplet& t) {
        if (count_ == 0) {
            sum_pos_ = Matrix(t.query.size(), t.key_pos.size());
            sum_neg_ = Matrix(t.query.size(), t.key_neg.size());
        }
        if (t.query.size() != sum_pos_.rows() || t.key_pos.size() != sum_pos_.cols() ||
            t.key_neg.size() != sum_neg_.cols())
            throw DimensionError("DeltaCAccumulator: triplet dimension mismatch");
        for (std::size_t i = 0; i < sum_pos_.rows(); ++i) {
            const double qi = t.query[i];
            auto prow = sum_pos_.row(i);
            auto nrow = sum_neg_.row(i);
            for (std::size_t j = 0; j < sum_pos_.cols(); ++j) {
                prow[j] += qi * t.key_pos[j];
                nrow[j] += qi * t.key_neg[j];
            }
        }
        ++count_;
    }

    std::size_t count() const noexcept { return count_; }

    DeltaC finalize() const {
        if (count_ == 0) throw EmptyEstimateError("DeltaC: no triplets accumulated");
        DeltaC d;
        d.count = count_;
        d.target = target_;
        const double inv = 1.0 / static_cast<double>(count_);
        d.mean_pos = scale(sum_pos_, inv);
        d.mean_neg = scale(sum_neg_, inv);
        d.delta = subtract(d.mean_pos, d.mean_neg);
        return d;
    }

private:
    std::string target_;
    Matrix sum_pos_, sum_neg_;
    std::size_t count_ = 0;
};

inline DeltaC accumulate(std::span<const Triplet> triplets, const std::string& target) {
    DeltaCAccumulator acc(target);
    for (const Triplet& t : triplets) acc.add(t);
    return acc.finalize();
}

/// Count-weighted combination; equal to single-stream accumulation up to
/// floating-point roundoff.
inline DeltaC merge(const DeltaC& a, const DeltaC& b) {
    if (a.target != b.target) throw MergeError("merge: target mismatch");
    if (a.count == 0 || b.count == 0) throw EmptyEstimateError("merge: empty estimate");
    if (a.mean_pos.rows() != b.mean_pos.rows() || a.mean_pos.cols() != b.mean_pos.cols())
        throw MergeError("merge: dimension mismatch");
    DeltaC out;
    out.target = a.target;
    out.count = a.count + b.count;
    const double wa = static_cast<double>(a.count) / static_cast<double>(out.count);
    const double wb = static_cast<double>(b.count) / static_cast<double>(out.count);
    out.mean_pos = add(scale(a.mean_pos, wa), scale(b.mean_pos, wb));
    out.mean_neg = add(scale(a.mean_neg, wa), scale(b.mean_neg, wb));
    out.delta = subtract(out.mean_pos, out.mean_neg);
    return out;
}

/// Monte-Carlo estimate over n triplets. Triplet i draws from
/// rng.substream(i); summation happens in a fixed shard structure merged in
/// shard order, so results do not depend on the worker count.
inline DeltaC estimate_delta_c(const TaskConfig& cfg, const LatentMaps& maps,
                               const AttentionHead& head, LatentTarget target,
                               std::size_t n, const Rng& rng, std::size_t workers = 1) {
    if (n == 0) throw EmptyEstimateError("estimate_delta_c: n must be positive");
    const std::size_t shard_count = std::min<std::size_t>(64, n);
    std::vector<DeltaCAccumulator> shards(shard_count,
                                          DeltaCAccumulator(to_string(target)));

    auto run_shard = [&](std::size_t s) {
        const std::size_t lo = n * s / shard_count;
        const std::size_t hi = n * (s + 1) / shard_count;
        for (std::size_t i = lo; i < hi; ++i) {
            Rng sub = rng.substream(i);
            shards[s].add(make_triplet(cfg, maps, head, target, sub));
        }
    };

    if (workers <= 1 || shard_count == 1) {
        for (std::size_t s = 0; s < shard_count; ++s) run_shard(s);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        const std::size_t n_threads = std::min(workers, shard_count);
        pool.reserve(n_threads);
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

    DeltaC merged = shards[0].finalize();
    for (std::size_t s = 1; s < shard_count; ++s)
        merged = merge(merged, shards[s].finalize());
    return merged;
}

} // namespace qkdec
