#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qkdec/errors.hpp"
#include "qkdec/matrix.hpp"
#include "qkdec/rng.hpp"

namespace qkdec {

enum class Variant { discrete, continuous };

inline std::string to_string(Variant v) {
    return v == Variant::discrete ? "discrete" : "continuous";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "discrete") return Variant::discrete;
    if (s == "continuous") return Variant::continuous;
    throw ConfigError("unknown variant: " + s);
}

/// Dimensions and sampling knobs of the payload-retrieval task.
struct TaskConfig {
    std::size_t embed_dim = 32;      // dimension of payload/selector embeddings
    std::size_t head_dim = 16;       // attention head dimension
    std::size_t context_len = 16;    // payload embeddings per sample
    std::size_t payload_classes = 10;
    std::size_t rank1 = 3;           // degrees of freedom of the first latent
    std::size_t rank2 = 5;           // degrees of freedom of the second latent
    Variant variant = Variant::discrete;
    double noise_sigma = 1.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (context_len < 2) throw ConfigError("context_len must be >= 2");
        if (payload_classes < 2) throw ConfigError("payload_classes must be >= 2");
        if (rank1 < 1 || rank2 < 1) throw ConfigError("latent ranks must be >= 1");
        if (embed_dim < rank1 + rank2 + payload_classes)
            throw ConfigError("embed_dim must be >= rank1 + rank2 + payload_classes");
        if (head_dim < 1) throw ConfigError("head_dim must be >= 1");
        if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
        // Discrete contexts need enough sign patterns for distinct latents,
        // otherwise retrieval is ambiguous by construction.
        if (variant == Variant::discrete && rank1 + rank2 < 64 &&
            (std::uint64_t{1} << (rank1 + rank2)) < context_len)
            throw ConfigError("discrete variant needs 2^(rank1+rank2) >= context_len");
    }
};

/// The fixed random linear maps of the generative process. Payload-side maps
/// embed latents and the payload label into payload embeddings; selector-side
/// maps embed the target's latents into the selector embedding. The selector
/// carries no payload term.
struct LatentMaps {
    Matrix payload_map1;   // embed_dim x rank1
    Matrix payload_map2;   // embed_dim x rank2
    Matrix payload_label_map; // embed_dim x payload_classes
    Matrix selector_map1;  // embed_dim x rank1
    Matrix selector_map2;  // embed_dim x rank2

    /// [payload_map1 | payload_map2], the stacked key-side map.
    Matrix stacked_payload_map() const { return hconcat(payload_map1, payload_map2); }
    /// [selector_map1 | selector_map2], the stacked query-side map.
    Matrix stacked_selector_map() const { return hconcat(selector_map1, selector_map2); }
};

/// One task instance with its ground truth attached. The generator stores the
/// noise it drew so embeddings can be re-derived bitwise from the fields.
struct Sample {
    Matrix payload_embeds;     // context_len x embed_dim
    Vector selector_embed;     // embed_dim
    std::size_t target_index = 0;
    std::vector<int> payload_labels; // context_len, values in [0, payload_classes)
    Matrix latents1;           // context_len x rank1
    Matrix latents2;           // context_len x rank2
    Matrix noise;              // context_len x embed_dim
    Vector selector_noise;     // embed_dim
};

namespace detail {

inline Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = rng.gaussian();
    return m;
}

} // namespace detail

inline LatentMaps build_maps(const TaskConfig& cfg, Rng& rng) {
    cfg.validate();
    LatentMaps maps;
    maps.payload_map1 = detail::gaussian_matrix(rng, cfg.embed_dim, cfg.rank1);
    maps.payload_map2 = detail::gaussian_matrix(rng, cfg.embed_dim, cfg.rank2);
    maps.payload_label_map = detail::gaussian_matrix(rng, cfg.embed_dim, cfg.payload_classes);
    maps.selector_map1 = detail::gaussian_matrix(rng, cfg.embed_dim, cfg.rank1);
    maps.selector_map2 = detail::gaussian_matrix(rng, cfg.embed_dim, cfg.rank2);
    return maps;
}

/// payload_map1 z1 + payload_map2 z2 + label column + noise, evaluated in a
/// fixed order so generation and replay agree bitwise.
inline Vector payload_embedding(const LatentMaps& maps, std::span<const double> z1,
                                std::span<const double> z2, int label,
                                std::span<const double> noise_row) {
    Vector x = matvec(maps.payload_map1, z1);
    const Vector x2 = matvec(maps.payload_map2, z2);
    for (std::size_t i = 0; i < x.size(); ++i)
        x[i] += x2[i] + maps.payload_label_map(i, static_cast<std::size_t>(label)) +
                noise_row[i];
    return x;
}

/// selector_map1 z1 + selector_map2 z2 + noise; deliberately no payload term.
inline Vector selector_embedding(const LatentMaps& maps, std::span<const double> z1,
                                 std::span<const double> z2,
                                 std::span<const double> noise_row) {
    Vector x = matvec(maps.selector_map1, z1);
    const Vector x2 = matvec(maps.selector_map2, z2);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += x2[i] + noise_row[i];
    return x;
}

namespace detail {

inline void draw_latent_row(const TaskConfig& cfg, Rng& rng, std::span<double> row) {
    if (cfg.variant == Variant::discrete) {
        for (double& v : row) v = rng.sign();
    } else {
        for (double& v : row) v = rng.gaussian();
    }
}

} // namespace detail

inline Sample sample(const TaskConfig& cfg, const LatentMaps& maps, Rng& rng) {
    const std::size_t T = cfg.context_len;
    const std::size_t d = cfg.embed_dim;
    Sample s;
    s.latents1 = Matrix(T, cfg.rank1);
    s.latents2 = Matrix(T, cfg.rank2);
    s.payload_labels.resize(T);
    s.noise = Matrix(T, d);
    s.payload_embeds = Matrix(T, d);

    // Fixed draw order per timestep: latent1, latent2, label, noise. Discrete
    // latent pairs are redrawn until distinct within the context so exactly
    // one payload embedding matches the selector.
    for (std::size_t i = 0; i < T; ++i) {
        for (;;) {
            detail::draw_latent_row(cfg, rng, s.latents1.row(i));
            detail::draw_latent_row(cfg, rng, s.latents2.row(i));
            if (cfg.variant != Variant::discrete) break;
            bool duplicate = false;
            for (std::size_t p = 0; p < i && !duplicate; ++p) {
                bool same = true;
                for (std::size_t j = 0; j < cfg.rank1 && same; ++j)
                    same = s.latents1(p, j) == s.latents1(i, j);
                for (std::size_t j = 0; j < cfg.rank2 && same; ++j)
                    same = s.latents2(p, j) == s.latents2(i, j);
                duplicate = same;
            }
            if (!duplicate) break;
        }
        s.payload_labels[i] = static_cast<int>(rng.bounded(cfg.payload_classes));
        for (double& v : s.noise.row(i)) v = cfg.noise_sigma * rng.gaussian();
    }
    s.target_index = rng.bounded(T);
    s.selector_noise.resize(d);
    for (double& v : s.selector_noise) v = cfg.noise_sigma * rng.gaussian();

    for (std::size_t i = 0; i < T; ++i) {
        const Vector x = payload_embedding(maps, s.latents1.row(i), s.latents2.row(i),
                                           s.payload_labels[i], s.noise.row(i));
        for (std::size_t j = 0; j < d; ++j) s.payload_embeds(i, j) = x[j];
    }
    s.selector_embed =
        selector_embedding(maps, s.latents1.row(s.target_index),
                           s.latents2.row(s.target_index), s.selector_noise);
    return s;
}

/// n independent samples. Sample i is drawn from rng.substream(i), so batches
/// are reproducible and safe to parallelize regardless of worker count.
inline std::vector<Sample> batch(const TaskConfig& cfg, const LatentMaps& maps,
                                 const Rng& rng, std::size_t n) {
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng sub = rng.substream(i);
        out.push_back(sample(cfg, maps, sub));
    }
    return out;
}

} // namespace qkdec
