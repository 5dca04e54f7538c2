#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "qkdec/datagen.hpp"
#include "qkdec/errors.hpp"
#include "qkdec/matrix.hpp"
#include "qkdec/rng.hpp"

namespace qkdec {

/// A single attention head. Queries, keys and values live in head_dim; the
/// output map decodes the attention-pooled value into payload-class scores.
struct AttentionHead {
    Matrix w_q; // head_dim x embed_dim
    Matrix w_k; // head_dim x embed_dim
    Matrix w_v; // head_dim x embed_dim
    Matrix w_o; // payload_classes x head_dim
};

struct ForwardTrace {
    Vector query;        // head_dim
    Matrix keys;         // context_len x head_dim
    Matrix values;       // context_len x head_dim
    Vector attn_weights; // context_len, sums to 1
    Vector pooled;       // head_dim
    Vector class_scores; // payload_classes (pre-softmax)
    Vector class_probs;  // payload_classes
    double loss = 0.0;
};

struct HeadGradients {
    Matrix w_q, w_k, w_v, w_o;
};

/// Entries ~ N(0, 1/fan_in), fan_in being the input dimension of each map,
/// so initial logits are O(1).
inline AttentionHead init_head(const TaskConfig& cfg, Rng& rng) {
    cfg.validate();
    auto gaussian_scaled = [&rng](std::size_t rows, std::size_t cols, double sd) {
        Matrix m(rows, cols);
        for (double& v : m.data()) v = sd * rng.gaussian();
        return m;
    };
    const double sd_in = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
    const double sd_head = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
    AttentionHead head;
    head.w_q = gaussian_scaled(cfg.head_dim, cfg.embed_dim, sd_in);
    head.w_k = gaussian_scaled(cfg.head_dim, cfg.embed_dim, sd_in);
    head.w_v = gaussian_scaled(cfg.head_dim, cfg.embed_dim, sd_in);
    head.w_o = gaussian_scaled(cfg.payload_classes, cfg.head_dim, sd_head);
    return head;
}

namespace detail {

inline void softmax_inplace(Vector& v) {
    double m = v[0];
    for (double x : v) m = std::max(m, x);
    double sum = 0.0;
    for (double& x : v) {
        x = std::exp(x - m);
        sum += x;
    }
    for (double& x : v) x /= sum;
}

} // namespace detail

/// Attention scores over the payload embeddings of a sample for an arbitrary
/// query and key matrix; shared by the forward pass and the intervention code
/// so both produce bit-identical weights for identical inputs.
inline Vector attention_weights(std::span<const double> query, const Matrix& keys) {
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(query.size()));
    Vector logits(keys.rows());
    for (std::size_t i = 0; i < keys.rows(); ++i)
        logits[i] = dot(query, keys.row(i)) * inv_sqrt;
    detail::softmax_inplace(logits);
    return logits;
}

inline ForwardTrace forward(const AttentionHead& head, const Sample& sample) {
    ForwardTrace tr;
    tr.query = matvec(head.w_q, sample.selector_embed);
    tr.keys = matmul_bt(sample.payload_embeds, head.w_k);
    tr.values = matmul_bt(sample.payload_embeds, head.w_v);
    tr.attn_weights = attention_weights(tr.query, tr.keys);

    tr.pooled.assign(head.w_q.rows(), 0.0);
    for (std::size_t i = 0; i < tr.values.rows(); ++i) {
        const double a = tr.attn_weights[i];
        auto vrow = tr.values.row(i);
        for (std::size_t j = 0; j < tr.pooled.size(); ++j) tr.pooled[j] += a * vrow[j];
    }
    tr.class_scores = matvec(head.w_o, tr.pooled);
    tr.class_probs = tr.class_scores;
    detail::softmax_inplace(tr.class_probs);

    const int target_label = sample.payload_labels[sample.target_index];
    tr.loss = -std::log(tr.class_probs[static_cast<std::size_t>(target_label)]);

    if (!std::isfinite(tr.loss) || !all_finite(tr.attn_weights) ||
        !all_finite(tr.class_scores))
        throw NumericalError("forward: non-finite value");
    return tr;
}

/// Exact analytic gradients of the cross-entropy loss with respect to all
/// four weight matrices. Uses the probabilities stored in the trace.
inline HeadGradients backward(const AttentionHead& head, const Sample& sample,
                              const ForwardTrace& trace) {
    const std::size_t head_dim = head.w_q.rows();
    const std::size_t T = sample.payload_embeds.rows();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

    Vector d_scores = trace.class_probs; // softmax - one_hot(target)
    d_scores[static_cast<std::size_t>(sample.payload_labels[sample.target_index])] -= 1.0;

    HeadGradients g;
    g.w_o = outer(d_scores, trace.pooled);

    const Vector g_pooled = tmatvec(head.w_o, d_scores);

    Vector attn_value_grad(T); // dL/d(alpha_i)
    for (std::size_t i = 0; i < T; ++i)
        attn_value_grad[i] = dot(g_pooled, trace.values.row(i));
    double weighted = 0.0;
    for (std::size_t i = 0; i < T; ++i) weighted += trace.attn_weights[i] * attn_value_grad[i];

    Vector d_logits(T); // dL/d(pre-softmax attention score i)
    for (std::size_t i = 0; i < T; ++i)
        d_logits[i] = trace.attn_weights[i] * (attn_value_grad[i] - weighted);

    Matrix d_values(T, head_dim);
    Matrix d_keys(T, head_dim);
    for (std::size_t i = 0; i < T; ++i) {
        const double a = trace.attn_weights[i];
        const double b = d_logits[i] * inv_sqrt;
        auto dv = d_values.row(i);
        auto dk = d_keys.row(i);
        for (std::size_t j = 0; j < head_dim; ++j) {
            dv[j] = a * g_pooled[j];
            dk[j] = b * trace.query[j];
        }
    }
    g.w_v = matmul_at(d_values, sample.payload_embeds);
    g.w_k = matmul_at(d_keys, sample.payload_embeds);

    Vector d_query(head_dim, 0.0);
    for (std::size_t i = 0; i < T; ++i) {
        const double b = d_logits[i] * inv_sqrt;
        auto krow = trace.keys.row(i);
        for (std::size_t j = 0; j < head_dim; ++j) d_query[j] += b * krow[j];
    }
    g.w_q = outer(d_query, sample.selector_embed);
    return g;
}

/// Fraction of samples whose arg-max class score equals the target payload
/// label. Ties break toward the lowest class index.
inline double accuracy(const AttentionHead& head, const std::vector<Sample>& samples) {
    if (samples.empty()) throw EmptyEvalSetError("accuracy: empty evaluation set");
    std::size_t hits = 0;
    for (const Sample& s : samples) {
        const ForwardTrace tr = forward(head, s);
        std::size_t arg = 0;
        for (std::size_t c = 1; c < tr.class_scores.size(); ++c)
            if (tr.class_scores[c] > tr.class_scores[arg]) arg = c;
        if (static_cast<int>(arg) == s.payload_labels[s.target_index]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

} // namespace qkdec
