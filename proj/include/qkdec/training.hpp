#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "qkdec/attention.hpp"
#include "qkdec/datagen.hpp"
#include "qkdec/errors.hpp"
#include "qkdec/matrix.hpp"
#include "qkdec/rng.hpp"

namespace qkdec {

struct TrainConfig {
    std::size_t batch_size = 256;
    double lr = 1e-4;
    double weight_decay = 0.01;
    std::size_t val_every = 200;     // batches between validation checks
    std::size_t val_batches = 20;
    std::size_t val_batch_size = 512;
    std::size_t patience = 5;        // non-improving checks before stopping
    std::size_t max_batches = 50000; // safety cap
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size == 0 || val_every == 0 || val_batches == 0 ||
            val_batch_size == 0 || patience == 0 || max_batches == 0)
            throw ConfigError("train config: counts must be positive");
        if (lr < 0.0 || weight_decay < 0.0)
            throw ConfigError("train config: lr and weight_decay must be >= 0");
    }
};

struct TrainingReport {
    struct ValPoint {
        std::size_t batch = 0;
        double train_loss = 0.0; // mean over the preceding val_every batches
        double val_loss = 0.0;
        double val_accuracy = 0.0;
    };
    std::vector<ValPoint> curve;
    std::size_t total_batches = 0;
    double best_val_loss = std::numeric_limits<double>::quiet_NaN();
    std::size_t best_batch = 0;
    bool early_stopped = false;
};

namespace detail {

// Decoupled AdamW step, PyTorch convention: decay scales with lr and is
// applied before the moment update.
class AdamW {
public:
    AdamW(double lr, double weight_decay)
        : lr_(lr), weight_decay_(weight_decay) {}

    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    void step(AttentionHead& head, const HeadGradients& grads) {
        if (m_q.empty()) {
            init_like(head);
        }
        ++t_;
        const double bias1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
        const double bias2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
        update(head.w_q, grads.w_q, m_q, v_q, bias1, bias2);
        update(head.w_k, grads.w_k, m_k, v_k, bias1, bias2);
        update(head.w_v, grads.w_v, m_v, v_v, bias1, bias2);
        update(head.w_o, grads.w_o, m_o, v_o, bias1, bias2);
    }

private:
    void init_like(const AttentionHead& head) {
        auto zero = [](const Matrix& w) { return Matrix(w.rows(), w.cols()); };
        m_q = zero(head.w_q); v_q = zero(head.w_q);
        m_k = zero(head.w_k); v_k = zero(head.w_k);
        m_v = zero(head.w_v); v_v = zero(head.w_v);
        m_o = zero(head.w_o); v_o = zero(head.w_o);
    }

    void update(Matrix& w, const Matrix& g, Matrix& m, Matrix& v, double bias1,
                double bias2) const {
        for (std::size_t i = 0; i < w.size(); ++i) {
            double& wi = w.data()[i];
            const double gi = g.data()[i];
            wi *= 1.0 - lr_ * weight_decay_;
            double& mi = m.data()[i];
            double& vi = v.data()[i];
            mi = kBeta1 * mi + (1.0 - kBeta1) * gi;
            vi = kBeta2 * vi + (1.0 - kBeta2) * gi * gi;
            const double mhat = mi / bias1;
            const double vhat = vi / bias2;
            wi -= lr_ * mhat / (std::sqrt(vhat) + kEps);
        }
    }

    double lr_;
    double weight_decay_;
    std::uint64_t t_ = 0;
    Matrix m_q, v_q, m_k, v_k, m_v, v_v, m_o, v_o;
};

inline void accumulate_gradients(HeadGradients& total, const HeadGradients& g) {
    if (total.w_q.empty()) {
        total = g;
        return;
    }
    auto acc = [](Matrix& t, const Matrix& s) {
        for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] += s.data()[i];
    };
    acc(total.w_q, g.w_q);
    acc(total.w_k, g.w_k);
    acc(total.w_v, g.w_v);
    acc(total.w_o, g.w_o);
}

inline void scale_gradients(HeadGradients& g, double s) {
    for (Matrix* m : {&g.w_q, &g.w_k, &g.w_v, &g.w_o})
        for (double& v : m->data()) v *= s;
}

} // namespace detail

/// Online training on freshly generated batches with AdamW and
/// early stopping on validation loss. Returns the head from the best
/// validation check (or the final head if no check ever ran).
inline std::pair<AttentionHead, TrainingReport> train(const TaskConfig& cfg,
                                                      const TrainConfig& tcfg,
                                                      const LatentMaps& maps) {
    cfg.validate();
    tcfg.validate();

    Rng root(tcfg.seed);
    Rng init_rng = root.substream(0);
    const Rng train_stream = root.substream(1);
    const Rng val_stream = root.substream(2);

    AttentionHead head = init_head(cfg, init_rng);
    AttentionHead best = head;
    detail::AdamW optimizer(tcfg.lr, tcfg.weight_decay);

    TrainingReport report;
    double best_loss = std::numeric_limits<double>::infinity();
    double previous_loss = std::numeric_limits<double>::infinity();
    bool any_check = false;
    std::size_t stall = 0;
    double window_loss = 0.0;
    std::size_t check_index = 0;

    for (std::size_t b = 0; b < tcfg.max_batches; ++b) {
        const std::vector<Sample> samples =
            batch(cfg, maps, train_stream.substream(b), tcfg.batch_size);

        HeadGradients grads;
        double batch_loss = 0.0;
        for (const Sample& s : samples) {
            ForwardTrace tr;
            try {
                tr = forward(head, s);
            } catch (const NumericalError&) {
                throw TrainingError("training diverged", b);
            }
            batch_loss += tr.loss;
            detail::accumulate_gradients(grads, backward(head, s, tr));
        }
        detail::scale_gradients(grads, 1.0 / static_cast<double>(tcfg.batch_size));
        optimizer.step(head, grads);
        window_loss += batch_loss / static_cast<double>(tcfg.batch_size);
        report.total_batches = b + 1;

        if ((b + 1) % tcfg.val_every != 0) continue;

        double val_loss = 0.0;
        std::size_t val_hits = 0;
        std::size_t val_count = 0;
        for (std::size_t j = 0; j < tcfg.val_batches; ++j) {
            const std::vector<Sample> vb =
                batch(cfg, maps, val_stream.substream(check_index * tcfg.val_batches + j),
                      tcfg.val_batch_size);
            for (const Sample& s : vb) {
                const ForwardTrace tr = forward(head, s);
                val_loss += tr.loss;
                std::size_t arg = 0;
                for (std::size_t c = 1; c < tr.class_scores.size(); ++c)
                    if (tr.class_scores[c] > tr.class_scores[arg]) arg = c;
                if (static_cast<int>(arg) == s.payload_labels[s.target_index]) ++val_hits;
                ++val_count;
            }
        }
        val_loss /= static_cast<double>(val_count);
        ++check_index;

        TrainingReport::ValPoint point;
        point.batch = b + 1;
        point.train_loss = window_loss / static_cast<double>(tcfg.val_every);
        point.val_loss = val_loss;
        point.val_accuracy = static_cast<double>(val_hits) / static_cast<double>(val_count);
        report.curve.push_back(point);
        window_loss = 0.0;

        if (val_loss < best_loss) {
            best_loss = val_loss;
            best = head;
            report.best_batch = b + 1;
            any_check = true;
        }
        // "does not improve": a check that fails to beat the previous one.
        // patience consecutive such checks end the run; the best head so far
        // is what gets returned.
        if (val_loss < previous_loss)
            stall = 0;
        else
            ++stall;
        previous_loss = val_loss;
        if (stall >= tcfg.patience) {
            report.early_stopped = true;
            break;
        }
    }

    report.best_val_loss = any_check ? best_loss : std::numeric_limits<double>::quiet_NaN();
    return {any_check ? best : head, report};
}

} // namespace qkdec
