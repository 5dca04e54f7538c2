// Acceptance suite: one pass/fail line per criterion, exit code = number of
// failed criteria. Heavy artifacts (the d_head=16 trained head, the d_head=8
// rank grid) are shared between criteria and computed on first use.
//
// Usage: qkdec_acceptance [--cli PATH] [--threads N] [--only 1,4,9]

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "qkdec/attribute.hpp"
#include "qkdec/dumps.hpp"
#include "qkdec/experiment.hpp"
#include "qkdec/intervene.hpp"
#include "qkdec/serialize.hpp"
#include "qkdec/training.hpp"

#include "../oracle_delta_c.hpp"

namespace fs = std::filesystem;
using namespace qkdec;

namespace {

std::size_t g_threads = std::max(2u, std::thread::hardware_concurrency());
std::string g_cli;

// ---------------------------------------------------------------- shared ---

TaskConfig paper_task_16() {
    TaskConfig cfg;
    cfg.embed_dim = 32;
    cfg.context_len = 16;
    cfg.payload_classes = 10;
    cfg.head_dim = 16;
    cfg.rank1 = 3;
    cfg.rank2 = 5;
    cfg.variant = Variant::discrete;
    cfg.seed = 17;
    return cfg;
}

TrainConfig table1_train() {
    TrainConfig tcfg; // defaults carry the published hyperparameters
    tcfg.seed = 1;
    return tcfg;
}

struct TrainedSetup {
    TaskConfig task;
    LatentMaps maps;
    AttentionHead head;
    double held_out_accuracy = 0.0;
};

std::optional<TrainedSetup> g_head16;

const TrainedSetup& head16() {
    if (!g_head16) {
        TrainedSetup s;
        s.task = paper_task_16();
        Rng mr(s.task.seed);
        s.maps = build_maps(s.task, mr);
        auto [head, report] = train(s.task, table1_train(), s.maps);
        s.head = head;
        s.held_out_accuracy =
            accuracy(s.head, batch(s.task, s.maps, Rng(4242), 10240));
        g_head16 = std::move(s);
    }
    return *g_head16;
}

struct GridCell {
    std::uint64_t replicate;
    std::size_t r1, r2;
    CellResult result;
};

std::optional<std::vector<GridCell>> g_grid;

// d_head = 8 grid, r1, r2 in {2..6}, two replicates. Cells run in a worker
// pool; each cell is self-seeded so the pool size cannot change results.
const std::vector<GridCell>& grid8() {
    if (!g_grid) {
        std::vector<GridCell> cells;
        for (std::uint64_t rep : {0ull, 1ull})
            for (std::size_t r1 = 2; r1 <= 6; ++r1)
                for (std::size_t r2 = 2; r2 <= 6; ++r2)
                    cells.push_back({rep, r1, r2, {}});

        std::atomic<std::size_t> next{0};
        auto work = [&cells, &next] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= cells.size()) return;
                GridCell& cell = cells[i];
                CellConfig cc;
                cc.task = paper_task_16();
                cc.task.head_dim = 8;
                cc.task.rank1 = cell.r1;
                cc.task.rank2 = cell.r2;
                cc.task.seed = derive_cell_seed(99, cell.r1, cell.r2, cell.replicate);
                cc.train = table1_train();
                cc.train.seed = cc.task.seed + 1;
                // hotter rate and a tighter cap keep the 50-cell grid tractable;
                // the published rate reaches the same plateau more slowly
                cc.train.lr = 3e-4;
                cc.train.max_batches = 15000;
                cc.train.val_batches = 10;
                cc.train.val_batch_size = 256;
                cc.estimation_triplets = 100000;
                cc.eval_samples = 5120;
                cell.result = run_cell(cc);
            }
        };
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < std::min<std::size_t>(g_threads, cells.size()); ++t)
            pool.emplace_back(work);
        for (std::thread& th : pool) th.join();
        g_grid = std::move(cells);
    }
    return *g_grid;
}

// ------------------------------------------------------------- criteria ---

// Analytic gradients vs central finite differences, 10 seeds, >= 50
// coordinates per matrix, relative error < 1e-5.
bool criterion_gradients(std::string& detail) {
    TaskConfig cfg;
    cfg.embed_dim = 24;
    cfg.head_dim = 8;
    cfg.context_len = 8;
    cfg.payload_classes = 6;
    cfg.rank1 = 3;
    cfg.rank2 = 3;
    Rng mr(5);
    const LatentMaps maps = build_maps(cfg, mr);

    const double h = 1e-5;
    double worst = 0.0;
    std::size_t checked = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng hr(seed * 13 + 3);
        const AttentionHead head = init_head(cfg, hr);
        Rng sr(seed * 7 + 1);
        const Sample s = sample(cfg, maps, sr);
        const ForwardTrace tr = forward(head, s);
        const HeadGradients g = backward(head, s, tr);

        Rng pick(seed);
        auto check = [&](Matrix AttentionHead::*member, const Matrix& grad) {
            const Matrix& w = head.*member;
            for (std::size_t c = 0; c < 50; ++c) {
                const std::size_t idx = pick.bounded(w.size());
                AttentionHead hp = head;
                (hp.*member).data()[idx] += h;
                AttentionHead hm = head;
                (hm.*member).data()[idx] -= h;
                const double fd = (forward(hp, s).loss - forward(hm, s).loss) / (2.0 * h);
                const double an = grad.data()[idx];
                const double rel =
                    std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4});
                worst = std::max(worst, rel);
                ++checked;
            }
        };
        check(&AttentionHead::w_q, g.w_q);
        check(&AttentionHead::w_k, g.w_k);
        check(&AttentionHead::w_v, g.w_v);
        check(&AttentionHead::w_o, g.w_o);
    }
    std::ostringstream ss;
    ss << checked << " coordinates, worst relative error " << worst;
    detail = ss.str();
    return worst < 1e-5;
}

// Discrete task at d_head = 16, (3,5), published hyperparameters: held-out
// accuracy >= 0.99 on 10,240 samples.
bool criterion_accuracy_discrete(std::string& detail) {
    const TrainedSetup& s = head16();
    std::ostringstream ss;
    ss << "held-out accuracy " << s.held_out_accuracy << " (need >= 0.99)";
    detail = ss.str();
    return s.held_out_accuracy >= 0.99;
}

// Continuous task at d_head = 8, (4,4): accuracy inside [0.80, 0.92].
bool criterion_accuracy_continuous(std::string& detail) {
    TaskConfig cfg = paper_task_16();
    cfg.head_dim = 8;
    cfg.rank1 = 4;
    cfg.rank2 = 4;
    cfg.variant = Variant::continuous;
    cfg.seed = 23;
    Rng mr(cfg.seed);
    const LatentMaps maps = build_maps(cfg, mr);
    TrainConfig tcfg = table1_train();
    tcfg.seed = 2;
    auto [head, report] = train(cfg, tcfg, maps);
    const double acc = accuracy(head, batch(cfg, maps, Rng(777), 10240));
    std::ostringstream ss;
    ss << "held-out accuracy " << acc << " (need [0.80, 0.92]) after "
       << report.total_batches << " batches";
    detail = ss.str();
    return acc >= 0.80 && acc <= 0.92;
}

// d_head = 8 grid: every cell with r1 + r2 < 8 recovers the exact ranks;
// >= 90% of those cells must pass across the two replicates.
bool criterion_rank_recovery(std::string& detail) {
    const auto& cells = grid8();
    std::size_t eligible = 0, exact = 0;
    for (const GridCell& cell : cells) {
        if (cell.r1 + cell.r2 >= 8) continue;
        ++eligible;
        if (cell.result.recovered_rank1 == cell.r1 && cell.result.recovered_rank2 == cell.r2)
            ++exact;
    }
    std::ostringstream ss;
    ss << exact << "/" << eligible << " eligible cells exact (need >= 90%)";
    detail = ss.str();
    return eligible > 0 &&
           static_cast<double>(exact) >= 0.9 * static_cast<double>(eligible);
}

// Monte-Carlo delta-C at N = 1e5 vs the closed form with the brute-force
// rejection correction: relative Frobenius error < 0.05.
bool criterion_analytic_delta(std::string& detail) {
    TaskConfig cfg;
    cfg.embed_dim = 32;
    cfg.head_dim = 8;
    cfg.context_len = 16;
    cfg.payload_classes = 10;
    cfg.rank1 = 3;
    cfg.rank2 = 4;
    cfg.noise_sigma = 0.0;
    cfg.seed = 31;
    Rng mr(cfg.seed);
    const LatentMaps maps = build_maps(cfg, mr);
    Rng hr(32);
    const AttentionHead head = init_head(cfg, hr); // fixed random head

    double worst = 0.0;
    for (LatentTarget target : {LatentTarget::latent1, LatentTarget::latent2}) {
        const DeltaC mc =
            estimate_delta_c(cfg, maps, head, target, 100000, Rng(33), g_threads);
        const Matrix exact = qktest::analytic_delta_c(cfg, maps, head, target);
        const double rel =
            frobenius_norm(subtract(mc.delta, exact)) / frobenius_norm(exact);
        worst = std::max(worst, rel);
    }
    std::ostringstream ss;
    ss << "worst relative Frobenius error " << worst << " (need < 0.05)";
    detail = ss.str();
    return worst < 0.05;
}

// Interventions on the trained d_head = 16 head over 51,200 samples:
// latent1+latent2 moves >= 0.9 attention mass; every random baseline sits
// at least 0.2 below its matched feature condition.
bool criterion_interventions(std::string& detail) {
    const TrainedSetup& s = head16();
    const SubspaceBasis b1 = estimate_latent_basis(s.task, s.maps, s.head,
                                                   LatentTarget::latent1, 100000, 51,
                                                   g_threads);
    const SubspaceBasis b2 = estimate_latent_basis(s.task, s.maps, s.head,
                                                   LatentTarget::latent2, 100000, 52,
                                                   g_threads);
    const auto table =
        intervention_suite(s.head, s.task, s.maps, b1, b2, 51200, 53, g_threads);
    std::map<std::string, double> after;
    for (const auto& row : table) after[row.condition] = row.mean_attn_after;

    const double both = after.at("latent1+latent2");
    const bool gaps = after.at("random_r1") <= after.at("latent1") - 0.2 &&
                      after.at("random_r2") <= after.at("latent2") - 0.2 &&
                      after.at("random_r1+r2") <= both - 0.2;
    std::ostringstream ss;
    ss << "latent1+latent2 attention-at-target " << both
       << " (need >= 0.9); feature-vs-random gaps: "
       << after.at("latent1") - after.at("random_r1") << ", "
       << after.at("latent2") - after.at("random_r2") << ", "
       << both - after.at("random_r1+r2") << " (need >= 0.2 each)";
    detail = ss.str();
    return both >= 0.9 && gaps;
}

// Exact additivity of logit attributions on 1e4 random instances, plus the
// qualitative check that feature components dominate the residual at the
// attended token of the trained head.
bool criterion_attribution(std::string& detail) {
    Rng rng(61);
    double worst = 0.0;
    for (int rep = 0; rep < 10000; ++rep) {
        const std::size_t d = 4 + rng.bounded(13); // 4..16
        std::vector<LabeledBasis> bases;
        const std::size_t n_bases = 1 + rng.bounded(3);
        for (std::size_t b = 0; b < n_bases; ++b) {
            const std::size_t r = 1 + rng.bounded(d / 2 + 1);
            SubspaceBasis basis;
            basis.rank = r;
            basis.query_basis = random_orthonormal(rng, d, r);
            basis.key_basis = basis.query_basis;
            basis.singular_values.assign(r, 1.0);
            bases.push_back({"f" + std::to_string(b), basis});
        }
        Vector q(d);
        for (double& v : q) v = rng.gaussian();
        Matrix keys(3, d);
        for (double& v : keys.data()) v = rng.gaussian();

        const LogitAttribution att = attribute_logits(keys, decompose_query(q, bases));
        for (std::size_t i = 0; i < att.total.size(); ++i) {
            double sum = att.residual_part[i];
            for (const auto& [label, values] : att.parts) sum += values[i];
            const double rel = std::abs(att.total[i] - sum) /
                               std::max(std::abs(att.total[i]), 1e-12);
            worst = std::max(worst, rel);
        }
    }

    const TrainedSetup& s = head16();
    const SubspaceBasis b1 = estimate_latent_basis(s.task, s.maps, s.head,
                                                   LatentTarget::latent1, 100000, 51,
                                                   g_threads);
    const SubspaceBasis b2 = estimate_latent_basis(s.task, s.maps, s.head,
                                                   LatentTarget::latent2, 100000, 52,
                                                   g_threads);
    std::vector<LabeledBasis> bases;
    bases.push_back({"latent1", b1});
    bases.push_back({"latent2", b2});
    bases = sort_by_rank_ascending(std::move(bases));

    std::size_t dominated = 0;
    const std::vector<Sample> prompts = batch(s.task, s.maps, Rng(62), 256);
    for (const Sample& p : prompts) {
        const Vector q = matvec(s.head.w_q, p.selector_embed);
        const Matrix keys = matmul_bt(p.payload_embeds, s.head.w_k);
        const LogitAttribution att = attribute_logits(keys, decompose_query(q, bases));
        double features = 0.0;
        for (const auto& [label, values] : att.parts) features += values[p.target_index];
        if (features > att.residual_part[p.target_index]) ++dominated;
    }
    std::ostringstream ss;
    ss << "worst additivity error " << worst << " (need < 1e-10); feature>residual at "
       << "attended token in " << dominated << "/256 prompts (need >= 230)";
    detail = ss.str();
    return worst < 1e-10 && dominated >= 230;
}

// Triplets exported to a JSONL dump and rebuilt through the pairing rule
// reproduce the in-process covariances to 1e-10 Frobenius.
bool criterion_dump_equivalence(std::string& detail) {
    TaskConfig cfg;
    cfg.embed_dim = 32;
    cfg.head_dim = 16;
    cfg.context_len = 16;
    cfg.payload_classes = 10;
    cfg.rank1 = 3;
    cfg.rank2 = 5;
    cfg.seed = 71;
    Rng mr(cfg.seed);
    const LatentMaps maps = build_maps(cfg, mr);
    Rng hr(72);
    const AttentionHead head = init_head(cfg, hr);

    std::vector<Triplet> triplets;
    Rng trng(73);
    for (int i = 0; i < 5000; ++i)
        triplets.push_back(make_triplet(cfg, maps, head, LatentTarget::latent1, trng));
    const DeltaC direct = accumulate(triplets, "latent1");

    DumpFile dump;
    dump.head_dim = cfg.head_dim;
    for (std::size_t i = 0; i < triplets.size(); ++i) {
        const std::string pid = "t" + std::to_string(i);
        ActivationRecord q;
        q.role = "query";
        q.vec = triplets[i].query;
        q.labels = {{"prompt_id", pid}, {"target", "latent1"}};
        dump.records.push_back(q);
        ActivationRecord kp;
        kp.role = "key";
        kp.vec = triplets[i].key_pos;
        kp.labels = {{"prompt_id", pid}, {"match", "1"}};
        dump.records.push_back(kp);
        ActivationRecord kn;
        kn.role = "key";
        kn.vec = triplets[i].key_neg;
        kn.labels = {{"prompt_id", pid}, {"match", "0"}};
        dump.records.push_back(kn);
    }
    const fs::path path =
        fs::temp_directory_path() / ("qkdec_acceptance_dump_" + std::to_string(::getpid()) +
                                     ".jsonl");
    write_dump(path, dump);
    const DumpFile loaded = load_dump(path);
    fs::remove(path);

    PairRule rule;
    rule.name = "match";
    rule.select_query = [](const LabelMap&) { return true; };
    rule.positive = [](const LabelMap&, const LabelMap& k) {
        return k.contains("match") && k.at("match") == "1";
    };
    rule.negative = [](const LabelMap&, const LabelMap& k) {
        return k.contains("match") && k.at("match") == "0";
    };
    Rng prng(74);
    PairingStats stats;
    const std::vector<Triplet> rebuilt = build_triplets(loaded.records, rule, prng, &stats);
    const DeltaC via_dump = accumulate(rebuilt, "latent1");

    const double err = frobenius_norm(subtract(via_dump.delta, direct.delta));
    std::ostringstream ss;
    ss << stats.triplets << " triplets rebuilt, Frobenius gap " << err
       << " (need <= 1e-10)";
    detail = ss.str();
    return stats.triplets == triplets.size() && err <= 1e-10;
}

// Superposed cells (r1 + r2 > 8) must average at least twice the
// superposition score of non-superposed cells (r1 + r2 <= 8).
bool criterion_superposition(std::string& detail) {
    const auto& cells = grid8();
    double super_sum = 0.0, split_sum = 0.0;
    std::size_t super_n = 0, split_n = 0;
    for (const GridCell& cell : cells) {
        if (cell.r1 + cell.r2 > 8) {
            super_sum += cell.result.superposition;
            ++super_n;
        } else {
            split_sum += cell.result.superposition;
            ++split_n;
        }
    }
    const double super_mean = super_sum / static_cast<double>(super_n);
    const double split_mean = split_sum / static_cast<double>(split_n);
    std::ostringstream ss;
    ss << "superposed mean " << super_mean << " vs split mean " << split_mean
       << " (need >= 2x)";
    detail = ss.str();
    return super_mean >= 2.0 * split_mean;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Two CLI runs with the same config and seed produce byte-identical primary
// output files.
bool criterion_determinism(std::string& detail) {
    if (g_cli.empty()) {
        detail = "no CLI binary provided (--cli or QKDEC_CLI)";
        return false;
    }
    const fs::path base =
        fs::temp_directory_path() / ("qkdec_acceptance_det_" + std::to_string(::getpid()));
    fs::remove_all(base);
    fs::create_directories(base);
    const fs::path cfg_path = base / "cfg.json";
    {
        std::ofstream cfg(cfg_path);
        cfg << R"({
  "task": {"embed_dim": 16, "head_dim": 6, "context_len": 8, "payload_classes": 4,
            "rank1": 2, "rank2": 2, "noise_sigma": 0.5},
  "train": {"batch_size": 32, "lr": 0.002, "val_every": 50, "val_batches": 2,
             "val_batch_size": 64, "max_batches": 400},
  "estimation": {"triplets": 20000},
  "eval": {"samples": 1024},
  "pca_export": {"samples": 64}
})";
    }
    // the same command twice: identical config, seed and output directory
    const fs::path out = base / "out";
    auto run_once = [&] {
        const std::string train_cmd = g_cli + " --config " + cfg_path.string() +
                                      " --seed 12 --out " + out.string() + " train > " +
                                      (base / "run.log").string() + " 2>&1";
        if (WEXITSTATUS(std::system(train_cmd.c_str())) != 0) return false;
        const std::string dec_cmd = g_cli + " --config " + cfg_path.string() +
                                    " --seed 12 --out " + out.string() +
                                    " decompose --workers 2 >> " +
                                    (base / "run.log").string() + " 2>&1";
        return WEXITSTATUS(std::system(dec_cmd.c_str())) == 0;
    };
    if (!run_once()) {
        detail = "first CLI run failed; see " + base.string();
        return false;
    }
    std::map<std::string, std::string> snapshot;
    for (const auto& entry : fs::directory_iterator(out))
        snapshot[entry.path().filename().string()] = slurp(entry.path());
    if (!run_once()) {
        detail = "second CLI run failed; see " + base.string();
        return false;
    }
    std::size_t compared = 0;
    std::string mismatch;
    for (const auto& [name, bytes] : snapshot) {
        if (!fs::exists(out / name)) {
            mismatch = name + " missing in second run";
            break;
        }
        if (slurp(out / name) != bytes) {
            mismatch = name + " differs";
            break;
        }
        ++compared;
    }
    std::ostringstream ss;
    if (mismatch.empty()) {
        ss << compared << " output files byte-identical across runs";
        fs::remove_all(base);
    } else {
        ss << mismatch << " (outputs kept in " << base.string() << ")";
    }
    detail = ss.str();
    return mismatch.empty();
}

struct Criterion {
    int number;
    const char* name;
    bool (*fn)(std::string&);
};

const Criterion kCriteria[] = {
    {1, "gradient-correctness", criterion_gradients},
    {2, "toy-accuracy-discrete", criterion_accuracy_discrete},
    {3, "toy-accuracy-continuous", criterion_accuracy_continuous},
    {4, "rank-recovery-grid", criterion_rank_recovery},
    {5, "analytic-delta-c-oracle", criterion_analytic_delta},
    {6, "intervention-suite", criterion_interventions},
    {7, "logit-attribution-exactness", criterion_attribution},
    {8, "dump-path-equivalence", criterion_dump_equivalence},
    {9, "superposition-phase", criterion_superposition},
    {10, "determinism", criterion_determinism},
};

} // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--cli" && i + 1 < argc) {
            g_cli = argv[++i];
        } else if (arg == "--threads" && i + 1 < argc) {
            g_threads = std::stoul(argv[++i]);
        } else if (arg == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            std::string tok;
            while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
        }
    }
    if (g_cli.empty())
        if (const char* env = std::getenv("QKDEC_CLI")) g_cli = env;

    int failures = 0;
    for (const Criterion& c : kCriteria) {
        if (!only.empty() && !only.contains(c.number)) continue;
        std::string detail;
        bool ok = false;
        try {
            ok = c.fn(detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        std::printf("[%s] %02d %-28s %s\n", ok ? "PASS" : "FAIL", c.number, c.name,
                    detail.c_str());
        std::fflush(stdout);
        if (!ok) ++failures;
    }
    return failures;
}
