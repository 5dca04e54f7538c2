// qkdec command-line driver: config-driven training, decomposition sweeps,
// causal interventions, logit attribution, and activation-dump ingestion.
// Every command writes a manifest and deterministic output files for a given
// (config, seed) pair.

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qkdec/attribute.hpp"
#include "qkdec/decompose.hpp"
#include "qkdec/dumps.hpp"
#include "qkdec/experiment.hpp"
#include "qkdec/intervene.hpp"
#include "qkdec/serialize.hpp"
#include "qkdec/training.hpp"
#include "qkdec/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qkdec;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitMissingArtifact = 3;
constexpr int kExitNumerical = 4;

json default_config() {
    json cfg;
    cfg["seed"] = 0;
    cfg["out_dir"] = "out";
    cfg["task"] = {{"embed_dim", 32},     {"head_dim", 16},  {"context_len", 16},
                   {"payload_classes", 10}, {"rank1", 3},      {"rank2", 5},
                   {"variant", "discrete"}, {"noise_sigma", 1.0}};
    cfg["train"] = {{"batch_size", 256}, {"lr", 1e-4},          {"weight_decay", 0.01},
                    {"val_every", 200},  {"val_batches", 20},   {"val_batch_size", 512},
                    {"patience", 5},     {"max_batches", 50000}};
    cfg["estimation"] = {{"triplets", 100000}, {"energy_threshold", 0.99}};
    cfg["eval"] = {{"samples", 10240}};
    cfg["sweep"] = {{"head_dim", 8},
                    {"rank1_values", {2, 3, 4, 5, 6}},
                    {"rank2_values", {2, 3, 4, 5, 6}},
                    {"replicates", {0, 1}}};
    cfg["intervention"] = {{"samples", 51200}};
    cfg["attribution"] = {{"prompts", 8}};
    cfg["pca_export"] = {{"samples", 512}, {"components", 3}};
    cfg["dump"] = {{"path", ""},
                   {"group_by", ""},
                   {"rule",
                    {{"name", "category"},
                     {"match_label", "category"},
                     {"query_label", "queried_category"},
                     {"held_fixed", json::array()},
                     {"counterfactual", false}}}};
    return cfg;
}

struct Resolved {
    json raw;
    std::uint64_t seed = 0;
    fs::path out_dir;
    TaskConfig task;
    TrainConfig train;
    std::size_t estimation_triplets = 100000;
    double energy_threshold = 0.99;
    std::size_t eval_samples = 10240;
};

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t purpose) {
    return Rng(master).substream(purpose).next_u64();
}

Resolved resolve(const json& cfg) {
    Resolved r;
    r.raw = cfg;
    r.seed = cfg.at("seed").get<std::uint64_t>();
    r.out_dir = cfg.at("out_dir").get<std::string>();
    r.task = task_config_from_json(cfg.at("task"));
    r.train = train_config_from_json(cfg.at("train"));
    r.task.seed = derive_seed(r.seed, 1);
    r.train.seed = derive_seed(r.seed, 2);
    r.estimation_triplets = cfg.at("estimation").at("triplets").get<std::size_t>();
    r.energy_threshold = cfg.at("estimation").at("energy_threshold").get<double>();
    r.eval_samples = cfg.at("eval").at("samples").get<std::size_t>();
    r.task.validate();
    r.train.validate();
    if (r.estimation_triplets == 0) throw ConfigError("estimation.triplets must be positive");
    if (r.energy_threshold <= 0.0 || r.energy_threshold > 1.0)
        throw ConfigError("estimation.energy_threshold must be in (0, 1]");
    return r;
}

void write_manifest(const Resolved& r, const std::string& command) {
    json manifest;
    manifest["command"] = command;
    manifest["version"] = kVersion;
    manifest["seed"] = r.seed;
    manifest["config"] = r.raw;
    manifest["config_hash"] = fingerprint_hex(r.raw.dump());
    write_text_atomic(r.out_dir / "manifest.json", manifest.dump(2) + "\n");
}

void emit_script(const fs::path& path, const std::string& body) {
    write_text_atomic(path, body);
}

// --- figure render scripts (data files stay the contract; these are sugar) --

const char* kRankGridScript = R"(#!/usr/bin/env python3
"""Render the rank-recovery grid from sweep.csv (heatmap per replicate)."""
import csv, sys
from collections import defaultdict
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open(sys.argv[1] if len(sys.argv) > 1 else "sweep.csv")))
reps = sorted({r["replicate"] for r in rows})
fig, axes = plt.subplots(1, len(reps), squeeze=False)
for ax, rep in zip(axes[0], reps):
    cells = [r for r in rows if r["replicate"] == rep]
    r1s = sorted({int(r["r1"]) for r in cells})
    r2s = sorted({int(r["r2"]) for r in cells})
    grid = [[0.0] * len(r1s) for _ in r2s]
    for r in cells:
        d = abs(int(r["recovered_r1"]) - int(r["r1"])) + abs(int(r["recovered_r2"]) - int(r["r2"]))
        grid[r2s.index(int(r["r2"]))][r1s.index(int(r["r1"]))] = d
        ax.text(r1s.index(int(r["r1"])), r2s.index(int(r["r2"])),
                f'{r["recovered_r1"]},{r["recovered_r2"]}', ha="center", va="center")
    ax.imshow(grid, cmap="RdYlGn_r", origin="lower")
    ax.set_xticks(range(len(r1s)), r1s)
    ax.set_yticks(range(len(r2s)), r2s)
    ax.set_xlabel("r1"); ax.set_ylabel("r2"); ax.set_title(f"replicate {rep}")
plt.tight_layout(); plt.savefig("rank_grid.png", dpi=150)
print("wrote rank_grid.png")
)";

const char* kSuperpositionScript = R"(#!/usr/bin/env python3
"""Superposition score versus r1 + r2 from sweep.csv."""
import csv, sys
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open(sys.argv[1] if len(sys.argv) > 1 else "sweep.csv")))
xs = [int(r["r1"]) + int(r["r2"]) for r in rows]
ys = [float(r["superposition_score"]) for r in rows]
plt.scatter(xs, ys)
plt.xlabel("r1 + r2"); plt.ylabel("superposition score")
plt.savefig("superposition.png", dpi=150)
print("wrote superposition.png")
)";

const char* kInterventionScript = R"(#!/usr/bin/env python3
"""Bar chart of attention mass shifted per intervention condition."""
import csv, sys
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open(sys.argv[1] if len(sys.argv) > 1 else "intervention.csv")))
names = [r["condition"] for r in rows]
means = [float(r["mean_mass_shifted"]) for r in rows]
los = [m - float(r["ci_low"]) for m, r in zip(means, rows)]
his = [float(r["ci_high"]) - m for m, r in zip(means, rows)]
plt.bar(names, means, yerr=[los, his], capsize=4)
plt.ylabel("attention mass shifted"); plt.xticks(rotation=30)
plt.tight_layout(); plt.savefig("intervention.png", dpi=150)
print("wrote intervention.png")
)";

const char* kPcaScript = R"(#!/usr/bin/env python3
"""3-D scatter of the pooled query/key subspace PCA."""
import csv, sys
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open(sys.argv[1] if len(sys.argv) > 1 else "subspace_pca.csv")))
fig = plt.figure()
ax = fig.add_subplot(projection="3d" if "pc3" in rows[0] else None)
for role, marker in [("query", "^"), ("key", "o")]:
    pts = [r for r in rows if r["role"] == role]
    coords = [[float(p[c]) for p in pts] for c in ("pc1", "pc2", "pc3") if c in rows[0]]
    ax.scatter(*coords, marker=marker, label=role, alpha=0.6)
ax.legend(); plt.savefig("subspace_pca.png", dpi=150)
print("wrote subspace_pca.png")
)";

const char* kAttributionScript = R"(#!/usr/bin/env python3
"""Stacked per-key logit attribution bars from attribution.json."""
import json, sys
import matplotlib.pyplot as plt

data = json.load(open(sys.argv[1] if len(sys.argv) > 1 else "attribution.json"))
prompt = data["prompts"][int(sys.argv[2]) if len(sys.argv) > 2 else 0]
positions = range(len(prompt["total"]))
bottom = [0.0] * len(prompt["total"])
for feature in prompt["features"]:
    plt.bar(positions, feature["logits"], bottom=bottom, label=feature["label"])
    bottom = [b + v for b, v in zip(bottom, feature["logits"])]
plt.bar(positions, prompt["residual"], bottom=bottom, label="residual")
plt.plot(positions, prompt["total"], "k.", label="total logit")
plt.axvline(prompt["target_index"], color="gray", linestyle=":")
plt.xlabel("key position"); plt.ylabel("attention logit")
plt.legend(); plt.tight_layout(); plt.savefig("attribution.png", dpi=150)
print("wrote attribution.png")
)";

// ---------------------------------------------------------------------------

Checkpoint require_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) {
        std::cerr << "missing checkpoint: " << path.string() << "\n";
        std::exit(kExitMissingArtifact);
    }
    return load_checkpoint(path);
}

std::pair<SubspaceBasis, SubspaceBasis> recover_bases(const Resolved& r,
                                                      const TaskConfig& task,
                                                      const LatentMaps& maps,
                                                      const AttentionHead& head,
                                                      std::size_t workers) {
    const SubspaceBasis b1 =
        estimate_latent_basis(task, maps, head, LatentTarget::latent1, r.estimation_triplets,
                              derive_seed(r.seed, 4), workers, r.energy_threshold);
    const SubspaceBasis b2 =
        estimate_latent_basis(task, maps, head, LatentTarget::latent2, r.estimation_triplets,
                              derive_seed(r.seed, 5), workers, r.energy_threshold);
    return {b1, b2};
}

int cmd_train(const Resolved& r) {
    fs::create_directories(r.out_dir);
    write_manifest(r, "train");
    Rng maps_rng(r.task.seed);
    const LatentMaps maps = build_maps(r.task, maps_rng);
    auto [head, report] = train(r.task, r.train, maps);

    save_checkpoint(r.out_dir / "checkpoint.json", {r.task, r.train, head});
    write_text_atomic(r.out_dir / "training_report.csv", training_report_csv(report));

    const double acc =
        accuracy(head, batch(r.task, maps, Rng(derive_seed(r.seed, 3)), r.eval_samples));
    std::printf("trained %zu batches (early_stopped=%d)\n", report.total_batches,
                static_cast<int>(report.early_stopped));
    std::printf("final accuracy: %.4f on %zu held-out samples\n", acc, r.eval_samples);
    return kExitOk;
}

int cmd_decompose(const Resolved& r, const fs::path& checkpoint_path, std::size_t workers) {
    const Checkpoint ckpt = require_checkpoint(checkpoint_path);
    fs::create_directories(r.out_dir);
    write_manifest(r, "decompose");
    Rng maps_rng(ckpt.task.seed);
    const LatentMaps maps = build_maps(ckpt.task, maps_rng);

    const DeltaC d1 = estimate_delta_c(ckpt.task, maps, ckpt.head, LatentTarget::latent1,
                                       r.estimation_triplets, Rng(derive_seed(r.seed, 4)),
                                       workers);
    const DeltaC d2 = estimate_delta_c(ckpt.task, maps, ckpt.head, LatentTarget::latent2,
                                       r.estimation_triplets, Rng(derive_seed(r.seed, 5)),
                                       workers);
    const std::string fp = fingerprint_hex(r.raw.dump());
    save_delta_c(r.out_dir / "delta_c_latent1.json", d1, fp);
    save_delta_c(r.out_dir / "delta_c_latent2.json", d2, fp);

    const SubspaceBasis b1 = estimate_rank(d1, r.energy_threshold);
    const SubspaceBasis b2 = estimate_rank(d2, r.energy_threshold);

    json out;
    out["latent1"] = to_json(b1);
    out["latent2"] = to_json(b2);
    out["ground_truth"] = {{"rank1", ckpt.task.rank1}, {"rank2", ckpt.task.rank2}};
    write_text_atomic(r.out_dir / "decomposition.json", out.dump(2) + "\n");

    // Pooled query/key PCA view of the latent1 subspace (and latent2 when its
    // rank allows the requested component count).
    const std::size_t n_pca = r.raw.at("pca_export").at("samples").get<std::size_t>();
    const std::size_t want_components =
        r.raw.at("pca_export").at("components").get<std::size_t>();
    const std::vector<Sample> view =
        batch(ckpt.task, maps, Rng(derive_seed(r.seed, 6)), n_pca);
    for (const auto& [tag, basis] : {std::pair{"latent1", &b1}, std::pair{"latent2", &b2}}) {
        const std::size_t components = std::min(want_components, basis->rank);
        Matrix queries(view.size(), ckpt.task.head_dim);
        Matrix keys(view.size() * ckpt.task.context_len, ckpt.task.head_dim);
        for (std::size_t i = 0; i < view.size(); ++i) {
            const Vector q = matvec(ckpt.head.w_q, view[i].selector_embed);
            for (std::size_t j = 0; j < q.size(); ++j) queries(i, j) = q[j];
            const Matrix k = matmul_bt(view[i].payload_embeds, ckpt.head.w_k);
            for (std::size_t t = 0; t < k.rows(); ++t)
                for (std::size_t j = 0; j < k.cols(); ++j)
                    keys(i * ckpt.task.context_len + t, j) = k(t, j);
        }
        const SubspacePca pooled = subspace_pca(queries, keys, *basis, components);
        std::string csv = "role";
        for (std::size_t c = 0; c < components; ++c) csv += ",pc" + std::to_string(c + 1);
        csv += '\n';
        for (std::size_t i = 0; i < pooled.scores.rows(); ++i) {
            csv += pooled.roles[i];
            for (std::size_t c = 0; c < components; ++c)
                csv += "," + format_double(pooled.scores(i, c));
            csv += '\n';
        }
        write_text_atomic(r.out_dir / ("subspace_pca_" + std::string(tag) + ".csv"), csv);
    }
    emit_script(r.out_dir / "plot_subspace_pca.py", kPcaScript);

    std::printf("recovered ranks: latent1=%zu (true %zu), latent2=%zu (true %zu)\n", b1.rank,
                ckpt.task.rank1, b2.rank, ckpt.task.rank2);
    return kExitOk;
}

int cmd_sweep(const Resolved& r, std::size_t workers, bool resume) {
    fs::create_directories(r.out_dir / "cells");
    write_manifest(r, "sweep");
    const json& sw = r.raw.at("sweep");
    const std::size_t head_dim = sw.at("head_dim").get<std::size_t>();
    const auto r1s = sw.at("rank1_values").get<std::vector<std::size_t>>();
    const auto r2s = sw.at("rank2_values").get<std::vector<std::size_t>>();
    const auto reps = sw.at("replicates").get<std::vector<std::uint64_t>>();

    struct Cell {
        std::uint64_t rep;
        std::size_t r1, r2;
        fs::path file;
    };
    std::vector<Cell> cells;
    for (std::uint64_t rep : reps)
        for (std::size_t r1 : r1s)
            for (std::size_t r2 : r2s)
                cells.push_back({rep, r1, r2,
                                 r.out_dir / "cells" /
                                     ("cell_r" + std::to_string(r1) + "_" + std::to_string(r2) +
                                      "_s" + std::to_string(rep) + ".json")});

    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> failures{0};
    auto work = [&] {
        for (;;) {
            const std::size_t idx = next.fetch_add(1);
            if (idx >= cells.size()) return;
            const Cell& cell = cells[idx];
            if (resume && fs::exists(cell.file)) {
                try {
                    (void)read_json_file(cell.file);
                    continue; // completed previously
                } catch (const Error&) {
                    // fall through and recompute a corrupt cell
                }
            }
            CellConfig cc;
            cc.task = r.task;
            cc.task.head_dim = head_dim;
            cc.task.rank1 = cell.r1;
            cc.task.rank2 = cell.r2;
            cc.task.seed = derive_cell_seed(r.seed, cell.r1, cell.r2, cell.rep);
            cc.train = r.train;
            cc.train.seed = cc.task.seed + 1;
            cc.estimation_triplets = r.estimation_triplets;
            cc.eval_samples = r.eval_samples;
            json j;
            try {
                const CellResult res = run_cell(cc);
                j["replicate"] = cell.rep;
                j["r1"] = res.rank1;
                j["r2"] = res.rank2;
                j["recovered_r1"] = res.recovered_rank1;
                j["recovered_r2"] = res.recovered_rank2;
                j["accuracy"] = res.accuracy;
                j["superposition_score"] = res.superposition;
                j["trained_batches"] = res.trained_batches;
            } catch (const Error& e) {
                j["replicate"] = cell.rep;
                j["r1"] = cell.r1;
                j["r2"] = cell.r2;
                j["error"] = e.what();
                failures.fetch_add(1);
            }
            write_text_atomic(cell.file, j.dump(2) + "\n");
        }
    };
    std::vector<std::thread> pool;
    const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, cells.size()));
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
    for (std::thread& th : pool) th.join();

    std::string csv =
        "replicate,r1,r2,recovered_r1,recovered_r2,accuracy,superposition_score\n";
    for (const Cell& cell : cells) {
        const json j = read_json_file(cell.file);
        if (j.contains("error")) continue; // failed cell recorded in its file
        csv += std::to_string(cell.rep) + "," + std::to_string(cell.r1) + "," +
               std::to_string(cell.r2) + "," + std::to_string(j.at("recovered_r1").get<std::size_t>()) +
               "," + std::to_string(j.at("recovered_r2").get<std::size_t>()) + "," +
               format_double(j.at("accuracy").get<double>()) + "," +
               format_double(j.at("superposition_score").get<double>()) + "\n";
    }
    write_text_atomic(r.out_dir / "sweep.csv", csv);
    emit_script(r.out_dir / "plot_rank_grid.py", kRankGridScript);
    emit_script(r.out_dir / "plot_superposition.py", kSuperpositionScript);
    std::printf("sweep complete: %zu cells, %zu failed\n", cells.size(),
                failures.load());
    return kExitOk;
}

int cmd_intervene(const Resolved& r, const fs::path& checkpoint_path, std::size_t workers) {
    const Checkpoint ckpt = require_checkpoint(checkpoint_path);
    fs::create_directories(r.out_dir);
    write_manifest(r, "intervene");
    Rng maps_rng(ckpt.task.seed);
    const LatentMaps maps = build_maps(ckpt.task, maps_rng);
    auto [b1, b2] = recover_bases(r, ckpt.task, maps, ckpt.head, workers);

    const std::size_t n = r.raw.at("intervention").at("samples").get<std::size_t>();
    const auto table = intervention_suite(ckpt.head, ckpt.task, maps, b1, b2, n,
                                          derive_seed(r.seed, 7), workers);
    std::string csv = "condition,mean_mass_shifted,ci_low,ci_high,n\n";
    for (const auto& row : table)
        csv += row.condition + "," + format_double(row.mean_shift) + "," +
               format_double(row.ci_low) + "," + format_double(row.ci_high) + "," +
               std::to_string(row.n) + "\n";
    write_text_atomic(r.out_dir / "intervention.csv", csv);
    emit_script(r.out_dir / "plot_intervention.py", kInterventionScript);
    for (const auto& row : table)
        std::printf("%-18s mean shift %.4f  [%.4f, %.4f]\n", row.condition.c_str(),
                    row.mean_shift, row.ci_low, row.ci_high);
    return kExitOk;
}

int cmd_attribute(const Resolved& r, const fs::path& checkpoint_path, std::size_t workers) {
    const Checkpoint ckpt = require_checkpoint(checkpoint_path);
    fs::create_directories(r.out_dir);
    write_manifest(r, "attribute");
    Rng maps_rng(ckpt.task.seed);
    const LatentMaps maps = build_maps(ckpt.task, maps_rng);
    auto [b1, b2] = recover_bases(r, ckpt.task, maps, ckpt.head, workers);

    std::vector<LabeledBasis> bases;
    bases.push_back({"latent1", b1});
    bases.push_back({"latent2", b2});
    bases = sort_by_rank_ascending(std::move(bases));

    const std::size_t n_prompts = r.raw.at("attribution").at("prompts").get<std::size_t>();
    const std::vector<Sample> prompts =
        batch(ckpt.task, maps, Rng(derive_seed(r.seed, 8)), n_prompts);

    json out;
    out["feature_order"] = json::array();
    for (const auto& lb : bases) out["feature_order"].push_back(lb.label);
    out["prompts"] = json::array();
    for (const Sample& s : prompts) {
        const Vector q = matvec(ckpt.head.w_q, s.selector_embed);
        const Matrix keys = matmul_bt(s.payload_embeds, ckpt.head.w_k);
        const QueryDecomposition dec = decompose_query(q, bases);
        const LogitAttribution att = attribute_logits(keys, dec);

        json p;
        p["target_index"] = s.target_index;
        p["payload_labels"] = s.payload_labels;
        json tokens = json::array();
        for (std::size_t i = 0; i < s.payload_embeds.rows(); ++i) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "pos_%02zu%s", i,
                          i == s.target_index ? "*" : "");
            tokens.push_back(buf);
        }
        p["token_labels"] = tokens;
        json feats = json::array();
        for (const auto& [label, logits] : att.parts)
            feats.push_back({{"label", label}, {"logits", logits}});
        p["features"] = feats;
        p["residual"] = att.residual_part;
        p["total"] = att.total;
        out["prompts"].push_back(p);
    }
    write_text_atomic(r.out_dir / "attribution.json", out.dump(2) + "\n");
    emit_script(r.out_dir / "plot_attribution.py", kAttributionScript);
    std::printf("attributed %zu prompts over %zu features + residual\n", n_prompts,
                bases.size());
    return kExitOk;
}

PairRule rule_from_config(const json& rule_cfg) {
    PairRule rule;
    rule.name = rule_cfg.at("name").get<std::string>();
    const std::string match_label = rule_cfg.at("match_label").get<std::string>();
    const std::string query_label = rule_cfg.at("query_label").get<std::string>();
    rule.held_fixed = rule_cfg.at("held_fixed").get<std::vector<std::string>>();
    rule.counterfactual_negatives = rule_cfg.at("counterfactual").get<bool>();
    rule.select_query = [query_label](const LabelMap& q) { return q.contains(query_label); };
    if (rule.counterfactual_negatives) {
        // positive: matching key in the original prompt; negative: matching
        // key in the counterfactual partner prompt.
        rule.positive = [match_label, query_label](const LabelMap& q, const LabelMap& k) {
            return k.contains(match_label) && k.at(match_label) == q.at(query_label);
        };
        rule.negative = rule.positive;
    } else {
        rule.positive = [match_label, query_label](const LabelMap& q, const LabelMap& k) {
            return k.contains(match_label) && k.at(match_label) == q.at(query_label);
        };
        rule.negative = [match_label, query_label](const LabelMap& q, const LabelMap& k) {
            return k.contains(match_label) && k.at(match_label) != q.at(query_label);
        };
    }
    return rule;
}

int cmd_dump_decompose(const Resolved& r, const fs::path& dump_path_flag) {
    const json& dump_cfg = r.raw.at("dump");
    fs::path dump_path = dump_path_flag;
    if (dump_path.empty()) dump_path = dump_cfg.at("path").get<std::string>();
    if (dump_path.empty()) {
        std::cerr << "no dump path configured (dump.path or --dump)\n";
        return kExitConfig;
    }
    if (!fs::exists(dump_path)) {
        std::cerr << "missing dump file: " << dump_path.string() << "\n";
        return kExitMissingArtifact;
    }
    const DumpFile dump = load_dump(dump_path);
    fs::create_directories(r.out_dir);
    write_manifest(r, "dump-decompose");

    const PairRule base_rule = rule_from_config(dump_cfg.at("rule"));
    const std::string group_by = dump_cfg.at("group_by").get<std::string>();
    const std::string query_label = dump_cfg.at("rule").at("query_label").get<std::string>();

    // group values: distinct query_label values among query records (sorted)
    std::set<std::string> group_values;
    if (!group_by.empty())
        for (const ActivationRecord& rec : dump.records)
            if (rec.role == "query" && rec.labels.contains(group_by))
                group_values.insert(rec.labels.at(group_by));

    json out;
    out["rule"] = dump_cfg.at("rule");
    out["groups"] = json::array();
    std::vector<DeltaC> deltas;
    std::size_t group_index = 0;

    auto run_rule = [&](const PairRule& rule, const std::string& tag) {
        Rng rng(derive_seed(r.seed, 9 + group_index++));
        PairingStats stats;
        const std::vector<Triplet> triplets =
            build_triplets(dump.records, rule, rng, &stats);
        const DeltaC d = accumulate(triplets, tag);
        const SubspaceBasis basis = estimate_rank(d, r.energy_threshold);
        deltas.push_back(d);
        json g;
        g["tag"] = tag;
        g["rank"] = basis.rank;
        g["singular_values"] = basis.singular_values;
        g["queries"] = stats.queries;
        g["skipped"] = stats.skipped;
        g["triplets"] = stats.triplets;
        out["groups"].push_back(g);
        std::printf("%-24s queries %zu, skipped %zu, triplets %zu, rank %zu\n", tag.c_str(),
                    stats.queries, stats.skipped, stats.triplets, basis.rank);
    };

    if (group_values.empty()) {
        run_rule(base_rule, base_rule.name);
    } else {
        for (const std::string& value : group_values) {
            PairRule rule = base_rule;
            const auto base_select = base_rule.select_query;
            rule.select_query = [base_select, group_by, value](const LabelMap& q) {
                return base_select(q) && q.contains(group_by) && q.at(group_by) == value;
            };
            run_rule(rule, base_rule.name + ":" + value);
        }
    }
    if (deltas.size() > 1) {
        const SubspaceBasis joint = category_subspace(deltas, r.energy_threshold);
        out["joint"] = to_json(joint);
        std::printf("joint subspace rank %zu from %zu groups\n", joint.rank, deltas.size());
    }
    write_text_atomic(r.out_dir / "dump_decomposition.json", out.dump(2) + "\n");
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"contrastive QK-space decomposition toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_override;
    std::string checkpoint_override;
    std::string dump_override;
    std::int64_t seed_override = -1;
    std::size_t workers = std::thread::hardware_concurrency();
    bool resume = false;

    app.add_option("--config", config_path, "JSON config file (defaults embedded)");
    app.add_option("--seed", seed_override, "override the master seed");
    app.add_option("--out", out_override, "override the output directory");
    app.add_option("--workers", workers, "worker threads for sweeps and estimation");
    app.add_flag("--resume", resume, "skip sweep cells already present");

    auto* sub_train = app.add_subcommand("train", "train a head and write a checkpoint");
    auto* sub_sweep = app.add_subcommand("sweep", "rank-recovery grid over (r1, r2)");
    auto* sub_dec = app.add_subcommand("decompose", "estimate contrastive covariances and bases");
    auto* sub_int = app.add_subcommand("intervene", "projection interventions on keys");
    auto* sub_att = app.add_subcommand("attribute", "query decomposition and logit attribution");
    auto* sub_dump = app.add_subcommand("dump-decompose", "decompose a labeled activation dump");
    auto* sub_print = app.add_subcommand("print-default-config", "print the default config JSON");

    for (auto* sub : {sub_dec, sub_int, sub_att})
        sub->add_option("--checkpoint", checkpoint_override, "checkpoint file to analyze");
    sub_dump->add_option("--dump", dump_override, "activation dump (JSONL)");
    for (auto* sub :
         {sub_train, sub_sweep, sub_dec, sub_int, sub_att, sub_dump, sub_print})
        sub->fallthrough(); // global flags may follow the subcommand

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    if (sub_print->parsed()) {
        std::cout << default_config().dump(2) << "\n";
        return kExitOk;
    }

    try {
        json cfg = default_config();
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) {
                std::cerr << "cannot open config: " << config_path << "\n";
                return kExitConfig;
            }
            const json user = json::parse(in, nullptr, false);
            if (user.is_discarded()) {
                std::cerr << "invalid JSON in config: " << config_path << "\n";
                return kExitConfig;
            }
            cfg.merge_patch(user);
        }
        if (seed_override >= 0) cfg["seed"] = static_cast<std::uint64_t>(seed_override);
        if (!out_override.empty()) cfg["out_dir"] = out_override;
        const Resolved r = resolve(cfg);
        const fs::path checkpoint_path = checkpoint_override.empty()
                                             ? r.out_dir / "checkpoint.json"
                                             : fs::path(checkpoint_override);

        if (sub_train->parsed()) return cmd_train(r);
        if (sub_sweep->parsed()) return cmd_sweep(r, std::max<std::size_t>(1, workers), resume);
        if (sub_dec->parsed())
            return cmd_decompose(r, checkpoint_path, std::max<std::size_t>(1, workers));
        if (sub_int->parsed())
            return cmd_intervene(r, checkpoint_path, std::max<std::size_t>(1, workers));
        if (sub_att->parsed())
            return cmd_attribute(r, checkpoint_path, std::max<std::size_t>(1, workers));
        if (sub_dump->parsed()) return cmd_dump_decompose(r, dump_override);
        std::cerr << "no subcommand\n";
        return kExitConfig;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const SchemaError& e) {
        std::cerr << "schema error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const RuleError& e) {
        std::cerr << "rule error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
}
