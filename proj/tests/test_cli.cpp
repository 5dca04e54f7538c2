#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "qkdec/dumps.hpp"
#include "qkdec/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string cli_path() {
    const char* env = std::getenv("QKDEC_CLI");
    REQUIRE_MESSAGE(env != nullptr, "QKDEC_CLI must point at the qkdec binary");
    return env;
}

struct Workspace {
    fs::path dir;
    Workspace() {
        dir = fs::temp_directory_path() / ("qkdec_cli_" + std::to_string(::getpid()) + "_" +
                                           std::to_string(counter++));
        fs::create_directories(dir);
    }
    ~Workspace() { fs::remove_all(dir); }
    static inline int counter = 0;
};

int run(const std::string& args, const fs::path& log) {
    const std::string cmd = cli_path() + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_tiny_config(const fs::path& path, const fs::path& out_dir) {
    json cfg;
    cfg["out_dir"] = out_dir.string();
    cfg["task"] = {{"embed_dim", 15}, {"head_dim", 6},  {"context_len", 6},
                   {"payload_classes", 4}, {"rank1", 2}, {"rank2", 3},
                   {"noise_sigma", 0.5}};
    cfg["train"] = {{"batch_size", 32},     {"lr", 0.002},        {"val_every", 40},
                    {"val_batches", 2},     {"val_batch_size", 64}, {"max_batches", 200}};
    cfg["estimation"] = {{"triplets", 4000}};
    cfg["eval"] = {{"samples", 512}};
    cfg["intervention"] = {{"samples", 512}};
    cfg["pca_export"] = {{"samples", 48}};
    cfg["attribution"] = {{"prompts", 3}};
    std::ofstream(path) << cfg.dump(2);
}

} // namespace

TEST_CASE("print-default-config emits valid JSON with full defaults") {
    Workspace ws;
    const int code = run("print-default-config", ws.dir / "out.txt");
    CHECK(code == 0);
    const json cfg = json::parse(slurp(ws.dir / "out.txt"));
    CHECK(cfg.at("train").at("lr").get<double>() == 1e-4);
    CHECK(cfg.at("train").at("patience").get<int>() == 5);
    CHECK(cfg.at("task").at("embed_dim").get<int>() == 32);
    CHECK(cfg.at("estimation").at("triplets").get<int>() == 100000);
}

TEST_CASE("train writes checkpoint, report and manifest; creates the out dir") {
    Workspace ws;
    write_tiny_config(ws.dir / "cfg.json", ws.dir / "fresh" / "out");
    const int code = run("--config " + (ws.dir / "cfg.json").string() + " train",
                         ws.dir / "train.log");
    CHECK(code == 0);
    CHECK(fs::exists(ws.dir / "fresh" / "out" / "checkpoint.json"));
    CHECK(fs::exists(ws.dir / "fresh" / "out" / "training_report.csv"));
    CHECK(fs::exists(ws.dir / "fresh" / "out" / "manifest.json"));
    const std::string log = slurp(ws.dir / "train.log");
    CHECK(log.find("final accuracy") != std::string::npos);
}

TEST_CASE("identical seeds give identical checkpoints, different seeds differ") {
    Workspace ws;
    write_tiny_config(ws.dir / "cfg.json", ws.dir / "a");
    REQUIRE(run("--config " + (ws.dir / "cfg.json").string() + " --seed 5 --out " +
                    (ws.dir / "a").string() + " train",
                ws.dir / "a.log") == 0);
    REQUIRE(run("--config " + (ws.dir / "cfg.json").string() + " --seed 5 --out " +
                    (ws.dir / "b").string() + " train",
                ws.dir / "b.log") == 0);
    REQUIRE(run("--config " + (ws.dir / "cfg.json").string() + " --seed 6 --out " +
                    (ws.dir / "c").string() + " train",
                ws.dir / "c.log") == 0);
    CHECK(slurp(ws.dir / "a" / "checkpoint.json") == slurp(ws.dir / "b" / "checkpoint.json"));
    CHECK(slurp(ws.dir / "a" / "checkpoint.json") != slurp(ws.dir / "c" / "checkpoint.json"));
}

TEST_CASE("config errors exit with code 2") {
    Workspace ws;
    std::ofstream(ws.dir / "broken.json") << "{ not json";
    CHECK(run("--config " + (ws.dir / "broken.json").string() + " train",
              ws.dir / "broken.log") == 2);

    json cfg;
    cfg["task"] = {{"embed_dim", 4}}; // violates embed_dim >= r1 + r2 + P
    std::ofstream(ws.dir / "bad_dims.json") << cfg.dump();
    CHECK(run("--config " + (ws.dir / "bad_dims.json").string() + " train",
              ws.dir / "bad.log") == 2);
}

TEST_CASE("intervene without a checkpoint exits with code 3") {
    Workspace ws;
    write_tiny_config(ws.dir / "cfg.json", ws.dir / "out");
    CHECK(run("--config " + (ws.dir / "cfg.json").string() + " intervene",
              ws.dir / "int.log") == 3);
}

TEST_CASE("single-cell sweep writes one CSV row; resume keeps completed cells") {
    Workspace ws;
    write_tiny_config(ws.dir / "cfg.json", ws.dir / "out");
    {
        json cfg = json::parse(slurp(ws.dir / "cfg.json"));
        cfg["sweep"] = {{"head_dim", 6},
                        {"rank1_values", {2}},
                        {"rank2_values", {3}},
                        {"replicates", {0}}};
        std::ofstream(ws.dir / "cfg.json") << cfg.dump(2);
    }
    REQUIRE(run("--config " + (ws.dir / "cfg.json").string() + " sweep --workers 1",
                ws.dir / "sweep.log") == 0);
    {
        std::ifstream csv(ws.dir / "out" / "sweep.csv");
        std::string line;
        int rows = 0;
        std::getline(csv, line);
        CHECK(line == "replicate,r1,r2,recovered_r1,recovered_r2,accuracy,superposition_score");
        while (std::getline(csv, line))
            if (!line.empty()) ++rows;
        CHECK(rows == 1);
    }

    // plant a sentinel cell result; --resume must keep it verbatim
    const fs::path cell = ws.dir / "out" / "cells" / "cell_r2_3_s0.json";
    json sentinel;
    sentinel["replicate"] = 0;
    sentinel["r1"] = 2;
    sentinel["r2"] = 3;
    sentinel["recovered_r1"] = 77;
    sentinel["recovered_r2"] = 88;
    sentinel["accuracy"] = 0.125;
    sentinel["superposition_score"] = 0.5;
    std::ofstream(cell) << sentinel.dump(2);
    REQUIRE(run("--config " + (ws.dir / "cfg.json").string() + " sweep --workers 1 --resume",
                ws.dir / "resume.log") == 0);
    const std::string csv = slurp(ws.dir / "out" / "sweep.csv");
    CHECK(csv.find(",77,88,") != std::string::npos);
}

TEST_CASE("attribute emits additive per-token logits") {
    Workspace ws;
    write_tiny_config(ws.dir / "cfg.json", ws.dir / "out");
    REQUIRE(run("--config " + (ws.dir / "cfg.json").string() + " train",
                ws.dir / "train.log") == 0);
    REQUIRE(run("--config " + (ws.dir / "cfg.json").string() + " attribute",
                ws.dir / "att.log") == 0);
    const json att = json::parse(slurp(ws.dir / "out" / "attribution.json"));
    REQUIRE(att.at("prompts").size() == 3);
    for (const auto& prompt : att.at("prompts")) {
        const auto total = prompt.at("total").get<std::vector<double>>();
        const auto residual = prompt.at("residual").get<std::vector<double>>();
        for (std::size_t i = 0; i < total.size(); ++i) {
            double sum = residual[i];
            for (const auto& f : prompt.at("features"))
                sum += f.at("logits").at(i).get<double>();
            CHECK(std::abs(total[i] - sum) < 1e-10 * std::max(1.0, std::abs(total[i])));
        }
    }
}

TEST_CASE("dump-decompose reports per-group ranks on a synthetic dump") {
    Workspace ws;
    // synthesize a category dump: 30 prompts, 3 categories, rank-1 per
    // category by construction (category direction + per-record jitter)
    qkdec::DumpFile dump;
    dump.head_dim = 8;
    qkdec::Rng rng(3);
    std::vector<qkdec::Vector> cat_dirs;
    for (int c = 0; c < 3; ++c) {
        qkdec::Vector dir(8);
        for (double& v : dir) v = rng.gaussian();
        cat_dirs.push_back(dir);
    }
    const char* names[3] = {"fruit", "animal", "vehicle"};
    for (int p = 0; p < 30; ++p) {
        const int qc = p % 3;
        const std::string pid = "p" + std::to_string(p);
        qkdec::ActivationRecord q;
        q.role = "query";
        q.vec = cat_dirs[qc];
        for (double& v : q.vec) v += 0.05 * rng.gaussian();
        q.labels = {{"prompt_id", pid}, {"queried_category", names[qc]}};
        dump.records.push_back(q);
        for (int c = 0; c < 3; ++c) {
            qkdec::ActivationRecord k;
            k.role = "key";
            k.vec = cat_dirs[c];
            for (double& v : k.vec) v += 0.05 * rng.gaussian();
            k.labels = {{"prompt_id", pid}, {"category", names[c]}};
            dump.records.push_back(k);
        }
    }
    write_dump(ws.dir / "dump.jsonl", dump);

    write_tiny_config(ws.dir / "cfg.json", ws.dir / "out");
    {
        json cfg = json::parse(slurp(ws.dir / "cfg.json"));
        cfg["dump"]["path"] = (ws.dir / "dump.jsonl").string();
        cfg["dump"]["group_by"] = "queried_category";
        std::ofstream(ws.dir / "cfg.json") << cfg.dump(2);
    }
    REQUIRE(run("--config " + (ws.dir / "cfg.json").string() + " dump-decompose",
                ws.dir / "dump.log") == 0);
    const json out = json::parse(slurp(ws.dir / "out" / "dump_decomposition.json"));
    REQUIRE(out.at("groups").size() == 3);
    for (const auto& g : out.at("groups")) CHECK(g.at("rank").get<int>() >= 1);
    CHECK(out.contains("joint"));
    CHECK(run("dump-decompose --dump " + (ws.dir / "missing.jsonl").string(),
              ws.dir / "missing.log") == 3);
}
