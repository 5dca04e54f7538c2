#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qkdec/attention.hpp"
#include "qkdec/contrastive.hpp"
#include "qkdec/datagen.hpp"
#include "qkdec/decompose.hpp"
#include "qkdec/errors.hpp"
#include "qkdec/matrix.hpp"
#include "qkdec/training.hpp"
#include "qkdec/version.hpp"

namespace qkdec {

// ---------------------------------------------------------------------------
// JSON round-trips. nlohmann prints doubles with round-trip precision and
// keeps object keys sorted, so identical values serialize to identical bytes.
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const Matrix& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
    return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                  j.at("data").get<Vector>());
}

inline nlohmann::json to_json(const TaskConfig& cfg) {
    return {{"embed_dim", cfg.embed_dim},
            {"head_dim", cfg.head_dim},
            {"context_len", cfg.context_len},
            {"payload_classes", cfg.payload_classes},
            {"rank1", cfg.rank1},
            {"rank2", cfg.rank2},
            {"variant", to_string(cfg.variant)},
            {"noise_sigma", cfg.noise_sigma},
            {"seed", cfg.seed}};
}

inline TaskConfig task_config_from_json(const nlohmann::json& j) {
    TaskConfig cfg;
    cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
    cfg.head_dim = j.value("head_dim", cfg.head_dim);
    cfg.context_len = j.value("context_len", cfg.context_len);
    cfg.payload_classes = j.value("payload_classes", cfg.payload_classes);
    cfg.rank1 = j.value("rank1", cfg.rank1);
    cfg.rank2 = j.value("rank2", cfg.rank2);
    if (j.contains("variant")) cfg.variant = variant_from_string(j.at("variant"));
    cfg.noise_sigma = j.value("noise_sigma", cfg.noise_sigma);
    cfg.seed = j.value("seed", cfg.seed);
    return cfg;
}

inline nlohmann::json to_json(const TrainConfig& cfg) {
    return {{"batch_size", cfg.batch_size},
            {"lr", cfg.lr},
            {"weight_decay", cfg.weight_decay},
            {"val_every", cfg.val_every},
            {"val_batches", cfg.val_batches},
            {"val_batch_size", cfg.val_batch_size},
            {"patience", cfg.patience},
            {"max_batches", cfg.max_batches},
            {"seed", cfg.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.val_every = j.value("val_every", cfg.val_every);
    cfg.val_batches = j.value("val_batches", cfg.val_batches);
    cfg.val_batch_size = j.value("val_batch_size", cfg.val_batch_size);
    cfg.patience = j.value("patience", cfg.patience);
    cfg.max_batches = j.value("max_batches", cfg.max_batches);
    cfg.seed = j.value("seed", cfg.seed);
    return cfg;
}

// ---------------------------------------------------------------------------
// Files. Writers go through a temp file plus rename so concurrent sweep
// workers never expose a half-written artifact.
// ---------------------------------------------------------------------------

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw Error("cannot open for writing: " + tmp.string());
        out << text;
    }
    std::filesystem::rename(tmp, path);
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open: " + path.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw Error("invalid JSON in " + path.string());
    return j;
}

/// FNV-1a over a string; fingerprint for manifests and estimate files.
inline std::string fingerprint_hex(const std::string& text) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
    TaskConfig task;
    TrainConfig train;
    AttentionHead head;
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    nlohmann::json j;
    j["format_version"] = kCheckpointFormatVersion;
    j["kind"] = "qkdec_head_checkpoint";
    j["version"] = kVersion;
    j["task"] = to_json(ckpt.task);
    j["train"] = to_json(ckpt.train);
    j["weights"] = {{"w_q", to_json(ckpt.head.w_q)},
                    {"w_k", to_json(ckpt.head.w_k)},
                    {"w_v", to_json(ckpt.head.w_v)},
                    {"w_o", to_json(ckpt.head.w_o)}};
    write_text_atomic(path, j.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const nlohmann::json j = read_json_file(path);
    if (j.value("kind", "") != "qkdec_head_checkpoint")
        throw SchemaError("not a head checkpoint: " + path.string());
    if (j.value("format_version", 0) != kCheckpointFormatVersion)
        throw SchemaError("unsupported checkpoint format in " + path.string());
    Checkpoint ckpt;
    ckpt.task = task_config_from_json(j.at("task"));
    ckpt.train = train_config_from_json(j.at("train"));
    const auto& w = j.at("weights");
    ckpt.head.w_q = matrix_from_json(w.at("w_q"));
    ckpt.head.w_k = matrix_from_json(w.at("w_k"));
    ckpt.head.w_v = matrix_from_json(w.at("w_v"));
    ckpt.head.w_o = matrix_from_json(w.at("w_o"));
    return ckpt;
}

inline void save_delta_c(const std::filesystem::path& path, const DeltaC& d,
                         const std::string& config_fingerprint) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["kind"] = "qkdec_delta_c";
    j["target"] = d.target;
    j["count"] = d.count;
    j["config_fingerprint"] = config_fingerprint;
    j["mean_pos"] = to_json(d.mean_pos);
    j["mean_neg"] = to_json(d.mean_neg);
    j["delta"] = to_json(d.delta);
    write_text_atomic(path, j.dump(2) + "\n");
}

inline DeltaC load_delta_c(const std::filesystem::path& path) {
    const nlohmann::json j = read_json_file(path);
    if (j.value("kind", "") != "qkdec_delta_c")
        throw SchemaError("not a delta-c file: " + path.string());
    DeltaC d;
    d.target = j.at("target").get<std::string>();
    d.count = j.at("count").get<std::size_t>();
    d.mean_pos = matrix_from_json(j.at("mean_pos"));
    d.mean_neg = matrix_from_json(j.at("mean_neg"));
    d.delta = matrix_from_json(j.at("delta"));
    return d;
}

inline nlohmann::json to_json(const SubspaceBasis& b) {
    return {{"rank", b.rank},
            {"energy_threshold", b.energy_threshold},
            {"singular_values", b.singular_values},
            {"query_basis", to_json(b.query_basis)},
            {"key_basis", to_json(b.key_basis)}};
}

inline SubspaceBasis basis_from_json(const nlohmann::json& j) {
    SubspaceBasis b;
    b.rank = j.at("rank").get<std::size_t>();
    b.energy_threshold = j.at("energy_threshold").get<double>();
    b.singular_values = j.at("singular_values").get<Vector>();
    b.query_basis = matrix_from_json(j.at("query_basis"));
    b.key_basis = matrix_from_json(j.at("key_basis"));
    return b;
}

/// Round-trip-exact decimal rendering for CSV cells.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string training_report_csv(const TrainingReport& report) {
    std::string csv = "batch,train_loss,val_loss,val_accuracy\n";
    for (const auto& p : report.curve) {
        csv += std::to_string(p.batch);
        csv += ',';
        csv += format_double(p.train_loss);
        csv += ',';
        csv += format_double(p.val_loss);
        csv += ',';
        csv += format_double(p.val_accuracy);
        csv += '\n';
    }
    return csv;
}

/// JSONL dataset of generated samples, one sample per line, for replay.
inline void write_samples_jsonl(const std::filesystem::path& path,
                                const std::vector<Sample>& samples) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open for writing: " + path.string());
    for (const Sample& s : samples) {
        nlohmann::json j;
        j["payload_embeds"] = to_json(s.payload_embeds);
        j["selector_embed"] = s.selector_embed;
        j["target_index"] = s.target_index;
        j["labels"] = s.payload_labels;
        j["latents1"] = to_json(s.latents1);
        j["latents2"] = to_json(s.latents2);
        j["noise"] = to_json(s.noise);
        j["selector_noise"] = s.selector_noise;
        out << j.dump() << '\n';
    }
}

inline std::vector<Sample> read_samples_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open: " + path.string());
    std::vector<Sample> samples;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ParseError("sample line: invalid JSON", line_no);
        Sample s;
        s.payload_embeds = matrix_from_json(j.at("payload_embeds"));
        s.selector_embed = j.at("selector_embed").get<Vector>();
        s.target_index = j.at("target_index").get<std::size_t>();
        s.payload_labels = j.at("labels").get<std::vector<int>>();
        s.latents1 = matrix_from_json(j.at("latents1"));
        s.latents2 = matrix_from_json(j.at("latents2"));
        s.noise = matrix_from_json(j.at("noise"));
        s.selector_noise = j.at("selector_noise").get<Vector>();
        samples.push_back(std::move(s));
    }
    return samples;
}

} // namespace qkdec
