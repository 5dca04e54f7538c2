#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qkdec/contrastive.hpp"
#include "qkdec/decompose.hpp"
#include "qkdec/errors.hpp"
#include "qkdec/linalg.hpp"
#include "qkdec/matrix.hpp"
#include "qkdec/rng.hpp"

namespace qkdec {

inline constexpr int kDumpSchemaVersion = 1;

using LabelMap = std::map<std::string, std::string>;

/// Provenance of an externally captured activation vector.
struct SourceInfo {
    std::string model;
    int layer = -1;
    int head = -1;

    bool operator==(const SourceInfo&) const = default;
};

/// One labeled query or key vector from an activation dump. labels must
/// contain prompt_id; other keys (category, order_index, entity,
/// counterfactual_of, ...) depend on the pairing rule in use.
struct ActivationRecord {
    std::string role; // "query" | "key"
    Vector vec;
    LabelMap labels;
    SourceInfo source;

    bool operator==(const ActivationRecord&) const = default;
};

struct DumpFile {
    int schema_version = kDumpSchemaVersion;
    std::size_t head_dim = 0;
    std::vector<ActivationRecord> records;
};

/// How to turn labeled records into contrast triplets. positive/negative see
/// the query's labels and a candidate key's labels; they must never both
/// accept the same pair. held_fixed lists label keys on which the chosen
/// key pair must agree. With counterfactual_negatives, negative keys are
/// taken from the prompt whose counterfactual_of label points at the query's
/// prompt instead of from the query's own prompt.
struct PairRule {
    std::string name;
    std::function<bool(const LabelMap&)> select_query;
    std::function<bool(const LabelMap&, const LabelMap&)> positive;
    std::function<bool(const LabelMap&, const LabelMap&)> negative;
    std::vector<std::string> held_fixed;
    bool counterfactual_negatives = false;
};

struct PairingStats {
    std::size_t queries = 0;
    std::size_t skipped = 0;
    std::size_t triplets = 0;
};

namespace detail {

inline nlohmann::json record_to_json(const ActivationRecord& r) {
    nlohmann::json j;
    j["role"] = r.role;
    j["vector"] = r.vec;
    j["labels"] = r.labels;
    j["source"] = {{"model", r.source.model}, {"layer", r.source.layer}, {"head", r.source.head}};
    return j;
}

} // namespace detail

inline void write_dump(const std::filesystem::path& path, const DumpFile& dump) {
    std::ofstream out(path);
    if (!out) throw Error("write_dump: cannot open " + path.string());
    nlohmann::json header;
    header["schema_version"] = dump.schema_version;
    header["d_head"] = dump.head_dim;
    out << header.dump() << '\n';
    for (const ActivationRecord& r : dump.records) out << detail::record_to_json(r).dump() << '\n';
}

/// Reads a JSONL dump. Line 1 is the header; every following line is one
/// record. float32-precision vectors widen to double transparently. An empty
/// file yields an empty dump.
inline DumpFile load_dump(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("load_dump: cannot open " + path.string());

    DumpFile dump;
    std::string line;
    std::size_t line_no = 0;

    // Header line (absent only in a fully empty file).
    if (!std::getline(in, line)) return dump;
    ++line_no;
    nlohmann::json header;
    if (line.find_first_not_of(" \t\r") == std::string::npos)
        throw ParseError("dump header: blank line", line_no);
    header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded() || !header.is_object())
        throw ParseError("dump header: invalid JSON", line_no);
    if (!header.contains("schema_version") || !header.contains("d_head"))
        throw ParseError("dump header: missing schema_version or d_head", line_no);
    dump.schema_version = header["schema_version"].get<int>();
    if (dump.schema_version != kDumpSchemaVersion)
        throw SchemaError("unsupported dump schema version " +
                          std::to_string(dump.schema_version));
    dump.head_dim = header["d_head"].get<std::size_t>();

    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw ParseError("dump record: invalid JSON", line_no);

        ActivationRecord r;
        if (!j.contains("role") || !j["role"].is_string())
            throw ParseError("dump record: missing field 'role'", line_no);
        r.role = j["role"].get<std::string>();
        if (r.role != "query" && r.role != "key")
            throw ParseError("dump record: role must be 'query' or 'key'", line_no);
        if (!j.contains("vector") || !j["vector"].is_array())
            throw ParseError("dump record: missing field 'vector'", line_no);
        r.vec = j["vector"].get<Vector>();
        if (!all_finite(r.vec))
            throw ParseError("dump record: non-finite vector entry", line_no);
        if (r.vec.size() != dump.head_dim)
            throw SchemaError("dump record at line " + std::to_string(line_no) +
                              ": vector length " + std::to_string(r.vec.size()) +
                              " != header d_head " + std::to_string(dump.head_dim));
        if (j.contains("labels")) {
            if (!j["labels"].is_object())
                throw ParseError("dump record: labels must be an object", line_no);
            r.labels = j["labels"].get<LabelMap>();
        }
        if (!r.labels.contains("prompt_id"))
            throw ParseError("dump record: missing field 'labels.prompt_id'", line_no);
        if (j.contains("source")) {
            const auto& s = j["source"];
            if (s.contains("model")) r.source.model = s["model"].get<std::string>();
            if (s.contains("layer")) r.source.layer = s["layer"].get<int>();
            if (s.contains("head")) r.source.head = s["head"].get<int>();
        }
        dump.records.push_back(std::move(r));
    }
    return dump;
}

namespace detail {

inline bool labels_agree(const LabelMap& a, const LabelMap& b,
                         const std::vector<std::string>& keys) {
    for (const std::string& k : keys) {
        const auto ia = a.find(k);
        const auto ib = b.find(k);
        const bool ha = ia != a.end();
        const bool hb = ib != b.end();
        if (ha != hb) return false;
        if (ha && ia->second != ib->second) return false;
    }
    return true;
}

} // namespace detail

/// Pairs every selected query with one positive and one negative key and
/// emits (q, k+, k-) triplets. Keys come from the query's own prompt (or the
/// counterfactual partner prompt for negatives, per the rule). When several
/// (k+, k-) pairs agree on the held-fixed labels, one pair is drawn uniformly.
inline std::vector<Triplet> build_triplets(const std::vector<ActivationRecord>& records,
                                           const PairRule& rule, Rng& rng,
                                           PairingStats* stats_out = nullptr) {
    // Group record indices by prompt, preserving file order.
    std::vector<std::string> prompt_order;
    std::map<std::string, std::vector<std::size_t>> by_prompt;
    std::map<std::string, std::string> counterfactual_for; // original -> partner prompt
    for (std::size_t i = 0; i < records.size(); ++i) {
        const std::string& pid = records[i].labels.at("prompt_id");
        auto [it, inserted] = by_prompt.try_emplace(pid);
        if (inserted) prompt_order.push_back(pid);
        it->second.push_back(i);
        const auto cf = records[i].labels.find("counterfactual_of");
        if (cf != records[i].labels.end()) counterfactual_for[cf->second] = pid;
    }

    PairingStats stats;
    std::vector<Triplet> out;
    for (const std::string& pid : prompt_order) {
        const std::vector<std::size_t>& members = by_prompt[pid];
        const std::vector<std::size_t>* negative_pool = &members;
        if (rule.counterfactual_negatives) {
            const auto partner = counterfactual_for.find(pid);
            negative_pool =
                partner != counterfactual_for.end() ? &by_prompt[partner->second] : nullptr;
        }
        for (std::size_t qi : members) {
            const ActivationRecord& q = records[qi];
            if (q.role != "query" || !rule.select_query(q.labels)) continue;
            ++stats.queries;

            std::vector<std::size_t> positives;
            for (std::size_t ki : members) {
                const ActivationRecord& k = records[ki];
                if (k.role != "key") continue;
                const bool pos = rule.positive(q.labels, k.labels);
                if (pos && !rule.counterfactual_negatives &&
                    rule.negative(q.labels, k.labels))
                    throw RuleError("pair rule '" + rule.name +
                                    "': positive and negative overlap on a key");
                if (pos) positives.push_back(ki);
            }
            std::vector<std::size_t> negatives;
            if (negative_pool != nullptr) {
                for (std::size_t ki : *negative_pool) {
                    const ActivationRecord& k = records[ki];
                    if (k.role != "key") continue;
                    if (rule.negative(q.labels, k.labels)) negatives.push_back(ki);
                }
            }

            std::vector<std::pair<std::size_t, std::size_t>> eligible;
            for (std::size_t pk : positives)
                for (std::size_t nk : negatives)
                    if (detail::labels_agree(records[pk].labels, records[nk].labels,
                                             rule.held_fixed))
                        eligible.emplace_back(pk, nk);
            if (eligible.empty()) {
                ++stats.skipped;
                continue;
            }
            const auto [pk, nk] = eligible[rng.bounded(eligible.size())];
            Triplet t;
            t.query = q.vec;
            t.key_pos = records[pk].vec;
            t.key_neg = records[nk].vec;
            out.push_back(std::move(t));
            ++stats.triplets;
        }
    }
    if (out.empty()) throw EmptyEstimateError("build_triplets: no triplets produced");
    if (stats_out != nullptr) *stats_out = stats;
    return out;
}

/// Joint feature basis from several per-category contrastive covariances:
/// each delta contributes its top singular vectors; the stacked query-side
/// and key-side collections are orthonormalized separately. Directions that
/// fall inside the span of earlier ones (residual below orth_tol) are
/// dropped, so duplicated deltas do not inflate the rank.
inline SubspaceBasis category_subspace(const std::vector<DeltaC>& deltas,
                                       double threshold = 0.99, double orth_tol = 1e-8) {
    if (deltas.empty()) throw EmptyEstimateError("category_subspace: no deltas");
    Matrix query_stack, key_stack;
    Vector stacked_values;
    for (const DeltaC& d : deltas) {
        const SubspaceBasis b = estimate_rank(d, threshold);
        if (query_stack.empty()) {
            query_stack = b.query_basis;
            key_stack = b.key_basis;
        } else {
            if (b.query_basis.rows() != query_stack.rows())
                throw SchemaError("category_subspace: head_dim mismatch across deltas");
            query_stack = hconcat(query_stack, b.query_basis);
            key_stack = hconcat(key_stack, b.key_basis);
        }
        for (std::size_t i = 0; i < b.rank; ++i) stacked_values.push_back(b.singular_values[i]);
    }
    Matrix q_orth = orthonormalize_columns(query_stack, orth_tol);
    Matrix k_orth = orthonormalize_columns(key_stack, orth_tol);
    const std::size_t rank = std::min(q_orth.cols(), k_orth.cols());

    SubspaceBasis joint;
    joint.rank = rank;
    joint.energy_threshold = threshold;
    std::sort(stacked_values.begin(), stacked_values.end(), std::greater<>());
    joint.singular_values = std::move(stacked_values);
    joint.query_basis = Matrix(q_orth.rows(), rank);
    joint.key_basis = Matrix(k_orth.rows(), rank);
    for (std::size_t i = 0; i < q_orth.rows(); ++i)
        for (std::size_t j = 0; j < rank; ++j) joint.query_basis(i, j) = q_orth(i, j);
    for (std::size_t i = 0; i < k_orth.rows(); ++i)
        for (std::size_t j = 0; j < rank; ++j) joint.key_basis(i, j) = k_orth(i, j);
    return joint;
}

} // namespace qkdec
