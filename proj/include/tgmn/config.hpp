#pragma once

#include "tgmn/common.hpp"
#include "tgmn/engine.hpp"
#include "tgmn/tgmn_model.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace tgmn {

/// Model family variants, cumulative from left to right: Base has no sequence
/// context, no decay, and no answer-status row; each step to the right turns
/// one more component on.
enum class Variant { base, sequence_context, forgetting, full };

inline const std::vector<std::pair<std::string, Variant>>& variant_names() {
    static const std::vector<std::pair<std::string, Variant>> names = {
        {"Base", Variant::base},
        {"TGMN-SC", Variant::sequence_context},
        {"TGMN-F", Variant::forgetting},
        {"TGMN", Variant::full},
    };
    return names;
}

inline std::string variant_name(Variant v) {
    for (const auto& [name, val] : variant_names())
        if (val == v) return name;
    throw argument_error("variant_name: unknown variant value");
}

inline Variant variant_from_name(const std::string& name) {
    for (const auto& [n, val] : variant_names())
        if (n == name) return val;
    throw argument_error("unknown variant '" + name +
                         "' (expected Base, TGMN-SC, TGMN-F, or TGMN)");
}

/// One experiment's worth of settings: model shape, optimization, fold
/// protocol, and file locations. Field defaults are the reference
/// configuration; JSON files and CLI flags override them (flag > file >
/// default).
struct RunConfig {
    // Model shape and behavior.
    std::int64_t d_k = 512;  // key width (question keys, KC keys, query rows)
    std::int64_t d_v = 512;  // value width (memory rows, GRU hidden)
    int window = 15;         // short-term context length S
    double gamma = 0.02;     // forgetting rate
    double tau = 1.0;        // addressing temperature
    double mask_quantile = 0.25;
    int gcn_layers = 2;
    int gru_layers = 2;
    double dropout = 0.2;     // recurrent dropout between GRU layers
    double sigma_init = 0.1;  // parameter and fresh-memory init scale
    std::string variant = "TGMN";

    // Optimization and protocol.
    double learning_rate = 1e-3;
    int batch_size = 32;
    int epochs = 100;
    int patience = 0;       // epochs without validation improvement before stopping (0 = off)
    double stop_auc = 0.0;  // stop once validation AUC reaches this (0 = off)
    int folds = 5;
    std::vector<std::uint64_t> seeds = {1};

    // Key pretraining (hop regression over the question-KC graph).
    int pretrain_hidden = 512;
    int pretrain_epochs = 100;
    int pretrain_pairs = 4000;  // sampled node pairs per node type

    // Paths. data_dir falls back to $TGMN_DATA_DIR, then ".".
    std::string data_dir;
    std::string dataset;       // canonical CSV to train/evaluate on
    std::string output_dir = "out";
    std::string text_vectors;  // node-vector file for Text embedding variants
};

namespace detail {

/// Field registry: JSON key -> reader + echo writer. One entry per RunConfig
/// field keeps load, save, and unknown-key rejection in lockstep.
struct ConfigField {
    std::function<void(RunConfig&, const nlohmann::json&)> read;
    std::function<nlohmann::json(const RunConfig&)> write;
};

inline const std::map<std::string, ConfigField>& config_fields() {
    using nlohmann::json;
    static const std::map<std::string, ConfigField> fields = {
        {"d_k", {[](RunConfig& c, const json& j) { c.d_k = j.get<std::int64_t>(); },
                 [](const RunConfig& c) { return json(c.d_k); }}},
        {"d_v", {[](RunConfig& c, const json& j) { c.d_v = j.get<std::int64_t>(); },
                 [](const RunConfig& c) { return json(c.d_v); }}},
        {"window", {[](RunConfig& c, const json& j) { c.window = j.get<int>(); },
                    [](const RunConfig& c) { return json(c.window); }}},
        {"gamma", {[](RunConfig& c, const json& j) { c.gamma = j.get<double>(); },
                   [](const RunConfig& c) { return json(c.gamma); }}},
        {"tau", {[](RunConfig& c, const json& j) { c.tau = j.get<double>(); },
                 [](const RunConfig& c) { return json(c.tau); }}},
        {"mask_quantile",
         {[](RunConfig& c, const json& j) { c.mask_quantile = j.get<double>(); },
          [](const RunConfig& c) { return json(c.mask_quantile); }}},
        {"gcn_layers", {[](RunConfig& c, const json& j) { c.gcn_layers = j.get<int>(); },
                        [](const RunConfig& c) { return json(c.gcn_layers); }}},
        {"gru_layers", {[](RunConfig& c, const json& j) { c.gru_layers = j.get<int>(); },
                        [](const RunConfig& c) { return json(c.gru_layers); }}},
        {"dropout", {[](RunConfig& c, const json& j) { c.dropout = j.get<double>(); },
                     [](const RunConfig& c) { return json(c.dropout); }}},
        {"sigma_init", {[](RunConfig& c, const json& j) { c.sigma_init = j.get<double>(); },
                        [](const RunConfig& c) { return json(c.sigma_init); }}},
        {"variant", {[](RunConfig& c, const json& j) { c.variant = j.get<std::string>(); },
                     [](const RunConfig& c) { return json(c.variant); }}},
        {"learning_rate",
         {[](RunConfig& c, const json& j) { c.learning_rate = j.get<double>(); },
          [](const RunConfig& c) { return json(c.learning_rate); }}},
        {"batch_size", {[](RunConfig& c, const json& j) { c.batch_size = j.get<int>(); },
                        [](const RunConfig& c) { return json(c.batch_size); }}},
        {"epochs", {[](RunConfig& c, const json& j) { c.epochs = j.get<int>(); },
                    [](const RunConfig& c) { return json(c.epochs); }}},
        {"patience", {[](RunConfig& c, const json& j) { c.patience = j.get<int>(); },
                      [](const RunConfig& c) { return json(c.patience); }}},
        {"stop_auc", {[](RunConfig& c, const json& j) { c.stop_auc = j.get<double>(); },
                      [](const RunConfig& c) { return json(c.stop_auc); }}},
        {"folds", {[](RunConfig& c, const json& j) { c.folds = j.get<int>(); },
                   [](const RunConfig& c) { return json(c.folds); }}},
        {"pretrain_hidden",
         {[](RunConfig& c, const json& j) { c.pretrain_hidden = j.get<int>(); },
          [](const RunConfig& c) { return json(c.pretrain_hidden); }}},
        {"pretrain_epochs",
         {[](RunConfig& c, const json& j) { c.pretrain_epochs = j.get<int>(); },
          [](const RunConfig& c) { return json(c.pretrain_epochs); }}},
        {"pretrain_pairs",
         {[](RunConfig& c, const json& j) { c.pretrain_pairs = j.get<int>(); },
          [](const RunConfig& c) { return json(c.pretrain_pairs); }}},
        {"seeds",
         {[](RunConfig& c, const json& j) { c.seeds = j.get<std::vector<std::uint64_t>>(); },
          [](const RunConfig& c) { return json(c.seeds); }}},
        {"data_dir", {[](RunConfig& c, const json& j) { c.data_dir = j.get<std::string>(); },
                      [](const RunConfig& c) { return json(c.data_dir); }}},
        {"dataset", {[](RunConfig& c, const json& j) { c.dataset = j.get<std::string>(); },
                     [](const RunConfig& c) { return json(c.dataset); }}},
        {"output_dir", {[](RunConfig& c, const json& j) { c.output_dir = j.get<std::string>(); },
                        [](const RunConfig& c) { return json(c.output_dir); }}},
        {"text_vectors",
         {[](RunConfig& c, const json& j) { c.text_vectors = j.get<std::string>(); },
          [](const RunConfig& c) { return json(c.text_vectors); }}},
    };
    return fields;
}

}  // namespace detail

inline std::vector<std::string> config_field_names() {
    std::vector<std::string> names;
    for (const auto& [name, f] : detail::config_fields()) names.push_back(name);
    return names;
}

/// Overlay a parsed JSON object onto cfg. Returns the field names that were
/// set. Unknown keys and wrong value types are rejected rather than ignored.
inline std::vector<std::string> apply_config_json(RunConfig& cfg, const nlohmann::json& j) {
    if (!j.is_object()) throw schema_error("config: top level must be a JSON object");
    std::vector<std::string> touched;
    const auto& fields = detail::config_fields();
    for (const auto& [key, value] : j.items()) {
        auto it = fields.find(key);
        if (it == fields.end()) throw schema_error("config: unknown field '" + key + "'");
        try {
            it->second.read(cfg, value);
        } catch (const nlohmann::json::exception& e) {
            throw format_error("config: bad value for '" + key + "': " + e.what());
        }
        touched.push_back(key);
    }
    return touched;
}

/// Fully-resolved echo of every field, defaults included.
inline nlohmann::json config_to_json(const RunConfig& cfg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, field] : detail::config_fields()) j[name] = field.write(cfg);
    return j;
}

struct LoadedConfig {
    RunConfig config;
    std::vector<std::string> file_fields;  // keys the file actually set
};

inline LoadedConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw data_error("config: cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw format_error("config: " + path.string() + ": " + e.what());
    }
    LoadedConfig out;
    out.file_fields = apply_config_json(out.config, j);
    return out;
}

inline void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw data_error("config: cannot write " + path.string());
    out << config_to_json(cfg).dump(2) << '\n';
}

/// Stable fingerprint of the fully-resolved configuration; nlohmann objects
/// serialize with sorted keys, so the dump is canonical.
inline std::string config_hash(const RunConfig& cfg) {
    auto h = fnv1a(config_to_json(cfg).dump());
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline void validate_run_config(const RunConfig& cfg) {
    require(cfg.d_k >= 1 && cfg.d_v >= 1, "config: dimensions must be >= 1");
    require(cfg.window >= 1, "config: window must be >= 1");
    require(cfg.gamma > 0.0 && cfg.gamma <= 1.0, "config: gamma must be in (0,1]");
    require(cfg.tau > 0.0 && cfg.tau <= 1.0, "config: tau must be in (0,1]");
    require(cfg.mask_quantile > 0.0 && cfg.mask_quantile < 1.0,
            "config: mask_quantile must be in (0,1)");
    require(cfg.gcn_layers >= 1 && cfg.gru_layers >= 1, "config: layer counts must be >= 1");
    require(cfg.dropout >= 0.0 && cfg.dropout < 1.0, "config: dropout must be in [0,1)");
    require(cfg.sigma_init > 0.0, "config: sigma_init must be positive");
    require(cfg.learning_rate >= 0.0, "config: learning_rate must be non-negative");
    require(cfg.batch_size >= 1, "config: batch_size must be >= 1");
    require(cfg.epochs >= 1, "config: epochs must be >= 1");
    require(cfg.patience >= 0, "config: patience must be >= 0");
    require(cfg.stop_auc >= 0.0 && cfg.stop_auc <= 1.0, "config: stop_auc must be in [0,1]");
    require(cfg.folds >= 2, "config: folds must be >= 2");
    require(!cfg.seeds.empty(), "config: seeds must be non-empty");
    require(cfg.pretrain_hidden >= 1, "config: pretrain_hidden must be >= 1");
    require(cfg.pretrain_epochs >= 0, "config: pretrain_epochs must be >= 0");
    require(cfg.pretrain_pairs >= 1, "config: pretrain_pairs must be >= 1");
    variant_from_name(cfg.variant);  // throws on unknown names
}

/// Dataset root: explicit config value, else $TGMN_DATA_DIR, else cwd.
inline std::filesystem::path resolve_data_dir(const RunConfig& cfg) {
    if (!cfg.data_dir.empty()) return cfg.data_dir;
    if (const char* env = std::getenv("TGMN_DATA_DIR"); env != nullptr && *env != '\0')
        return env;
    return ".";
}

inline void apply_variant(ModelHyper& hy, Variant v) {
    hy.use_sequence_context = v != Variant::base;
    hy.use_decay = v == Variant::forgetting || v == Variant::full;
    hy.use_status_encoding = v == Variant::full;
}

/// Model hyperparameters for a dataset of L questions and N KCs.
inline ModelHyper model_hyper(const RunConfig& cfg, Eigen::Index num_questions,
                              Eigen::Index num_kcs) {
    ModelHyper hy;
    hy.num_questions = num_questions;
    hy.num_kcs = num_kcs;
    hy.d_k = cfg.d_k;
    hy.d_v = cfg.d_v;
    hy.window = cfg.window;
    hy.gamma = cfg.gamma;
    hy.tau = cfg.tau;
    hy.mask_quantile = cfg.mask_quantile;
    hy.gcn_layers = cfg.gcn_layers;
    hy.gru_layers = cfg.gru_layers;
    apply_variant(hy, variant_from_name(cfg.variant));
    return hy;
}

inline TrainConfig train_config(const RunConfig& cfg, std::uint64_t seed) {
    TrainConfig tc;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.lr = cfg.learning_rate;
    tc.dropout = cfg.dropout;
    tc.patience = cfg.patience;
    tc.stop_auc = cfg.stop_auc;
    tc.seed = seed;
    return tc;
}

}  // namespace tgmn
