#pragma once

#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <set>
#include <string>
#include <vector>

#include "slotseg/data.hpp"
#include "slotseg/model.hpp"

namespace slotseg {

// Training-loop hyperparameters. Structural model fields mirror ModelConfig;
// the action vocabulary and observation width always come from the dataset.
struct TrainConfig {
    int batch_size = 64;
    double learning_rate = 5e-4;
    double beta = 0.1;  // weight of the halting KL term
    int d_model = 128;
    int num_heads = 8;
    int num_layers = 1;
    int d_slots = 128;
    int num_slots = 5;   // slot budget K, must cover the data's segment counts
    int iterations = 1;  // grouping iterations T
    double init_std = 1.0;
    int max_epochs = 100;
    int patience = 10;  // epochs without validation improvement before stopping
    uint64_t seed = 1;
    int num_threads = 1;
    int boundary_tolerance = 1;
    double t_on = 0.8;
    std::string train_file = "train.jsonl";
    std::string valid_file = "valid.jsonl";
    std::string test_file = "test.jsonl";

    void validate() const {
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (!(learning_rate >= 0.0)) throw ConfigError("train: learning_rate must be >= 0");
        if (!(beta >= 0.0)) throw ConfigError("train: beta must be >= 0");
        if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
        if (patience < 1) throw ConfigError("train: patience must be >= 1");
        if (num_threads < 1) throw ConfigError("train: num_threads must be >= 1");
        if (boundary_tolerance < 0) throw ConfigError("train: boundary_tolerance must be >= 0");
        if (!(t_on > 0.0 && t_on < 1.0)) throw ConfigError("train: t_on must be in (0,1)");
        model(2, 1).validate();
    }

    ModelConfig model(int action_vocab_size, int obs_dim) const {
        return ModelConfig{action_vocab_size, obs_dim, d_model,    num_heads, num_layers,
                           d_slots,           num_slots, iterations, init_std};
    }
};

struct FullConfig {
    GenerateConfig generate;
    uint64_t generate_seed = 7;
    TrainConfig train;
};

namespace detail {

inline void expect_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                        const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: " + where + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("config: unknown key \"" + it.key() + "\" in " + where);
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config: bad value for \"") + key + "\": " + e.what());
        }
    }
}

}  // namespace detail

inline GenerateConfig parse_generate_config(const nlohmann::json& j, uint64_t* seed_out = nullptr) {
    detail::expect_keys(j,
                        {"seed", "num_train", "num_valid", "num_test", "action_vocab_size",
                         "obs_dim", "num_delimiters", "num_obs_types", "ordinal_scale",
                         "phase_content", "lock_content", "constant_content", "flag_scale",
                         "segment_count_min", "segment_count_max",
                         "segment_count_weights", "segment_len_min", "segment_len_max",
                         "segment_len_weights", "obs_noise"},
                        "generate");
    GenerateConfig g;
    detail::maybe(j, "num_train", g.num_train);
    detail::maybe(j, "num_valid", g.num_valid);
    detail::maybe(j, "num_test", g.num_test);
    detail::maybe(j, "action_vocab_size", g.action_vocab_size);
    detail::maybe(j, "obs_dim", g.obs_dim);
    detail::maybe(j, "num_delimiters", g.num_delimiters);
    detail::maybe(j, "num_obs_types", g.num_obs_types);
    detail::maybe(j, "ordinal_scale", g.ordinal_scale);
    detail::maybe(j, "phase_content", g.phase_content);
    detail::maybe(j, "lock_content", g.lock_content);
    detail::maybe(j, "constant_content", g.constant_content);
    detail::maybe(j, "flag_scale", g.flag_scale);
    detail::maybe(j, "segment_count_min", g.segment_count_min);
    detail::maybe(j, "segment_count_max", g.segment_count_max);
    detail::maybe(j, "segment_count_weights", g.segment_count_weights);
    detail::maybe(j, "segment_len_min", g.segment_len_min);
    detail::maybe(j, "segment_len_max", g.segment_len_max);
    detail::maybe(j, "segment_len_weights", g.segment_len_weights);
    detail::maybe(j, "obs_noise", g.obs_noise);
    if (seed_out) detail::maybe(j, "seed", *seed_out);
    g.validate();
    return g;
}

inline TrainConfig parse_train_config(const nlohmann::json& j) {
    detail::expect_keys(j,
                        {"batch_size", "learning_rate", "beta", "d_model", "num_heads",
                         "num_layers", "d_slots", "num_slots", "iterations", "init_std",
                         "max_epochs", "patience", "seed", "num_threads", "boundary_tolerance",
                         "t_on", "train_file", "valid_file", "test_file"},
                        "train");
    TrainConfig t;
    detail::maybe(j, "batch_size", t.batch_size);
    detail::maybe(j, "learning_rate", t.learning_rate);
    detail::maybe(j, "beta", t.beta);
    detail::maybe(j, "d_model", t.d_model);
    detail::maybe(j, "num_heads", t.num_heads);
    detail::maybe(j, "num_layers", t.num_layers);
    detail::maybe(j, "d_slots", t.d_slots);
    detail::maybe(j, "num_slots", t.num_slots);
    detail::maybe(j, "iterations", t.iterations);
    detail::maybe(j, "init_std", t.init_std);
    detail::maybe(j, "max_epochs", t.max_epochs);
    detail::maybe(j, "patience", t.patience);
    detail::maybe(j, "seed", t.seed);
    detail::maybe(j, "num_threads", t.num_threads);
    detail::maybe(j, "boundary_tolerance", t.boundary_tolerance);
    detail::maybe(j, "t_on", t.t_on);
    detail::maybe(j, "train_file", t.train_file);
    detail::maybe(j, "valid_file", t.valid_file);
    detail::maybe(j, "test_file", t.test_file);
    t.validate();
    return t;
}

// Single JSON config with optional "generate" and "train" sections; unknown
// keys anywhere are rejected. SLOTSEG_SEED, when set, overrides both seeds.
inline FullConfig parse_config(const nlohmann::json& j) {
    detail::expect_keys(j, {"generate", "train"}, "top level");
    FullConfig cfg;
    if (j.contains("generate")) cfg.generate = parse_generate_config(j.at("generate"), &cfg.generate_seed);
    if (j.contains("train")) cfg.train = parse_train_config(j.at("train"));
    if (const char* env = std::getenv("SLOTSEG_SEED")) {
        try {
            size_t pos = 0;
            uint64_t s = std::stoull(env, &pos);
            if (pos != std::string(env).size()) throw std::invalid_argument("trailing junk");
            cfg.train.seed = s;
            cfg.generate_seed = s;
        } catch (const std::exception&) {
            throw ConfigError(std::string("SLOTSEG_SEED is not an unsigned integer: ") + env);
        }
    }
    return cfg;
}

inline FullConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
    }
    return parse_config(j);
}

inline nlohmann::json model_config_json(const ModelConfig& m) {
    return {{"action_vocab_size", m.action_vocab_size},
            {"obs_dim", m.obs_dim},
            {"d_model", m.d_model},
            {"num_heads", m.num_heads},
            {"num_layers", m.num_layers},
            {"d_slots", m.d_slots},
            {"num_slots", m.num_slots},
            {"iterations", m.iterations},
            {"init_std", m.init_std}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    detail::expect_keys(j,
                        {"action_vocab_size", "obs_dim", "d_model", "num_heads", "num_layers",
                         "d_slots", "num_slots", "iterations", "init_std"},
                        "model");
    ModelConfig m;
    detail::maybe(j, "action_vocab_size", m.action_vocab_size);
    detail::maybe(j, "obs_dim", m.obs_dim);
    detail::maybe(j, "d_model", m.d_model);
    detail::maybe(j, "num_heads", m.num_heads);
    detail::maybe(j, "num_layers", m.num_layers);
    detail::maybe(j, "d_slots", m.d_slots);
    detail::maybe(j, "num_slots", m.num_slots);
    detail::maybe(j, "iterations", m.iterations);
    detail::maybe(j, "init_std", m.init_std);
    m.validate();
    return m;
}

inline uint64_t config_hash(const ModelConfig& m) {
    return fnv1a64(model_config_json(m).dump());
}

}  // namespace slotseg
