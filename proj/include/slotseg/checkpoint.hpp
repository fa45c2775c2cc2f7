#pragma once

#include <cstring>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "slotseg/config.hpp"
#include "slotseg/params.hpp"

namespace slotseg {

// A checkpoint is a JSON manifest (prefix.json) plus a raw binary blob
// (prefix.bin) holding, in registry order, every parameter tensor followed by
// the Adam first and second moments, as little-endian IEEE-754 doubles.
// Round-tripping is bit-exact.

inline constexpr char kBlobMagic[9] = "SLOTSEG1";

struct CheckpointMeta {
    int epoch = 0;
    double val_score = 0.0;
    int64_t adam_steps = 0;
    ModelConfig model;
};

namespace detail {

inline void write_doubles(std::ofstream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void read_doubles(std::ifstream& in, std::vector<double>& v) {
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw IoError("checkpoint blob truncated");
}

}  // namespace detail

inline void save_checkpoint(const std::string& prefix, const ParamRegistry& reg,
                            const AdamOptimizer& opt, const CheckpointMeta& meta) {
    nlohmann::json params = nlohmann::json::array();
    size_t scalars = 0;
    for (int i = 0; i < reg.count(); ++i) {
        params.push_back({{"name", reg.name(i)}, {"shape", reg.value(i).shape}});
        scalars += reg.value(i).v.size();
    }
    nlohmann::json manifest = {
        {"kind", "checkpoint"},
        {"epoch", meta.epoch},
        {"val_score", meta.val_score},
        {"config", model_config_json(meta.model)},
        {"config_hash", to_hex(config_hash(meta.model))},
        {"params", params},
        {"adam", {{"steps", meta.adam_steps}}},
        {"blob_bytes", sizeof(kBlobMagic) - 1 + 3 * scalars * sizeof(double)},
    };

    std::ofstream mf(prefix + ".json");
    if (!mf) throw IoError("cannot write checkpoint manifest " + prefix + ".json");
    mf << manifest.dump(2) << "\n";

    std::ofstream bf(prefix + ".bin", std::ios::binary);
    if (!bf) throw IoError("cannot write checkpoint blob " + prefix + ".bin");
    bf.write(kBlobMagic, sizeof(kBlobMagic) - 1);
    for (int i = 0; i < reg.count(); ++i) detail::write_doubles(bf, reg.value(i).v);
    for (const Tensor& t : opt.first_moment()) detail::write_doubles(bf, t.v);
    for (const Tensor& t : opt.second_moment()) detail::write_doubles(bf, t.v);
    if (!bf) throw IoError("short write on checkpoint blob " + prefix + ".bin");
}

// Reads the manifest only; used to reconstruct the model before loading
// weights.
inline CheckpointMeta load_checkpoint_meta(const std::string& prefix) {
    std::ifstream mf(prefix + ".json");
    if (!mf) throw IoError("cannot open checkpoint manifest " + prefix + ".json");
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint manifest " + prefix + ".json is not valid JSON: " + e.what());
    }
    if (manifest.value("kind", "") != std::string("checkpoint"))
        throw IoError("not a checkpoint manifest: " + prefix + ".json");
    CheckpointMeta meta;
    meta.epoch = manifest.at("epoch").get<int>();
    meta.val_score = manifest.at("val_score").get<double>();
    meta.adam_steps = manifest.at("adam").at("steps").get<int64_t>();
    meta.model = model_config_from_json(manifest.at("config"));
    if (manifest.at("config_hash").get<std::string>() != to_hex(config_hash(meta.model)))
        throw IoError("checkpoint config hash mismatch in " + prefix + ".json");
    return meta;
}

// Restores parameters and optimizer state into a registry/optimizer pair that
// was initialized with the manifest's model config.
inline CheckpointMeta load_checkpoint(const std::string& prefix, ParamRegistry& reg,
                                      AdamOptimizer& opt) {
    CheckpointMeta meta = load_checkpoint_meta(prefix);

    std::ifstream mf(prefix + ".json");
    nlohmann::json manifest;
    mf >> manifest;
    const nlohmann::json& params = manifest.at("params");
    if (static_cast<int>(params.size()) != reg.count())
        throw ShapeError("checkpoint has " + std::to_string(params.size()) +
                         " parameters, registry has " + std::to_string(reg.count()));
    for (int i = 0; i < reg.count(); ++i) {
        const nlohmann::json& p = params.at(static_cast<size_t>(i));
        if (p.at("name").get<std::string>() != reg.name(i))
            throw ShapeError("checkpoint parameter " + std::to_string(i) + " is \"" +
                             p.at("name").get<std::string>() + "\", registry has \"" +
                             reg.name(i) + "\"");
        if (p.at("shape").get<std::vector<int>>() != reg.value(i).shape)
            throw ShapeError("checkpoint shape mismatch for " + reg.name(i));
    }

    std::ifstream bf(prefix + ".bin", std::ios::binary);
    if (!bf) throw IoError("cannot open checkpoint blob " + prefix + ".bin");
    char magic[sizeof(kBlobMagic) - 1];
    bf.read(magic, sizeof(magic));
    if (!bf || std::memcmp(magic, kBlobMagic, sizeof(magic)) != 0)
        throw IoError("bad checkpoint blob magic in " + prefix + ".bin");
    for (int i = 0; i < reg.count(); ++i) detail::read_doubles(bf, reg.value(i).v);
    std::vector<Tensor> m, v;
    for (int i = 0; i < reg.count(); ++i) {
        m.emplace_back(reg.value(i).shape);
        detail::read_doubles(bf, m.back().v);
    }
    for (int i = 0; i < reg.count(); ++i) {
        v.emplace_back(reg.value(i).shape);
        detail::read_doubles(bf, v.back().v);
    }
    opt.restore(meta.adam_steps, std::move(m), std::move(v));
    return meta;
}

}  // namespace slotseg
