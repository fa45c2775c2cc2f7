#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "slotseg/data.hpp"
#include "slotseg/nn.hpp"

namespace slotseg {

struct EncoderConfig {
    int action_vocab_size = 0;  // A
    int obs_dim = 0;            // D_obs
    int d_model = 128;          // D_enc
    int num_heads = 8;
    int num_layers = 1;

    void validate() const {
        if (action_vocab_size < 2) throw ConfigError("encoder: action vocabulary too small");
        if (obs_dim < 1) throw ConfigError("encoder: obs_dim must be >= 1");
        if (d_model < 1) throw ConfigError("encoder: d_model must be >= 1");
        if (num_heads < 1 || d_model % num_heads != 0)
            throw ConfigError("encoder: d_model must be divisible by num_heads");
        if (num_layers < 0) throw ConfigError("encoder: num_layers must be >= 0");
    }
};

// Fixed sinusoidal positional encoding, (L, D):
//   pe[l, 2i]   = sin(l / 10000^(2i/D))
//   pe[l, 2i+1] = cos(l / 10000^(2i/D))
inline Tensor sinusoidal_pe(int L, int D) {
    if (L < 1 || D < 1) throw ShapeError("sinusoidal_pe: dimensions must be positive");
    if (D % 2 != 0) throw ConfigError("sinusoidal_pe: dimension must be even, got " + std::to_string(D));
    Tensor pe({L, D});
    for (int l = 0; l < L; ++l)
        for (int j = 0; j < D; ++j) {
            const int i2 = j - (j % 2);
            const double angle =
                l / std::pow(10000.0, static_cast<double>(i2) / static_cast<double>(D));
            pe(l, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    return pe;
}

inline int ffn_hidden(int d_model) { return 4 * d_model; }

inline void init_encoder(ParamRegistry& reg, const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    reg.add("encoder.embed", xavier_uniform(cfg.action_vocab_size, cfg.d_model, rng));
    init_linear(reg, "encoder.obs", cfg.obs_dim, cfg.d_model, rng);
    init_mlp(reg, "encoder.fuse", 2 * cfg.d_model, cfg.d_model, cfg.d_model, rng);
    for (int n = 0; n < cfg.num_layers; ++n)
        init_transformer_layer(reg, "encoder.layer" + std::to_string(n), cfg.d_model,
                               ffn_hidden(cfg.d_model), rng);
    init_linear(reg, "encoder.pos", cfg.d_model, cfg.d_model, rng);
}

// Per-timestep features (L, D_enc): fused action/observation embeddings with
// sinusoidal positions, passed through the Transformer stack, then shifted by
// a learned positional correction generated from the sinusoidal table.
inline Var encode(Graph& g, const ParamRegistry& reg, const EncoderConfig& cfg,
                  const std::vector<int>& actions, const Tensor& obs) {
    const int L = static_cast<int>(actions.size());
    if (L == 0) throw ShapeError("encode: empty action sequence");
    if (obs.rank() != 2 || obs.rows() != L || obs.cols() != cfg.obs_dim)
        throw ShapeError("encode: observations " + obs.describe() + " do not match " +
                         std::to_string(L) + " timesteps of dim " + std::to_string(cfg.obs_dim));
    Var za = g.embedding_lookup(g.param(reg, "encoder.embed"), actions);
    Var zo = linear(g, g.constant(obs), bind_linear(g, reg, "encoder.obs"));
    Var zao = mlp(g, g.concat_cols({za, zo}), bind_mlp(g, reg, "encoder.fuse"));
    Var pe = g.constant(sinusoidal_pe(L, cfg.d_model));
    Var x = g.add(zao, pe);
    for (int n = 0; n < cfg.num_layers; ++n)
        x = transformer_layer(
            g, x, bind_transformer_layer(g, reg, "encoder.layer" + std::to_string(n), cfg.num_heads));
    Var p_learn = linear(g, pe, bind_linear(g, reg, "encoder.pos"));
    return g.add(x, p_learn);
}

inline Tensor obs_tensor(const Trajectory& t) {
    const int L = t.length();
    const int D = L > 0 ? static_cast<int>(t.observations[0].size()) : 0;
    Tensor obs({L, D});
    for (int l = 0; l < L; ++l)
        for (int j = 0; j < D; ++j) obs(l, j) = t.observations[static_cast<size_t>(l)][static_cast<size_t>(j)];
    return obs;
}

inline Var encode(Graph& g, const ParamRegistry& reg, const EncoderConfig& cfg,
                  const Trajectory& traj) {
    return encode(g, reg, cfg, traj.actions, obs_tensor(traj));
}

}  // namespace slotseg
