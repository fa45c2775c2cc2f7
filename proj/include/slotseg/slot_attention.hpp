#pragma once

#include <string>
#include <vector>

#include "slotseg/nn.hpp"

namespace slotseg {

struct SlotAttentionConfig {
    int d_in = 128;         // input feature width
    int d_slots = 128;      // slot width
    int num_slots = 5;      // K
    int iterations = 1;     // T
    double init_std = 1.0;  // scale of the shared init noise z ~ N(0, init_std^2)

    void validate() const {
        if (d_in < 1 || d_slots < 1) throw ConfigError("slot_attention: dims must be positive");
        if (num_slots < 1) throw ConfigError("slot_attention: need at least one slot");
        if (iterations < 1) throw ConfigError("slot_attention: need at least one iteration");
        if (!(init_std >= 0.0)) throw ConfigError("slot_attention: init_std must be >= 0");
    }
};

// In-graph states. `attn` is stored timestep-major (L, K) — the layout the
// weighted mean consumes; use attn_slots_major for the (K, L) export view.
// Each row of `attn` is a softmax over slots, so rows sum to 1.
struct SlotStates {
    Var slots;                    // (K, D_slots)
    Var attn;                     // (L, K), final iteration
    std::vector<Var> attn_iters;  // (L, K) per iteration, last == attn
};

inline Tensor transpose(const Tensor& t) {
    Tensor out({t.cols(), t.rows()});
    for (int i = 0; i < t.rows(); ++i)
        for (int j = 0; j < t.cols(); ++j) out(j, i) = t(i, j);
    return out;
}

inline void init_slot_attention(ParamRegistry& reg, const SlotAttentionConfig& cfg, Rng& rng) {
    cfg.validate();
    const int K = cfg.num_slots, D = cfg.d_slots;
    // Per-slot shift vectors start near the origin; scale vectors start at one
    // so the init distribution matches the shared noise until training
    // differentiates the slots.
    Tensor mu({K, D});
    const double std = 1.0 / std::sqrt(static_cast<double>(D));
    for (double& x : mu.v) x = std * rng.normal();
    reg.add("slot_attention.mu", std::move(mu));
    reg.add("slot_attention.sigma", Tensor::full({K, D}, 1.0));
    init_linear(reg, "slot_attention.key", cfg.d_in, D, rng, /*bias=*/false);
    init_linear(reg, "slot_attention.query", D, D, rng, /*bias=*/false);
    init_linear(reg, "slot_attention.value", cfg.d_in, D, rng, /*bias=*/false);
    init_gru(reg, "slot_attention.gru", D, D, rng);
    init_layer_norm(reg, "slot_attention.ln_slots", D);
    init_layer_norm(reg, "slot_attention.ln_mlp", D);
    init_mlp(reg, "slot_attention.mlp", D, D, D, rng);
}

// Shared init noise: one z ~ N(0, init_std^2 I) draw per slot.
inline Tensor draw_slot_noise(const SlotAttentionConfig& cfg, Rng& rng) {
    Tensor z({cfg.num_slots, cfg.d_slots});
    for (double& x : z.v) x = cfg.init_std * rng.normal();
    return z;
}

// slot_k = mu_k + sigma_k (*) z_k, differentiable in mu and sigma.
inline Var init_slots_var(Graph& g, const ParamRegistry& reg, const Tensor& noise) {
    return g.add(g.param(reg, "slot_attention.mu"),
                 g.mul(g.param(reg, "slot_attention.sigma"), g.constant(noise)));
}

inline Tensor init_slots(const ParamRegistry& reg, const SlotAttentionConfig& cfg, Rng& rng) {
    Graph g(false);
    return g.value(init_slots_var(g, reg, draw_slot_noise(cfg, rng)));
}

// Iterative grouping: T rounds of (layer-norm slots -> dot-product attention
// with softmax over slots -> eps-smoothed weighted mean over timesteps -> GRU
// update -> residual MLP). Inputs are (L, d_in) features.
inline SlotStates slot_attention(Graph& g, const ParamRegistry& reg,
                                 const SlotAttentionConfig& cfg, Var inputs,
                                 const Tensor& noise) {
    cfg.validate();
    const Tensor& X = g.value(inputs);
    if (X.rank() != 2 || X.cols() != cfg.d_in)
        throw ShapeError("slot_attention: inputs " + X.describe() + " do not match d_in " +
                         std::to_string(cfg.d_in));
    if (noise.shape != std::vector<int>{cfg.num_slots, cfg.d_slots})
        throw ShapeError("slot_attention: noise " + noise.describe() + " must be (K, D_slots)");

    LinearParams key_p = bind_linear(g, reg, "slot_attention.key");
    LinearParams query_p = bind_linear(g, reg, "slot_attention.query");
    LinearParams value_p = bind_linear(g, reg, "slot_attention.value");
    GruParams gru_p = bind_gru(g, reg, "slot_attention.gru");
    LayerNormParams ln_slots = bind_layer_norm(g, reg, "slot_attention.ln_slots");
    LayerNormParams ln_mlp = bind_layer_norm(g, reg, "slot_attention.ln_mlp");
    MlpParams mlp_p = bind_mlp(g, reg, "slot_attention.mlp");

    Var k = linear(g, inputs, key_p);    // (L, D)
    Var v = linear(g, inputs, value_p);  // (L, D)

    const double temp = 1.0 / std::sqrt(static_cast<double>(cfg.d_slots));
    const double eps = 1e-8;

    SlotStates out;
    Var slots = init_slots_var(g, reg, noise);
    for (int t = 0; t < cfg.iterations; ++t) {
        Var slots_prev = slots;
        Var normed = g.layer_norm(slots, ln_slots.gamma, ln_slots.beta);
        Var q = linear(g, normed, query_p);                        // (K, D)
        Var scores = g.affine(g.matmul_nt(k, q), temp, 0.0);       // (L, K)
        Var attn = g.softmax(scores, 1);                           // softmax over slots
        Var updates = weighted_mean(g, attn, v, eps);              // (K, D)
        slots = gru_cell(g, slots_prev, updates, gru_p);
        slots = g.add(slots, mlp(g, g.layer_norm(slots, ln_mlp.gamma, ln_mlp.beta), mlp_p));
        out.attn_iters.push_back(attn);
    }
    out.slots = slots;
    out.attn = out.attn_iters.back();
    g.check_finite(out.slots, "slot_attention slots");
    g.check_finite(out.attn, "slot_attention attention");
    return out;
}

}  // namespace slotseg
