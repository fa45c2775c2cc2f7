#pragma once

#include <string>
#include <vector>

#include "slotseg/autodiff.hpp"
#include "slotseg/common.hpp"

namespace slotseg {

// Xavier/Glorot uniform initialization for a (fan_in, fan_out) weight matrix.
inline Tensor xavier_uniform(int fan_in, int fan_out, Rng& rng) {
    Tensor w({fan_in, fan_out});
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& x : w.v) x = rng.uniform(-bound, bound);
    return w;
}

// ---- linear ----

struct LinearParams {
    Var w;  // (in, out)
    Var b;  // (out), invalid when bias-free
};

inline void init_linear(ParamRegistry& reg, const std::string& prefix, int in, int out, Rng& rng,
                        bool bias = true) {
    reg.add(prefix + ".w", xavier_uniform(in, out, rng));
    if (bias) reg.add(prefix + ".b", Tensor({out}));
}

inline LinearParams bind_linear(Graph& g, const ParamRegistry& reg, const std::string& prefix) {
    LinearParams p;
    p.w = g.param(reg, prefix + ".w");
    if (reg.has(prefix + ".b")) p.b = g.param(reg, prefix + ".b");
    return p;
}

inline Var linear(Graph& g, Var x, const LinearParams& p) {
    Var y = g.matmul(x, p.w);
    return p.b.valid() ? g.add_rowvec(y, p.b) : y;
}

// ---- two-layer MLP with ReLU ----

struct MlpParams {
    LinearParams l1, l2;
};

inline void init_mlp(ParamRegistry& reg, const std::string& prefix, int in, int hidden, int out,
                     Rng& rng) {
    init_linear(reg, prefix + ".l1", in, hidden, rng);
    init_linear(reg, prefix + ".l2", hidden, out, rng);
}

inline MlpParams bind_mlp(Graph& g, const ParamRegistry& reg, const std::string& prefix) {
    return {bind_linear(g, reg, prefix + ".l1"), bind_linear(g, reg, prefix + ".l2")};
}

inline Var mlp(Graph& g, Var x, const MlpParams& p) {
    return linear(g, g.relu(linear(g, x, p.l1)), p.l2);
}

// ---- layer norm ----

struct LayerNormParams {
    Var gamma, beta;
};

inline void init_layer_norm(ParamRegistry& reg, const std::string& prefix, int n) {
    reg.add(prefix + ".gamma", Tensor::full({n}, 1.0));
    reg.add(prefix + ".beta", Tensor({n}));
}

inline LayerNormParams bind_layer_norm(Graph& g, const ParamRegistry& reg,
                                       const std::string& prefix) {
    return {g.param(reg, prefix + ".gamma"), g.param(reg, prefix + ".beta")};
}

inline Var layer_norm(Graph& g, Var x, const LayerNormParams& p) {
    return g.layer_norm(x, p.gamma, p.beta);
}

// ---- multi-head self-attention ----

struct AttnParams {
    LinearParams q, k, v, o;
    int num_heads = 1;
};

inline void init_attention(ParamRegistry& reg, const std::string& prefix, int d_model, Rng& rng) {
    init_linear(reg, prefix + ".q", d_model, d_model, rng);
    init_linear(reg, prefix + ".k", d_model, d_model, rng);
    init_linear(reg, prefix + ".v", d_model, d_model, rng);
    init_linear(reg, prefix + ".o", d_model, d_model, rng);
}

inline AttnParams bind_attention(Graph& g, const ParamRegistry& reg, const std::string& prefix,
                                 int num_heads) {
    AttnParams p;
    p.q = bind_linear(g, reg, prefix + ".q");
    p.k = bind_linear(g, reg, prefix + ".k");
    p.v = bind_linear(g, reg, prefix + ".v");
    p.o = bind_linear(g, reg, prefix + ".o");
    p.num_heads = num_heads;
    return p;
}

// Full (non-causal) self-attention over the rows of x: (L, D) -> (L, D).
inline Var multi_head_self_attention(Graph& g, Var x, const AttnParams& p) {
    const int d_model = g.value(x).cols();
    const int h = p.num_heads;
    if (h < 1 || d_model % h != 0)
        throw ShapeError("multi_head_self_attention: model dim " + std::to_string(d_model) +
                         " not divisible by " + std::to_string(h) + " heads");
    const int dh = d_model / h;
    Var q = linear(g, x, p.q);
    Var k = linear(g, x, p.k);
    Var v = linear(g, x, p.v);
    std::vector<Var> heads;
    heads.reserve(static_cast<size_t>(h));
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int i = 0; i < h; ++i) {
        Var qi = g.slice_cols(q, i * dh, (i + 1) * dh);
        Var ki = g.slice_cols(k, i * dh, (i + 1) * dh);
        Var vi = g.slice_cols(v, i * dh, (i + 1) * dh);
        Var scores = g.affine(g.matmul_nt(qi, ki), scale, 0.0);
        Var w = g.softmax(scores, 1);
        heads.push_back(g.matmul(w, vi));
    }
    Var cat = h == 1 ? heads[0] : g.concat_cols(heads);
    return linear(g, cat, p.o);
}

// ---- transformer encoder layer (post-norm) ----

struct TransformerLayerParams {
    AttnParams attn;
    LayerNormParams ln1, ln2;
    MlpParams ff;
};

inline void init_transformer_layer(ParamRegistry& reg, const std::string& prefix, int d_model,
                                   int d_ff, Rng& rng) {
    init_attention(reg, prefix + ".attn", d_model, rng);
    init_layer_norm(reg, prefix + ".ln1", d_model);
    init_layer_norm(reg, prefix + ".ln2", d_model);
    init_mlp(reg, prefix + ".ff", d_model, d_ff, d_model, rng);
}

inline TransformerLayerParams bind_transformer_layer(Graph& g, const ParamRegistry& reg,
                                                     const std::string& prefix, int num_heads) {
    TransformerLayerParams p;
    p.attn = bind_attention(g, reg, prefix + ".attn", num_heads);
    p.ln1 = bind_layer_norm(g, reg, prefix + ".ln1");
    p.ln2 = bind_layer_norm(g, reg, prefix + ".ln2");
    p.ff = bind_mlp(g, reg, prefix + ".ff");
    return p;
}

inline Var transformer_layer(Graph& g, Var x, const TransformerLayerParams& p) {
    Var a = multi_head_self_attention(g, x, p.attn);
    Var x1 = layer_norm(g, g.add(x, a), p.ln1);
    Var f = mlp(g, x1, p.ff);
    return layer_norm(g, g.add(x1, f), p.ln2);
}

// ---- GRU cell ----
//
// Combined-weight layout follows the r|z|n gate order:
//   r = sigmoid(x Wx[:, 0:D]  + bx[0:D]  + h Wh[:, 0:D]  + bh[0:D])
//   z = sigmoid(x Wx[:, D:2D] + bx[D:2D] + h Wh[:, D:2D] + bh[D:2D])
//   n = tanh   (x Wx[:, 2D:]  + bx[2D:]  + r * (h Wh[:, 2D:] + bh[2D:]))
//   h' = (1 - z) * n + z * h

struct GruParams {
    Var wx;  // (in, 3*hidden)
    Var wh;  // (hidden, 3*hidden)
    Var bx;  // (3*hidden)
    Var bh;  // (3*hidden)
};

inline void init_gru(ParamRegistry& reg, const std::string& prefix, int in, int hidden, Rng& rng) {
    reg.add(prefix + ".wx", xavier_uniform(in, 3 * hidden, rng));
    reg.add(prefix + ".wh", xavier_uniform(hidden, 3 * hidden, rng));
    reg.add(prefix + ".bx", Tensor({3 * hidden}));
    reg.add(prefix + ".bh", Tensor({3 * hidden}));
}

inline GruParams bind_gru(Graph& g, const ParamRegistry& reg, const std::string& prefix) {
    return {g.param(reg, prefix + ".wx"), g.param(reg, prefix + ".wh"),
            g.param(reg, prefix + ".bx"), g.param(reg, prefix + ".bh")};
}

inline Var gru_cell(Graph& g, Var state, Var inp, const GruParams& p) {
    const int d = g.value(state).cols();
    Var xp = g.add_rowvec(g.matmul(inp, p.wx), p.bx);
    Var hp = g.add_rowvec(g.matmul(state, p.wh), p.bh);
    Var r = g.sigmoid(g.add(g.slice_cols(xp, 0, d), g.slice_cols(hp, 0, d)));
    Var z = g.sigmoid(g.add(g.slice_cols(xp, d, 2 * d), g.slice_cols(hp, d, 2 * d)));
    Var n = g.tanh(g.add(g.slice_cols(xp, 2 * d, 3 * d), g.mul(r, g.slice_cols(hp, 2 * d, 3 * d))));
    return g.add(g.mul(g.affine(z, -1.0, 1.0), n), g.mul(z, state));
}

// ---- weighted mean ----
//
// weights: (L, K), values: (L, D) -> (K, D). Each output row k is the mean of
// the value rows weighted by column k of (weights + eps), normalized over L.
inline Var weighted_mean(Graph& g, Var weights, Var values, double eps) {
    Var wn = g.normalize_sum(g.affine(weights, 1.0, eps), 0);
    return g.matmul_tn(wn, values);
}

}  // namespace slotseg
