#pragma once

#include <string>
#include <utility>
#include <vector>

#include "slotseg/encoder.hpp"
#include "slotseg/nn.hpp"

namespace slotseg {

struct DecoderConfig {
    int action_vocab_size = 0;  // A
    int obs_dim = 0;
    int d_model = 128;
    int num_heads = 8;
    int d_slots = 128;

    void validate() const {
        if (action_vocab_size < 2) throw ConfigError("decoder: action vocabulary too small");
        if (obs_dim < 1) throw ConfigError("decoder: obs_dim must be >= 1");
        if (d_model < 1) throw ConfigError("decoder: d_model must be >= 1");
        if (num_heads < 1 || d_model % num_heads != 0)
            throw ConfigError("decoder: d_model must be divisible by num_heads");
        if (d_slots < 1) throw ConfigError("decoder: d_slots must be >= 1");
    }
};

inline void init_decoder(ParamRegistry& reg, const DecoderConfig& cfg, Rng& rng) {
    cfg.validate();
    init_linear(reg, "decoder.slot", cfg.d_slots, cfg.d_model, rng);
    init_linear(reg, "decoder.obs", cfg.obs_dim, cfg.d_model, rng);
    init_transformer_layer(reg, "decoder.layer0", cfg.d_model, ffn_hidden(cfg.d_model), rng);
    init_linear(reg, "decoder.head", cfg.d_model, cfg.action_vocab_size + 1, rng);
}

// Decode one slot against the observation sequence. The slot vector is
// broadcast along time, combined with projected observations and sinusoidal
// positions, refined by one Transformer layer, and mapped to A action logits
// plus one end-position logit per timestep. Action tokens are never inputs
// here: reconstruction must come from the slot.
inline std::pair<Var, Var> decode_slot(Graph& g, const ParamRegistry& reg,
                                       const DecoderConfig& cfg, Var slot_row,
                                       const Tensor& obs) {
    const Tensor& S = g.value(slot_row);
    if (!(S.rank() == 1 && S.shape[0] == cfg.d_slots) &&
        !(S.rank() == 2 && S.rows() == 1 && S.cols() == cfg.d_slots))
        throw ShapeError("decode_slot: slot " + S.describe() + " must have width " +
                         std::to_string(cfg.d_slots));
    if (obs.rank() != 2 || obs.cols() != cfg.obs_dim)
        throw ShapeError("decode_slot: observations " + obs.describe() + " must be (L, " +
                         std::to_string(cfg.obs_dim) + ")");
    const int L = obs.rows();
    if (L < 1) throw ShapeError("decode_slot: empty observation sequence");

    Var slot2d = S.rank() == 1 ? g.reshape(slot_row, {1, cfg.d_slots}) : slot_row;
    Var sp = g.repeat_rows(linear(g, slot2d, bind_linear(g, reg, "decoder.slot")), L);
    Var op = linear(g, g.constant(obs), bind_linear(g, reg, "decoder.obs"));
    Var x = g.add(g.add(sp, op), g.constant(sinusoidal_pe(L, cfg.d_model)));
    x = transformer_layer(g, x, bind_transformer_layer(g, reg, "decoder.layer0", cfg.num_heads));
    Var out = linear(g, x, bind_linear(g, reg, "decoder.head"));
    Var action_logits = g.slice_cols(out, 0, cfg.action_vocab_size);
    Var end_logits = g.reshape(
        g.slice_cols(out, cfg.action_vocab_size, cfg.action_vocab_size + 1), {L});
    return {action_logits, end_logits};
}

// Soft contiguous masks from per-slot end-position logits.
struct SegmentMasks {
    std::vector<Var> end_dists;  // (L) each, softmax over timesteps
    std::vector<Var> end_cdfs;   // (L) each, running sum of the distribution
    std::vector<Var> masks;      // (L) each, in [0,1]
};

// Per slot k (in order): end_dist = softmax(end_logits_k); end_cdf = cumsum;
// mask_upto_k = 1 - end_cdf; mask_k = mask_upto_k * (1 - mask_upto_{k-1}),
// with mask_upto_0 = 0. Later slots are suppressed wherever earlier slots
// still hold mass, which forces contiguous left-to-right segment layouts.
inline SegmentMasks generate_masks(Graph& g, const std::vector<Var>& end_logits) {
    if (end_logits.empty()) throw ShapeError("generate_masks: no slots");
    SegmentMasks out;
    Var upto_prev;
    for (size_t k = 0; k < end_logits.size(); ++k) {
        const Tensor& E = g.value(end_logits[k]);
        if (E.rank() != 1)
            throw ShapeError("generate_masks: end logits must be vectors, got " + E.describe());
        Var dist = g.softmax(end_logits[k], 0);
        Var cdf = g.cumsum(dist, 0);
        // The final cumulative entry can overshoot 1 by one ulp; clamping at
        // zero keeps every mask inside [0,1]. The clamp only binds where the
        // exact value is 0, so gradients are unchanged.
        Var upto = g.relu(g.affine(cdf, -1.0, 1.0));
        Var mask = k == 0 ? upto : g.mul(upto, g.affine(upto_prev, -1.0, 1.0));
        out.end_dists.push_back(dist);
        out.end_cdfs.push_back(cdf);
        out.masks.push_back(mask);
        upto_prev = upto;
    }
    return out;
}

// Masked sum of the first k slots' logits: sum_{k'<=k} mask_{k'} (*) logits_{k'},
// the mask broadcast across the action dimension. k is 1-based.
inline Var aggregate(Graph& g, const std::vector<Var>& masks, const std::vector<Var>& logits,
                     int k) {
    if (masks.size() != logits.size())
        throw ShapeError("aggregate: " + std::to_string(masks.size()) + " masks vs " +
                         std::to_string(logits.size()) + " logit sets");
    if (k < 1 || k > static_cast<int>(masks.size()))
        throw ConfigError("aggregate: k = " + std::to_string(k) + " outside 1.." +
                          std::to_string(masks.size()));
    Var acc;
    for (int i = 0; i < k; ++i) {
        Var term = g.mul_colvec(logits[static_cast<size_t>(i)], masks[static_cast<size_t>(i)]);
        acc = i == 0 ? term : g.add(acc, term);
    }
    return acc;
}

}  // namespace slotseg
