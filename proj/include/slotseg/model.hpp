#pragma once

#include <vector>

#include "slotseg/decoder.hpp"
#include "slotseg/encoder.hpp"
#include "slotseg/ponder.hpp"
#include "slotseg/slot_attention.hpp"

namespace slotseg {

// Structural hyperparameters of the whole pipeline. Training-only knobs
// (learning rate, beta, batch size, ...) live in TrainConfig.
struct ModelConfig {
    int action_vocab_size = 0;  // A
    int obs_dim = 0;
    int d_model = 128;   // encoder/decoder feature width
    int num_heads = 8;   // attention heads
    int num_layers = 1;  // encoder transformer layers
    int d_slots = 128;   // slot width
    int num_slots = 5;   // K, the slot budget
    int iterations = 1;  // grouping iterations T
    double init_std = 1.0;

    EncoderConfig encoder() const {
        return EncoderConfig{action_vocab_size, obs_dim, d_model, num_heads, num_layers};
    }
    SlotAttentionConfig slots() const {
        return SlotAttentionConfig{d_model, d_slots, num_slots, iterations, init_std};
    }
    DecoderConfig decoder() const {
        return DecoderConfig{action_vocab_size, obs_dim, d_model, num_heads, d_slots};
    }
    void validate() const {
        encoder().validate();
        slots().validate();
        decoder().validate();
    }
};

inline void init_model(ParamRegistry& reg, const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    init_encoder(reg, cfg.encoder(), rng);
    init_slot_attention(reg, cfg.slots(), rng);
    init_decoder(reg, cfg.decoder(), rng);
}

struct ModelOutputs {
    Var encoded;       // (L, d_model)
    SlotStates slots;  // grouping result, attn is (L, K)
    std::vector<Var> action_logits;  // per slot, (L, A)
    std::vector<Var> end_logits;     // per slot, (L)
    SegmentMasks masks;              // contiguous soft masks
    std::vector<Var> agg_logits;     // aggregated logits for slot counts 1..K
    HaltingVars halting;
};

// Full pipeline on one trajectory: encode, group into slots, decode every
// slot, build contiguous masks, aggregate logits for every candidate slot
// count, and derive the halting distribution.
inline ModelOutputs model_forward(Graph& g, const ParamRegistry& reg, const ModelConfig& cfg,
                                  const std::vector<int>& actions, const Tensor& obs,
                                  const Tensor& noise) {
    ModelOutputs out;
    out.encoded = encode(g, reg, cfg.encoder(), actions, obs);
    out.slots = slot_attention(g, reg, cfg.slots(), out.encoded, noise);

    const DecoderConfig dec = cfg.decoder();
    for (int k = 0; k < cfg.num_slots; ++k) {
        Var row = g.slice_rows(out.slots.slots, k, k + 1);
        auto [logits, ends] = decode_slot(g, reg, dec, row, obs);
        out.action_logits.push_back(logits);
        out.end_logits.push_back(ends);
    }
    out.masks = generate_masks(g, out.end_logits);
    for (int k = 1; k <= cfg.num_slots; ++k)
        out.agg_logits.push_back(aggregate(g, out.masks.masks, out.action_logits, k));
    out.halting = halting_distribution(g, out.slots.slots);
    return out;
}

inline ModelOutputs model_forward(Graph& g, const ParamRegistry& reg, const ModelConfig& cfg,
                                  const Trajectory& traj, const Tensor& noise) {
    return model_forward(g, reg, cfg, traj.actions, obs_tensor(traj), noise);
}

// Eq.-style training objective for one trajectory: halting-weighted
// reconstruction plus the beta-scaled KL to the empirical prior.
inline LossVars model_loss(Graph& g, const ModelOutputs& out, const std::vector<int>& targets,
                           const Tensor& prior, double beta) {
    return ponder_loss(g, out.agg_logits, targets, out.halting.p_halt, prior, beta);
}

// Value-level extraction helpers for evaluation and inspection.
inline Tensor stack_rows(Graph& g, const std::vector<Var>& rows) {
    if (rows.empty()) throw ShapeError("stack_rows: no rows");
    const int L = g.value(rows[0]).shape[0];
    Tensor out({static_cast<int>(rows.size()), L});
    for (size_t k = 0; k < rows.size(); ++k) {
        const Tensor& r = g.value(rows[k]);
        if (r.rank() != 1 || r.shape[0] != L) throw ShapeError("stack_rows: ragged rows");
        for (int l = 0; l < L; ++l) out(static_cast<int>(k), l) = r.v[static_cast<size_t>(l)];
    }
    return out;
}

inline Tensor masks_tensor(Graph& g, const ModelOutputs& out) {
    return stack_rows(g, out.masks.masks);  // (K, L)
}
inline Tensor end_dists_tensor(Graph& g, const ModelOutputs& out) {
    return stack_rows(g, out.masks.end_dists);  // (K, L)
}
inline Tensor attn_tensor(Graph& g, const ModelOutputs& out) {
    return transpose(g.value(out.slots.attn));  // (K, L)
}
inline std::vector<double> lambdas_vector(Graph& g, const ModelOutputs& out) {
    return g.value(out.halting.lambdas).v;
}
inline std::vector<double> p_halt_vector(Graph& g, const ModelOutputs& out) {
    return g.value(out.halting.p_halt).v;
}

// True per-timestep segment indices implied by 1-based inclusive segment ends.
inline std::vector<int> segmentation_from_boundaries(const std::vector<int>& boundaries, int L) {
    std::vector<int> seg(static_cast<size_t>(L));
    int s = 1;
    size_t b = 0;
    for (int l = 1; l <= L; ++l) {
        seg[static_cast<size_t>(l - 1)] = s;
        if (b < boundaries.size() && boundaries[b] == l) {
            ++s;
            ++b;
        }
    }
    return seg;
}

}  // namespace slotseg
