#pragma once

#include <vector>

#include "slotseg/autodiff.hpp"
#include "slotseg/common.hpp"

namespace slotseg {

// Stabilizer added to the prior inside the KL term.
inline constexpr double kKlEps = 1e-4;

struct HaltingVars {
    Var lambdas;  // (K), each in (0,1)
    Var p;        // (K), unnormalized halting masses
    Var p_halt;   // (K), sums to 1
};

// Halting masses from per-slot halt probabilities: the probability of halting
// exactly at slot k in a sequential Bernoulli process,
//   p_k = lambda_k * prod_{j<k} (1 - lambda_j),
// then normalized to a proper distribution.
inline HaltingVars halting_from_lambdas(Graph& g, Var lambdas) {
    const Tensor& L = g.value(lambdas);
    if (L.rank() != 1 || L.shape[0] < 1)
        throw ShapeError("halting_from_lambdas: lambdas must be a nonempty vector, got " +
                         L.describe());
    const int K = L.shape[0];
    std::vector<Var> ps;
    Var carry;  // prod_{j<=k} (1 - lambda_j), built incrementally
    for (int k = 0; k < K; ++k) {
        Var lk = g.index(lambdas, k);
        Var not_lk = g.affine(lk, -1.0, 1.0);
        ps.push_back(k == 0 ? lk : g.mul(lk, carry));
        carry = k == 0 ? not_lk : g.mul(carry, not_lk);
    }
    HaltingVars out;
    out.lambdas = lambdas;
    out.p = g.stack_scalars(ps);
    out.p_halt = g.normalize_sum(out.p, 0);
    return out;
}

// lambda_k = sigmoid of the last dimension of slot k. The slot vector is
// shared with the decoder; no dimension is reserved exclusively for halting.
inline HaltingVars halting_distribution(Graph& g, Var slots) {
    const Tensor& S = g.value(slots);
    if (S.rank() != 2 || S.rows() < 1 || S.cols() < 1)
        throw ShapeError("halting_distribution: slots must be (K, D_slots), got " + S.describe());
    const int K = S.rows(), D = S.cols();
    Var last = g.reshape(g.slice_cols(slots, D - 1, D), {K});
    return halting_from_lambdas(g, g.sigmoid(last));
}

inline Var halting_kl(Graph& g, Var p_halt, const Tensor& prior) {
    return g.kl_to_prior(p_halt, prior, kKlEps);
}

struct LossVars {
    Var total;
    std::vector<Var> ce_terms;  // scalar cross entropy per slot count k
    Var kl;
    double beta = 0.0;
};

// total = sum_k p_halt(k) * meanCE(agg_logits_k, targets) + beta * KL(p_halt || prior).
// agg_logits[k] are the aggregated logits using slots 1..k+1; CE is averaged
// over timesteps.
inline LossVars ponder_loss(Graph& g, const std::vector<Var>& agg_logits,
                            const std::vector<int>& targets, Var p_halt, const Tensor& prior,
                            double beta) {
    const Tensor& P = g.value(p_halt);
    if (P.rank() != 1 || P.shape[0] != static_cast<int>(agg_logits.size()))
        throw ShapeError("ponder_loss: p_halt " + P.describe() + " does not match " +
                         std::to_string(agg_logits.size()) + " aggregated logit sets");
    LossVars out;
    out.beta = beta;
    Var recon;
    for (size_t k = 0; k < agg_logits.size(); ++k) {
        Var ce = g.cross_entropy(agg_logits[k], targets);
        out.ce_terms.push_back(ce);
        Var term = g.mul(g.index(p_halt, static_cast<int>(k)), ce);
        recon = k == 0 ? term : g.add(recon, term);
    }
    out.kl = halting_kl(g, p_halt, prior);
    out.total = g.add(recon, g.affine(out.kl, beta, 0.0));
    return out;
}

// Sequential Bernoulli halting: return the first k in 1..K whose draw fires,
// or K if none does.
inline int sample_active_slots(const std::vector<double>& lambdas, Rng& rng) {
    const int K = static_cast<int>(lambdas.size());
    if (K < 1) throw ShapeError("sample_active_slots: empty lambda vector");
    for (int k = 0; k < K; ++k)
        if (rng.uniform() < lambdas[static_cast<size_t>(k)]) return k + 1;
    return K;
}

// Reproducible alternative: smallest k whose cumulative halting probability
// reaches one half (the distribution's median).
inline int deterministic_active_slots(const std::vector<double>& p_halt) {
    const int K = static_cast<int>(p_halt.size());
    if (K < 1) throw ShapeError("deterministic_active_slots: empty distribution");
    double cum = 0.0;
    for (int k = 0; k < K; ++k) {
        cum += p_halt[static_cast<size_t>(k)];
        if (cum >= 0.5) return k + 1;
    }
    return K;
}

}  // namespace slotseg
