// End-to-end acceptance gate. Each criterion prints one PASS/FAIL line; the
// process exits nonzero if any criterion fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <vector>

#include "slotseg/grad_check.hpp"
#include "slotseg/metrics.hpp"
#include "slotseg/train.hpp"

using namespace slotseg;

namespace {

int g_failures = 0;

void report(const char* name, bool ok, const std::string& detail) {
    std::printf("%s: %s%s%s\n", ok ? "PASS" : "FAIL", name, detail.empty() ? "" : " — ",
                detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------- criterion: gradient integrity ----------

void check_gradients() {
    auto t0 = std::chrono::steady_clock::now();
    GenerateConfig gen;
    gen.action_vocab_size = 6;
    gen.obs_dim = 4;
    gen.segment_count_min = 2;
    gen.segment_count_max = 3;
    gen.segment_len_min = 2;
    gen.segment_len_max = 4;
    Dataset ds = generate_split(gen, "train", 2, 99);

    ModelConfig mcfg;
    mcfg.action_vocab_size = gen.action_vocab_size;
    mcfg.obs_dim = gen.obs_dim;
    mcfg.d_model = 16;
    mcfg.num_heads = 2;
    mcfg.num_layers = 1;
    mcfg.d_slots = 8;
    mcfg.num_slots = 3;
    mcfg.iterations = 1;

    ParamRegistry reg;
    Rng rng(1);  // seed chosen away from ReLU kinks, where central differences are valid
    init_model(reg, mcfg, rng);
    Tensor prior = empirical_prior(ds, mcfg.num_slots);
    Rng noise_rng(38);
    std::vector<Tensor> noise;
    for (int i = 0; i < 2; ++i) noise.push_back(draw_slot_noise(mcfg.slots(), noise_rng));

    auto build = [&](Graph& g) {
        Var total;
        for (int i = 0; i < 2; ++i) {
            ModelOutputs out =
                model_forward(g, reg, mcfg, ds.trajectories[static_cast<size_t>(i)],
                              noise[static_cast<size_t>(i)]);
            LossVars loss = model_loss(g, out, ds.trajectories[static_cast<size_t>(i)].actions,
                                       prior, 0.1);
            total = i == 0 ? loss.total : g.add(total, loss.total);
        }
        return g.affine(total, 0.5, 0.0);
    };
    GradCheckReport rep = grad_check(reg, build);
    const double secs = seconds_since(t0);
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "%d parameter tensors, every scalar checked, worst rel err %.2e (%s), %.1fs",
                  static_cast<int>(rep.items.size()), rep.worst_rel_err,
                  rep.worst_name.c_str(), secs);
    report("gradient integrity (2-trajectory batch, rel tol 1e-4)",
           rep.all_finite && rep.passed(1e-4) && secs < 300.0, buf);
}

// ---------- criterion: mask-generation oracle ----------

void oracle_masks(const std::vector<std::vector<double>>& logits,
                  std::vector<std::vector<double>>& masks,
                  std::vector<std::vector<double>>& cdfs) {
    const size_t K = logits.size(), L = logits[0].size();
    masks.assign(K, std::vector<double>(L, 0.0));
    cdfs.assign(K, std::vector<double>(L, 0.0));
    std::vector<double> upto_prev(L, 0.0);
    for (size_t k = 0; k < K; ++k) {
        double m = logits[k][0];
        for (double x : logits[k]) m = std::max(m, x);
        double z = 0.0;
        for (double x : logits[k]) z += std::exp(x - m);
        double run = 0.0;
        for (size_t l = 0; l < L; ++l) {
            run += std::exp(logits[k][l] - m) / z;
            cdfs[k][l] = run;
            const double upto = std::max(0.0, 1.0 - run);
            masks[k][l] = k == 0 ? upto : upto * (1.0 - upto_prev[l]);
        }
        for (size_t l = 0; l < L; ++l) upto_prev[l] = std::max(0.0, 1.0 - cdfs[k][l]);
    }
}

void check_masks() {
    auto t0 = std::chrono::steady_clock::now();
    Rng rng(0x3a11u);
    double worst = 0.0;
    bool ok = true;
    for (int trial = 0; trial < 1000; ++trial) {
        const int K = rng.uniform_int(1, 6);
        const int L = rng.uniform_int(1, 32);
        std::vector<std::vector<double>> logits(static_cast<size_t>(K),
                                                std::vector<double>(static_cast<size_t>(L)));
        for (auto& row : logits)
            for (double& x : row) x = rng.normal() * 3.0;

        Graph g(false);
        std::vector<Var> lv;
        for (const auto& row : logits) lv.push_back(g.constant(Tensor({L}, row)));
        SegmentMasks sm = generate_masks(g, lv);

        std::vector<std::vector<double>> want_masks, want_cdfs;
        oracle_masks(logits, want_masks, want_cdfs);
        for (int k = 0; k < K; ++k) {
            const Tensor& got = g.value(sm.masks[static_cast<size_t>(k)]);
            for (int l = 0; l < L; ++l) {
                double d = std::abs(got.v[static_cast<size_t>(l)] -
                                    want_masks[static_cast<size_t>(k)][static_cast<size_t>(l)]);
                worst = std::max(worst, d);
                if (d > 1e-9) ok = false;
            }
        }
    }

    // Delta distributions: huge logits make softmax exactly one-hot, so the
    // masks must be binary, disjoint, contiguous, and telescope exactly.
    bool delta_ok = true;
    {
        const int L = 9;
        std::vector<int> ends{3, 5, 8};  // 1-based one-past-segment positions
        Graph g(false);
        std::vector<Var> lv;
        for (int e : ends) {
            Tensor t({L});
            t.v[static_cast<size_t>(e - 1)] = 1000.0;
            lv.push_back(g.constant(t));
        }
        SegmentMasks sm = generate_masks(g, lv);
        std::vector<double> coverage(L, 0.0);
        for (size_t k = 0; k < sm.masks.size(); ++k) {
            const Tensor& m = g.value(sm.masks[k]);
            const Tensor& cdf = g.value(sm.end_cdfs[k]);
            for (int l = 0; l < L; ++l) {
                const double x = m.v[static_cast<size_t>(l)];
                if (x != 0.0 && x != 1.0) delta_ok = false;
                coverage[static_cast<size_t>(l)] += x;
                double sum_upto = 0.0;
                for (size_t k2 = 0; k2 <= k; ++k2)
                    sum_upto += g.value(sm.masks[k2]).v[static_cast<size_t>(l)];
                if (sum_upto != 1.0 - cdf.v[static_cast<size_t>(l)]) delta_ok = false;
            }
        }
        // Segments: slot 1 covers 1..2, slot 2 covers 3..4, slot 3 covers 5..7.
        for (int l = 0; l < L; ++l) {
            double want = l < 7 ? 1.0 : 0.0;
            if (coverage[static_cast<size_t>(l)] != want) delta_ok = false;
        }
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "worst |diff| %.2e over 1000 cases, %.1fs", worst,
                  seconds_since(t0));
    report("mask-generation oracle (1000 random cases + delta case)",
           ok && delta_ok && seconds_since(t0) < 60.0, buf);
}

// ---------- criterion: halting distribution ----------

void check_halting() {
    Rng rng(0x4a17u);
    bool ok = true;
    for (int trial = 0; trial < 1000; ++trial) {
        const int K = rng.uniform_int(1, 6);
        std::vector<double> lam(static_cast<size_t>(K));
        for (double& x : lam) x = rng.uniform(0.001, 0.999);
        Graph g(false);
        HaltingVars h = halting_from_lambdas(g, g.constant(Tensor({K}, lam)));
        const Tensor& p = g.value(h.p);
        double carry = 1.0, s = 0.0;
        for (int k = 0; k < K; ++k) {
            const double want = lam[static_cast<size_t>(k)] * carry;
            if (std::abs(p.v[static_cast<size_t>(k)] - want) > 1e-12) ok = false;
            carry *= 1.0 - lam[static_cast<size_t>(k)];
        }
        for (double x : g.value(h.p_halt).v) s += x;
        if (std::abs(s - 1.0) > 1e-9) ok = false;
    }
    Graph g(false);
    HaltingVars h = halting_from_lambdas(g, g.constant(Tensor({3}, {0.5, 0.5, 0.5})));
    const Tensor& ph = g.value(h.p_halt);
    const double want[3] = {4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0};
    for (int k = 0; k < 3; ++k)
        if (std::abs(ph.v[static_cast<size_t>(k)] - want[k]) > 1e-12) ok = false;
    report("halting distribution (1000 cases: unit sum, product identity, 4/7 2/7 1/7)", ok,
           "");
}

// ---------- criterion: KL ----------

void check_kl() {
    bool ok = true;
    Rng rng(0x6b1u);
    for (int trial = 0; trial < 200; ++trial) {
        const int K = rng.uniform_int(2, 6);
        std::vector<double> q(static_cast<size_t>(K));
        double s = 0.0;
        for (double& x : q) s += (x = rng.uniform(0.05, 1.0));
        for (double& x : q) x /= s;
        Graph g(false);
        double kl = g.value(halting_kl(g, g.constant(Tensor({K}, q)), Tensor({K}, q))).v[0];
        if (std::abs(kl) > K * 1e-4) ok = false;
    }
    Graph g(false);
    double kl =
        g.value(halting_kl(g, g.constant(Tensor({2}, {1.0, 0.0})), Tensor({2}, {0.0, 1.0}))).v[0];
    if (std::abs(kl - std::log(1.0 / 1e-4)) > 1e-6) ok = false;
    report("KL to prior (matched within K*eps; one-hot mismatch = ln(1/eps))", ok, "");
}

// ---------- criterion: metrics oracle ----------

int optimal_matching(const std::vector<int>& pred, const std::vector<int>& truth, int tol) {
    // Memoized maximum matching over (pred index, used-truth bitmask).
    const int P = static_cast<int>(pred.size()), T = static_cast<int>(truth.size());
    std::vector<int> memo(static_cast<size_t>((P + 1) << T), -1);
    struct Solver {
        const std::vector<int>&pred, &truth;
        int tol, T;
        std::vector<int>& memo;
        int go(int i, int used) {
            if (i == static_cast<int>(pred.size())) return 0;
            int& m = memo[static_cast<size_t>((i << T) | used)];
            if (m >= 0) return m;
            int best = go(i + 1, used);
            for (int j = 0; j < T; ++j)
                if (!((used >> j) & 1) && std::abs(pred[static_cast<size_t>(i)] -
                                                   truth[static_cast<size_t>(j)]) <= tol)
                    best = std::max(best, 1 + go(i + 1, used | (1 << j)));
            return m = best;
        }
    } solver{pred, truth, tol, T, memo};
    return solver.go(0, 0);
}

void check_metrics() {
    auto t0 = std::chrono::steady_clock::now();
    bool ok = true;
    // Every strictly-increasing boundary list over {1..8} (all subset sizes
    // 0..8, so every list with <= 6 boundaries is included), both sides.
    std::vector<std::vector<int>> lists;
    for (unsigned m = 0; m < 256u; ++m) {
        std::vector<int> lst;
        for (int j = 0; j < 8; ++j)
            if ((m >> j) & 1u) lst.push_back(j + 1);
        lists.push_back(lst);
    }
    long checked = 0;
    for (const auto& pred : lists)
        for (const auto& truth : lists) {
            if (boundary_f1(pred, truth, 1).matches != optimal_matching(pred, truth, 1))
                ok = false;
            ++checked;
        }

    if (std::abs(alignment_accuracy({1, 1, 1, 2, 3, 3}, {1, 1, 2, 2, 3, 3}) - 5.0 / 6.0) > 0)
        ok = false;
    {
        Tensor masks({1, 4}, {0.0, 0.9, 0.9, 0.0});
        Tensor attn({1, 4}, {0.9, 0.9, 0.9, 0.9});
        AccessResult r = access_metrics(attn, masks, 0.8);
        if (r.ba != 1.0 || r.fa != 0.5) ok = false;
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%ld boundary-list pairs, %.1fs", checked,
                  seconds_since(t0));
    report("metrics oracle (greedy == optimal matching, exhaustive; hand examples)", ok, buf);
}

// ---------- criteria: end-to-end runs ----------

GenerateConfig e2e_generate(bool variable_k) {
    GenerateConfig gen;
    gen.action_vocab_size = 8;
    gen.obs_dim = 16;
    gen.num_delimiters = 1;
    gen.segment_len_min = 3;
    gen.segment_len_max = 8;
    if (variable_k) {
        gen.segment_count_min = 3;
        gen.segment_count_max = 5;
    } else {
        gen.segment_count_min = 4;
        gen.segment_count_max = 4;
    }
    gen.num_train = 2000;
    gen.num_valid = 500;
    gen.num_test = 500;
    return gen;
}

struct E2EOutcome {
    EvalReport test;
    int epochs = 0;
    double seconds = 0.0;
};

E2EOutcome run_e2e(bool variable_k, uint64_t data_seed, uint64_t train_seed) {
    auto t0 = std::chrono::steady_clock::now();
    GenerateConfig gen = e2e_generate(variable_k);
    Dataset train_ds = generate_split(gen, "train", gen.num_train, data_seed);
    Dataset valid_ds = generate_split(gen, "valid", gen.num_valid, data_seed);
    Dataset test_ds = generate_split(gen, "test", gen.num_test, data_seed);

    TrainConfig tc;  // Table-style defaults: lr 5e-4, batch 64, width 128
    tc.max_epochs = 50;
    tc.patience = 50;  // let the run use the whole epoch budget
    tc.seed = train_seed;
    tc.num_slots = variable_k ? 6 : 5;

    TrainResult result = train_model(tc, train_ds, valid_ds);
    E2EOutcome out;
    out.test = evaluate_model(result.best_params, result.model, test_ds, tc.boundary_tolerance,
                              tc.t_on);
    out.epochs = static_cast<int>(result.history.size());
    out.seconds = seconds_since(t0);
    return out;
}

void check_e2e_fixed_k() {
    E2EOutcome out = run_e2e(false, 41, 1);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "test f1 %.4f align %.4f after %d epochs, %.0fs",
                  out.test.f1, out.test.align_acc, out.epochs, out.seconds);
    report("end-to-end learnability (fixed K=4: F1 >= 0.85 and align >= 0.85)",
           out.test.f1 >= 0.85 && out.test.align_acc >= 0.85, buf);
}

void check_e2e_variable_k() {
    E2EOutcome out = run_e2e(true, 43, 2);
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "test halt acc %.4f (f1 %.4f align %.4f) after %d epochs, %.0fs",
                  out.test.halt_count_acc, out.test.f1, out.test.align_acc, out.epochs,
                  out.seconds);
    report("variable-K halting (K in {3,4,5}: halt-count accuracy >= 0.70)",
           out.test.halt_count_acc >= 0.70, buf);
}

// ---------- criterion: determinism ----------

void check_determinism() {
    GenerateConfig gen;
    gen.action_vocab_size = 6;
    gen.obs_dim = 6;
    gen.segment_count_min = 2;
    gen.segment_count_max = 3;
    gen.segment_len_min = 2;
    gen.segment_len_max = 5;
    Dataset train_ds = generate_split(gen, "train", 48, 7);
    Dataset valid_ds = generate_split(gen, "valid", 16, 7);

    TrainConfig tc;
    tc.batch_size = 16;
    tc.d_model = 32;
    tc.num_heads = 4;
    tc.d_slots = 16;
    tc.num_slots = 3;
    tc.max_epochs = 3;
    tc.seed = 11;

    TrainResult a = train_model(tc, train_ds, valid_ds);
    TrainResult b = train_model(tc, train_ds, valid_ds);
    bool ok = a.history.size() == b.history.size();
    if (ok)
        for (size_t i = 0; i < a.history.size(); ++i) {
            const EpochRecord &x = a.history[i], &y = b.history[i];
            if (x.train_loss != y.train_loss || x.recon != y.recon || x.kl != y.kl ||
                x.val_f1 != y.val_f1 || x.val_align != y.val_align ||
                x.val_score != y.val_score)
                ok = false;
        }
    report("determinism (two identical runs produce identical metric histories)", ok, "");
}

// ---------- criterion: throughput ----------

void check_bench() {
    GenerateConfig gen;
    gen.action_vocab_size = 6;
    gen.obs_dim = 6;
    gen.segment_count_min = 2;
    gen.segment_count_max = 3;
    gen.segment_len_min = 2;
    gen.segment_len_max = 5;
    Dataset ds = generate_split(gen, "train", 32, 17);

    ModelConfig mcfg;
    mcfg.action_vocab_size = gen.action_vocab_size;
    mcfg.obs_dim = gen.obs_dim;
    mcfg.d_model = 32;
    mcfg.num_heads = 4;
    mcfg.d_slots = 16;
    mcfg.num_slots = 3;
    ParamRegistry reg;
    Rng rng(0xbe7c4u);
    init_model(reg, mcfg, rng);

    BenchReport rep = bench_model(reg, mcfg, ds, 0.1, 8, 10);
    const bool ok = rep.train_tokens_per_sec > 0.0 && rep.eval_tokens_per_sec > 0.0 &&
                    std::isfinite(rep.train_tokens_per_sec) &&
                    std::isfinite(rep.eval_tokens_per_sec) &&
                    rep.eval_tokens_per_sec >= rep.train_tokens_per_sec &&
                    rep.wall_clock_seconds > 0.0;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "train %.0f tok/s, eval %.0f tok/s",
                  rep.train_tokens_per_sec, rep.eval_tokens_per_sec);
    report("throughput report (positive tokens/sec, eval >= train)", ok, buf);
}

}  // namespace

int main(int argc, char** argv) {
    const bool quick = argc > 1 && std::strcmp(argv[1], "--quick") == 0;
    check_gradients();
    check_masks();
    check_halting();
    check_kl();
    check_metrics();
    check_determinism();
    check_bench();
    if (!quick) {
        check_e2e_fixed_k();
        check_e2e_variable_k();
    } else {
        std::printf("SKIP: end-to-end criteria (--quick)\n");
    }
    std::printf(g_failures == 0 ? "all criteria passed\n"
                                : "%d criterion(s) FAILED\n",
                g_failures);
    return g_failures == 0 ? 0 : 1;
}
