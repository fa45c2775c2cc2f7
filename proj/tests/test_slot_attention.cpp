#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "slotseg/grad_check.hpp"
#include "slotseg/slot_attention.hpp"

using namespace slotseg;

namespace {

SlotAttentionConfig tiny_cfg() {
    SlotAttentionConfig cfg;
    cfg.d_in = 6;
    cfg.d_slots = 8;
    cfg.num_slots = 3;
    cfg.iterations = 1;
    cfg.init_std = 1.0;
    return cfg;
}

Tensor rand_inputs(int L, int D, Rng& rng) {
    Tensor t({L, D});
    for (double& x : t.v) x = rng.uniform(-1.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("init_slots: zero scale reproduces the shift exactly") {
    SlotAttentionConfig cfg = tiny_cfg();
    ParamRegistry reg;
    Rng init(1);
    init_slot_attention(reg, cfg, init);
    reg.value("slot_attention.sigma") = Tensor(reg.value("slot_attention.sigma").shape);
    Rng rng(2);
    Tensor slots = init_slots(reg, cfg, rng);
    CHECK(slots.v == reg.value("slot_attention.mu").v);
}

TEST_CASE("init_slots: Monte-Carlo mean approaches the shift") {
    SlotAttentionConfig cfg = tiny_cfg();
    cfg.init_std = 0.7;
    ParamRegistry reg;
    Rng init(3);
    init_slot_attention(reg, cfg, init);
    // Give sigma a non-trivial profile.
    Tensor& sigma = reg.value("slot_attention.sigma");
    Rng srng(4);
    for (double& x : sigma.v) x = srng.uniform(0.5, 1.5);

    const int N = 100000;
    Tensor mean({cfg.num_slots, cfg.d_slots});
    Rng rng(5);
    for (int i = 0; i < N; ++i) {
        Tensor s = init_slots(reg, cfg, rng);
        add_scaled(mean, s, 1.0 / N);
    }
    const Tensor& mu = reg.value("slot_attention.mu");
    for (int k = 0; k < cfg.num_slots; ++k) {
        double dev2 = 0.0, norm2 = 0.0;
        for (int j = 0; j < cfg.d_slots; ++j) {
            const double d = mean(k, j) - mu(k, j);
            dev2 += d * d;
            norm2 += sigma(k, j) * sigma(k, j);
        }
        CHECK(std::sqrt(dev2) < 3.0 * cfg.init_std * std::sqrt(norm2) / std::sqrt(static_cast<double>(N)));
    }
}

TEST_CASE("attention normalizes over slots at every timestep") {
    SlotAttentionConfig cfg = tiny_cfg();
    cfg.iterations = 2;
    ParamRegistry reg;
    Rng init(6);
    init_slot_attention(reg, cfg, init);
    Rng rng(7);
    Tensor x = rand_inputs(9, cfg.d_in, rng);
    Tensor noise = draw_slot_noise(cfg, rng);

    Graph g(false);
    SlotStates st = slot_attention(g, reg, cfg, g.constant(x), noise);
    CHECK(st.attn_iters.size() == 2);
    CHECK(g.value(st.slots).shape == std::vector<int>{cfg.num_slots, cfg.d_slots});
    for (Var attn : st.attn_iters) {
        const Tensor& a = g.value(attn);
        REQUIRE(a.shape == std::vector<int>{9, cfg.num_slots});
        for (int l = 0; l < 9; ++l) {
            double s = 0.0;
            for (int k = 0; k < cfg.num_slots; ++k) {
                CHECK(a(l, k) >= 0.0);
                s += a(l, k);
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
    // Slots-major export view transposes the in-graph layout.
    Tensor kl = transpose(g.value(st.attn));
    CHECK(kl.shape == std::vector<int>{cfg.num_slots, 9});
    CHECK(kl(1, 4) == g.value(st.attn)(4, 1));
}

TEST_CASE("single slot: attention is identically one, update is the value mean") {
    SlotAttentionConfig cfg = tiny_cfg();
    cfg.num_slots = 1;
    ParamRegistry reg;
    Rng init(8);
    init_slot_attention(reg, cfg, init);
    Rng rng(9);
    const int L = 5;
    Tensor x = rand_inputs(L, cfg.d_in, rng);
    Tensor noise = draw_slot_noise(cfg, rng);

    Graph g(false);
    SlotStates st = slot_attention(g, reg, cfg, g.constant(x), noise);
    const Tensor& a = g.value(st.attn);
    for (int l = 0; l < L; ++l) CHECK(a(l, 0) == doctest::Approx(1.0).epsilon(1e-12));

    // With attention all ones the weighted mean equals the plain mean of the
    // projected values.
    Graph r(false);
    Var v = linear(r, r.constant(x), bind_linear(r, reg, "slot_attention.value"));
    Var wm = weighted_mean(r, r.constant(Tensor::full({L, 1}, 1.0)), v, 1e-8);
    Tensor mean_ref({1, cfg.d_slots});
    for (int j = 0; j < cfg.d_slots; ++j) {
        double s = 0.0;
        for (int l = 0; l < L; ++l) s += r.value(v)(l, j);
        mean_ref(0, j) = s / L;
    }
    for (int j = 0; j < cfg.d_slots; ++j)
        CHECK(r.value(wm)(0, j) == doctest::Approx(mean_ref(0, j)).epsilon(1e-9));
}

TEST_CASE("slots with identical shift, scale, and noise stay identical") {
    SlotAttentionConfig cfg = tiny_cfg();
    cfg.iterations = 2;
    ParamRegistry reg;
    Rng init(10);
    init_slot_attention(reg, cfg, init);
    // Make slots 0 and 2 share parameters.
    Tensor& mu = reg.value("slot_attention.mu");
    Tensor& sigma = reg.value("slot_attention.sigma");
    for (int j = 0; j < cfg.d_slots; ++j) {
        mu(2, j) = mu(0, j);
        sigma(2, j) = sigma(0, j);
    }
    Rng rng(11);
    Tensor x = rand_inputs(7, cfg.d_in, rng);
    Tensor noise = draw_slot_noise(cfg, rng);
    for (int j = 0; j < cfg.d_slots; ++j) noise(2, j) = noise(0, j);

    Graph g(false);
    SlotStates st = slot_attention(g, reg, cfg, g.constant(x), noise);
    const Tensor& slots = g.value(st.slots);
    const Tensor& attn = g.value(st.attn);
    for (int j = 0; j < cfg.d_slots; ++j)
        CHECK(slots(0, j) == doctest::Approx(slots(2, j)).epsilon(1e-12));
    for (int l = 0; l < 7; ++l) CHECK(attn(l, 0) == doctest::Approx(attn(l, 2)).epsilon(1e-12));
    // The distinct middle slot generally differs.
    double diff = 0.0;
    for (int j = 0; j < cfg.d_slots; ++j) diff += std::abs(slots(0, j) - slots(1, j));
    CHECK(diff > 1e-6);
}

TEST_CASE("slot attention is deterministic given noise and iterates T times") {
    SlotAttentionConfig cfg = tiny_cfg();
    ParamRegistry reg;
    Rng init(12);
    init_slot_attention(reg, cfg, init);
    Rng rng(13);
    Tensor x = rand_inputs(6, cfg.d_in, rng);
    Tensor noise = draw_slot_noise(cfg, rng);

    auto run = [&](int T) {
        SlotAttentionConfig c = cfg;
        c.iterations = T;
        Graph g(false);
        SlotStates st = slot_attention(g, reg, c, g.constant(x), noise);
        return g.value(st.slots);
    };
    CHECK(run(1).v == run(1).v);
    CHECK(run(1).v != run(2).v);

    Tensor other_noise = draw_slot_noise(cfg, rng);
    Graph g(false);
    SlotStates st = slot_attention(g, reg, cfg, g.constant(x), other_noise);
    CHECK(g.value(st.slots).v != run(1).v);
}

TEST_CASE("whole-module gradient check at tolerance 1e-4") {
    SlotAttentionConfig cfg = tiny_cfg();
    cfg.iterations = 2;
    ParamRegistry reg;
    Rng init(14);
    init_slot_attention(reg, cfg, init);
    Rng rng(15);
    reg.add("x", rand_inputs(5, cfg.d_in, rng));
    Tensor noise = draw_slot_noise(cfg, rng);
    Tensor w({cfg.num_slots, cfg.d_slots});
    for (double& t : w.v) t = rng.uniform(-1.0, 1.0);
    Tensor wa({5, cfg.num_slots});
    for (double& t : wa.v) t = rng.uniform(-1.0, 1.0);

    GradCheckReport report = grad_check(reg, [&](Graph& g) {
        SlotStates st = slot_attention(g, reg, cfg, g.param(reg, "x"), noise);
        // Read out slots and attention so both paths carry gradient.
        return g.add(g.sum(g.mul(st.slots, g.constant(w))),
                     g.sum(g.mul(st.attn, g.constant(wa))));
    });
    CHECK(report.all_finite);
    CHECK_MESSAGE(report.worst_rel_err < 1e-4, "worst parameter: ", report.worst_name);
    CHECK(report.items.size() == static_cast<size_t>(reg.count()));
}

TEST_CASE("invalid inputs are rejected; non-finite inputs are caught") {
    SlotAttentionConfig cfg = tiny_cfg();
    ParamRegistry reg;
    Rng init(16);
    init_slot_attention(reg, cfg, init);
    Rng rng(17);
    Tensor noise = draw_slot_noise(cfg, rng);

    Graph g(false);
    CHECK_THROWS_AS(slot_attention(g, reg, cfg, g.constant(Tensor({4, cfg.d_in + 1})), noise),
                    ShapeError);
    CHECK_THROWS_AS(slot_attention(g, reg, cfg, g.constant(Tensor({4, cfg.d_in})),
                                   Tensor({1, cfg.d_slots})),
                    ShapeError);

    Tensor bad = rand_inputs(4, cfg.d_in, rng);
    bad.v[3] = std::numeric_limits<double>::infinity();
    Graph g2(false);
    CHECK_THROWS_AS(slot_attention(g2, reg, cfg, g2.constant(bad), noise), NumericError);

    SlotAttentionConfig bad_cfg = cfg;
    bad_cfg.iterations = 0;
    CHECK_THROWS_AS(bad_cfg.validate(), ConfigError);
    bad_cfg = cfg;
    bad_cfg.num_slots = 0;
    CHECK_THROWS_AS(bad_cfg.validate(), ConfigError);
}
