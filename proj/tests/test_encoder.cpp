#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "slotseg/encoder.hpp"
#include "slotseg/grad_check.hpp"

using namespace slotseg;

namespace {

EncoderConfig tiny_cfg() {
    EncoderConfig cfg;
    cfg.action_vocab_size = 5;
    cfg.obs_dim = 3;
    cfg.d_model = 8;
    cfg.num_heads = 2;
    cfg.num_layers = 1;
    return cfg;
}

Tensor rand_obs(int L, int D, Rng& rng) {
    Tensor t({L, D});
    for (double& x : t.v) x = rng.uniform(-1.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("sinusoidal positional encoding matches hand-computed values") {
    Tensor pe = sinusoidal_pe(4, 4);
    CHECK(pe(2, 0) == doctest::Approx(std::sin(2.0)).epsilon(1e-14));
    CHECK(pe(2, 1) == doctest::Approx(std::cos(2.0)).epsilon(1e-14));
    CHECK(pe(2, 2) == doctest::Approx(std::sin(2.0 / 100.0)).epsilon(1e-14));
    CHECK(pe(2, 3) == doctest::Approx(std::cos(2.0 / 100.0)).epsilon(1e-14));
    // Position 0: sin terms 0, cos terms 1.
    for (int j = 0; j < 4; ++j) CHECK(pe(0, j) == (j % 2 == 0 ? 0.0 : 1.0));
    CHECK_THROWS_AS(sinusoidal_pe(0, 4), ShapeError);
    CHECK_THROWS_AS(sinusoidal_pe(4, 7), ConfigError);

    // Independent loop oracle for a larger table, and the [-1,1] range.
    Tensor big = sinusoidal_pe(10, 8);
    for (int l = 0; l < 10; ++l)
        for (int i = 0; i < 4; ++i) {
            const double freq = std::pow(10000.0, (2.0 * i) / 8.0);
            CHECK(big(l, 2 * i) == doctest::Approx(std::sin(l / freq)).epsilon(1e-14));
            CHECK(big(l, 2 * i + 1) == doctest::Approx(std::cos(l / freq)).epsilon(1e-14));
        }
    for (double x : big.v) {
        CHECK(x >= -1.0);
        CHECK(x <= 1.0);
    }
}

TEST_CASE("zero transformer layers reduce to fused features plus positions") {
    EncoderConfig cfg = tiny_cfg();
    cfg.num_layers = 0;
    ParamRegistry reg;
    Rng init(1);
    init_encoder(reg, cfg, init);
    Rng rng(2);
    const std::vector<int> actions{0, 3, 4, 1};
    Tensor obs = rand_obs(4, 3, rng);

    Graph g(false);
    Var h = encode(g, reg, cfg, actions, obs);

    // Reference assembled from the same primitives, term by term.
    Graph r(false);
    Var za = r.embedding_lookup(r.param(reg, "encoder.embed"), actions);
    Var zo = linear(r, r.constant(obs), bind_linear(r, reg, "encoder.obs"));
    Var zao = mlp(r, r.concat_cols({za, zo}), bind_mlp(r, reg, "encoder.fuse"));
    Tensor pe = sinusoidal_pe(4, cfg.d_model);
    Var pl = linear(r, r.constant(pe), bind_linear(r, reg, "encoder.pos"));
    const Tensor& hv = g.value(h);
    for (int l = 0; l < 4; ++l)
        for (int j = 0; j < cfg.d_model; ++j)
            CHECK(hv(l, j) == doctest::Approx(r.value(zao)(l, j) + pe(l, j) + r.value(pl)(l, j))
                                  .epsilon(1e-12));
}

TEST_CASE("encoder output has global receptive field") {
    EncoderConfig cfg = tiny_cfg();
    ParamRegistry reg;
    Rng init(3);
    init_encoder(reg, cfg, init);
    Rng rng(4);
    const std::vector<int> actions{0, 1, 2, 3, 4};
    Tensor obs = rand_obs(5, 3, rng);

    Graph g(false);
    const Tensor h = g.value(encode(g, reg, cfg, actions, obs));

    // Change only the last timestep's action; earlier positions must react.
    std::vector<int> actions2 = actions;
    actions2[4] = 0;
    Graph g2(false);
    const Tensor h2 = g2.value(encode(g2, reg, cfg, actions2, obs));
    double delta_early = 0.0;
    for (int j = 0; j < cfg.d_model; ++j) delta_early += std::abs(h(0, j) - h2(0, j));
    CHECK(delta_early > 1e-8);
}

TEST_CASE("encoder is deterministic and shape-correct down to L=1") {
    EncoderConfig cfg = tiny_cfg();
    ParamRegistry reg;
    Rng init(5);
    init_encoder(reg, cfg, init);
    Rng rng(6);
    for (int L : {1, 2, 7}) {
        std::vector<int> actions;
        for (int l = 0; l < L; ++l) actions.push_back(l % cfg.action_vocab_size);
        Tensor obs = rand_obs(L, 3, rng);
        Graph a(false), b(false);
        const Tensor& ha = a.value(encode(a, reg, cfg, actions, obs));
        const Tensor& hb = b.value(encode(b, reg, cfg, actions, obs));
        CHECK(ha.shape == std::vector<int>{L, cfg.d_model});
        CHECK(ha.v == hb.v);
        CHECK(ha.all_finite());
    }
    Graph g(false);
    CHECK_THROWS_AS(encode(g, reg, cfg, {}, Tensor({0, 3})), ShapeError);
    CHECK_THROWS_AS(encode(g, reg, cfg, {0, 1}, Tensor({2, 2})), ShapeError);
}

TEST_CASE("encoder gradients match finite differences for every parameter") {
    EncoderConfig cfg = tiny_cfg();
    ParamRegistry reg;
    Rng init(7);
    init_encoder(reg, cfg, init);
    Rng rng(8);
    const std::vector<int> actions{2, 0, 4};
    Tensor obs = rand_obs(3, 3, rng);
    Tensor w({3, cfg.d_model});
    for (double& x : w.v) x = rng.uniform(-1.0, 1.0);

    GradCheckReport report = grad_check(reg, [&](Graph& g) {
        Var h = encode(g, reg, cfg, actions, obs);
        return g.sum(g.mul(h, g.constant(w)));
    });
    CHECK(report.all_finite);
    CHECK_MESSAGE(report.worst_rel_err < 1e-4, "worst parameter: ", report.worst_name);
    // Every parameter participates.
    CHECK(report.items.size() == static_cast<size_t>(reg.count()));
}

TEST_CASE("trajectory convenience overload matches the raw-tensor form") {
    EncoderConfig cfg = tiny_cfg();
    ParamRegistry reg;
    Rng init(9);
    init_encoder(reg, cfg, init);
    Trajectory t;
    t.actions = {1, 2, 4};
    t.observations = {{0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}, {0.7, 0.8, 0.9}};
    t.boundaries = {3};
    t.num_subroutines = 1;
    Graph a(false), b(false);
    const Tensor& ha = a.value(encode(a, reg, cfg, t));
    const Tensor& hb = b.value(encode(b, reg, cfg, t.actions, obs_tensor(t)));
    CHECK(ha.v == hb.v);
}
