#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "airmdp/envs.hpp"
#include "airmdp/models.hpp"

using namespace airmdp;

TEST_CASE("order execution transition model by hand") {
    OrderExecEndoModel m;
    RngStream rng(1, "unused");
    const std::vector<double> exo = {0.1, 0.2, 0.6};
    REQUIRE(m.step(exo, EndoValue::integer(7), 3, exo, 0, rng).as_int() == 4);
    REQUIRE(m.step(exo, EndoValue::integer(2), 5, exo, 0, rng).as_int() == 0);
    REQUIRE(m.reward(exo, EndoValue::integer(7), 3, exo, 0) == Catch::Approx(1.8));
    // Oversold orders only execute the held amount.
    REQUIRE(m.reward(exo, EndoValue::integer(2), 5, exo, 0) == Catch::Approx(1.2));
    REQUIRE(m.reward(exo, EndoValue::integer(0), 5, exo, 0) == 0.0);
}

TEST_CASE("inventory transition model by hand") {
    InventoryEndoModel m;
    RngStream rng(1, "unused");
    const std::vector<double> exo = {0.0};
    REQUIRE(m.step(exo, EndoValue::real1(2.5), 4, {3.0}, 0, rng).scalar() == Catch::Approx(3.5));
    REQUIRE(m.step(exo, EndoValue::real1(1.0), 0, {6.0}, 0, rng).scalar() == 0.0);
    // order 0.1*4, holding 0.25*(2+4-3), no shortfall
    REQUIRE(m.reward(exo, EndoValue::real1(2.0), 4, {3.0}, 0) == Catch::Approx(-1.15));
    REQUIRE(m.reward(exo, EndoValue::real1(2.0), 4, {3.0}, 0) ==
            InventoryEnv::stage_reward(2.0, 4, 3.0));
}

TEST_CASE("tabular wrapper reproduces the kernel and measures overrides") {
    const TabularMdp mdp = make_random_tabular_air_mdp(3, 2, 2, 4, 0.1, RngStream(9, "mdp"), 2.0).mdp;
    TabularEndoModel exact(mdp);
    REQUIRE(exact.endo_gap() == 0.0);
    REQUIRE(exact.reward({1.0}, EndoValue::integer(0), 1, {2.0}, 0) == mdp.r(0, 1, 0, 1, 2));

    // Deterministic override row pins the sampled successor.
    std::vector<double> rows = mdp.p_end;
    const std::size_t off = mdp.end_at(1, 0, 1, 0, 2);
    rows[off] = 0.0;
    rows[off + 1] = 1.0;
    TabularEndoModel forced(mdp, rows);
    RngStream rng(4, "draw");
    REQUIRE(forced.step({0.0}, EndoValue::integer(1), 0, {2.0}, 1, rng).as_int() == 1);

    // Gap equals the TV distance of the single perturbed row.
    const double want =
        tv_distance({mdp.p_end.data() + off, 2}, {rows.data() + off, 2});
    REQUIRE(forced.endo_gap() == Catch::Approx(want));
}

TEST_CASE("closed-form model lookup covers the two benchmark domains") {
    REQUIRE(exact_endo_model("order") != nullptr);
    REQUIRE(exact_endo_model("inventory") != nullptr);
    REQUIRE_THROWS(exact_endo_model("gridworld"));
}

namespace {

// Inventory-style transitions with known ground truth next = max(0, e + a - d).
Dataset synthetic_inventory_data(int n_episodes, int len, std::uint64_t seed) {
    Dataset d;
    d.meta.env = "inventory";
    d.meta.policy = "synthetic";
    d.meta.horizon = len;
    d.meta.n_actions = 11;
    d.meta.exo_dim = 1;
    d.meta.endo_kind = EndoKind::Real;
    d.meta.endo_dim = 1;
    d.meta.seed = seed;
    RngStream rng(seed, "synthetic");
    for (int i = 0; i < n_episodes; ++i) {
        RngStream ep_rng = rng.child("ep/" + std::to_string(i));
        Episode ep;
        double e = ep_rng.uniform(0.0, 8.0);
        double demand = ep_rng.uniform(2.0, 9.0);
        for (int h = 0; h < len; ++h) {
            const int a = static_cast<int>(ep_rng.uniform_int(0, 10));
            const double next_demand = ep_rng.uniform(2.0, 9.0);
            StepRecord rec;
            rec.state = {{demand}, EndoValue::real1(e)};
            rec.action = a;
            rec.reward = InventoryEnv::stage_reward(e, a, next_demand);
            ep.steps.push_back(rec);
            e = std::max(0.0, e + a - next_demand);
            demand = next_demand;
        }
        d.episodes.push_back(std::move(ep));
    }
    return d;
}

}  // namespace

TEST_CASE("learned transition model recovers a piecewise-linear rule") {
    const Dataset d = synthetic_inventory_data(150, 4, 21);
    FitConfig cfg;
    cfg.hidden = 32;
    cfg.updates = 3000;
    cfg.learning_rate = 5e-3;
    cfg.seed = 7;
    auto [model, report] = fit_endo_model(d, cfg);
    REQUIRE(report.warnings.empty());
    REQUIRE(report.heldout_mae < 0.25);

    RngStream rng(3, "probe");
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        const double e = rng.uniform(0.5, 7.5);
        const int a = static_cast<int>(rng.uniform_int(0, 10));
        const double dem = rng.uniform(2.5, 8.5);
        const double got = model->step({dem}, EndoValue::real1(e), a, {dem}, 0, rng).scalar();
        worst = std::max(worst, std::abs(got - std::max(0.0, e + a - dem)));
    }
    REQUIRE(worst < 1.0);
    // Exact reward stays attached by default.
    REQUIRE(model->reward({3.0}, EndoValue::real1(2.0), 4, {3.0}, 0) == Catch::Approx(-1.15));
}

TEST_CASE("constant targets trigger the degenerate-data warning") {
    Dataset d = synthetic_inventory_data(5, 3, 2);
    for (Episode& ep : d.episodes)
        for (StepRecord& rec : ep.steps) rec.state.endo = EndoValue::real1(4.0);
    FitConfig cfg;
    cfg.updates = 10;
    auto [model, report] = fit_endo_model(d, cfg);
    REQUIRE_FALSE(report.warnings.empty());
    (void)model;
}

TEST_CASE("learned reward head approximates the stage cost") {
    const Dataset d = synthetic_inventory_data(150, 4, 22);
    FitConfig cfg;
    cfg.hidden = 32;
    cfg.updates = 3000;
    cfg.learning_rate = 5e-3;
    auto [model, report] = fit_endo_model(d, cfg, true);
    (void)report;
    RngStream rng(5, "probe");
    double err = 0.0;
    for (int t = 0; t < 50; ++t) {
        const double e = rng.uniform(0.5, 7.5);
        const int a = static_cast<int>(rng.uniform_int(0, 10));
        const double dem = rng.uniform(2.5, 8.5);
        err += std::abs(model->reward({dem}, EndoValue::real1(e), a, {dem}, 0) -
                        InventoryEnv::stage_reward(e, a, dem));
    }
    REQUIRE(err / 50.0 < 0.5);
}

TEST_CASE("exogenous dynamics regression learns an affine map") {
    Dataset d;
    d.meta.env = "synthetic";
    d.meta.horizon = 4;
    d.meta.n_actions = 2;
    d.meta.exo_dim = 1;
    d.meta.endo_kind = EndoKind::Real;
    d.meta.endo_dim = 1;
    RngStream rng(11, "gen");
    for (int i = 0; i < 200; ++i) {
        Episode ep;
        double x = rng.uniform(0.0, 1.0);
        for (int h = 0; h < 4; ++h) {
            StepRecord rec;
            rec.state = {{x}, EndoValue::real1(0.0)};
            rec.action = 0;
            rec.reward = 0.0;
            ep.steps.push_back(rec);
            x = 0.5 * x + 0.25;
        }
        d.episodes.push_back(std::move(ep));
    }
    FitConfig cfg;
    cfg.hidden = 16;
    cfg.updates = 3000;
    cfg.learning_rate = 5e-3;
    auto [model, mae] = fit_dynamics_model(d, DynamicsKind::ExoOnly, cfg);
    REQUIRE(mae < 0.02);
    const auto y = model.predict_exo({0.8});
    REQUIRE(y.size() == 1);
    REQUIRE(y[0] == Catch::Approx(0.65).margin(0.05));
    REQUIRE_THROWS_AS(model.predict_full({{0.8}, EndoValue::real1(0.0)}, 0), std::logic_error);
}

TEST_CASE("full dynamics regression predicts exo, endo and reward jointly") {
    Dataset d;
    d.meta.env = "synthetic";
    d.meta.horizon = 3;
    d.meta.n_actions = 3;
    d.meta.exo_dim = 1;
    d.meta.endo_kind = EndoKind::Real;
    d.meta.endo_dim = 1;
    RngStream rng(12, "gen");
    for (int i = 0; i < 300; ++i) {
        Episode ep;
        double x = rng.uniform(0.0, 1.0);
        double e = rng.uniform(0.0, 2.0);
        for (int h = 0; h < 3; ++h) {
            const int a = static_cast<int>(rng.uniform_int(0, 2));
            StepRecord rec;
            rec.state = {{x}, EndoValue::real1(e)};
            rec.action = a;
            rec.reward = x - 0.1 * a;
            ep.steps.push_back(rec);
            x = 0.5 * x + 0.2;
            e = e + a - 0.5;
        }
        d.episodes.push_back(std::move(ep));
    }
    FitConfig cfg;
    cfg.hidden = 32;
    cfg.updates = 4000;
    cfg.learning_rate = 5e-3;
    auto [model, mae] = fit_dynamics_model(d, DynamicsKind::Full, cfg);
    REQUIRE(mae < 0.05);
    const auto step = model.predict_full({{0.6}, EndoValue::real1(1.0)}, 2);
    REQUIRE(step.exo[0] == Catch::Approx(0.5).margin(0.08));
    REQUIRE(step.endo.scalar() == Catch::Approx(2.5).margin(0.15));
    REQUIRE(step.reward == Catch::Approx(0.4).margin(0.08));
    REQUIRE_THROWS_AS(model.predict_exo({0.6}), std::logic_error);
}

namespace {

Episode int_exo_episode(const std::vector<int>& xs) {
    Episode ep;
    for (int x : xs) {
        StepRecord rec;
        rec.state = {{static_cast<double>(x)}, EndoValue::integer(0)};
        ep.steps.push_back(rec);
    }
    return ep;
}

}  // namespace

TEST_CASE("empirical chain estimates are the observed count ratios") {
    Dataset d;
    d.meta.env = "tabular";
    d.meta.horizon = 3;
    d.meta.n_actions = 1;
    d.meta.exo_dim = 1;
    d.meta.endo_kind = EndoKind::Int;
    d.episodes.push_back(int_exo_episode({0, 1, 1}));
    d.episodes.push_back(int_exo_episode({0, 0, 1}));
    const EmpiricalExoChain chain = empirical_exo_mdp(d, 2, 1);
    REQUIRE(chain.horizon == 3);
    REQUIRE(chain.init_joint == std::vector<double>{1.0, 0.0});
    const auto r00 = chain.row(0, 0);
    REQUIRE(r00[0] == 0.5);
    REQUIRE(r00[1] == 0.5);
    REQUIRE(chain.row(0, 1)[1] == 1.0);  // unseen, self-loop
    REQUIRE(chain.row(1, 0)[1] == 1.0);
    REQUIRE(chain.row(1, 1)[1] == 1.0);
    REQUIRE(chain.row(2, 0)[0] == 1.0);  // last stage self-loops
    REQUIRE(chain.row(2, 1)[1] == 1.0);
}

TEST_CASE("empirical chain rejects ill-formed inputs") {
    Dataset empty;
    REQUIRE_THROWS(empirical_exo_mdp(empty, 2, 1));

    Dataset frac;
    frac.episodes.push_back(int_exo_episode({0, 1}));
    frac.episodes[0].steps[1].state.exo[0] = 0.5;
    REQUIRE_THROWS(empirical_exo_mdp(frac, 2, 1));

    Dataset wide;
    wide.episodes.push_back(int_exo_episode({0, 1}));
    wide.episodes[0].steps[0].state.exo = {0.0, 1.0};
    REQUIRE_THROWS(empirical_exo_mdp(wide, 2, 1));

    Dataset bad_endo;
    bad_endo.episodes.push_back(int_exo_episode({0, 1}));
    bad_endo.episodes[0].steps[0].state.endo = EndoValue::integer(5);
    REQUIRE_THROWS(empirical_exo_mdp(bad_endo, 2, 1));
}
