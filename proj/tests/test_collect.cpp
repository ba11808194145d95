#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "airmdp/collect.hpp"
#include "airmdp/eval.hpp"

using namespace airmdp;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

FactoredState demand_state(double d) { return {{d}, EndoValue::real1(0.0)}; }

OrderExecEnv::ArmaParams flat_params() {
    OrderExecEnv::ArmaParams p;
    p.phi = {-0.3, 0.4};
    p.theta = {0.1, -0.2};
    return p;
}

}  // namespace

TEST_CASE("order collection policy matches its stated action frequencies") {
    const auto pi = behavior_policy("order", "random");
    RngStream rng(5, "freq");
    const FactoredState s{{0.5, 0.5, 0.5}, EndoValue::integer(10)};
    std::array<long, 6> counts{};
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[pi->action(s, 0, rng)];
    REQUIRE(static_cast<double>(counts[0]) / n == Catch::Approx(0.75).margin(0.005));
    for (int a = 1; a <= 5; ++a)
        REQUIRE(static_cast<double>(counts[a]) / n == Catch::Approx(0.05).margin(0.005));
}

TEST_CASE("constant collection policies follow their fixed rules") {
    const auto hold = behavior_policy("order", "constant");
    RngStream rng(1, "probe");
    for (int h = 0; h < 5; ++h)
        REQUIRE(hold->action({{0.1, 0.9, 0.4}, EndoValue::integer(7)}, h, rng) == 0);

    // Order the previous demand, capped at 10 and floored to an integer.
    const auto reorder = behavior_policy("inventory", "constant");
    REQUIRE(reorder->action(demand_state(12.3), 0, rng) == 10);
    REQUIRE(reorder->action(demand_state(2.7), 0, rng) == 2);
    REQUIRE(reorder->action(demand_state(0.0), 0, rng) == 0);
}

TEST_CASE("inventory random policy stays inside the clamped demand window") {
    const auto pi = behavior_policy("inventory", "random");
    RngStream rng(9, "probe");
    std::array<bool, 11> seen{};
    for (int i = 0; i < 2000; ++i) {
        const int a = pi->action(demand_state(5.0), 0, rng);
        REQUIRE(a >= 2);
        REQUIRE(a <= 8);
        seen[a] = true;
    }
    for (int a = 2; a <= 8; ++a) REQUIRE(seen[a]);
    for (int i = 0; i < 200; ++i) {
        const int a = pi->action(demand_state(0.2), 0, rng);
        REQUIRE(a >= 0);
        REQUIRE(a <= 3);
    }
}

TEST_CASE("unknown collection rules are rejected") {
    REQUIRE_THROWS_AS(behavior_policy("chess", "random"), std::runtime_error);
    REQUIRE_THROWS_AS(behavior_policy("order", "greedy"), std::runtime_error);
    REQUIRE_THROWS_AS(behavior_policy("inventory", ""), std::runtime_error);
}

TEST_CASE("collected datasets carry full metadata and pass validation") {
    OrderExecEnv env(0.0, flat_params());
    const auto pi = behavior_policy("order", "random");
    const Dataset d = collect_dataset(env, *pi, 5, 42);
    REQUIRE(d.n_episodes() == 5);
    std::size_t rows = 0;
    for (const Episode& ep : d.episodes) rows += ep.steps.size();
    REQUIRE(rows == 500);
    REQUIRE(d.meta.env == "order");
    REQUIRE(d.meta.policy == "order_random");
    REQUIRE(d.meta.seed == 42);
    REQUIRE(d.meta.horizon == 100);
    REQUIRE(d.meta.n_actions == 6);
    REQUIRE(d.meta.exo_dim == 3);
    REQUIRE(d.meta.endo_kind == EndoKind::Int);
    REQUIRE(d.meta.endo_dim == 1);
    REQUIRE(validate_dataset(d, env.make_spec()).empty());
    REQUIRE_THROWS_AS(collect_dataset(env, *pi, 0, 1), std::invalid_argument);
}

TEST_CASE("holding every share produces zero reward and a flat position") {
    OrderExecEnv env(0.0, flat_params());
    const ConstantPolicy hold(0);
    const Dataset d = collect_dataset(env, hold, 3, 7);
    for (const Episode& ep : d.episodes)
        for (const StepRecord& rec : ep.steps) {
            REQUIRE(rec.reward == 0.0);
            REQUIRE(rec.state.endo.as_int() == 10);
            REQUIRE(rec.action == 0);
        }
}

TEST_CASE("repeating a collection seed reproduces the files byte for byte") {
    const auto dir = std::filesystem::temp_directory_path();
    const auto p1 = dir / "airmdp_collect_a.csv";
    const auto p2 = dir / "airmdp_collect_b.csv";
    {
        OrderExecEnv env(0.1, flat_params());
        const auto pi = behavior_policy("order", "random");
        write_dataset(collect_dataset(env, *pi, 4, 99), p1);
    }
    {
        OrderExecEnv env(0.1, flat_params());
        const auto pi = behavior_policy("order", "random");
        write_dataset(collect_dataset(env, *pi, 4, 99), p2);
    }
    REQUIRE(slurp(p1) == slurp(p2));
    REQUIRE(slurp(p1.string() + ".meta") == slurp(p2.string() + ".meta"));
    for (const auto& p : {p1, p2}) {
        std::filesystem::remove(std::filesystem::path(p.string() + ".meta"));
        std::filesystem::remove(p);
    }
}

TEST_CASE("impact-free exogenous columns ignore the collection policy") {
    // At eps_air = 0 the exo process cannot react to actions, so swapping the
    // behavior policy under the same seed leaves every exo row unchanged.
    OrderExecEnv env_a(0.0, flat_params());
    OrderExecEnv env_b(0.0, flat_params());
    const auto random_pi = behavior_policy("order", "random");
    const auto const_pi = behavior_policy("order", "constant");
    const Dataset da = collect_dataset(env_a, *random_pi, 3, 31);
    const Dataset db = collect_dataset(env_b, *const_pi, 3, 31);
    bool endo_differs = false;
    for (std::size_t i = 0; i < da.episodes.size(); ++i)
        for (std::size_t h = 0; h < da.episodes[i].steps.size(); ++h) {
            REQUIRE(da.episodes[i].steps[h].state.exo == db.episodes[i].steps[h].state.exo);
            if (!(da.episodes[i].steps[h].state.endo == db.episodes[i].steps[h].state.endo))
                endo_differs = true;
        }
    REQUIRE(endo_differs);

    InventoryEnv inv_a(0.0), inv_b(0.0);
    const Dataset ia = collect_dataset(inv_a, *behavior_policy("inventory", "random"), 3, 31);
    const Dataset ib = collect_dataset(inv_b, *behavior_policy("inventory", "constant"), 3, 31);
    for (std::size_t i = 0; i < ia.episodes.size(); ++i)
        for (std::size_t h = 0; h < ia.episodes[i].steps.size(); ++h)
            REQUIRE(ia.episodes[i].steps[h].state.exo == ib.episodes[i].steps[h].state.exo);
}

TEST_CASE("untrained online collector is just the freshly initialized network") {
    OrderExecEnv env(0.0, flat_params());
    CollectorConfig cfg;
    cfg.seed = 4;
    cfg.fit.hidden = 16;
    const CollectorResult out = train_online_collector(env, 0, cfg);
    REQUIRE(out.episode_returns.empty());

    FitConfig fit = cfg.fit;
    fit.seed = cfg.seed;
    const QFunction fresh = QFunction::make_horizon_feature(
        FeatureMap::for_env("order", 3, 1), env.horizon(), env.n_actions(), fit);
    std::stringstream got, want;
    out.q.serialize(got);
    fresh.serialize(want);
    REQUIRE(got.str() == want.str());
}

TEST_CASE("online collector training is reproducible") {
    CollectorConfig cfg;
    cfg.seed = 6;
    cfg.fit.hidden = 16;
    cfg.anneal_episodes = 10;
    auto run = [&cfg] {
        OrderExecEnv env(0.0, flat_params());
        return train_online_collector(env, 20, cfg);
    };
    const CollectorResult a = run();
    const CollectorResult b = run();
    REQUIRE(a.episode_returns == b.episode_returns);
    std::stringstream sa, sb;
    a.q.serialize(sa);
    b.q.serialize(sb);
    REQUIRE(sa.str() == sb.str());
}

TEST_CASE("trained collector beats the do-nothing policy on order execution") {
    OrderExecEnv env(0.0, flat_params());
    CollectorConfig cfg;
    cfg.seed = 3;
    cfg.fit.hidden = 32;
    cfg.fit.learning_rate = 2e-3;
    cfg.anneal_episodes = 100;
    const CollectorResult out = train_online_collector(env, 200, cfg);
    REQUIRE(out.episode_returns.size() == 200);

    const GreedyQPolicy trained(out.q);
    const ConstantPolicy hold(0);
    const McEstimate j_trained = j_true_mc(trained, env, 30, RngStream(8, "mc"));
    const McEstimate j_hold = j_true_mc(hold, env, 30, RngStream(8, "mc"));
    REQUIRE(j_hold.mean == 0.0);
    REQUIRE(j_trained.mean > j_hold.mean);
}
