// Command-line front end: collect datasets, train policies, evaluate them
// offline or online, and reproduce the benchmark figures.

#include <filesystem>
#include <iostream>
#include <memory>
#include <string>

#include <CLI11.hpp>

#include "airmdp/airmdp.hpp"

namespace {

using namespace airmdp;

std::unique_ptr<Env> make_env(const std::string& id, double eps_air, std::uint64_t seed,
                              const std::string& instance_label) {
    if (id == "order")
        return std::make_unique<OrderExecEnv>(eps_air, RngStream(seed, instance_label));
    if (id == "inventory") return std::make_unique<InventoryEnv>(eps_air);
    throw std::runtime_error("unknown env '" + id + "'");
}

// Problem description for a stored dataset; unknown envs need r_max and
// endo_sweep_max from the config file.
AirSpec spec_for_dataset(const DatasetMeta& meta, const KvConfig& cfg) {
    const double eps_p = cfg.get_double("eps_p", 0.0);
    double r_max;
    long long sweep_max;
    if (meta.env == "order") {
        r_max = cfg.get_double("r_max", 5.0);
        sweep_max = cfg.get_int("endo_sweep_max", 10);
    } else if (meta.env == "inventory") {
        r_max = cfg.get_double("r_max", 100.0);
        sweep_max = cfg.get_int("endo_sweep_max", 15);
    } else {
        if (!cfg.has("r_max") || !cfg.has("endo_sweep_max"))
            throw std::runtime_error("env '" + meta.env +
                                     "': config must set r_max and endo_sweep_max");
        r_max = cfg.get_double("r_max", 0.0);
        sweep_max = cfg.get_int("endo_sweep_max", 0);
    }
    return AirSpec::make(meta.horizon, meta.eps_air, eps_p, r_max, meta.n_actions,
                         integer_sweep(0, sweep_max));
}

std::unique_ptr<EndoModel> model_for_dataset(const Dataset& d, const KvConfig& cfg) {
    const std::string choice = cfg.get("endo_model", "exact");
    if (choice == "exact") return exact_endo_model(d.meta.env);
    if (choice == "learned") {
        FitConfig fit;
        fit.learning_rate = cfg.get_double("model_lr", 1e-3);
        fit.updates = static_cast<int>(cfg.get_int("model_updates", 2000));
        fit.seed = static_cast<std::uint64_t>(cfg.get_int("model_seed", 0));
        auto [model, report] = fit_endo_model(d, fit);
        for (const std::string& w : report.warnings) std::cerr << "endo model: " << w << '\n';
        return std::move(model);
    }
    throw std::runtime_error("unknown endo_model '" + choice + "'");
}

FqiConfig fqi_config(const KvConfig& cfg, std::uint64_t seed) {
    FqiConfig out;
    out.fclass = fclass_from_name(cfg.get("fclass", "linear"));
    out.fit.learning_rate = cfg.get_double("lr", out.fit.learning_rate);
    const std::string opt = cfg.get("optimizer", "adam");
    if (opt == "adam") out.fit.optimizer = OptimizerKind::Adam;
    else if (opt == "rmsprop") out.fit.optimizer = OptimizerKind::Rmsprop;
    else throw std::runtime_error("unknown optimizer '" + opt + "'");
    out.fit.batch_size = static_cast<int>(cfg.get_int("batch_size", out.fit.batch_size));
    out.fit.updates = static_cast<int>(cfg.get_int("updates", out.fit.updates));
    out.fit.hidden = static_cast<int>(cfg.get_int("hidden", out.fit.hidden));
    out.batch_b = static_cast<int>(cfg.get_int("B", out.batch_b));
    out.outer_k = static_cast<int>(cfg.get_int("K", out.outer_k));
    out.updates_m = static_cast<int>(cfg.get_int("M", out.updates_m));
    out.seed = seed;
    return out;
}

int cmd_collect(const std::string& env_id, const std::string& policy_kind, int episodes,
                double eps_air, std::uint64_t seed, const std::string& out,
                int collector_episodes) {
    const auto env = make_env(env_id, eps_air, seed, "env-instance");
    std::unique_ptr<Policy> policy;
    if (policy_kind == "learned") {
        const auto train_env = make_env(env_id, eps_air, seed, "collector-env");
        CollectorConfig ccfg;
        ccfg.seed = RngStream(seed, "collector-seed").next_u64();
        CollectorResult res = train_online_collector(*train_env, collector_episodes, ccfg);
        policy = std::make_unique<GreedyQPolicy>(std::move(res.q));
    } else {
        policy = behavior_policy(env_id, policy_kind);
    }
    const Dataset d = collect_dataset(*env, *policy, episodes, seed, policy_kind);
    write_dataset(d, out);
    std::cout << "wrote " << d.episodes.size() << " episodes to " << out << '\n';
    return 0;
}

int cmd_train(const std::string& algo, const std::string& data_path,
              const std::string& config_path, const std::string& out, std::uint64_t seed) {
    const Dataset d = read_dataset(data_path);
    const KvConfig cfg = config_path.empty() ? KvConfig{} : KvConfig::load(config_path);
    const std::uint64_t run_seed = cfg.has("seed")
                                       ? static_cast<std::uint64_t>(cfg.get_int("seed", 0))
                                       : seed;
    const FqiConfig fqi = fqi_config(cfg, run_seed);

    std::unique_ptr<Policy> policy;
    if (algo == "fqi-air") {
        const AirSpec spec = spec_for_dataset(d.meta, cfg);
        const auto model = model_for_dataset(d, cfg);
        policy = std::make_unique<GreedyQPolicy>(fqi_air_sweep(d, *model, spec, fqi));
    } else if (algo == "fqi-air-sampled") {
        const AirSpec spec = spec_for_dataset(d.meta, cfg);
        const auto model = model_for_dataset(d, cfg);
        policy = std::make_unique<GreedyQPolicy>(fqi_air_sampled(d, *model, spec, fqi));
    } else if (algo == "fqi") {
        const AirSpec spec = spec_for_dataset(d.meta, cfg);
        policy = std::make_unique<GreedyQPolicy>(fqi_baseline(d, spec, fqi));
    } else if (algo == "mbs") {
        const AirSpec spec = spec_for_dataset(d.meta, cfg);
        const double b = cfg.get_double("b", 0.001);
        const double floor = cfg.get_double("floor", d.meta.env == "inventory" ? -10000.0 : 0.0);
        const DensityEstimate density =
            density_estimate(d, spec.n_actions, static_cast<int>(cfg.get_int("bins", 10)));
        policy = mbs_qi(d, density, b, spec, fqi, floor);
    } else if (algo == "mb-empirical") {
        if (!cfg.has("n_exo") || !cfg.has("n_endo"))
            throw std::runtime_error("mb-empirical: config must set n_exo and n_endo");
        MbPlanResult res = mb_plan_empirical(d, static_cast<int>(cfg.get_int("n_exo", 0)),
                                             static_cast<int>(cfg.get_int("n_endo", 0)),
                                             d.meta.n_actions, cfg.get_double("r_max", 1.0));
        policy = std::move(res.dp.greedy);
    } else if (algo == "mb-exo" || algo == "mb-full") {
        const AirSpec spec = spec_for_dataset(d.meta, cfg);
        const DynamicsKind kind = algo == "mb-exo" ? DynamicsKind::ExoOnly : DynamicsKind::Full;
        FitConfig dyn_fit = fqi.fit;
        dyn_fit.seed = run_seed;
        auto [dyn, mae] = fit_dynamics_model(d, kind, dyn_fit);
        std::cout << "dynamics model held-out mae " << format_double(mae) << '\n';
        std::unique_ptr<EndoModel> model;
        if (kind == DynamicsKind::ExoOnly) model = model_for_dataset(d, cfg);
        policy = std::make_unique<GreedyQPolicy>(
            mb_plan_learned(d, dyn, model.get(), spec, fqi));
    } else if (algo == "traj-sim") {
        const AirSpec spec = spec_for_dataset(d.meta, cfg);
        const auto model = model_for_dataset(d, cfg);
        TrajSimConfig tcfg;
        tcfg.agent = traj_agent_from_name(cfg.get("agent", "q-learning"));
        tcfg.iterations = static_cast<int>(cfg.get_int("iterations", tcfg.iterations));
        tcfg.episodes_per_iteration =
            static_cast<int>(cfg.get_int("episodes_per_iteration", tcfg.episodes_per_iteration));
        tcfg.alpha = cfg.get_double("alpha", tcfg.alpha);
        tcfg.epsilon = cfg.get_double("epsilon", tcfg.epsilon);
        tcfg.fclass = fqi.fclass;
        tcfg.fit = fqi.fit;
        tcfg.seed = run_seed;
        TrajSimResult res = traj_sim_online(d, *model, spec, tcfg);
        write_curve_csv(res.curve, out + ".curve.csv");
        policy = std::make_unique<GreedyQPolicy>(std::move(res.q));
    } else {
        throw std::runtime_error("unknown algorithm '" + algo + "'");
    }
    policy->save(out);
    std::cout << "wrote policy to " << out << '\n';
    return 0;
}

int cmd_evaluate(const std::string& policy_path, const std::string& data_path,
                 const std::string& config_path, const std::string& env_id, double eps_air,
                 int rollouts, std::uint64_t seed, double zeta, const std::string& out) {
    const auto policy = Policy::load(policy_path);
    if (!data_path.empty()) {
        const Dataset d = read_dataset(data_path);
        const KvConfig cfg = config_path.empty() ? KvConfig{} : KvConfig::load(config_path);
        const AirSpec spec = spec_for_dataset(d.meta, cfg);
        const auto model = model_for_dataset(d, cfg);
        const EvalReport rep = j_hat(*policy, d, *model, spec, seed, zeta);
        std::cout << "j_hat " << format_double(rep.j_hat) << " bound " << format_double(rep.bound)
                  << " n " << rep.n << '\n';
        if (!out.empty()) rep.write_csv(out);
        return 0;
    }
    if (env_id.empty()) throw std::runtime_error("evaluate: need --data or --env");
    const auto env = make_env(env_id, eps_air, seed, "env-instance");
    const McEstimate est = j_true_mc(*policy, *env, rollouts, RngStream(seed, "mc"));
    std::cout << "j_true " << format_double(est.mean) << " stderr " << format_double(est.stderr_)
              << " rollouts " << rollouts << '\n';
    if (!out.empty()) {
        std::ofstream os(out);
        if (!os) throw std::runtime_error("cannot open " + out);
        os << "rollouts,mean,stderr,seed\n";
        os << rollouts << ',' << format_double(est.mean) << ',' << format_double(est.stderr_) << ','
           << seed << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Offline RL benchmark for impact-regular MDPs"};
    app.require_subcommand(1);

    std::string env_id, policy_kind, out_path, data_path, config_path, algo, figure, policy_path;
    int episodes = 100, rollouts = 100, collector_episodes = 1000;
    double eps_air = 0.0, scale = 1.0, zeta = 0.05;
    std::uint64_t seed = 0;

    auto* collect = app.add_subcommand("collect", "Roll out a behavior policy into a dataset");
    collect->add_option("--env", env_id, "order | inventory")->required();
    collect->add_option("--policy", policy_kind, "random | constant | learned")->required();
    collect->add_option("--episodes", episodes, "episodes to collect");
    collect->add_option("--eps-air", eps_air, "action impact probability");
    collect->add_option("--seed", seed, "base seed");
    collect->add_option("--out", out_path, "dataset path")->required();
    collect->add_option("--collector-episodes", collector_episodes,
                        "training episodes for the learned collector");

    auto* train = app.add_subcommand("train", "Fit a policy from a dataset");
    train->add_option("--algo", algo,
                      "fqi-air | fqi-air-sampled | fqi | mbs | mb-empirical | mb-exo | mb-full | "
                      "traj-sim")
        ->required();
    train->add_option("--data", data_path, "dataset path")->required();
    train->add_option("--config", config_path, "key=value config file");
    train->add_option("--seed", seed, "training seed (config key seed overrides)");
    train->add_option("--out", out_path, "policy path")->required();

    auto* evaluate = app.add_subcommand("evaluate", "Score a stored policy");
    evaluate->add_option("--policy", policy_path, "policy path")->required();
    evaluate->add_option("--data", data_path, "dataset for the offline estimate");
    evaluate->add_option("--config", config_path, "key=value config file");
    evaluate->add_option("--env", env_id, "environment for online rollouts");
    evaluate->add_option("--eps-air", eps_air, "action impact probability");
    evaluate->add_option("--rollouts", rollouts, "online rollout count");
    evaluate->add_option("--zeta", zeta, "certificate confidence level");
    evaluate->add_option("--seed", seed, "evaluation seed");
    evaluate->add_option("--out", out_path, "write the estimate as CSV");

    auto* reproduce = app.add_subcommand("reproduce", "Regenerate a benchmark figure as CSV");
    reproduce->add_option("--figure", figure, "sim_eps0 | sim_eps_large | eval_error | traj_sim")
        ->required();
    reproduce->add_option("--scale", scale, "run-count scale in (0,1]");
    reproduce->add_option("--seed", seed, "base seed");
    reproduce->add_option("--out", out_path, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (collect->parsed())
            return cmd_collect(env_id, policy_kind, episodes, eps_air, seed, out_path,
                               collector_episodes);
        if (train->parsed()) return cmd_train(algo, data_path, config_path, out_path, seed);
        if (evaluate->parsed())
            return cmd_evaluate(policy_path, data_path, config_path, env_id, eps_air, rollouts,
                                seed, zeta, out_path);
        if (reproduce->parsed()) {
            const auto files = reproduce_figure({figure, out_path, scale, seed});
            for (const auto& f : files) std::cout << "wrote " << f.string() << '\n';
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
