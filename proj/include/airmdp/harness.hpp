#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "algos.hpp"
#include "collect.hpp"
#include "core.hpp"
#include "envs.hpp"
#include "eval.hpp"
#include "models.hpp"
#include "policy.hpp"
#include "rng.hpp"

namespace airmdp {

// ---------------------------------------------------------------------------
// key=value config files ('#' starts a comment, blank lines ignored).

struct KvConfig {
    std::map<std::string, std::string> values;

    static KvConfig parse(std::istream& is) {
        KvConfig cfg;
        std::string line;
        int line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("config line " + std::to_string(line_no) + ": expected key=value");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty()) throw std::runtime_error("config line " + std::to_string(line_no) + ": empty key");
            cfg.values[key] = value;
        }
        return cfg;
    }

    static KvConfig load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("cannot open config " + path.string());
        return parse(is);
    }

    bool has(const std::string& key) const { return values.count(key) > 0; }

    std::string get(const std::string& key, const std::string& fallback) const {
        const auto it = values.find(key);
        return it == values.end() ? fallback : it->second;
    }
    double get_double(const std::string& key, double fallback) const {
        const auto it = values.find(key);
        return it == values.end() ? fallback : parse_double(it->second);
    }
    long long get_int(const std::string& key, long long fallback) const {
        const auto it = values.find(key);
        return it == values.end() ? fallback : parse_int(it->second);
    }
};

// ---------------------------------------------------------------------------
// Figure reproduction. All outputs are CSV; rows appear in a fixed nesting
// order so identical flags give byte-identical files.

struct ReproduceConfig {
    std::string figure;  // sim_eps0 | sim_eps_large | eval_error | traj_sim
    std::filesystem::path out_dir;
    double scale = 1.0;
    std::uint64_t seed = 0;
};

namespace detail {

inline int scaled_runs(int base, double scale) {
    return std::max(1, static_cast<int>(std::ceil(base * scale)));
}

inline std::unique_ptr<Policy> train_named_algo(const std::string& algo, const Dataset& d,
                                                const EndoModel& m, const AirSpec& spec,
                                                std::uint64_t seed) {
    FqiConfig cfg;
    cfg.fclass = FClass::Linear;
    cfg.seed = seed;
    if (algo == "fqi-air") return std::make_unique<GreedyQPolicy>(fqi_air_sweep(d, m, spec, cfg));
    if (algo == "fqi") return std::make_unique<GreedyQPolicy>(fqi_baseline(d, spec, cfg));
    if (algo == "mbs") {
        const DensityEstimate density = density_estimate(d, spec.n_actions);
        return mbs_qi(d, density, 0.001, spec, cfg, 0.0);
    }
    throw std::runtime_error("unknown algorithm '" + algo + "'");
}

inline std::filesystem::path reproduce_sim(const ReproduceConfig& rc, double eps_air) {
    const std::vector<std::string> policies = {"random", "constant", "learned"};
    const std::vector<std::string> algos = {"fqi-air", "fqi", "mbs"};
    const std::vector<int> n_grid = {1, 5, 10, 25, 50, 100, 200};
    const int runs = scaled_runs(30, rc.scale);
    RngStream fig(rc.seed, "fig/" + rc.figure);

    // The learned collector trains once per figure and collects everywhere.
    OrderExecEnv collector_env(eps_air, fig.child("collector-env"));
    CollectorConfig ccfg;
    ccfg.seed = fig.child("collector-seed").next_u64();
    CollectorResult collector =
        train_online_collector(collector_env, scaled_runs(1000, rc.scale), ccfg);
    const GreedyQPolicy learned(std::move(collector.q));
    const OrderExecEndoModel model;

    // returns[policy][algo][N][run]
    std::map<std::string, std::map<std::string, std::map<int, std::vector<double>>>> table;
    for (const std::string& policy : policies) {
        std::unique_ptr<Policy> owned;
        const Policy* behavior = &learned;
        if (policy != "learned") {
            owned = behavior_policy("order", policy);
            behavior = owned.get();
        }
        for (const int n : n_grid)
            for (int run = 0; run < runs; ++run) {
                RngStream rrng =
                    fig.child(policy + "/N" + std::to_string(n) + "/run" + std::to_string(run));
                OrderExecEnv env(eps_air, rrng.child("envparams"));
                const Dataset d =
                    collect_dataset(env, *behavior, n, rrng.child("collect").next_u64(), policy);
                const AirSpec spec = env.make_spec();
                for (const std::string& algo : algos) {
                    const auto trained =
                        train_named_algo(algo, d, model, spec, rrng.child("train/" + algo).next_u64());
                    OrderExecEnv eval_env(eps_air, rrng.child("envparams"));
                    const double ret =
                        j_true_mc(*trained, eval_env, 100, rrng.child("mc/" + algo)).mean;
                    table[policy][algo][n].push_back(ret);
                }
            }
    }

    const std::filesystem::path out = rc.out_dir / (rc.figure + ".csv");
    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot open " + out.string());
    os << "env,policy,algo,N,run,return\n";
    for (const std::string& policy : policies)
        for (const std::string& algo : algos)
            for (const int n : n_grid) {
                const auto& rets = table[policy][algo][n];
                for (int run = 0; run < static_cast<int>(rets.size()); ++run)
                    os << "order," << policy << ',' << algo << ',' << n << ',' << run << ','
                       << format_double(rets[run]) << '\n';
            }
    return out;
}

inline std::filesystem::path reproduce_eval_error(const ReproduceConfig& rc) {
    const std::vector<double> eps_grid = {0.0, 0.05, 0.1, 0.2, 0.4};
    const std::vector<int> n_grid = {1, 5, 25, 100, 200};
    const std::vector<std::string> collectors = {"random", "constant", "learned"};
    const int runs = scaled_runs(30, rc.scale);
    RngStream fig(rc.seed, "fig/eval_error");
    const OrderExecEndoModel model;
    const ConstantPolicy evaluated(1);

    const std::filesystem::path out = rc.out_dir / "eval_error.csv";
    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot open " + out.string());
    os << "env,eps_air,N,p90_abs_err\n";
    for (std::size_t ei = 0; ei < eps_grid.size(); ++ei) {
        const double eps = eps_grid[ei];
        // One learned collector per impact level.
        OrderExecEnv collector_env(eps, fig.child("collector-env/eps" + std::to_string(ei)));
        CollectorConfig ccfg;
        ccfg.seed = fig.child("collector-seed/eps" + std::to_string(ei)).next_u64();
        CollectorResult collector =
            train_online_collector(collector_env, scaled_runs(1000, rc.scale), ccfg);
        const GreedyQPolicy learned(std::move(collector.q));

        for (const int n : n_grid) {
            std::vector<double> errs;
            for (const std::string& collector_kind : collectors) {
                std::unique_ptr<Policy> owned;
                const Policy* behavior = &learned;
                if (collector_kind != "learned") {
                    owned = behavior_policy("order", collector_kind);
                    behavior = owned.get();
                }
                for (int run = 0; run < runs; ++run) {
                    RngStream rrng = fig.child("eps" + std::to_string(ei) + "/N" + std::to_string(n) +
                                               "/" + collector_kind + "/run" + std::to_string(run));
                    OrderExecEnv env(eps, rrng.child("envparams"));
                    const Dataset d = collect_dataset(env, *behavior, n,
                                                      rrng.child("collect").next_u64(), collector_kind);
                    const EvalReport rep =
                        j_hat(evaluated, d, model, env.make_spec(), rrng.child("jhat").next_u64());
                    OrderExecEnv true_env(eps, rrng.child("envparams"));
                    const double j = j_true_mc(evaluated, true_env, 1000, rrng.child("mc")).mean;
                    errs.push_back(std::abs(rep.j_hat - j));
                }
            }
            std::sort(errs.begin(), errs.end());
            const std::size_t rank = static_cast<std::size_t>(
                std::ceil(0.9 * static_cast<double>(errs.size())));
            const double p90 = errs[std::max<std::size_t>(rank, 1) - 1];
            os << "order," << format_double(eps) << ',' << n << ',' << format_double(p90) << '\n';
        }
    }
    return out;
}

inline std::vector<std::filesystem::path> reproduce_traj_sim(const ReproduceConfig& rc) {
    RngStream fig(rc.seed, "fig/traj_sim");
    OrderExecEnv env(0.0, fig.child("envparams"));
    const OrderRandomPolicy behavior;
    const Dataset d = collect_dataset(env, behavior, 25, fig.child("collect").next_u64(), "random");
    const AirSpec spec = env.make_spec();
    const OrderExecEndoModel model;

    std::vector<std::filesystem::path> files;
    for (const TrajAgent agent : {TrajAgent::QLearning, TrajAgent::Api}) {
        TrajSimConfig tcfg;
        tcfg.agent = agent;
        tcfg.iterations = scaled_runs(50, rc.scale);
        tcfg.fclass = FClass::Linear;
        tcfg.seed = fig.child("agent/" + traj_agent_name(agent)).next_u64();
        const TrajSimResult res = traj_sim_online(d, model, spec, tcfg);
        std::string stem = traj_agent_name(agent);
        std::replace(stem.begin(), stem.end(), '-', '_');
        const std::filesystem::path out = rc.out_dir / ("traj_sim_" + stem + ".csv");
        write_curve_csv(res.curve, out);
        files.push_back(out);
    }
    return files;
}

}  // namespace detail

inline std::vector<std::filesystem::path> reproduce_figure(const ReproduceConfig& rc) {
    if (rc.scale <= 0.0 || rc.scale > 1.0)
        throw std::invalid_argument("reproduce_figure: scale must be in (0,1]");
    std::filesystem::create_directories(rc.out_dir);
    if (rc.figure == "sim_eps0") return {detail::reproduce_sim(rc, 0.0)};
    if (rc.figure == "sim_eps_large") return {detail::reproduce_sim(rc, 0.8)};
    if (rc.figure == "eval_error") return {detail::reproduce_eval_error(rc)};
    if (rc.figure == "traj_sim") return detail::reproduce_traj_sim(rc);
    throw std::invalid_argument("reproduce_figure: unknown figure '" + rc.figure + "'");
}

}  // namespace airmdp
