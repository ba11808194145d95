#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "approx.hpp"
#include "core.hpp"
#include "envs.hpp"
#include "policy.hpp"
#include "rng.hpp"

namespace airmdp {

// Fixed data-collection rules per environment.
inline std::unique_ptr<Policy> behavior_policy(const std::string& env_id, const std::string& kind) {
    if (env_id == "order") {
        if (kind == "random") return std::make_unique<OrderRandomPolicy>();
        if (kind == "constant") return std::make_unique<ConstantPolicy>(0);
    } else if (env_id == "inventory") {
        if (kind == "random") return std::make_unique<InventoryRandomPolicy>();
        if (kind == "constant") return std::make_unique<InventoryConstPolicy>();
    } else {
        throw std::runtime_error("behavior_policy: unknown env '" + env_id + "'");
    }
    throw std::runtime_error("behavior_policy: unknown kind '" + kind + "'");
}

// Rolls out n full episodes; each episode draws from its own derived stream,
// so collection order never affects content.
inline Dataset collect_dataset(Env& env, const Policy& policy, int n_episodes, std::uint64_t seed,
                               const std::string& policy_label = "") {
    if (n_episodes < 1) throw std::invalid_argument("collect_dataset: need at least one episode");
    Dataset d;
    d.meta.env = env.id();
    d.meta.policy = policy_label.empty() ? policy.kind() : policy_label;
    d.meta.eps_air = env.eps_air();
    d.meta.seed = seed;
    d.meta.horizon = env.horizon();
    d.meta.n_actions = env.n_actions();
    d.meta.exo_dim = env.exo_dim();
    d.meta.endo_kind = env.endo_kind();

    RngStream base(seed, "collect");
    for (int i = 0; i < n_episodes; ++i) {
        RngStream ep_rng = base.child("ep/" + std::to_string(i));
        RngStream pol_rng = ep_rng.child("policy");
        Episode ep;
        FactoredState s = env.reset(ep_rng.child("env"));
        if (i == 0) d.meta.endo_dim = s.endo.dim();
        for (int h = 0; h < env.horizon(); ++h) {
            const int a = policy.action(s, h, pol_rng);
            StepOut out = env.step(a);
            ep.steps.push_back({std::move(s), a, out.reward});
            s = std::move(out.state);
        }
        d.episodes.push_back(std::move(ep));
    }
    return d;
}

// ---------------------------------------------------------------------------
// Online-trained collector: epsilon-greedy Q-learning with a stage-aware MLP,
// a bounded replay buffer, and a periodically refreshed bootstrap copy.
// Stands in for a small DQN. The curve is the per-episode behavior return.

struct CollectorConfig {
    FitConfig fit;                    // learning rate, hidden width, optimizer
    int batch_size = 32;              // replay minibatch per environment step
    int buffer_capacity = 10000;      // transitions kept, oldest evicted
    int target_refresh_episodes = 10; // bootstrap copy refresh period
    int anneal_episodes = 500;        // linear exploration decay window
    double eps_start = 1.0;
    double eps_end = 0.05;
    std::uint64_t seed = 0;
};

struct CollectorResult {
    QFunction q;
    std::vector<double> episode_returns;
};

inline CollectorResult train_online_collector(Env& env, int episodes, const CollectorConfig& cfg) {
    FitConfig fit = cfg.fit;
    fit.seed = cfg.seed;
    QFunction q = QFunction::make_horizon_feature(
        FeatureMap::for_env(env.id(), env.exo_dim(), 1), env.horizon(), env.n_actions(), fit);
    QFunction frozen = q;

    struct Transition {
        FactoredState s;
        int a = 0;
        double r = 0.0;
        FactoredState s2;
        int h = 0;
    };
    std::vector<Transition> buffer;
    buffer.reserve(cfg.buffer_capacity);
    std::size_t write_pos = 0;

    RngStream base(cfg.seed, "collector");
    RngStream batch_rng = base.child("batch");
    CollectorResult out{std::move(q), {}};
    MlpNet& net = out.q.hf_net();
    OptimizerState opt;
    opt.init(fit.optimizer, fit.learning_rate, net.n_params());
    std::vector<double> grads(net.n_params()), x(net.in), hbuf(net.hidden);
    for (int e = 0; e < episodes; ++e) {
        RngStream ep_rng = base.child("ep/" + std::to_string(e));
        const double frac = cfg.anneal_episodes > 0
                                ? std::min(1.0, static_cast<double>(e) / cfg.anneal_episodes)
                                : 1.0;
        const double eps = cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start);
        FactoredState s = env.reset(ep_rng.child("env"));
        double ret = 0.0;
        for (int h = 0; h < env.horizon(); ++h) {
            int a;
            if (ep_rng.uniform01() < eps)
                a = static_cast<int>(ep_rng.uniform_int(0, env.n_actions() - 1));
            else
                a = out.q.greedy(s, h);
            StepOut step = env.step(a);
            ret += step.reward;
            Transition t{std::move(s), a, step.reward, step.state, h};
            s = std::move(step.state);
            if (static_cast<int>(buffer.size()) < cfg.buffer_capacity) {
                buffer.push_back(std::move(t));
            } else {
                buffer[write_pos] = std::move(t);
                write_pos = (write_pos + 1) % buffer.size();
            }

            if (static_cast<int>(buffer.size()) >= cfg.batch_size) {
                std::fill(grads.begin(), grads.end(), 0.0);
                for (int b = 0; b < cfg.batch_size; ++b) {
                    const Transition& tr = buffer[static_cast<std::size_t>(
                        batch_rng.uniform_int(0, static_cast<long long>(buffer.size()) - 1))];
                    double target = tr.r;
                    if (tr.h + 1 < env.horizon()) target += frozen.max_value(tr.s2, tr.h + 1);
                    out.q.featurize_h(tr.s, tr.h, x);
                    net.accumulate_grad(x, tr.a, target, grads, hbuf);
                }
                for (double& g : grads) g /= cfg.batch_size;
                opt.step(net.params, grads);
            }
        }
        out.episode_returns.push_back(ret);
        if (cfg.target_refresh_episodes > 0 && (e + 1) % cfg.target_refresh_episodes == 0)
            frozen = out.q;
    }
    return out;
}

}  // namespace airmdp
