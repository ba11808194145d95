#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "core.hpp"
#include "envs.hpp"
#include "models.hpp"
#include "policy.hpp"
#include "rng.hpp"

namespace airmdp {

// ---------------------------------------------------------------------------
// Exact finite-horizon dynamic programming on a TabularMdp. Without a policy
// argument this computes optimal values and the lowest-index greedy policy;
// with one it evaluates that (possibly stochastic) policy.

struct DpResult {
    int horizon = 0, n_exo = 0, n_endo = 0;
    std::vector<double> values;  // [h][x][e] for h in 0..H, stage H all zero
    double j = 0.0;              // value of the initial distribution
    std::unique_ptr<TablePolicy> greedy;

    double value(int h, int x, int e) const {
        return values[(static_cast<std::size_t>(h) * n_exo + x) * n_endo + e];
    }
};

inline DpResult dp_solve(const TabularMdp& m, const TablePolicy* policy = nullptr) {
    if (policy && (policy->horizon() != m.horizon || policy->n_exo() != m.n_exo ||
                   policy->n_endo() != m.n_endo || policy->n_actions() != m.n_actions))
        throw std::invalid_argument("dp_solve: policy dimensions do not match the MDP");
    DpResult res;
    res.horizon = m.horizon;
    res.n_exo = m.n_exo;
    res.n_endo = m.n_endo;
    res.values.assign(static_cast<std::size_t>(m.horizon + 1) * m.n_exo * m.n_endo, 0.0);
    if (!policy) res.greedy = std::make_unique<TablePolicy>(m.horizon, m.n_exo, m.n_endo, m.n_actions);

    auto value_at = [&](int h, int x, int e) -> double& {
        return res.values[(static_cast<std::size_t>(h) * m.n_exo + x) * m.n_endo + e];
    };
    for (int h = m.horizon - 1; h >= 0; --h)
        for (int x = 0; x < m.n_exo; ++x)
            for (int e = 0; e < m.n_endo; ++e) {
                double best = -std::numeric_limits<double>::infinity();
                int best_a = 0;
                double averaged = 0.0;
                for (int a = 0; a < m.n_actions; ++a) {
                    double q = 0.0;
                    const auto exo_row = m.exo_row(h, x, a);
                    for (int xn = 0; xn < m.n_exo; ++xn) {
                        if (exo_row[xn] == 0.0) continue;
                        double cont = 0.0;
                        const auto end_row = m.end_row(h, x, e, a, xn);
                        for (int en = 0; en < m.n_endo; ++en)
                            cont += end_row[en] * value_at(h + 1, xn, en);
                        q += exo_row[xn] * (m.r(h, x, e, a, xn) + cont);
                    }
                    if (policy) {
                        averaged += policy->row(h, x, e)[a] * q;
                    } else if (q > best) {
                        best = q;
                        best_a = a;
                    }
                }
                if (policy) {
                    value_at(h, x, e) = averaged;
                } else {
                    value_at(h, x, e) = best;
                    res.greedy->set_deterministic(h, x, e, best_a);
                }
            }
    for (int x = 0; x < m.n_exo; ++x)
        for (int e = 0; e < m.n_endo; ++e)
            res.j += m.init[static_cast<std::size_t>(x) * m.n_endo + e] * value_at(0, x, e);
    return res;
}

// ---------------------------------------------------------------------------
// Certificate bounds.

inline double eval_bound_thm2(long long n, double zeta, const AirSpec& spec) {
    if (n <= 0) throw std::invalid_argument("eval_bound_thm2: n must be positive");
    if (zeta <= 0.0 || zeta >= 1.0) throw std::invalid_argument("eval_bound_thm2: zeta outside (0,1)");
    return spec.v_max * (spec.horizon * spec.eps_air + spec.horizon * spec.eps_p +
                         std::sqrt(std::log(2.0 / zeta) / (2.0 * static_cast<double>(n))));
}

inline double subopt_bound_thm1(long long n, double zeta, const AirSpec& spec,
                                double f_class_size, double eps_apx = 0.0) {
    if (n <= 0) throw std::invalid_argument("subopt_bound_thm1: n must be positive");
    if (zeta <= 0.0 || zeta >= 1.0) throw std::invalid_argument("subopt_bound_thm1: zeta outside (0,1)");
    if (f_class_size < 1.0) throw std::invalid_argument("subopt_bound_thm1: |F| must be >= 1");
    if (eps_apx < 0.0) throw std::invalid_argument("subopt_bound_thm1: eps_apx must be >= 0");
    const double h = spec.horizon;
    const double sa = static_cast<double>(spec.endo_sweep.size()) * spec.n_actions;
    const double log_term = std::log(h * f_class_size * sa / zeta);
    const double inner = 72.0 * spec.v_max * spec.v_max * log_term / static_cast<double>(n) + 2.0 * eps_apx;
    return 2.0 * spec.v_max * h * (spec.eps_air + spec.eps_p) +
           (h + 1.0) * h * std::sqrt(sa) * std::sqrt(inner);
}

// ---------------------------------------------------------------------------
// Off-policy value estimate: replay each stored exogenous trajectory, rolling
// the endo model under the candidate policy, and average the returns. At the
// final stage the next exo value is unobservable, so the current one stands
// in (only rewards that read the next exo notice).

struct EvalReport {
    double j_hat = 0.0;
    double bound = 0.0;
    double zeta = 0.05;
    long long n = 0;
    std::uint64_t seed = 0;
    std::vector<double> returns;

    void write_csv(const std::filesystem::path& path) const {
        std::ofstream os(path);
        if (!os) throw std::runtime_error("EvalReport: cannot open " + path.string());
        os << "n,j_hat,bound,zeta,seed\n";
        os << n << ',' << format_double(j_hat) << ',' << format_double(bound) << ','
           << format_double(zeta) << ',' << seed << '\n';
    }
};

inline EvalReport j_hat(const Policy& policy, const Dataset& d, const EndoModel& model,
                        const AirSpec& spec, std::uint64_t seed, double zeta = 0.05) {
    if (d.episodes.empty()) throw std::invalid_argument("j_hat: empty dataset");
    EvalReport report;
    report.zeta = zeta;
    report.seed = seed;
    report.n = static_cast<long long>(d.episodes.size());
    RngStream base(seed, "jhat");
    for (std::size_t i = 0; i < d.episodes.size(); ++i) {
        const Episode& ep = d.episodes[i];
        RngStream traj_rng = base.child("traj/" + std::to_string(i));
        RngStream pol_rng = traj_rng.child("policy");
        RngStream model_rng = traj_rng.child("model");
        EndoValue endo = ep.steps[0].state.endo;
        double ret = 0.0;
        const int steps = static_cast<int>(ep.steps.size());
        for (int h = 0; h < steps; ++h) {
            const std::vector<double>& exo = ep.steps[h].state.exo;
            FactoredState s{exo, endo};
            const int a = policy.action(s, h, pol_rng);
            const std::vector<double>& next_exo = h + 1 < steps ? ep.steps[h + 1].state.exo : exo;
            ret += model.reward(exo, endo, a, next_exo, h);
            if (h + 1 < steps) endo = model.step(exo, endo, a, next_exo, h, model_rng);
        }
        report.returns.push_back(ret);
    }
    double sum = 0.0;
    for (double r : report.returns) sum += r;
    report.j_hat = sum / static_cast<double>(report.returns.size());
    report.bound = eval_bound_thm2(report.n, zeta, spec);
    return report;
}

// ---------------------------------------------------------------------------
// Markov surrogate induced by a behavior policy: replaces the exo kernel with
// the behavior's action-marginalized transition probabilities (computed by
// exact forward DP over the joint chain) and optionally swaps in approximate
// endo rows. The result is action-independent in its exo part.

inline TabularMdp build_baseline_mdp(const TabularMdp& m, const TablePolicy& behavior,
                                     const std::vector<double>* endo_override = nullptr) {
    if (behavior.horizon() != m.horizon || behavior.n_exo() != m.n_exo ||
        behavior.n_endo() != m.n_endo || behavior.n_actions() != m.n_actions)
        throw std::invalid_argument("build_baseline_mdp: policy dimensions do not match the MDP");
    if (endo_override && endo_override->size() != m.p_end.size())
        throw std::invalid_argument("build_baseline_mdp: endo override has wrong shape");

    TabularMdp out = m;
    if (endo_override) out.p_end = *endo_override;

    // d[x][e] = joint state distribution at the current stage under behavior.
    std::vector<double> d(m.init.begin(), m.init.end());
    std::vector<double> d_next(d.size());
    std::vector<double> mix_row(m.n_exo);
    for (int h = 0; h < m.horizon; ++h) {
        for (int x = 0; x < m.n_exo; ++x) {
            // Behavior's joint (state, action) weight at this exo state.
            double state_mass = 0.0;
            std::fill(mix_row.begin(), mix_row.end(), 0.0);
            for (int e = 0; e < m.n_endo; ++e) {
                const double w = d[static_cast<std::size_t>(x) * m.n_endo + e];
                if (w == 0.0) continue;
                state_mass += w;
                const auto probs = behavior.row(h, x, e);
                for (int a = 0; a < m.n_actions; ++a) {
                    const double wa = w * probs[a];
                    if (wa == 0.0) continue;
                    const auto exo_row = m.exo_row(h, x, a);
                    for (int xn = 0; xn < m.n_exo; ++xn) mix_row[xn] += wa * exo_row[xn];
                }
            }
            for (int a = 0; a < m.n_actions; ++a) {
                auto row = out.exo_row(h, x, a);
                if (state_mass > 0.0) {
                    for (int xn = 0; xn < m.n_exo; ++xn) row[xn] = mix_row[xn] / state_mass;
                } else {
                    std::fill(row.begin(), row.end(), 0.0);
                    row[x] = 1.0;  // unreached exo states self-loop
                }
            }
        }
        // Advance the joint distribution one stage in the true MDP.
        std::fill(d_next.begin(), d_next.end(), 0.0);
        for (int x = 0; x < m.n_exo; ++x)
            for (int e = 0; e < m.n_endo; ++e) {
                const double w = d[static_cast<std::size_t>(x) * m.n_endo + e];
                if (w == 0.0) continue;
                const auto probs = behavior.row(h, x, e);
                for (int a = 0; a < m.n_actions; ++a) {
                    const double wa = w * probs[a];
                    if (wa == 0.0) continue;
                    const auto exo_row = m.exo_row(h, x, a);
                    for (int xn = 0; xn < m.n_exo; ++xn) {
                        if (exo_row[xn] == 0.0) continue;
                        const auto end_row = m.end_row(h, x, e, a, xn);
                        const double wx = wa * exo_row[xn];
                        for (int en = 0; en < m.n_endo; ++en)
                            d_next[static_cast<std::size_t>(xn) * m.n_endo + en] += wx * end_row[en];
                    }
                }
            }
        d.swap(d_next);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Monte-Carlo on-environment evaluation.

struct McEstimate {
    double mean = 0.0;
    double stderr_ = 0.0;
    std::vector<double> returns;
};

inline McEstimate j_true_mc(const Policy& policy, Env& env, int n_rollouts, RngStream rng) {
    if (n_rollouts <= 0) throw std::invalid_argument("j_true_mc: n_rollouts must be positive");
    McEstimate est;
    for (int i = 0; i < n_rollouts; ++i) {
        RngStream ep_rng = rng.child("rollout/" + std::to_string(i));
        RngStream pol_rng = ep_rng.child("policy");
        FactoredState s = env.reset(ep_rng.child("env"));
        double ret = 0.0;
        for (int h = 0; h < env.horizon(); ++h) {
            const int a = policy.action(s, h, pol_rng);
            StepOut out = env.step(a);
            ret += out.reward;
            s = std::move(out.state);
        }
        est.returns.push_back(ret);
    }
    double sum = 0.0;
    for (double r : est.returns) sum += r;
    est.mean = sum / static_cast<double>(est.returns.size());
    double ss = 0.0;
    for (double r : est.returns) ss += (r - est.mean) * (r - est.mean);
    if (est.returns.size() > 1)
        est.stderr_ = std::sqrt(ss / (static_cast<double>(est.returns.size()) - 1.0) /
                                static_cast<double>(est.returns.size()));
    return est;
}

// ---------------------------------------------------------------------------
// Hyperparameter selection. The offline scorer sees only data and a model;
// the online scorer owns an environment. Ties keep the earliest candidate.

struct OfflineScorer {
    const Dataset* data = nullptr;
    const EndoModel* model = nullptr;
    AirSpec spec;
    std::uint64_t seed = 0;

    double operator()(const Policy& p) const { return j_hat(p, *data, *model, spec, seed).j_hat; }
};

struct OnlineScorer {
    Env* env = nullptr;
    int rollouts = 100;
    std::uint64_t seed = 0;

    double operator()(const Policy& p) const {
        return j_true_mc(p, *env, rollouts, RngStream(seed, "select-online")).mean;
    }
};

template <class Config, class TrainFn, class ScoreFn>
std::pair<Config, double> select_hyperparams(const std::vector<Config>& candidates, TrainFn&& train,
                                             ScoreFn&& score) {
    if (candidates.empty()) throw std::invalid_argument("select_hyperparams: no candidates");
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto policy = train(candidates[i]);
        const double s = score(*policy);
        if (s > best_score) {
            best_score = s;
            best = i;
        }
    }
    return {candidates[best], best_score};
}

}  // namespace airmdp
