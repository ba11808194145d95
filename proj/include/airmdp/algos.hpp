#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "approx.hpp"
#include "core.hpp"
#include "envs.hpp"
#include "eval.hpp"
#include "models.hpp"
#include "policy.hpp"
#include "rng.hpp"

namespace airmdp {

struct FqiConfig {
    FClass fclass = FClass::Linear;
    FitConfig fit;
    int batch_b = 128;   // sampled-variant minibatch size
    int outer_k = 100;   // sampled-variant outer iterations (target refresh)
    int updates_m = 100; // sampled-variant updates per outer iteration
    std::uint64_t seed = 0;
};

using FitTrace = std::vector<std::vector<double>>;

namespace detail {

inline void check_episodes(const Dataset& d, int horizon) {
    if (d.episodes.empty()) throw std::invalid_argument("empty dataset");
    for (const Episode& ep : d.episodes)
        if (static_cast<int>(ep.steps.size()) != horizon)
            throw std::invalid_argument("episode length does not match the horizon");
}

// Next exo at the last stage is unobservable; the current value stands in.
inline const std::vector<double>& next_exo_of(const Episode& ep, int h) {
    return h + 1 < static_cast<int>(ep.steps.size()) ? ep.steps[h + 1].state.exo
                                                     : ep.steps[h].state.exo;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Synthetic-sweep fitted Q iteration. Backward over stages: every episode's
// stored exo transition is paired with every sweep endo value and action, the
// next endo is sampled from the model, and one regression per stage fits the
// resulting targets. The last stage has no bootstrap term.

inline QFunction fqi_air_sweep(const Dataset& d, const EndoModel& m, const AirSpec& spec,
                               const FqiConfig& cfg, FitTrace* fit_trace = nullptr) {
    detail::check_episodes(d, spec.horizon);
    if (spec.endo_sweep.empty()) throw std::invalid_argument("fqi_air_sweep: empty endo sweep");
    const FeatureMap feat = FeatureMap::for_env(d.meta.env, d.meta.exo_dim, d.meta.endo_dim);
    FitConfig fit = cfg.fit;
    fit.seed = cfg.seed;
    QFunction q = QFunction::make_per_horizon(cfg.fclass, feat, spec.horizon, spec.n_actions, fit);
    if (fit_trace) fit_trace->assign(spec.horizon, {});

    RngStream base(cfg.seed, "fqi-air");
    std::vector<Sample> samples;
    samples.reserve(d.episodes.size() * spec.endo_sweep.size() * spec.n_actions);
    for (int h = spec.horizon - 1; h >= 0; --h) {
        RngStream stage_rng = base.child("h" + std::to_string(h));
        samples.clear();
        for (const Episode& ep : d.episodes) {
            const std::vector<double>& exo = ep.steps[h].state.exo;
            const std::vector<double>& next_exo = detail::next_exo_of(ep, h);
            for (const EndoValue& endo : spec.endo_sweep)
                for (int a = 0; a < spec.n_actions; ++a) {
                    double target = m.reward(exo, endo, a, next_exo, h);
                    if (h + 1 < spec.horizon) {
                        EndoValue next_endo = m.step(exo, endo, a, next_exo, h, stage_rng);
                        target += q.max_value({next_exo, std::move(next_endo)}, h + 1);
                    }
                    samples.push_back({{exo, endo}, a, target});
                }
        }
        auto trace = q.fit_slot(h, samples, fit);
        if (fit_trace) (*fit_trace)[h] = std::move(trace);
    }
    return q;
}

// ---------------------------------------------------------------------------
// Sampled variant: one stage-aware network trained by minibatch descent. Each
// draw picks a stored (episode, stage) transition plus a random sweep endo and
// action; bootstrap values come from a frozen copy refreshed after every outer
// iteration. The loss trace holds one mean squared error per outer iteration.

inline QFunction fqi_air_sampled(const Dataset& d, const EndoModel& m, const AirSpec& spec,
                                 const FqiConfig& cfg, std::vector<double>* loss_trace = nullptr) {
    detail::check_episodes(d, spec.horizon);
    if (spec.endo_sweep.empty()) throw std::invalid_argument("fqi_air_sampled: empty endo sweep");
    const long long total =
        static_cast<long long>(d.episodes.size()) * static_cast<long long>(spec.horizon);
    if (cfg.batch_b <= 0) throw std::invalid_argument("fqi_air_sampled: batch size must be positive");
    if (cfg.batch_b > total)
        throw std::invalid_argument("fqi_air_sampled: batch size exceeds dataset transitions");
    const FeatureMap feat = FeatureMap::for_env(d.meta.env, d.meta.exo_dim, d.meta.endo_dim);
    FitConfig fit = cfg.fit;
    fit.seed = cfg.seed;
    QFunction q = QFunction::make_horizon_feature(feat, spec.horizon, spec.n_actions, fit);
    QFunction frozen = q;

    MlpNet& net = q.hf_net();
    OptimizerState opt;
    opt.init(fit.optimizer, fit.learning_rate, net.n_params());
    RngStream rng(cfg.seed, "fqi-air-sampled");
    std::vector<double> grads(net.n_params()), x(net.in), hbuf(net.hidden);
    if (loss_trace) loss_trace->clear();

    const long long n_sweep = static_cast<long long>(spec.endo_sweep.size());
    for (int k = 0; k < cfg.outer_k; ++k) {
        double loss_sum = 0.0;
        long long loss_n = 0;
        for (int u = 0; u < cfg.updates_m; ++u) {
            std::fill(grads.begin(), grads.end(), 0.0);
            for (int b = 0; b < cfg.batch_b; ++b) {
                const long long idx = rng.uniform_int(0, total - 1);
                const Episode& ep = d.episodes[static_cast<std::size_t>(idx / spec.horizon)];
                const int h = static_cast<int>(idx % spec.horizon);
                const EndoValue& endo =
                    spec.endo_sweep[static_cast<std::size_t>(rng.uniform_int(0, n_sweep - 1))];
                const int a = static_cast<int>(rng.uniform_int(0, spec.n_actions - 1));
                const std::vector<double>& exo = ep.steps[h].state.exo;
                const std::vector<double>& next_exo = detail::next_exo_of(ep, h);
                double target = m.reward(exo, endo, a, next_exo, h);
                if (h + 1 < spec.horizon) {
                    EndoValue next_endo = m.step(exo, endo, a, next_exo, h, rng);
                    target += frozen.max_value({next_exo, std::move(next_endo)}, h + 1);
                }
                q.featurize_h({exo, endo}, h, x);
                const double y = net.accumulate_grad(x, a, target, grads, hbuf);
                loss_sum += (y - target) * (y - target);
                ++loss_n;
            }
            for (double& g : grads) g /= cfg.batch_b;
            opt.step(net.params, grads);
        }
        if (loss_trace) loss_trace->push_back(loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0);
        frozen = q;
    }
    return q;
}

// ---------------------------------------------------------------------------
// Classic fitted Q iteration on recorded transitions. With a density estimate
// and positive threshold, bootstrap values of rarely visited next pairs are
// replaced by the pessimistic floor before the max.

inline QFunction fitted_q_offline(const Dataset& d, int horizon, int n_actions, FClass fclass,
                                  const FitConfig& fit, const DensityEstimate* density,
                                  double threshold, double floor, FitTrace* fit_trace = nullptr) {
    detail::check_episodes(d, horizon);
    const FeatureMap feat = FeatureMap::for_env(d.meta.env, d.meta.exo_dim, d.meta.endo_dim);
    QFunction q = QFunction::make_per_horizon(fclass, feat, horizon, n_actions, fit);
    if (fit_trace) fit_trace->assign(horizon, {});

    std::vector<Sample> samples;
    samples.reserve(d.episodes.size());
    double buf[QFunction::kMaxActions];
    for (int h = horizon - 1; h >= 0; --h) {
        samples.clear();
        for (const Episode& ep : d.episodes) {
            const StepRecord& rec = ep.steps[h];
            double target = rec.reward;
            if (h + 1 < horizon) {
                const FactoredState& next = ep.steps[h + 1].state;
                if (density && threshold > 0.0) {
                    q.predict_all(next, h + 1, {buf, static_cast<std::size_t>(n_actions)});
                    double best = -std::numeric_limits<double>::infinity();
                    for (int a = 0; a < n_actions; ++a) {
                        const double v = density->mu(next, h + 1, a) >= threshold ? buf[a] : floor;
                        best = std::max(best, v);
                    }
                    target += best;
                } else {
                    target += q.max_value(next, h + 1);
                }
            }
            samples.push_back({rec.state, rec.action, target});
        }
        auto trace = q.fit_slot(h, samples, fit);
        if (fit_trace) (*fit_trace)[h] = std::move(trace);
    }
    return q;
}

inline QFunction fqi_baseline(const Dataset& d, const AirSpec& spec, const FqiConfig& cfg,
                              FitTrace* fit_trace = nullptr) {
    FitConfig fit = cfg.fit;
    fit.seed = cfg.seed;
    return fitted_q_offline(d, spec.horizon, spec.n_actions, cfg.fclass, fit, nullptr, 0.0, 0.0,
                            fit_trace);
}

// Density-masked variant. Threshold zero makes the mask a no-op, so the
// result collapses to the plain baseline policy.
inline std::unique_ptr<Policy> mbs_qi(const Dataset& d, const DensityEstimate& density,
                                      double threshold, const AirSpec& spec, const FqiConfig& cfg,
                                      double floor = 0.0, FitTrace* fit_trace = nullptr) {
    if (threshold < 0.0) throw std::invalid_argument("mbs_qi: threshold must be >= 0");
    FitConfig fit = cfg.fit;
    fit.seed = cfg.seed;
    QFunction q = fitted_q_offline(d, spec.horizon, spec.n_actions, cfg.fclass, fit,
                                   threshold > 0.0 ? &density : nullptr, threshold, floor, fit_trace);
    if (threshold == 0.0) return std::make_unique<GreedyQPolicy>(std::move(q));
    return std::make_unique<MaskedQPolicy>(std::move(q), density, threshold, floor);
}

// ---------------------------------------------------------------------------
// Model-based planning, fully empirical flavor: count-based kernels over an
// integer-state dataset assembled into a TabularMdp and solved exactly. The
// exo kernel is the action-marginalized empirical chain, so the result treats
// actions as impact-free by construction.

struct MbPlanResult {
    TabularMdp mdp;
    DpResult dp;  // dp.greedy is the planned policy
};

inline MbPlanResult mb_plan_empirical(const Dataset& d, int n_exo, int n_endo, int n_actions,
                                      double r_max) {
    const EmpiricalExoChain chain = empirical_exo_mdp(d, n_exo, n_endo);
    TabularMdp m;
    m.horizon = chain.horizon;
    m.n_exo = n_exo;
    m.n_endo = n_endo;
    m.n_actions = n_actions;
    m.r_max = r_max;
    m.allocate();
    for (int h = 0; h < m.horizon; ++h)
        for (int x = 0; x < n_exo; ++x) {
            const auto src = chain.row(h, x);
            for (int a = 0; a < n_actions; ++a)
                std::copy(src.begin(), src.end(), m.exo_row(h, x, a).begin());
        }

    // Endo rows and rewards from observed (stage, x, e, a, x') cells; cells
    // never observed keep a self-loop endo row and zero reward.
    std::vector<long> endo_counts(m.p_end.size(), 0);
    std::vector<long> rew_counts(m.reward.size(), 0);
    std::vector<double> rew_sums(m.reward.size(), 0.0);
    auto exo_of = [&](const FactoredState& s) { return static_cast<int>(s.exo.at(0)); };
    auto endo_of = [&](const FactoredState& s) {
        const long long e = s.endo.as_int();
        if (e < 0 || e >= n_endo) throw std::runtime_error("mb_plan_empirical: endo out of range");
        return static_cast<int>(e);
    };
    for (const Episode& ep : d.episodes)
        for (std::size_t h = 0; h < ep.steps.size(); ++h) {
            const StepRecord& rec = ep.steps[h];
            const int x = exo_of(rec.state), e = endo_of(rec.state);
            const int hh = static_cast<int>(h);
            if (h + 1 < ep.steps.size()) {
                const int xn = exo_of(ep.steps[h + 1].state);
                const int en = endo_of(ep.steps[h + 1].state);
                endo_counts[m.end_at(hh, x, e, rec.action, xn) + en] += 1;
                rew_sums[m.rew_at(hh, x, e, rec.action) + xn] += rec.reward;
                rew_counts[m.rew_at(hh, x, e, rec.action) + xn] += 1;
            } else {
                // Last stage: the chain self-loops, so park the observed
                // reward on the x' = x cell the solver will actually read.
                rew_sums[m.rew_at(hh, x, e, rec.action) + x] += rec.reward;
                rew_counts[m.rew_at(hh, x, e, rec.action) + x] += 1;
            }
        }
    // Normalize observed endo rows; unseen cells self-loop on their e index
    // (flat layout is [h][x][e][a][xn][en]).
    {
        std::size_t cell = 0;
        for (int h = 0; h < m.horizon; ++h)
            for (int x = 0; x < n_exo; ++x)
                for (int e = 0; e < n_endo; ++e)
                    for (int a = 0; a < n_actions; ++a)
                        for (int xn = 0; xn < n_exo; ++xn, cell += n_endo) {
                            long total = 0;
                            for (int en = 0; en < n_endo; ++en) total += endo_counts[cell + en];
                            if (total == 0) {
                                m.p_end[cell + e] = 1.0;
                            } else {
                                for (int en = 0; en < n_endo; ++en)
                                    m.p_end[cell + en] =
                                        static_cast<double>(endo_counts[cell + en]) / total;
                            }
                        }
    }
    for (std::size_t i = 0; i < m.reward.size(); ++i)
        if (rew_counts[i] > 0) m.reward[i] = rew_sums[i] / static_cast<double>(rew_counts[i]);
    std::copy(chain.init_joint.begin(), chain.init_joint.end(), m.init.begin());

    MbPlanResult out{std::move(m), {}};
    out.dp = dp_solve(out.mdp);
    return out;
}

// Learned-dynamics flavor: same backward sweep as fqi_air_sweep, except the
// next exo value comes from the dynamics model rather than the dataset (and
// the full model also supplies reward and next endo).

inline QFunction mb_plan_learned(const Dataset& d, const DynamicsModel& dyn, const EndoModel* m,
                                 const AirSpec& spec, const FqiConfig& cfg,
                                 FitTrace* fit_trace = nullptr) {
    detail::check_episodes(d, spec.horizon);
    if (spec.endo_sweep.empty()) throw std::invalid_argument("mb_plan_learned: empty endo sweep");
    if (dyn.kind == DynamicsKind::ExoOnly && !m)
        throw std::invalid_argument("mb_plan_learned: exo-only dynamics need an endo model");
    const FeatureMap feat = FeatureMap::for_env(d.meta.env, d.meta.exo_dim, d.meta.endo_dim);
    FitConfig fit = cfg.fit;
    fit.seed = cfg.seed;
    QFunction q = QFunction::make_per_horizon(cfg.fclass, feat, spec.horizon, spec.n_actions, fit);
    if (fit_trace) fit_trace->assign(spec.horizon, {});

    RngStream base(cfg.seed, "mb-plan");
    std::vector<Sample> samples;
    for (int h = spec.horizon - 1; h >= 0; --h) {
        RngStream stage_rng = base.child("h" + std::to_string(h));
        samples.clear();
        for (const Episode& ep : d.episodes) {
            const std::vector<double>& exo = ep.steps[h].state.exo;
            if (dyn.kind == DynamicsKind::ExoOnly) {
                const std::vector<double> next_exo = dyn.predict_exo(exo);
                for (const EndoValue& endo : spec.endo_sweep)
                    for (int a = 0; a < spec.n_actions; ++a) {
                        double target = m->reward(exo, endo, a, next_exo, h);
                        if (h + 1 < spec.horizon) {
                            EndoValue next_endo = m->step(exo, endo, a, next_exo, h, stage_rng);
                            target += q.max_value({next_exo, std::move(next_endo)}, h + 1);
                        }
                        samples.push_back({{exo, endo}, a, target});
                    }
            } else {
                for (const EndoValue& endo : spec.endo_sweep)
                    for (int a = 0; a < spec.n_actions; ++a) {
                        DynamicsModel::FullStep fs = dyn.predict_full({exo, endo}, a);
                        double target = fs.reward;
                        if (h + 1 < spec.horizon)
                            target += q.max_value({std::move(fs.exo), std::move(fs.endo)}, h + 1);
                        samples.push_back({{exo, endo}, a, target});
                    }
            }
        }
        auto trace = q.fit_slot(h, samples, fit);
        if (fit_trace) (*fit_trace)[h] = std::move(trace);
    }
    return q;
}

// ---------------------------------------------------------------------------
// Online agents run against the replay simulator: each simulated episode
// replays a randomly chosen stored exo trajectory while the endo model reacts
// to the agent's actions. The learning curve holds one greedy-policy
// evaluation per iteration (or a single initial entry when iterations = 0).

enum class TrajAgent { QLearning, Api };

inline std::string traj_agent_name(TrajAgent a) {
    return a == TrajAgent::QLearning ? "q-learning" : "api";
}

inline TrajAgent traj_agent_from_name(const std::string& n) {
    if (n == "q-learning") return TrajAgent::QLearning;
    if (n == "api") return TrajAgent::Api;
    throw std::runtime_error("unknown agent '" + n + "'");
}

struct TrajSimConfig {
    TrajAgent agent = TrajAgent::QLearning;
    int iterations = 30;
    int episodes_per_iteration = 0;  // 0 means one dataset-sized batch
    double alpha = 1.0;              // q-learning step size
    double epsilon = 0.1;            // exploration rate
    FClass fclass = FClass::Linear;  // policy-iteration regression class
    FitConfig fit;
    std::uint64_t seed = 0;
};

struct CurvePoint {
    int iteration = 0;
    double return_mean = 0.0;
    double return_stderr = 0.0;
};

inline void write_curve_csv(const std::vector<CurvePoint>& curve, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_curve_csv: cannot open " + path.string());
    os << "iteration,return_mean,return_stderr\n";
    for (const CurvePoint& p : curve)
        os << p.iteration << ',' << format_double(p.return_mean) << ','
           << format_double(p.return_stderr) << '\n';
}

struct TrajSimResult {
    QFunction q;
    std::vector<CurvePoint> curve;
};

namespace detail {

inline CurvePoint replay_eval(const QFunction& q, const Dataset& d, const EndoModel& m,
                              int iteration, RngStream rng) {
    std::vector<double> returns;
    returns.reserve(d.episodes.size());
    for (std::size_t i = 0; i < d.episodes.size(); ++i) {
        const Episode& ep = d.episodes[i];
        RngStream traj_rng = rng.child("traj/" + std::to_string(i));
        EndoValue endo = ep.steps[0].state.endo;
        double ret = 0.0;
        const int steps = static_cast<int>(ep.steps.size());
        for (int h = 0; h < steps; ++h) {
            const FactoredState s{ep.steps[h].state.exo, endo};
            const int a = q.greedy(s, h);
            const std::vector<double>& next_exo = next_exo_of(ep, h);
            ret += m.reward(s.exo, endo, a, next_exo, h);
            if (h + 1 < steps) endo = m.step(s.exo, endo, a, next_exo, h, traj_rng);
        }
        returns.push_back(ret);
    }
    CurvePoint p;
    p.iteration = iteration;
    for (double r : returns) p.return_mean += r;
    p.return_mean /= static_cast<double>(returns.size());
    if (returns.size() > 1) {
        double ss = 0.0;
        for (double r : returns) ss += (r - p.return_mean) * (r - p.return_mean);
        p.return_stderr = std::sqrt(ss / (static_cast<double>(returns.size()) - 1.0) /
                                    static_cast<double>(returns.size()));
    }
    return p;
}

}  // namespace detail

inline TrajSimResult traj_sim_online(const Dataset& d, const EndoModel& m, const AirSpec& spec,
                                     const TrajSimConfig& cfg) {
    detail::check_episodes(d, spec.horizon);
    const FeatureMap feat = FeatureMap::for_env(d.meta.env, d.meta.exo_dim, d.meta.endo_dim);
    FitConfig fit = cfg.fit;
    fit.seed = cfg.seed;
    const FClass fclass = cfg.agent == TrajAgent::QLearning ? FClass::Tabular : cfg.fclass;
    QFunction q = QFunction::make_per_horizon(fclass, feat, spec.horizon, spec.n_actions, fit);

    const int per_iter = cfg.episodes_per_iteration > 0 ? cfg.episodes_per_iteration
                                                        : static_cast<int>(d.episodes.size());
    RngStream rng(cfg.seed, "trajsim");
    TrajSimResult out{std::move(q), {}};
    if (cfg.iterations <= 0) {
        out.curve.push_back(detail::replay_eval(out.q, d, m, 0, rng.child("eval0")));
        return out;
    }

    // Per-stage transition buffers reused by the policy-iteration agent.
    std::vector<std::vector<Sample>> stage_samples(spec.horizon);
    std::vector<std::vector<FactoredState>> stage_next(spec.horizon);
    double buf[QFunction::kMaxActions];
    long episode_counter = 0;
    for (int it = 1; it <= cfg.iterations; ++it) {
        if (cfg.agent == TrajAgent::Api) {
            for (auto& v : stage_samples) v.clear();
            for (auto& v : stage_next) v.clear();
        }
        for (int e = 0; e < per_iter; ++e, ++episode_counter) {
            RngStream ep_rng = rng.child("ep/" + std::to_string(episode_counter));
            const Episode& ep = d.episodes[static_cast<std::size_t>(
                ep_rng.uniform_int(0, static_cast<long long>(d.episodes.size()) - 1))];
            EndoValue endo = ep.steps[0].state.endo;
            for (int h = 0; h < spec.horizon; ++h) {
                const FactoredState s{ep.steps[h].state.exo, endo};
                int a;
                if (ep_rng.uniform01() < cfg.epsilon)
                    a = static_cast<int>(ep_rng.uniform_int(0, spec.n_actions - 1));
                else
                    a = out.q.greedy(s, h);
                const std::vector<double>& next_exo = detail::next_exo_of(ep, h);
                const double r = m.reward(s.exo, endo, a, next_exo, h);
                EndoValue next_endo;
                if (h + 1 < spec.horizon) next_endo = m.step(s.exo, endo, a, next_exo, h, ep_rng);
                if (cfg.agent == TrajAgent::QLearning) {
                    double target = r;
                    if (h + 1 < spec.horizon)
                        target += out.q.max_value({next_exo, next_endo}, h + 1);
                    out.q.tabular_update(h, s, a, target, cfg.alpha);
                } else {
                    stage_samples[h].push_back({s, a, r});
                    if (h + 1 < spec.horizon) stage_next[h].push_back({next_exo, next_endo});
                }
                endo = std::move(next_endo);
            }
        }
        if (cfg.agent == TrajAgent::Api) {
            // Fitted evaluation of the iteration's behavior-generating policy:
            // bootstrap actions come from the pre-update greedy policy, values
            // from the freshly fitted stage above.
            const QFunction prev = out.q;
            for (int h = spec.horizon - 1; h >= 0; --h) {
                auto& samples = stage_samples[h];
                if (h + 1 < spec.horizon) {
                    for (std::size_t i = 0; i < samples.size(); ++i) {
                        const FactoredState& next = stage_next[h][i];
                        const int a_next = prev.greedy(next, h + 1);
                        out.q.predict_all(next, h + 1,
                                          {buf, static_cast<std::size_t>(spec.n_actions)});
                        samples[i].target += buf[a_next];
                    }
                }
                out.q.fit_slot(h, samples, fit);
            }
        }
        out.curve.push_back(
            detail::replay_eval(out.q, d, m, it, rng.child("eval/" + std::to_string(it))));
    }
    return out;
}

}  // namespace airmdp
