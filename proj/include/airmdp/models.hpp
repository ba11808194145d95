#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "approx.hpp"
#include "core.hpp"
#include "envs.hpp"
#include "rng.hpp"

namespace airmdp {

// ---------------------------------------------------------------------------
// Endogenous transition/reward model conditioned on the realized next exo
// value. Rewards that do not depend on the next exo simply ignore it.

class EndoModel {
public:
    virtual ~EndoModel() = default;
    virtual EndoValue step(const std::vector<double>& exo, const EndoValue& endo, int action,
                           const std::vector<double>& next_exo, int h, RngStream& rng) const = 0;
    virtual double reward(const std::vector<double>& exo, const EndoValue& endo, int action,
                          const std::vector<double>& next_exo, int h) const = 0;
};

// Share count drops by the executed sale; reward is price times sale.
class OrderExecEndoModel final : public EndoModel {
public:
    EndoValue step(const std::vector<double>&, const EndoValue& endo, int action,
                   const std::vector<double>&, int, RngStream&) const override {
        const long long shares = endo.as_int();
        return EndoValue::integer(shares - std::min<long long>(action, shares));
    }
    double reward(const std::vector<double>& exo, const EndoValue& endo, int action,
                  const std::vector<double>&, int) const override {
        const long long shares = endo.as_int();
        return exo[2] * static_cast<double>(std::min<long long>(action, shares));
    }
};

// Inventory carries over what demand leaves behind; cost needs the demand
// realized during the step, which is the next exo value.
class InventoryEndoModel final : public EndoModel {
public:
    EndoValue step(const std::vector<double>&, const EndoValue& endo, int action,
                   const std::vector<double>& next_exo, int, RngStream&) const override {
        return EndoValue::real1(std::max(0.0, endo.scalar() + action - next_exo[0]));
    }
    double reward(const std::vector<double>&, const EndoValue& endo, int action,
                  const std::vector<double>& next_exo, int) const override {
        return InventoryEnv::stage_reward(endo.scalar(), action, next_exo[0]);
    }
};

// Exact kernel of a TabularMdp, optionally overridden by a perturbed copy of
// the endo rows to emulate a model gap.
class TabularEndoModel final : public EndoModel {
public:
    explicit TabularEndoModel(const TabularMdp& m) : m_(&m) {}

    // Endo rows replaced by `rows`, laid out like TabularMdp::p_end.
    TabularEndoModel(const TabularMdp& m, std::vector<double> rows)
        : m_(&m), override_rows_(std::move(rows)) {}

    EndoValue step(const std::vector<double>& exo, const EndoValue& endo, int action,
                   const std::vector<double>& next_exo, int h, RngStream& rng) const override {
        const int x = static_cast<int>(exo[0]);
        const int e = static_cast<int>(endo.as_int());
        const int xn = static_cast<int>(next_exo[0]);
        const double* row = (override_rows_.empty() ? m_->p_end.data() : override_rows_.data()) +
                            m_->end_at(h, x, e, action, xn);
        return EndoValue::integer(static_cast<long long>(
            rng.categorical({row, static_cast<std::size_t>(m_->n_endo)})));
    }

    double reward(const std::vector<double>& exo, const EndoValue& endo, int action,
                  const std::vector<double>& next_exo, int h) const override {
        return m_->r(h, static_cast<int>(exo[0]), static_cast<int>(endo.as_int()), action,
                     static_cast<int>(next_exo[0]));
    }

    // Max TV distance between the exact endo rows and the override.
    double endo_gap() const {
        if (override_rows_.empty()) return 0.0;
        double gap = 0.0;
        for (std::size_t off = 0; off < m_->p_end.size(); off += m_->n_endo)
            gap = std::max(gap, tv_distance({m_->p_end.data() + off, static_cast<std::size_t>(m_->n_endo)},
                                            {override_rows_.data() + off,
                                             static_cast<std::size_t>(m_->n_endo)}));
        return gap;
    }

    const std::vector<double>& rows() const {
        return override_rows_.empty() ? m_->p_end : override_rows_;
    }

private:
    const TabularMdp* m_;
    std::vector<double> override_rows_;
};

inline std::unique_ptr<EndoModel> exact_endo_model(const std::string& env_id) {
    if (env_id == "order") return std::make_unique<OrderExecEndoModel>();
    if (env_id == "inventory") return std::make_unique<InventoryEndoModel>();
    throw std::runtime_error("exact_endo_model: no closed-form model for env '" + env_id + "'");
}

// ---------------------------------------------------------------------------
// Learned endo model: standardized-input MLP regression of the next endo
// value on (exo, endo, action, next exo). Reward stays exact unless a learned
// reward head is attached explicitly.

class LearnedEndoModel final : public EndoModel {
public:
    struct Nets {
        MlpNet endo_net;
        std::optional<MlpNet> reward_net;
        std::vector<double> in_mean, in_std;
        std::vector<double> endo_lo, endo_hi;  // clamp range from training data
        EndoKind endo_kind = EndoKind::Real;
        int endo_dim = 1;
    };

    LearnedEndoModel(Nets nets, std::unique_ptr<EndoModel> exact_reward)
        : nets_(std::move(nets)), exact_reward_(std::move(exact_reward)) {
        if (!exact_reward_ && !nets_.reward_net)
            throw std::invalid_argument("LearnedEndoModel: no reward source");
    }

    EndoValue step(const std::vector<double>& exo, const EndoValue& endo, int action,
                   const std::vector<double>& next_exo, int, RngStream&) const override {
        thread_local std::vector<double> x, hbuf, y;
        build_input(exo, endo, action, next_exo, x);
        hbuf.resize(nets_.endo_net.hidden);
        y.resize(nets_.endo_net.out);
        nets_.endo_net.forward(x, hbuf, y);
        for (int i = 0; i < nets_.endo_dim; ++i)
            y[i] = std::clamp(y[i], nets_.endo_lo[i], nets_.endo_hi[i]);
        if (nets_.endo_kind == EndoKind::Int)
            return EndoValue::integer(static_cast<long long>(std::llround(y[0])));
        return EndoValue::real(std::vector<double>(y.begin(), y.begin() + nets_.endo_dim));
    }

    double reward(const std::vector<double>& exo, const EndoValue& endo, int action,
                  const std::vector<double>& next_exo, int h) const override {
        if (exact_reward_) return exact_reward_->reward(exo, endo, action, next_exo, h);
        thread_local std::vector<double> x, hbuf;
        build_input(exo, endo, action, next_exo, x);
        hbuf.resize(nets_.reward_net->hidden);
        return nets_.reward_net->predict_one(x, 0, hbuf);
    }

private:
    void build_input(const std::vector<double>& exo, const EndoValue& endo, int action,
                     const std::vector<double>& next_exo, std::vector<double>& x) const {
        x.clear();
        x.insert(x.end(), exo.begin(), exo.end());
        if (endo.kind() == EndoKind::Int) x.push_back(static_cast<double>(endo.as_int()));
        else x.insert(x.end(), endo.as_real().begin(), endo.as_real().end());
        x.push_back(static_cast<double>(action));
        x.insert(x.end(), next_exo.begin(), next_exo.end());
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - nets_.in_mean[i]) / nets_.in_std[i];
    }

    Nets nets_;
    std::unique_ptr<EndoModel> exact_reward_;
};

struct EndoFitReport {
    double heldout_mae = 0.0;
    std::vector<std::string> warnings;
};

namespace detail {

struct RegressionData {
    std::vector<std::vector<double>> inputs;
    std::vector<std::vector<double>> targets;
};

inline void standardize(RegressionData& data, std::vector<double>& mean, std::vector<double>& stddev) {
    const std::size_t dim = data.inputs.front().size();
    mean.assign(dim, 0.0);
    stddev.assign(dim, 0.0);
    for (const auto& x : data.inputs)
        for (std::size_t i = 0; i < dim; ++i) mean[i] += x[i];
    for (double& m : mean) m /= static_cast<double>(data.inputs.size());
    for (const auto& x : data.inputs)
        for (std::size_t i = 0; i < dim; ++i) stddev[i] += (x[i] - mean[i]) * (x[i] - mean[i]);
    for (double& s : stddev) {
        s = std::sqrt(s / static_cast<double>(data.inputs.size()));
        if (s < 1e-12) s = 1.0;  // constant inputs pass through unscaled
    }
    for (auto& x : data.inputs)
        for (std::size_t i = 0; i < dim; ++i) x[i] = (x[i] - mean[i]) / stddev[i];
}

// Minibatch MLP regression on pre-standardized inputs; returns held-out MAE
// over all target dimensions.
inline std::pair<MlpNet, double> fit_mlp_regression(const RegressionData& data, int out_dim,
                                                    const FitConfig& cfg, const std::string& label,
                                                    double holdout_fraction = 0.1) {
    const std::size_t n = data.inputs.size();
    const auto n_holdout = static_cast<std::size_t>(std::floor(holdout_fraction * static_cast<double>(n)));
    RngStream split_rng(cfg.seed, label + "/split");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i)
        std::swap(order[i - 1],
                  order[static_cast<std::size_t>(split_rng.uniform_int(0, static_cast<long long>(i) - 1))]);

    const int in_dim = static_cast<int>(data.inputs.front().size());
    MlpNet net = MlpNet::init(in_dim, cfg.hidden, out_dim, RngStream(cfg.seed, label + "/init"));
    OptimizerState opt;
    opt.init(cfg.optimizer, cfg.learning_rate, net.n_params());
    RngStream batch_rng(cfg.seed, label + "/batch");
    std::vector<double> grads(net.n_params()), hbuf(net.hidden);
    const std::size_t n_train = n - n_holdout;
    if (n_train == 0) throw std::invalid_argument("fit_mlp_regression: no training rows");
    for (int u = 0; u < cfg.updates; ++u) {
        std::fill(grads.begin(), grads.end(), 0.0);
        const int b = std::min<int>(cfg.batch_size, static_cast<int>(n_train));
        for (int k = 0; k < b; ++k) {
            const std::size_t pick =
                order[static_cast<std::size_t>(batch_rng.uniform_int(0, static_cast<long long>(n_train) - 1))];
            for (int o = 0; o < out_dim; ++o)
                net.accumulate_grad(data.inputs[pick], o, data.targets[pick][o], grads, hbuf);
        }
        for (double& g : grads) g /= b;
        opt.step(net.params, grads);
    }
    double mae = 0.0;
    std::size_t terms = 0;
    std::vector<double> y(out_dim);
    const std::size_t eval_begin = n_holdout == 0 ? 0 : n_train;  // fall back to train MAE
    for (std::size_t i = eval_begin; i < n; ++i) {
        net.forward(data.inputs[order[i]], hbuf, y);
        for (int o = 0; o < out_dim; ++o) {
            mae += std::abs(y[o] - data.targets[order[i]][o]);
            ++terms;
        }
    }
    return {std::move(net), terms == 0 ? 0.0 : mae / static_cast<double>(terms)};
}

}  // namespace detail

// Fits the next-endo regression on consecutive dataset records. The exact
// reward stays attached; pass learn_reward=true to regress the reward too.
inline std::pair<std::unique_ptr<LearnedEndoModel>, EndoFitReport> fit_endo_model(
    const Dataset& d, const FitConfig& cfg, bool learn_reward = false) {
    detail::RegressionData data;
    const int endo_dim = d.meta.endo_dim;
    std::vector<double> endo_lo, endo_hi;
    std::vector<double> rewards;
    bool endo_varies = false;
    for (const Episode& ep : d.episodes) {
        for (std::size_t h = 0; h + 1 < ep.steps.size(); ++h) {
            const StepRecord& rec = ep.steps[h];
            const StepRecord& next = ep.steps[h + 1];
            std::vector<double> x;
            x.insert(x.end(), rec.state.exo.begin(), rec.state.exo.end());
            if (rec.state.endo.kind() == EndoKind::Int)
                x.push_back(static_cast<double>(rec.state.endo.as_int()));
            else
                x.insert(x.end(), rec.state.endo.as_real().begin(), rec.state.endo.as_real().end());
            x.push_back(static_cast<double>(rec.action));
            x.insert(x.end(), next.state.exo.begin(), next.state.exo.end());
            std::vector<double> t(endo_dim);
            for (int i = 0; i < endo_dim; ++i)
                t[i] = next.state.endo.kind() == EndoKind::Int
                           ? static_cast<double>(next.state.endo.as_int())
                           : next.state.endo.as_real()[i];
            if (endo_lo.empty()) {
                endo_lo = t;
                endo_hi = t;
            }
            for (int i = 0; i < endo_dim; ++i) {
                if (t[i] != endo_lo[i]) endo_varies = true;
                endo_lo[i] = std::min(endo_lo[i], t[i]);
                endo_hi[i] = std::max(endo_hi[i], t[i]);
            }
            rewards.push_back(rec.reward);
            data.inputs.push_back(std::move(x));
            data.targets.push_back(std::move(t));
        }
    }
    if (data.inputs.empty()) throw std::invalid_argument("fit_endo_model: no transitions in dataset");

    EndoFitReport report;
    if (!endo_varies)
        report.warnings.push_back("endo value never changes; fitted model is a constant");

    LearnedEndoModel::Nets nets;
    nets.endo_kind = d.meta.endo_kind;
    nets.endo_dim = endo_dim;
    nets.endo_lo = endo_lo;
    nets.endo_hi = endo_hi;
    detail::standardize(data, nets.in_mean, nets.in_std);
    auto [net, mae] = detail::fit_mlp_regression(data, endo_dim, cfg, "endo");
    nets.endo_net = std::move(net);
    report.heldout_mae = mae;

    if (learn_reward) {
        detail::RegressionData rdata;
        rdata.inputs = data.inputs;  // already standardized
        for (double r : rewards) rdata.targets.push_back({r});
        auto [rnet, rmae] = detail::fit_mlp_regression(rdata, 1, cfg, "endo-reward");
        (void)rmae;
        nets.reward_net = std::move(rnet);
        return {std::make_unique<LearnedEndoModel>(std::move(nets), nullptr), report};
    }
    return {std::make_unique<LearnedEndoModel>(std::move(nets), exact_endo_model(d.meta.env)), report};
}

// ---------------------------------------------------------------------------
// Learned dynamics for the model-based baselines.

enum class DynamicsKind { ExoOnly, Full };

class DynamicsModel {
public:
    DynamicsKind kind = DynamicsKind::ExoOnly;
    MlpNet net;
    std::vector<double> in_mean, in_std;
    int exo_dim = 0;
    int endo_dim = 0;
    EndoKind endo_kind = EndoKind::Int;

    // Next exo from the current exo alone.
    std::vector<double> predict_exo(const std::vector<double>& exo) const {
        if (kind != DynamicsKind::ExoOnly) throw std::logic_error("predict_exo: full model");
        thread_local std::vector<double> x, hbuf, y;
        x.assign(exo.begin(), exo.end());
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - in_mean[i]) / in_std[i];
        hbuf.resize(net.hidden);
        y.resize(net.out);
        net.forward(x, hbuf, y);
        return {y.begin(), y.end()};
    }

    struct FullStep {
        std::vector<double> exo;
        EndoValue endo;
        double reward = 0.0;
    };

    FullStep predict_full(const FactoredState& s, int action) const {
        if (kind != DynamicsKind::Full) throw std::logic_error("predict_full: exo-only model");
        thread_local std::vector<double> x, hbuf, y;
        x.clear();
        x.insert(x.end(), s.exo.begin(), s.exo.end());
        if (s.endo.kind() == EndoKind::Int) x.push_back(static_cast<double>(s.endo.as_int()));
        else x.insert(x.end(), s.endo.as_real().begin(), s.endo.as_real().end());
        x.push_back(static_cast<double>(action));
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - in_mean[i]) / in_std[i];
        hbuf.resize(net.hidden);
        y.resize(net.out);
        net.forward(x, hbuf, y);
        FullStep out;
        out.exo.assign(y.begin(), y.begin() + exo_dim);
        if (endo_kind == EndoKind::Int)
            out.endo = EndoValue::integer(std::max<long long>(0, std::llround(y[exo_dim])));
        else
            out.endo = EndoValue::real(std::vector<double>(y.begin() + exo_dim, y.begin() + exo_dim + endo_dim));
        out.reward = y[static_cast<std::size_t>(exo_dim) + endo_dim];
        return out;
    }
};

inline std::pair<DynamicsModel, double> fit_dynamics_model(const Dataset& d, DynamicsKind kind,
                                                           const FitConfig& cfg) {
    detail::RegressionData data;
    for (const Episode& ep : d.episodes)
        for (std::size_t h = 0; h + 1 < ep.steps.size(); ++h) {
            const StepRecord& rec = ep.steps[h];
            const StepRecord& next = ep.steps[h + 1];
            std::vector<double> x, t;
            if (kind == DynamicsKind::ExoOnly) {
                x = rec.state.exo;
                t = next.state.exo;
            } else {
                x.insert(x.end(), rec.state.exo.begin(), rec.state.exo.end());
                if (rec.state.endo.kind() == EndoKind::Int)
                    x.push_back(static_cast<double>(rec.state.endo.as_int()));
                else
                    x.insert(x.end(), rec.state.endo.as_real().begin(), rec.state.endo.as_real().end());
                x.push_back(static_cast<double>(rec.action));
                t.insert(t.end(), next.state.exo.begin(), next.state.exo.end());
                if (next.state.endo.kind() == EndoKind::Int)
                    t.push_back(static_cast<double>(next.state.endo.as_int()));
                else
                    t.insert(t.end(), next.state.endo.as_real().begin(), next.state.endo.as_real().end());
                t.push_back(rec.reward);
            }
            data.inputs.push_back(std::move(x));
            data.targets.push_back(std::move(t));
        }
    if (data.inputs.empty()) throw std::invalid_argument("fit_dynamics_model: no transitions in dataset");

    DynamicsModel model;
    model.kind = kind;
    model.exo_dim = d.meta.exo_dim;
    model.endo_dim = d.meta.endo_dim;
    model.endo_kind = d.meta.endo_kind;
    detail::standardize(data, model.in_mean, model.in_std);
    const int out_dim = static_cast<int>(data.targets.front().size());
    auto [net, mae] = detail::fit_mlp_regression(data, out_dim, cfg,
                                                 kind == DynamicsKind::ExoOnly ? "dyn-exo" : "dyn-full");
    model.net = std::move(net);
    return {std::move(model), mae};
}

// ---------------------------------------------------------------------------
// Empirical exogenous chain from a dataset with integer-valued exo states.

struct EmpiricalExoChain {
    int horizon = 0;
    int n_exo = 0;
    int n_endo = 0;
    std::vector<double> p;           // [h][x][x'], action independent
    std::vector<double> init_joint;  // [x][e]

    std::span<const double> row(int h, int x) const {
        return {p.data() + (static_cast<std::size_t>(h) * n_exo + x) * n_exo,
                static_cast<std::size_t>(n_exo)};
    }
};

inline EmpiricalExoChain empirical_exo_mdp(const Dataset& d, int n_exo, int n_endo) {
    EmpiricalExoChain chain;
    chain.n_exo = n_exo;
    chain.n_endo = n_endo;
    for (const Episode& ep : d.episodes)
        chain.horizon = std::max(chain.horizon, static_cast<int>(ep.steps.size()));
    if (chain.horizon == 0) throw std::invalid_argument("empirical_exo_mdp: empty dataset");
    // Transitions out of the final stage are unobservable; keep H-1 rows plus
    // a self-loop row at the last stage so the chain still normalizes.
    chain.p.assign(static_cast<std::size_t>(chain.horizon) * n_exo * n_exo, 0.0);
    chain.init_joint.assign(static_cast<std::size_t>(n_exo) * n_endo, 0.0);

    auto exo_index = [&](const FactoredState& s) {
        if (s.exo.size() != 1) throw std::runtime_error("empirical_exo_mdp: exo must be 1-dimensional");
        const double v = s.exo[0];
        if (v != std::floor(v) || v < 0 || v >= n_exo)
            throw std::runtime_error("empirical_exo_mdp: exo value " + format_double(v) +
                                     " is not a state index");
        return static_cast<int>(v);
    };

    std::vector<long> counts(static_cast<std::size_t>(chain.horizon) * n_exo * n_exo, 0);
    long n_starts = 0;
    for (const Episode& ep : d.episodes) {
        if (ep.steps.empty()) continue;
        const int x0 = exo_index(ep.steps[0].state);
        const long long e0 = ep.steps[0].state.endo.as_int();
        if (e0 < 0 || e0 >= n_endo) throw std::runtime_error("empirical_exo_mdp: endo out of range");
        chain.init_joint[static_cast<std::size_t>(x0) * n_endo + e0] += 1.0;
        ++n_starts;
        for (std::size_t h = 0; h + 1 < ep.steps.size(); ++h) {
            const int x = exo_index(ep.steps[h].state);
            const int xn = exo_index(ep.steps[h + 1].state);
            ++counts[(static_cast<std::size_t>(h) * n_exo + x) * n_exo + xn];
        }
    }
    for (double& v : chain.init_joint) v /= static_cast<double>(n_starts);
    for (int h = 0; h < chain.horizon; ++h)
        for (int x = 0; x < n_exo; ++x) {
            long total = 0;
            for (int xn = 0; xn < n_exo; ++xn)
                total += counts[(static_cast<std::size_t>(h) * n_exo + x) * n_exo + xn];
            double* row = chain.p.data() + (static_cast<std::size_t>(h) * n_exo + x) * n_exo;
            if (total == 0) {
                row[x] = 1.0;  // unseen states self-loop
            } else {
                for (int xn = 0; xn < n_exo; ++xn)
                    row[xn] = static_cast<double>(
                                  counts[(static_cast<std::size_t>(h) * n_exo + x) * n_exo + xn]) /
                              static_cast<double>(total);
            }
        }
    return chain;
}

}  // namespace airmdp
