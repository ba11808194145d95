#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "core.hpp"
#include "rng.hpp"

namespace airmdp {

// ---------------------------------------------------------------------------
// Time-indexed factored finite MDP with exogenous/endogenous structure.
// Kernels are dense row-major arrays:
//   p_exo[h][x][a][x']            next-exo distribution
//   p_end[h][x][e][a][x'][e']     next-endo distribution given realized x'
//   reward[h][x][e][a][x']        bounded reward, may ignore x'
//   init[x][e]                    joint initial distribution

struct TabularMdp {
    int horizon = 0;
    int n_exo = 0;
    int n_endo = 0;
    int n_actions = 0;
    double r_max = 1.0;
    std::vector<double> p_exo;
    std::vector<double> p_end;
    std::vector<double> reward;
    std::vector<double> init;

    void allocate() {
        p_exo.assign(static_cast<std::size_t>(horizon) * n_exo * n_actions * n_exo, 0.0);
        p_end.assign(static_cast<std::size_t>(horizon) * n_exo * n_endo * n_actions * n_exo * n_endo, 0.0);
        reward.assign(static_cast<std::size_t>(horizon) * n_exo * n_endo * n_actions * n_exo, 0.0);
        init.assign(static_cast<std::size_t>(n_exo) * n_endo, 0.0);
    }

    std::size_t exo_at(int h, int x, int a) const {
        return ((static_cast<std::size_t>(h) * n_exo + x) * n_actions + a) * n_exo;
    }
    std::size_t end_at(int h, int x, int e, int a, int xn) const {
        return ((((static_cast<std::size_t>(h) * n_exo + x) * n_endo + e) * n_actions + a) * n_exo + xn) *
               n_endo;
    }
    std::size_t rew_at(int h, int x, int e, int a) const {
        return (((static_cast<std::size_t>(h) * n_exo + x) * n_endo + e) * n_actions + a) * n_exo;
    }

    std::span<double> exo_row(int h, int x, int a) {
        return {p_exo.data() + exo_at(h, x, a), static_cast<std::size_t>(n_exo)};
    }
    std::span<const double> exo_row(int h, int x, int a) const {
        return {p_exo.data() + exo_at(h, x, a), static_cast<std::size_t>(n_exo)};
    }
    std::span<double> end_row(int h, int x, int e, int a, int xn) {
        return {p_end.data() + end_at(h, x, e, a, xn), static_cast<std::size_t>(n_endo)};
    }
    std::span<const double> end_row(int h, int x, int e, int a, int xn) const {
        return {p_end.data() + end_at(h, x, e, a, xn), static_cast<std::size_t>(n_endo)};
    }
    double r(int h, int x, int e, int a, int xn) const { return reward[rew_at(h, x, e, a) + xn]; }
    double& r(int h, int x, int e, int a, int xn) { return reward[rew_at(h, x, e, a) + xn]; }

    void validate() const {
        auto check_row = [](std::span<const double> row, const char* what) {
            double sum = 0.0;
            for (double p : row) {
                if (p < 0.0) throw std::runtime_error(std::string(what) + ": negative probability");
                sum += p;
            }
            if (std::abs(sum - 1.0) > 1e-9)
                throw std::runtime_error(std::string(what) + ": row sums to " + format_double(sum));
        };
        for (int h = 0; h < horizon; ++h)
            for (int x = 0; x < n_exo; ++x)
                for (int a = 0; a < n_actions; ++a) {
                    check_row(exo_row(h, x, a), "p_exo");
                    for (int e = 0; e < n_endo; ++e)
                        for (int xn = 0; xn < n_exo; ++xn)
                            check_row(end_row(h, x, e, a, xn), "p_end");
                }
        check_row({init.data(), init.size()}, "init");
        for (double rv : reward)
            if (rv < -r_max || rv > r_max) throw std::runtime_error("reward outside [-r_max, r_max]");
    }
};

inline double tv_distance(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw std::invalid_argument("tv_distance: size mismatch");
    double l1 = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) l1 += std::abs(p[i] - q[i]);
    return 0.5 * l1;
}

// Exact max over stages, exo states and action pairs of the total-variation
// distance between per-action next-exo rows.
inline double measure_air_epsilon(const TabularMdp& m) {
    double eps = 0.0;
    for (int h = 0; h < m.horizon; ++h)
        for (int x = 0; x < m.n_exo; ++x)
            for (int a = 0; a < m.n_actions; ++a)
                for (int b = a + 1; b < m.n_actions; ++b)
                    eps = std::max(eps, tv_distance(m.exo_row(h, x, a), m.exo_row(h, x, b)));
    return eps;
}

struct RandomAirMdp {
    TabularMdp mdp;
    double achieved_eps_air = 0.0;
};

// Random dense instance whose exo kernel violates action independence by a
// controlled amount: per-action rows share a base row plus a two-coordinate
// mass shift, so the max pairwise TV lands in [eps_air/2, eps_air].
inline RandomAirMdp make_random_tabular_air_mdp(int n_exo, int n_endo, int n_actions, int horizon,
                                                double eps_air, RngStream rng, double r_max = 1.0) {
    if (n_exo < 1 || n_endo < 1 || n_actions < 1 || horizon < 1)
        throw std::invalid_argument("make_random_tabular_air_mdp: empty dimension");
    if (eps_air < 0.0 || eps_air > 1.0)
        throw std::invalid_argument("make_random_tabular_air_mdp: eps_air outside [0,1]");
    TabularMdp m;
    m.horizon = horizon;
    m.n_exo = n_exo;
    m.n_endo = n_endo;
    m.n_actions = n_actions;
    m.r_max = r_max;
    m.allocate();

    auto fill_simplex = [&](std::span<double> row) {
        double total = 0.0;
        for (double& p : row) {
            p = 0.05 + rng.uniform01();  // bounded away from zero keeps rows dense
            total += p;
        }
        for (double& p : row) p /= total;
    };

    const bool want_gap = eps_air > 0.0 && n_exo >= 2 && n_actions >= 2;
    for (int h = 0; h < horizon; ++h)
        for (int x = 0; x < n_exo; ++x) {
            std::vector<double> base(n_exo);
            fill_simplex(base);
            int donor = 0, recipient = 0;
            if (want_gap) {
                // Park enough mass on one coordinate so shifting up to
                // eps_air away stays feasible for any eps_air <= 1.
                donor = static_cast<int>(rng.uniform_int(0, n_exo - 1));
                recipient = (donor + 1) % n_exo;
                for (double& p : base) p *= 0.3;
                base[donor] += 0.7;
            }
            const double u_hi = std::min(0.95, 0.7 / eps_air);
            const double spread = want_gap ? eps_air * rng.uniform(0.6, u_hi) : 0.0;
            for (int a = 0; a < n_actions; ++a) {
                // Per-action shift in [0, spread]; endpoints pin the max
                // pairwise TV to exactly `spread`.
                double delta = 0.0;
                if (want_gap) {
                    if (a == n_actions - 1) delta = spread;
                    else if (a > 0) delta = rng.uniform(0.0, spread);
                }
                auto row = m.exo_row(h, x, a);
                std::copy(base.begin(), base.end(), row.begin());
                row[donor] -= delta;
                row[recipient] += delta;
            }
            for (int e = 0; e < n_endo; ++e)
                for (int a = 0; a < n_actions; ++a) {
                    for (int xn = 0; xn < n_exo; ++xn) fill_simplex(m.end_row(h, x, e, a, xn));
                    // Rewards do not depend on the realized next exo state.
                    const double rv = rng.uniform(0.0, r_max);
                    for (int k = 0; k < n_exo; ++k) m.reward[m.rew_at(h, x, e, a) + k] = rv;
                }
        }
    fill_simplex({m.init.data(), m.init.size()});
    m.validate();
    const double achieved = measure_air_epsilon(m);
    return {std::move(m), achieved};
}

// ---------------------------------------------------------------------------
// Environment interface: single-owner mutable state machines. All randomness
// comes from streams fixed at reset, so identical seeds replay identically.

struct StepOut {
    FactoredState state;
    double reward = 0.0;
};

class Env {
public:
    virtual ~Env() = default;
    virtual std::string id() const = 0;
    virtual int horizon() const = 0;
    virtual int n_actions() const = 0;
    virtual int exo_dim() const = 0;
    virtual EndoKind endo_kind() const = 0;
    virtual double eps_air() const = 0;
    virtual FactoredState reset(const RngStream& episode_rng) = 0;
    virtual StepOut step(int action) = 0;
    virtual AirSpec make_spec(double eps_p = 0.0) const = 0;
};

// ---------------------------------------------------------------------------
// Liquidation task: sell off M=10 shares over H=100 steps against an ARMA(2,2)
// price. Actions sell 0..5 shares at the published price; selling can knock
// the price down 10% with probability eps_air.

class OrderExecEnv final : public Env {
public:
    static constexpr int kHorizon = 100;
    static constexpr int kShares = 10;
    static constexpr int kMaxSell = 5;
    static constexpr int kWindow = 3;

    struct ArmaParams {
        std::array<double, 2> phi{};
        std::array<double, 2> theta{};
        double c = 0.0;
    };

    // ARMA coefficients are drawn once per instance; frozen_noise_seed makes
    // every episode replay one fixed innovation path.
    OrderExecEnv(double eps_air, RngStream instance_rng,
                 std::optional<std::uint64_t> frozen_noise_seed = std::nullopt)
        : eps_air_(eps_air), frozen_noise_seed_(frozen_noise_seed) {
        params_.phi[0] = instance_rng.child("phi1").uniform(-0.9, 0.0);
        params_.phi[1] = instance_rng.child("phi2").uniform(0.0, 0.9);
        params_.theta[0] = instance_rng.child("theta1").uniform(-0.5, 0.5);
        params_.theta[1] = instance_rng.child("theta2").uniform(-0.5, 0.5);
    }

    OrderExecEnv(double eps_air, ArmaParams params,
                 std::optional<std::uint64_t> frozen_noise_seed = std::nullopt)
        : eps_air_(eps_air), params_(params), frozen_noise_seed_(frozen_noise_seed) {}

    std::string id() const override { return "order"; }
    int horizon() const override { return kHorizon; }
    int n_actions() const override { return kMaxSell + 1; }
    int exo_dim() const override { return kWindow; }
    EndoKind endo_kind() const override { return EndoKind::Int; }
    double eps_air() const override { return eps_air_; }
    const ArmaParams& params() const { return params_; }

    AirSpec make_spec(double eps_p = 0.0) const override {
        return AirSpec::make(kHorizon, eps_air_, eps_p, static_cast<double>(kMaxSell), kMaxSell + 1,
                             integer_sweep(0, kShares));
    }

    FactoredState reset(const RngStream& episode_rng) override {
        innov_rng_ = frozen_noise_seed_ ? RngStream(*frozen_noise_seed_, "order/frozen-noise")
                                        : episode_rng.child("innov");
        impact_rng_ = episode_rng.child("impact");
        latent_x_.fill(0.0);
        latent_eps_.fill(0.0);
        window_.fill(0.0);
        for (int t = 0; t < kBurnIn; ++t) advance_price(false);
        shares_ = kShares;
        h_ = 0;
        return state();
    }

    StepOut step(int action) override {
        if (action < 0 || action > kMaxSell) throw std::invalid_argument("OrderExecEnv: bad action");
        if (h_ >= kHorizon) throw std::logic_error("OrderExecEnv: episode finished");
        const int sold = static_cast<int>(std::min<long long>(action, shares_));
        const double reward = window_[kWindow - 1] * sold;
        shares_ -= sold;
        advance_price(sold > 0);
        ++h_;
        return {state(), reward};
    }

private:
    static constexpr int kBurnIn = 20;

    FactoredState state() const {
        FactoredState s;
        s.exo.assign(window_.begin(), window_.end());
        s.endo = EndoValue::integer(shares_);
        return s;
    }

    void advance_price(bool sold_positive) {
        const double eps_t = innov_rng_.normal();
        double latent = params_.c + eps_t + params_.phi[0] * latent_x_[0] + params_.phi[1] * latent_x_[1] +
                        params_.theta[0] * latent_eps_[0] + params_.theta[1] * latent_eps_[1];
        double price = std::clamp(latent / 20.0 + 0.5, 0.0, 1.0);
        if (sold_positive && eps_air_ > 0.0 && impact_rng_.bernoulli(eps_air_)) {
            price *= 0.9;
            latent = 20.0 * (price - 0.5);  // keep the drop persistent
        }
        latent_x_[1] = latent_x_[0];
        latent_x_[0] = latent;
        latent_eps_[1] = latent_eps_[0];
        latent_eps_[0] = eps_t;
        window_[0] = window_[1];
        window_[1] = window_[2];
        window_[2] = price;
    }

    double eps_air_;
    ArmaParams params_;
    std::optional<std::uint64_t> frozen_noise_seed_;
    RngStream innov_rng_{0, "unset"};
    RngStream impact_rng_{0, "unset"};
    std::array<double, 2> latent_x_{};    // latent price, most recent first
    std::array<double, 2> latent_eps_{};  // innovations, most recent first
    std::array<double, kWindow> window_{};
    long long shares_ = kShares;
    int h_ = 0;
};

// ---------------------------------------------------------------------------
// Stochastic inventory control: order 0..10 units against noisy demand with a
// per-episode mean; ordering can shift the demand mean by +-10% with
// probability eps_air/2 each, compounding across events.

class InventoryEnv final : public Env {
public:
    static constexpr int kHorizon = 100;
    static constexpr int kMaxOrder = 10;
    static constexpr double kOrderCost = 0.1;
    static constexpr double kHoldCost = 0.25;
    static constexpr double kShortCost = 1.0;
    static constexpr double kRewardFloor = -100.0;

    explicit InventoryEnv(double eps_air) : eps_air_(eps_air) {}

    std::string id() const override { return "inventory"; }
    int horizon() const override { return kHorizon; }
    int n_actions() const override { return kMaxOrder + 1; }
    int exo_dim() const override { return 1; }
    EndoKind endo_kind() const override { return EndoKind::Real; }
    double eps_air() const override { return eps_air_; }

    AirSpec make_spec(double eps_p = 0.0) const override {
        return AirSpec::make(kHorizon, eps_air_, eps_p, -kRewardFloor, kMaxOrder + 1,
                             integer_sweep(0, 15));
    }

    FactoredState reset(const RngStream& episode_rng) override {
        demand_rng_ = episode_rng.child("demand");
        impact_rng_ = episode_rng.child("impact");
        mu_ = episode_rng.child("mu").uniform(3.0, 9.0);
        inventory_ = 0.0;
        prev_demand_ = draw_demand();
        h_ = 0;
        return state();
    }

    StepOut step(int action) override {
        if (action < 0 || action > kMaxOrder) throw std::invalid_argument("InventoryEnv: bad action");
        if (h_ >= kHorizon) throw std::logic_error("InventoryEnv: episode finished");
        if (action > 0 && eps_air_ > 0.0) {
            const double u = impact_rng_.uniform01();
            if (u < eps_air_ / 2.0) mu_ *= 0.9;
            else if (u < eps_air_) mu_ *= 1.1;
        }
        const double demand = draw_demand();
        const double reward = stage_reward(inventory_, action, demand);
        inventory_ = std::max(0.0, inventory_ + action - demand);
        prev_demand_ = demand;
        ++h_;
        return {state(), reward};
    }

    static double stage_reward(double inventory, int action, double demand) {
        const double level = inventory + action - demand;
        const double overstock = std::max(0.0, level);
        const double shortfall = std::max(0.0, -level);
        const double cost = kOrderCost * action + kHoldCost * overstock + kShortCost * shortfall;
        return std::max(kRewardFloor, -cost);
    }

    double demand_mean() const { return mu_; }

private:
    FactoredState state() const {
        FactoredState s;
        s.exo = {prev_demand_};
        s.endo = EndoValue::real1(inventory_);
        return s;
    }

    double draw_demand() { return std::max(0.0, demand_rng_.normal(mu_, mu_ / 3.0)); }

    double eps_air_;
    RngStream demand_rng_{0, "unset"};
    RngStream impact_rng_{0, "unset"};
    double mu_ = 6.0;
    double inventory_ = 0.0;
    double prev_demand_ = 0.0;
    int h_ = 0;
};

// ---------------------------------------------------------------------------
// Runs a TabularMdp as a simulator; exo index travels as a 1-vector.

class TabularEnv final : public Env {
public:
    TabularEnv(const TabularMdp& mdp, double eps_air) : m_(&mdp), eps_air_(eps_air) {}

    std::string id() const override { return "tabular"; }
    int horizon() const override { return m_->horizon; }
    int n_actions() const override { return m_->n_actions; }
    int exo_dim() const override { return 1; }
    EndoKind endo_kind() const override { return EndoKind::Int; }
    double eps_air() const override { return eps_air_; }
    const TabularMdp& mdp() const { return *m_; }

    AirSpec make_spec(double eps_p = 0.0) const override {
        return AirSpec::make(m_->horizon, eps_air_, eps_p, m_->r_max, m_->n_actions,
                             integer_sweep(0, m_->n_endo - 1));
    }

    FactoredState reset(const RngStream& episode_rng) override {
        rng_ = episode_rng.child("tabular");
        const auto joint = rng_.categorical({m_->init.data(), m_->init.size()});
        x_ = static_cast<int>(joint) / m_->n_endo;
        e_ = static_cast<int>(joint) % m_->n_endo;
        h_ = 0;
        return state();
    }

    StepOut step(int action) override {
        if (action < 0 || action >= m_->n_actions) throw std::invalid_argument("TabularEnv: bad action");
        if (h_ >= m_->horizon) throw std::logic_error("TabularEnv: episode finished");
        const int xn = static_cast<int>(rng_.categorical(m_->exo_row(h_, x_, action)));
        const int en = static_cast<int>(rng_.categorical(m_->end_row(h_, x_, e_, action, xn)));
        const double reward = m_->r(h_, x_, e_, action, xn);
        x_ = xn;
        e_ = en;
        ++h_;
        return {state(), reward};
    }

private:
    FactoredState state() const {
        FactoredState s;
        s.exo = {static_cast<double>(x_)};
        s.endo = EndoValue::integer(e_);
        return s;
    }

    const TabularMdp* m_;
    double eps_air_;
    RngStream rng_{0, "unset"};
    int x_ = 0, e_ = 0, h_ = 0;
};

// ---------------------------------------------------------------------------
// Exogenous series ingestion: one number per line (or comma separated),
// windowed into K most-recent values and cut into episodes of H windows.

inline std::vector<std::vector<std::vector<double>>> load_exo_series_csv(
    const std::filesystem::path& path, int window, int horizon, int stride) {
    if (window < 1 || horizon < 1 || stride < 1)
        throw std::invalid_argument("load_exo_series_csv: window, horizon, stride must be positive");
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_exo_series_csv: cannot open " + path.string());
    std::vector<double> series;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        for (const auto& field : detail::split_csv_line(line)) {
            if (field.empty()) continue;
            try {
                series.push_back(parse_double(field));
            } catch (const std::exception& e) {
                throw std::runtime_error("load_exo_series_csv: line " + std::to_string(line_no) + ": " +
                                         e.what());
            }
        }
    }
    if (series.size() < static_cast<std::size_t>(window + horizon))
        throw std::runtime_error("load_exo_series_csv: series too short (" +
                                 std::to_string(series.size()) + " < " +
                                 std::to_string(window + horizon) + ")");
    std::vector<std::vector<std::vector<double>>> episodes;
    const std::size_t per_episode = static_cast<std::size_t>(window + horizon - 1);
    for (std::size_t offset = 0; offset + per_episode <= series.size();
         offset += static_cast<std::size_t>(stride)) {
        std::vector<std::vector<double>> ep;
        ep.reserve(horizon);
        for (int h = 0; h < horizon; ++h) {
            std::vector<double> w(series.begin() + offset + h, series.begin() + offset + h + window);
            ep.push_back(std::move(w));
        }
        episodes.push_back(std::move(ep));
    }
    return episodes;
}

}  // namespace airmdp
