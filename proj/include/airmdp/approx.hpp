#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "core.hpp"
#include "rng.hpp"

namespace airmdp {

// ---------------------------------------------------------------------------
// Feature maps. Environments with known scales get fixed hand-tuned maps; the
// fallback passes raw state components through.

enum class FeatKind { Order, Inventory, Raw };

struct FeatureMap {
    FeatKind kind = FeatKind::Raw;
    int exo_dim = 1;
    int endo_dim = 1;

    static FeatureMap for_env(const std::string& env_id, int exo_dim, int endo_dim) {
        FeatureMap f;
        f.exo_dim = exo_dim;
        f.endo_dim = endo_dim;
        if (env_id == "order") f.kind = FeatKind::Order;
        else if (env_id == "inventory") f.kind = FeatKind::Inventory;
        else f.kind = FeatKind::Raw;
        return f;
    }

    int dim() const {
        switch (kind) {
            case FeatKind::Order: return 4;
            case FeatKind::Inventory: return 2;
            case FeatKind::Raw: return exo_dim + endo_dim;
        }
        return 0;
    }

    void featurize(const FactoredState& s, std::span<double> out) const {
        switch (kind) {
            case FeatKind::Order:
                out[0] = s.exo[0];
                out[1] = s.exo[1];
                out[2] = s.exo[2];
                out[3] = s.endo.scalar() / 10.0;
                return;
            case FeatKind::Inventory:
                out[0] = s.endo.scalar() / 15.0;
                out[1] = s.exo[0] / 10.0;
                return;
            case FeatKind::Raw: {
                std::size_t i = 0;
                for (double x : s.exo) out[i++] = x;
                if (s.endo.kind() == EndoKind::Int) {
                    out[i++] = static_cast<double>(s.endo.as_int());
                } else {
                    for (double e : s.endo.as_real()) out[i++] = e;
                }
                return;
            }
        }
    }

    std::string name() const {
        switch (kind) {
            case FeatKind::Order: return "order";
            case FeatKind::Inventory: return "inventory";
            case FeatKind::Raw: return "raw";
        }
        return "raw";
    }

    static FeatureMap from_name(const std::string& n, int exo_dim, int endo_dim) {
        FeatureMap f;
        f.exo_dim = exo_dim;
        f.endo_dim = endo_dim;
        if (n == "order") f.kind = FeatKind::Order;
        else if (n == "inventory") f.kind = FeatKind::Inventory;
        else if (n == "raw") f.kind = FeatKind::Raw;
        else throw std::runtime_error("FeatureMap: unknown map '" + n + "'");
        return f;
    }
};

// ---------------------------------------------------------------------------
// First-order optimizers over a flat parameter vector.

enum class OptimizerKind { Adam, Rmsprop };

struct OptimizerState {
    OptimizerKind kind = OptimizerKind::Adam;
    double lr = 1e-3;
    std::vector<double> m;  // Adam first moment
    std::vector<double> v;  // second moment / squared average
    long t = 0;

    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kRho = 0.99;
    static constexpr double kEps = 1e-8;

    void init(OptimizerKind k, double learning_rate, std::size_t n) {
        kind = k;
        lr = learning_rate;
        m.assign(kind == OptimizerKind::Adam ? n : 0, 0.0);
        v.assign(n, 0.0);
        t = 0;
    }

    void step(std::span<double> params, std::span<const double> grads) {
        if (params.size() != v.size() || grads.size() != v.size())
            throw std::invalid_argument("OptimizerState: size mismatch");
        for (double g : grads)
            if (!std::isfinite(g)) throw std::runtime_error("optimizer: non-finite gradient");
        ++t;
        if (kind == OptimizerKind::Adam) {
            const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
            const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
            for (std::size_t i = 0; i < params.size(); ++i) {
                m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * grads[i];
                v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * grads[i] * grads[i];
                params[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + kEps);
            }
        } else {
            for (std::size_t i = 0; i < params.size(); ++i) {
                v[i] = kRho * v[i] + (1.0 - kRho) * grads[i] * grads[i];
                params[i] -= lr * grads[i] / (std::sqrt(v[i]) + kEps);
            }
        }
    }
};

// ---------------------------------------------------------------------------
// One-hidden-layer rectifier network with a value head per action, parameters
// in one flat vector (W1 row-major, b1, W2 row-major, b2).

struct MlpNet {
    int in = 0, hidden = 0, out = 0;
    std::vector<double> params;

    static MlpNet init(int in, int hidden, int out, RngStream rng) {
        MlpNet n;
        n.in = in;
        n.hidden = hidden;
        n.out = out;
        n.params.assign(n.n_params(), 0.0);
        const double s1 = std::sqrt(6.0 / (in + hidden));
        for (int i = 0; i < hidden * in; ++i) n.params[i] = rng.uniform(-s1, s1);
        const double s2 = std::sqrt(6.0 / (hidden + out));
        const std::size_t w2 = n.w2_off();
        for (int i = 0; i < out * hidden; ++i) n.params[w2 + i] = rng.uniform(-s2, s2);
        return n;
    }

    std::size_t n_params() const {
        return static_cast<std::size_t>(hidden) * in + hidden + static_cast<std::size_t>(out) * hidden +
               out;
    }
    std::size_t b1_off() const { return static_cast<std::size_t>(hidden) * in; }
    std::size_t w2_off() const { return b1_off() + hidden; }
    std::size_t b2_off() const { return w2_off() + static_cast<std::size_t>(out) * hidden; }

    void hidden_layer(std::span<const double> x, std::span<double> hbuf) const {
        const double* w1 = params.data();
        const double* b1 = params.data() + b1_off();
        for (int j = 0; j < hidden; ++j) {
            double z = b1[j];
            const double* row = w1 + static_cast<std::size_t>(j) * in;
            for (int i = 0; i < in; ++i) z += row[i] * x[i];
            hbuf[j] = z > 0.0 ? z : 0.0;
        }
    }

    void forward(std::span<const double> x, std::span<double> hbuf, std::span<double> ybuf) const {
        hidden_layer(x, hbuf);
        const double* w2 = params.data() + w2_off();
        const double* b2 = params.data() + b2_off();
        for (int o = 0; o < out; ++o) {
            double y = b2[o];
            const double* row = w2 + static_cast<std::size_t>(o) * hidden;
            for (int j = 0; j < hidden; ++j) y += row[j] * hbuf[j];
            ybuf[o] = y;
        }
    }

    double predict_one(std::span<const double> x, int head, std::span<double> hbuf) const {
        hidden_layer(x, hbuf);
        const double* w2 = params.data() + w2_off() + static_cast<std::size_t>(head) * hidden;
        double y = params[b2_off() + head];
        for (int j = 0; j < hidden; ++j) y += w2[j] * hbuf[j];
        return y;
    }

    // Squared loss on a single head; gradient accumulates into g.
    double accumulate_grad(std::span<const double> x, int head, double target, std::span<double> g,
                           std::span<double> hbuf) const {
        const double y = predict_one(x, head, hbuf);
        const double dy = 2.0 * (y - target);
        const double* w2 = params.data() + w2_off() + static_cast<std::size_t>(head) * hidden;
        double* gw1 = g.data();
        double* gb1 = g.data() + b1_off();
        double* gw2 = g.data() + w2_off() + static_cast<std::size_t>(head) * hidden;
        g[b2_off() + head] += dy;
        for (int j = 0; j < hidden; ++j) {
            gw2[j] += dy * hbuf[j];
            if (hbuf[j] > 0.0) {
                const double dz = dy * w2[j];
                gb1[j] += dz;
                double* row = gw1 + static_cast<std::size_t>(j) * in;
                for (int i = 0; i < in; ++i) row[i] += dz * x[i];
            }
        }
        return y;
    }
};

// Max relative error of the analytic gradient against central differences,
// for one (input, head, target) probe. Denominator floor keeps near-zero
// gradient components from amplifying finite-difference roundoff.
inline double mlp_gradient_check(MlpNet net, std::span<const double> x, int head, double target,
                                 double fd_step = 1e-5) {
    std::vector<double> analytic(net.n_params(), 0.0);
    std::vector<double> hbuf(net.hidden);
    net.accumulate_grad(x, head, target, analytic, hbuf);
    double worst = 0.0;
    for (std::size_t p = 0; p < net.n_params(); ++p) {
        const double keep = net.params[p];
        net.params[p] = keep + fd_step;
        const double up = net.predict_one(x, head, hbuf) - target;
        net.params[p] = keep - fd_step;
        const double dn = net.predict_one(x, head, hbuf) - target;
        net.params[p] = keep;
        const double fd = (up * up - dn * dn) / (2.0 * fd_step);
        const double rel = std::abs(analytic[p] - fd) / std::max(std::abs(analytic[p]) + std::abs(fd), 1e-3);
        worst = std::max(worst, rel);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Regression configuration shared by all function classes.

enum class FClass { Tabular, Linear, Mlp };

inline std::string fclass_name(FClass f) {
    switch (f) {
        case FClass::Tabular: return "tabular";
        case FClass::Linear: return "linear";
        case FClass::Mlp: return "mlp";
    }
    return "tabular";
}

inline FClass fclass_from_name(const std::string& n) {
    if (n == "tabular") return FClass::Tabular;
    if (n == "linear") return FClass::Linear;
    if (n == "mlp") return FClass::Mlp;
    throw std::runtime_error("unknown function class '" + n + "'");
}

struct FitConfig {
    OptimizerKind optimizer = OptimizerKind::Adam;
    double learning_rate = 1e-3;
    int batch_size = 128;
    int updates = 2000;  // minibatch steps per MLP fit
    int hidden = 128;
    double ridge = 1e-8;
    std::uint64_t seed = 0;
};

struct Sample {
    FactoredState state;
    int action = 0;
    double target = 0.0;
};

namespace detail {

// Cholesky solve of (A + ridge I) w = b for a small SPD matrix, in place.
inline void solve_spd(std::vector<double>& a, std::vector<double>& b, int n, double ridge) {
    for (int i = 0; i < n; ++i) a[static_cast<std::size_t>(i) * n + i] += ridge;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double sum = a[static_cast<std::size_t>(i) * n + j];
            for (int k = 0; k < j; ++k)
                sum -= a[static_cast<std::size_t>(i) * n + k] * a[static_cast<std::size_t>(j) * n + k];
            if (i == j) {
                if (sum <= 0.0) throw std::runtime_error("solve_spd: matrix not positive definite");
                a[static_cast<std::size_t>(i) * n + j] = std::sqrt(sum);
            } else {
                a[static_cast<std::size_t>(i) * n + j] = sum / a[static_cast<std::size_t>(j) * n + j];
            }
        }
    }
    for (int i = 0; i < n; ++i) {
        double sum = b[i];
        for (int k = 0; k < i; ++k) sum -= a[static_cast<std::size_t>(i) * n + k] * b[k];
        b[i] = sum / a[static_cast<std::size_t>(i) * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
        double sum = b[i];
        for (int k = i + 1; k < n; ++k) sum -= a[static_cast<std::size_t>(k) * n + i] * b[k];
        b[i] = sum / a[static_cast<std::size_t>(i) * n + i];
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Q-function over (state, stage, action). Two layouts:
//   PerHorizon      one approximator per stage, implicit zero at h == H
//   HorizonFeature  single MLP taking h/H as an extra input

class QFunction {
public:
    enum class Mode { PerHorizon, HorizonFeature };

    QFunction() = default;

    static QFunction make_per_horizon(FClass fclass, const FeatureMap& feat, int horizon,
                                      int n_actions, const FitConfig& cfg) {
        QFunction q;
        q.mode_ = Mode::PerHorizon;
        q.fclass_ = fclass;
        q.feat_ = feat;
        q.horizon_ = horizon;
        q.n_actions_ = n_actions;
        q.cfg_hidden_ = cfg.hidden;
        q.slots_.resize(horizon);
        for (int h = 0; h < horizon; ++h) q.init_slot(h, cfg);
        return q;
    }

    static QFunction make_horizon_feature(const FeatureMap& feat, int horizon, int n_actions,
                                          const FitConfig& cfg) {
        QFunction q;
        q.mode_ = Mode::HorizonFeature;
        q.fclass_ = FClass::Mlp;
        q.feat_ = feat;
        q.horizon_ = horizon;
        q.n_actions_ = n_actions;
        q.cfg_hidden_ = cfg.hidden;
        q.slots_.resize(1);
        q.slots_[0] = MlpSlot{MlpNet::init(feat.dim() + 1, cfg.hidden, n_actions,
                                           RngStream(cfg.seed, "qfn/init/hf"))};
        return q;
    }

    Mode mode() const { return mode_; }
    FClass fclass() const { return fclass_; }
    int horizon() const { return horizon_; }
    int n_actions() const { return n_actions_; }
    const FeatureMap& feature_map() const { return feat_; }

    double predict(const FactoredState& s, int h, int a) const {
        if (h >= horizon_) return 0.0;
        if (mode_ == Mode::HorizonFeature) {
            thread_local std::vector<double> x, hbuf;
            const auto& net = std::get<MlpSlot>(slots_[0]).net;
            x.resize(net.in);
            hbuf.resize(net.hidden);
            featurize_h(s, h, x);
            return net.predict_one(x, a, hbuf);
        }
        const Slot& slot = slots_[h];
        if (std::holds_alternative<TabularSlot>(slot)) {
            const auto& cells = std::get<TabularSlot>(slot).cells;
            thread_local std::vector<double> key;
            tab_key(s, a, key);
            const auto it = cells.find(key);
            return it == cells.end() ? 0.0 : it->second;
        }
        if (std::holds_alternative<LinearSlot>(slot)) {
            const auto& lin = std::get<LinearSlot>(slot);
            thread_local std::vector<double> x;
            x.resize(feat_.dim());
            feat_.featurize(s, x);
            return lin.value(x, a);
        }
        const auto& net = std::get<MlpSlot>(slot).net;
        thread_local std::vector<double> x, hbuf;
        x.resize(net.in);
        hbuf.resize(net.hidden);
        feat_.featurize(s, x);
        return net.predict_one(x, a, hbuf);
    }

    void predict_all(const FactoredState& s, int h, std::span<double> out) const {
        if (h >= horizon_) {
            std::fill(out.begin(), out.end(), 0.0);
            return;
        }
        if (mode_ == Mode::HorizonFeature) {
            thread_local std::vector<double> x, hbuf;
            const auto& net = std::get<MlpSlot>(slots_[0]).net;
            x.resize(net.in);
            hbuf.resize(net.hidden);
            featurize_h(s, h, x);
            net.forward(x, hbuf, out);
            return;
        }
        const Slot& slot = slots_[h];
        if (std::holds_alternative<TabularSlot>(slot)) {
            for (int a = 0; a < n_actions_; ++a) out[a] = predict(s, h, a);
            return;
        }
        if (std::holds_alternative<LinearSlot>(slot)) {
            const auto& lin = std::get<LinearSlot>(slot);
            thread_local std::vector<double> x;
            x.resize(feat_.dim());
            feat_.featurize(s, x);
            for (int a = 0; a < n_actions_; ++a) out[a] = lin.value(x, a);
            return;
        }
        const auto& net = std::get<MlpSlot>(slot).net;
        thread_local std::vector<double> x, hbuf;
        x.resize(net.in);
        hbuf.resize(net.hidden);
        feat_.featurize(s, x);
        net.forward(x, hbuf, out);
    }

    double max_value(const FactoredState& s, int h) const {
        if (h >= horizon_) return 0.0;
        double buf[kMaxActions];
        predict_all(s, h, {buf, static_cast<std::size_t>(n_actions_)});
        return *std::max_element(buf, buf + n_actions_);
    }

    // Lowest action index wins ties.
    int greedy(const FactoredState& s, int h) const {
        double buf[kMaxActions];
        predict_all(s, h, {buf, static_cast<std::size_t>(n_actions_)});
        int best = 0;
        for (int a = 1; a < n_actions_; ++a)
            if (buf[a] > buf[best]) best = a;
        return best;
    }

    // Exact refit for tabular/linear, fresh-init minibatch descent for MLP.
    // Returns the mean squared error trace {before, after}.
    std::vector<double> fit_slot(int h, const std::vector<Sample>& data, const FitConfig& cfg) {
        if (mode_ == Mode::HorizonFeature)
            throw std::logic_error("fit_slot: horizon-feature mode is trained incrementally");
        if (h < 0 || h >= horizon_) throw std::invalid_argument("fit_slot: bad stage index");
        std::vector<double> trace;
        trace.push_back(mse_on(h, data));
        Slot& slot = slots_[h];
        if (std::holds_alternative<TabularSlot>(slot)) {
            auto& cells = std::get<TabularSlot>(slot).cells;
            cells.clear();
            std::map<std::vector<double>, std::pair<double, long>> acc;
            std::vector<double> key;
            for (const Sample& s : data) {
                tab_key(s.state, s.action, key);
                auto& cell = acc[key];
                cell.first += s.target;
                cell.second += 1;
            }
            for (const auto& [k, sc] : acc) cells[k] = sc.first / static_cast<double>(sc.second);
        } else if (std::holds_alternative<LinearSlot>(slot)) {
            auto& lin = std::get<LinearSlot>(slot);
            const int d = feat_.dim() + 1;
            std::vector<double> x(feat_.dim());
            for (int a = 0; a < n_actions_; ++a) {
                std::vector<double> xtx(static_cast<std::size_t>(d) * d, 0.0);
                std::vector<double> xty(d, 0.0);
                long count = 0;
                for (const Sample& s : data) {
                    if (s.action != a) continue;
                    ++count;
                    feat_.featurize(s.state, x);
                    for (int i = 0; i < d; ++i) {
                        const double xi = i < d - 1 ? x[i] : 1.0;
                        xty[i] += xi * s.target;
                        for (int j = 0; j <= i; ++j) {
                            const double xj = j < d - 1 ? x[j] : 1.0;
                            xtx[static_cast<std::size_t>(i) * d + j] += xi * xj;
                        }
                    }
                }
                if (count == 0) continue;  // actions without data keep current weights
                for (int i = 0; i < d; ++i)
                    for (int j = i + 1; j < d; ++j)
                        xtx[static_cast<std::size_t>(i) * d + j] = xtx[static_cast<std::size_t>(j) * d + i];
                detail::solve_spd(xtx, xty, d, cfg.ridge);
                std::copy(xty.begin(), xty.end(), lin.w.begin() + static_cast<std::size_t>(a) * d);
            }
        } else {
            auto& net = std::get<MlpSlot>(slot).net;
            net = MlpNet::init(net.in, net.hidden, net.out,
                               RngStream(cfg.seed, "qfn/fit/" + std::to_string(h)));
            if (!data.empty()) {
                OptimizerState opt;
                opt.init(cfg.optimizer, cfg.learning_rate, net.n_params());
                RngStream batch_rng(cfg.seed, "qfn/batch/" + std::to_string(h));
                std::vector<double> grads(net.n_params());
                std::vector<double> x(net.in), hbuf(net.hidden);
                for (int u = 0; u < cfg.updates; ++u) {
                    std::fill(grads.begin(), grads.end(), 0.0);
                    const int b = std::min<int>(cfg.batch_size, static_cast<int>(data.size()));
                    for (int k = 0; k < b; ++k) {
                        const auto& s = data[static_cast<std::size_t>(
                            batch_rng.uniform_int(0, static_cast<long long>(data.size()) - 1))];
                        feat_.featurize(s.state, x);
                        net.accumulate_grad(x, s.action, s.target, grads, hbuf);
                    }
                    for (double& g : grads) g /= b;
                    opt.step(net.params, grads);
                }
            }
        }
        trace.push_back(mse_on(h, data));
        return trace;
    }

    // Horizon-feature accessors used by the sampled sweep and online agents.
    MlpNet& hf_net() {
        if (mode_ != Mode::HorizonFeature) throw std::logic_error("hf_net: wrong mode");
        return std::get<MlpSlot>(slots_[0]).net;
    }
    const MlpNet& hf_net() const {
        if (mode_ != Mode::HorizonFeature) throw std::logic_error("hf_net: wrong mode");
        return std::get<MlpSlot>(slots_[0]).net;
    }
    void featurize_h(const FactoredState& s, int h, std::span<double> out) const {
        feat_.featurize(s, out);
        out[feat_.dim()] = static_cast<double>(h) / static_cast<double>(horizon_);
    }

    // Incremental cell update q += alpha (target - q) for online tabular agents.
    // Unseen cells start at zero. Returns the updated value.
    double tabular_update(int h, const FactoredState& s, int a, double target, double alpha) {
        if (mode_ != Mode::PerHorizon || fclass_ != FClass::Tabular)
            throw std::logic_error("tabular_update: needs per-horizon tabular mode");
        auto& cells = std::get<TabularSlot>(slots_[h]).cells;
        std::vector<double> key;
        tab_key(s, a, key);
        double& cell = cells.try_emplace(std::move(key), 0.0).first->second;
        cell += alpha * (target - cell);
        return cell;
    }

    void serialize(std::ostream& os) const {
        os << "qfunction v1\n";
        os << "mode " << (mode_ == Mode::PerHorizon ? "per_horizon" : "horizon_feature") << '\n';
        os << "fclass " << fclass_name(fclass_) << '\n';
        os << "feat " << feat_.name() << ' ' << feat_.exo_dim << ' ' << feat_.endo_dim << '\n';
        os << "horizon " << horizon_ << '\n';
        os << "n_actions " << n_actions_ << '\n';
        os << "hidden " << cfg_hidden_ << '\n';
        os << "slots " << slots_.size() << '\n';
        for (std::size_t h = 0; h < slots_.size(); ++h) {
            const Slot& slot = slots_[h];
            if (std::holds_alternative<TabularSlot>(slot)) {
                const auto& cells = std::get<TabularSlot>(slot).cells;
                os << "slot " << h << " tabular " << cells.size() << '\n';
                for (const auto& [key, value] : cells) {
                    os << "cell";
                    for (double k : key) os << ' ' << format_double(k);
                    os << ' ' << format_double(value) << '\n';
                }
            } else if (std::holds_alternative<LinearSlot>(slot)) {
                const auto& lin = std::get<LinearSlot>(slot);
                os << "slot " << h << " linear " << lin.dim << '\n';
                for (int a = 0; a < n_actions_; ++a) {
                    os << "w";
                    for (int i = 0; i <= lin.dim; ++i)
                        os << ' ' << format_double(lin.w[static_cast<std::size_t>(a) * (lin.dim + 1) + i]);
                    os << '\n';
                }
            } else {
                const auto& net = std::get<MlpSlot>(slot).net;
                os << "slot " << h << " mlp " << net.in << ' ' << net.hidden << ' ' << net.out << '\n';
                os << "params";
                for (double p : net.params) os << ' ' << format_double(p);
                os << '\n';
            }
        }
    }

    static QFunction deserialize(std::istream& is) {
        QFunction q;
        std::string line;
        auto next_line = [&](const char* what) {
            if (!std::getline(is, line)) throw std::runtime_error(std::string("qfunction: missing ") + what);
            return line;
        };
        if (next_line("header") != "qfunction v1") throw std::runtime_error("qfunction: bad header");
        {
            std::istringstream ls(next_line("mode"));
            std::string tag, value;
            ls >> tag >> value;
            if (tag != "mode") throw std::runtime_error("qfunction: expected mode");
            q.mode_ = value == "per_horizon" ? Mode::PerHorizon : Mode::HorizonFeature;
        }
        {
            std::istringstream ls(next_line("fclass"));
            std::string tag, value;
            ls >> tag >> value;
            q.fclass_ = fclass_from_name(value);
        }
        {
            std::istringstream ls(next_line("feat"));
            std::string tag, name;
            int exo_dim, endo_dim;
            ls >> tag >> name >> exo_dim >> endo_dim;
            q.feat_ = FeatureMap::from_name(name, exo_dim, endo_dim);
        }
        std::string tag;
        {
            std::istringstream ls(next_line("horizon"));
            ls >> tag >> q.horizon_;
        }
        {
            std::istringstream ls(next_line("n_actions"));
            ls >> tag >> q.n_actions_;
        }
        {
            std::istringstream ls(next_line("hidden"));
            ls >> tag >> q.cfg_hidden_;
        }
        std::size_t n_slots;
        {
            std::istringstream ls(next_line("slots"));
            ls >> tag >> n_slots;
        }
        q.slots_.resize(n_slots);
        for (std::size_t si = 0; si < n_slots; ++si) {
            std::istringstream ls(next_line("slot"));
            std::size_t idx;
            std::string kind;
            ls >> tag >> idx >> kind;
            if (tag != "slot" || idx != si) throw std::runtime_error("qfunction: bad slot header");
            if (kind == "tabular") {
                std::size_t n_cells;
                ls >> n_cells;
                TabularSlot t;
                for (std::size_t c = 0; c < n_cells; ++c) {
                    std::istringstream cs(next_line("cell"));
                    std::string ctag;
                    cs >> ctag;
                    std::vector<double> nums;
                    std::string word;
                    while (cs >> word) nums.push_back(parse_double(word));
                    if (nums.size() < 2) throw std::runtime_error("qfunction: short cell line");
                    const double value = nums.back();
                    nums.pop_back();
                    t.cells[nums] = value;
                }
                q.slots_[si] = std::move(t);
            } else if (kind == "linear") {
                int dim;
                ls >> dim;
                LinearSlot lin;
                lin.dim = dim;
                lin.n_actions = q.n_actions_;
                lin.w.assign(static_cast<std::size_t>(q.n_actions_) * (dim + 1), 0.0);
                for (int a = 0; a < q.n_actions_; ++a) {
                    std::istringstream ws(next_line("weights"));
                    std::string wtag;
                    ws >> wtag;
                    for (int i = 0; i <= dim; ++i) {
                        std::string word;
                        ws >> word;
                        lin.w[static_cast<std::size_t>(a) * (dim + 1) + i] = parse_double(word);
                    }
                }
                q.slots_[si] = std::move(lin);
            } else if (kind == "mlp") {
                int in, hidden, out;
                ls >> in >> hidden >> out;
                MlpNet net;
                net.in = in;
                net.hidden = hidden;
                net.out = out;
                net.params.reserve(net.n_params());
                std::istringstream ps(next_line("params"));
                std::string word;
                ps >> word;  // tag
                while (ps >> word) net.params.push_back(parse_double(word));
                if (net.params.size() != net.n_params())
                    throw std::runtime_error("qfunction: wrong mlp parameter count");
                q.slots_[si] = MlpSlot{std::move(net)};
            } else {
                throw std::runtime_error("qfunction: unknown slot kind '" + kind + "'");
            }
        }
        return q;
    }

    static constexpr int kMaxActions = 64;

private:
    struct TabularSlot {
        std::map<std::vector<double>, double> cells;
    };
    struct LinearSlot {
        int dim = 0;
        int n_actions = 0;
        std::vector<double> w;  // [action][dim + 1], bias last

        double value(std::span<const double> x, int a) const {
            const double* row = w.data() + static_cast<std::size_t>(a) * (dim + 1);
            double y = row[dim];
            for (int i = 0; i < dim; ++i) y += row[i] * x[i];
            return y;
        }
    };
    struct MlpSlot {
        MlpNet net;
    };
    using Slot = std::variant<TabularSlot, LinearSlot, MlpSlot>;

    void init_slot(int h, const FitConfig& cfg) {
        switch (fclass_) {
            case FClass::Tabular:
                slots_[h] = TabularSlot{};
                break;
            case FClass::Linear: {
                LinearSlot lin;
                lin.dim = feat_.dim();
                lin.n_actions = n_actions_;
                lin.w.assign(static_cast<std::size_t>(n_actions_) * (lin.dim + 1), 0.0);
                slots_[h] = std::move(lin);
                break;
            }
            case FClass::Mlp:
                slots_[h] = MlpSlot{MlpNet::init(feat_.dim(), cfg.hidden, n_actions_,
                                                 RngStream(cfg.seed, "qfn/init/" + std::to_string(h)))};
                break;
        }
    }

    void tab_key(const FactoredState& s, int a, std::vector<double>& key) const {
        key.clear();
        key.insert(key.end(), s.exo.begin(), s.exo.end());
        if (s.endo.kind() == EndoKind::Int) key.push_back(static_cast<double>(s.endo.as_int()));
        else key.insert(key.end(), s.endo.as_real().begin(), s.endo.as_real().end());
        key.push_back(static_cast<double>(a));
    }

    double mse_on(int h, const std::vector<Sample>& data) const {
        if (data.empty()) return 0.0;
        double sum = 0.0;
        for (const Sample& s : data) {
            const double e = predict(s.state, h, s.action) - s.target;
            sum += e * e;
        }
        return sum / static_cast<double>(data.size());
    }

    Mode mode_ = Mode::PerHorizon;
    FClass fclass_ = FClass::Tabular;
    FeatureMap feat_;
    int horizon_ = 0;
    int n_actions_ = 0;
    int cfg_hidden_ = 128;
    std::vector<Slot> slots_;
};

}  // namespace airmdp
