#pragma once

#include <cmath>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "approx.hpp"
#include "core.hpp"
#include "rng.hpp"

namespace airmdp {

// ---------------------------------------------------------------------------
// Discretized state-action visitation frequencies, one table per stage. Bin
// edges cover the observed range of each state dimension.

struct DensityEstimate {
    int bins_per_dim = 10;
    int n_actions = 0;
    int state_dim = 0;
    std::vector<double> lo, hi;
    std::vector<std::map<std::vector<int>, double>> prob;  // per stage

    static void state_components(const FactoredState& s, std::vector<double>& out) {
        out.clear();
        out.insert(out.end(), s.exo.begin(), s.exo.end());
        if (s.endo.kind() == EndoKind::Int) out.push_back(static_cast<double>(s.endo.as_int()));
        else out.insert(out.end(), s.endo.as_real().begin(), s.endo.as_real().end());
    }

    void bin_key(const FactoredState& s, int action, std::vector<int>& key) const {
        thread_local std::vector<double> comps;
        state_components(s, comps);
        key.clear();
        for (int i = 0; i < state_dim; ++i) {
            const double width = hi[i] - lo[i];
            int b = 0;
            if (width > 0.0) {
                b = static_cast<int>(std::floor((comps[i] - lo[i]) / width * bins_per_dim));
                b = std::clamp(b, 0, bins_per_dim - 1);
            }
            key.push_back(b);
        }
        key.push_back(action);
    }

    // Estimated visitation probability; zero for unseen cells.
    double mu(const FactoredState& s, int h, int action) const {
        if (h < 0 || h >= static_cast<int>(prob.size())) return 0.0;
        thread_local std::vector<int> key;
        bin_key(s, action, key);
        const auto it = prob[h].find(key);
        return it == prob[h].end() ? 0.0 : it->second;
    }

    void serialize(std::ostream& os) const {
        os << "density v1\n";
        os << "bins " << bins_per_dim << '\n';
        os << "n_actions " << n_actions << '\n';
        os << "state_dim " << state_dim << '\n';
        os << "lo";
        for (double v : lo) os << ' ' << format_double(v);
        os << "\nhi";
        for (double v : hi) os << ' ' << format_double(v);
        os << "\nstages " << prob.size() << '\n';
        for (std::size_t h = 0; h < prob.size(); ++h) {
            os << "stage " << h << ' ' << prob[h].size() << '\n';
            for (const auto& [key, p] : prob[h]) {
                os << "cell";
                for (int k : key) os << ' ' << k;
                os << ' ' << format_double(p) << '\n';
            }
        }
    }

    static DensityEstimate deserialize(std::istream& is) {
        DensityEstimate d;
        std::string line, tag;
        auto next_line = [&](const char* what) {
            if (!std::getline(is, line)) throw std::runtime_error(std::string("density: missing ") + what);
            return line;
        };
        if (next_line("header") != "density v1") throw std::runtime_error("density: bad header");
        { std::istringstream ls(next_line("bins")); ls >> tag >> d.bins_per_dim; }
        { std::istringstream ls(next_line("n_actions")); ls >> tag >> d.n_actions; }
        { std::istringstream ls(next_line("state_dim")); ls >> tag >> d.state_dim; }
        {
            std::istringstream ls(next_line("lo"));
            std::string word;
            ls >> tag;
            while (ls >> word) d.lo.push_back(parse_double(word));
        }
        {
            std::istringstream ls(next_line("hi"));
            std::string word;
            ls >> tag;
            while (ls >> word) d.hi.push_back(parse_double(word));
        }
        std::size_t stages;
        { std::istringstream ls(next_line("stages")); ls >> tag >> stages; }
        d.prob.resize(stages);
        for (std::size_t h = 0; h < stages; ++h) {
            std::size_t idx, cells;
            std::istringstream ls(next_line("stage"));
            ls >> tag >> idx >> cells;
            if (tag != "stage" || idx != h) throw std::runtime_error("density: bad stage header");
            for (std::size_t c = 0; c < cells; ++c) {
                std::istringstream cs(next_line("cell"));
                std::string ctag;
                cs >> ctag;
                std::vector<int> key(static_cast<std::size_t>(d.state_dim) + 1);
                for (int& k : key) cs >> k;
                std::string word;
                cs >> word;
                d.prob[h][key] = parse_double(word);
            }
        }
        return d;
    }
};

// ---------------------------------------------------------------------------
// Policies. Stochastic rules draw from the caller's stream, so evaluation
// stays reproducible under seed control.

class Policy {
public:
    virtual ~Policy() = default;
    virtual std::string kind() const = 0;
    virtual int action(const FactoredState& s, int h, RngStream& rng) const = 0;
    virtual void serialize(std::ostream& os) const = 0;

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path);
        if (!os) throw std::runtime_error("Policy::save: cannot open " + path.string());
        os << "policy v1\n";
        serialize(os);
    }
    static std::unique_ptr<Policy> load(const std::filesystem::path& path);
    static std::unique_ptr<Policy> deserialize(std::istream& is);
};

class GreedyQPolicy final : public Policy {
public:
    explicit GreedyQPolicy(QFunction q) : q_(std::move(q)) {}
    std::string kind() const override { return "greedy_q"; }
    int action(const FactoredState& s, int h, RngStream&) const override { return q_.greedy(s, h); }
    const QFunction& q() const { return q_; }
    void serialize(std::ostream& os) const override {
        os << "kind greedy_q\n";
        q_.serialize(os);
    }

private:
    QFunction q_;
};

// Greedy over a density-masked value: actions whose visitation estimate falls
// below the threshold read as `floor`; if every action is masked the choice
// is uniform at random.
class MaskedQPolicy final : public Policy {
public:
    MaskedQPolicy(QFunction q, DensityEstimate density, double threshold, double floor)
        : q_(std::move(q)), density_(std::move(density)), threshold_(threshold), floor_(floor) {}

    std::string kind() const override { return "masked_q"; }

    int action(const FactoredState& s, int h, RngStream& rng) const override {
        double buf[QFunction::kMaxActions];
        const int n = q_.n_actions();
        q_.predict_all(s, h, {buf, static_cast<std::size_t>(n)});
        bool any_unmasked = false;
        for (int a = 0; a < n; ++a) {
            if (density_.mu(s, h, a) >= threshold_) any_unmasked = true;
            else buf[a] = floor_;
        }
        if (!any_unmasked) return static_cast<int>(rng.uniform_int(0, n - 1));
        int best = 0;
        for (int a = 1; a < n; ++a)
            if (buf[a] > buf[best]) best = a;
        return best;
    }

    void serialize(std::ostream& os) const override {
        os << "kind masked_q\n";
        os << "threshold " << format_double(threshold_) << '\n';
        os << "floor " << format_double(floor_) << '\n';
        density_.serialize(os);
        q_.serialize(os);
    }

    const QFunction& q() const { return q_; }

private:
    QFunction q_;
    DensityEstimate density_;
    double threshold_;
    double floor_;
};

// Stochastic lookup policy over tabular MDP states: probs[h][x][e][a].
class TablePolicy final : public Policy {
public:
    TablePolicy(int horizon, int n_exo, int n_endo, int n_actions)
        : horizon_(horizon), n_exo_(n_exo), n_endo_(n_endo), n_actions_(n_actions),
          probs_(static_cast<std::size_t>(horizon) * n_exo * n_endo * n_actions, 0.0) {}

    std::string kind() const override { return "table"; }

    std::span<double> row(int h, int x, int e) {
        return {probs_.data() + offset(h, x, e), static_cast<std::size_t>(n_actions_)};
    }
    std::span<const double> row(int h, int x, int e) const {
        return {probs_.data() + offset(h, x, e), static_cast<std::size_t>(n_actions_)};
    }

    void set_deterministic(int h, int x, int e, int a) {
        auto r = row(h, x, e);
        std::fill(r.begin(), r.end(), 0.0);
        r[a] = 1.0;
    }

    int action(const FactoredState& s, int h, RngStream& rng) const override {
        const int x = static_cast<int>(s.exo.at(0));
        const int e = static_cast<int>(s.endo.as_int());
        return static_cast<int>(rng.categorical(row(h, x, e)));
    }

    int horizon() const { return horizon_; }
    int n_exo() const { return n_exo_; }
    int n_endo() const { return n_endo_; }
    int n_actions() const { return n_actions_; }

    void serialize(std::ostream& os) const override {
        os << "kind table\n";
        os << "dims " << horizon_ << ' ' << n_exo_ << ' ' << n_endo_ << ' ' << n_actions_ << '\n';
        for (int h = 0; h < horizon_; ++h)
            for (int x = 0; x < n_exo_; ++x)
                for (int e = 0; e < n_endo_; ++e) {
                    os << "row";
                    for (double p : row(h, x, e)) os << ' ' << format_double(p);
                    os << '\n';
                }
    }

private:
    std::size_t offset(int h, int x, int e) const {
        return ((static_cast<std::size_t>(h) * n_exo_ + x) * n_endo_ + e) * n_actions_;
    }

    int horizon_, n_exo_, n_endo_, n_actions_;
    std::vector<double> probs_;
};

class ConstantPolicy final : public Policy {
public:
    explicit ConstantPolicy(int action) : action_(action) {}
    std::string kind() const override { return "const"; }
    int action(const FactoredState&, int, RngStream&) const override { return action_; }
    void serialize(std::ostream& os) const override { os << "kind const\naction " << action_ << '\n'; }

private:
    int action_;
};

class UniformRandomPolicy final : public Policy {
public:
    explicit UniformRandomPolicy(int n_actions) : n_actions_(n_actions) {}
    std::string kind() const override { return "uniform"; }
    int action(const FactoredState&, int, RngStream& rng) const override {
        return static_cast<int>(rng.uniform_int(0, n_actions_ - 1));
    }
    void serialize(std::ostream& os) const override {
        os << "kind uniform\nn_actions " << n_actions_ << '\n';
    }

private:
    int n_actions_;
};

// Sell nothing w.p. 0.75, otherwise one of the five positive sales equally.
class OrderRandomPolicy final : public Policy {
public:
    std::string kind() const override { return "order_random"; }
    int action(const FactoredState&, int, RngStream& rng) const override {
        const double u = rng.uniform01();
        if (u < 0.75) return 0;
        return 1 + static_cast<int>((u - 0.75) / 0.05);
    }
    void serialize(std::ostream& os) const override { os << "kind order_random\n"; }
};

// Order an integer amount near the previous demand.
class InventoryRandomPolicy final : public Policy {
public:
    std::string kind() const override { return "inventory_random"; }
    int action(const FactoredState& s, int, RngStream& rng) const override {
        const double d = s.exo.at(0);
        const auto lo = static_cast<long long>(std::ceil(d - 3.0));
        const auto hi = static_cast<long long>(std::floor(d + 3.0));
        const long long pick = rng.uniform_int(lo, std::max(lo, hi));
        return static_cast<int>(std::clamp<long long>(pick, 0, 10));
    }
    void serialize(std::ostream& os) const override { os << "kind inventory_random\n"; }
};

// Order the previous demand, capped at the largest order.
class InventoryConstPolicy final : public Policy {
public:
    std::string kind() const override { return "inventory_const"; }
    int action(const FactoredState& s, int, RngStream&) const override {
        return static_cast<int>(std::floor(std::min(s.exo.at(0), 10.0)));
    }
    void serialize(std::ostream& os) const override { os << "kind inventory_const\n"; }
};

inline std::unique_ptr<Policy> Policy::deserialize(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("policy: empty stream");
    std::istringstream ls(line);
    std::string tag, kind;
    ls >> tag >> kind;
    if (tag != "kind") throw std::runtime_error("policy: expected kind line, got '" + line + "'");
    if (kind == "greedy_q") return std::make_unique<GreedyQPolicy>(QFunction::deserialize(is));
    if (kind == "masked_q") {
        double threshold, floor;
        std::string word;
        if (!std::getline(is, line)) throw std::runtime_error("policy: missing threshold");
        { std::istringstream ts(line); ts >> word >> threshold; }
        if (!std::getline(is, line)) throw std::runtime_error("policy: missing floor");
        { std::istringstream fs(line); fs >> word >> floor; }
        DensityEstimate d = DensityEstimate::deserialize(is);
        QFunction q = QFunction::deserialize(is);
        return std::make_unique<MaskedQPolicy>(std::move(q), std::move(d), threshold, floor);
    }
    if (kind == "table") {
        if (!std::getline(is, line)) throw std::runtime_error("policy: missing dims");
        std::istringstream ds(line);
        std::string dtag;
        int h, x, e, a;
        ds >> dtag >> h >> x >> e >> a;
        auto t = std::make_unique<TablePolicy>(h, x, e, a);
        for (int hh = 0; hh < h; ++hh)
            for (int xx = 0; xx < x; ++xx)
                for (int ee = 0; ee < e; ++ee) {
                    if (!std::getline(is, line)) throw std::runtime_error("policy: missing table row");
                    std::istringstream rs(line);
                    std::string rtag, wordv;
                    rs >> rtag;
                    auto row = t->row(hh, xx, ee);
                    for (int aa = 0; aa < a; ++aa) {
                        rs >> wordv;
                        row[aa] = parse_double(wordv);
                    }
                }
        return t;
    }
    if (kind == "const") {
        if (!std::getline(is, line)) throw std::runtime_error("policy: missing action");
        std::istringstream as(line);
        std::string atag;
        int a;
        as >> atag >> a;
        return std::make_unique<ConstantPolicy>(a);
    }
    if (kind == "uniform") {
        if (!std::getline(is, line)) throw std::runtime_error("policy: missing n_actions");
        std::istringstream ns(line);
        std::string ntag;
        int n;
        ns >> ntag >> n;
        return std::make_unique<UniformRandomPolicy>(n);
    }
    if (kind == "order_random") return std::make_unique<OrderRandomPolicy>();
    if (kind == "inventory_random") return std::make_unique<InventoryRandomPolicy>();
    if (kind == "inventory_const") return std::make_unique<InventoryConstPolicy>();
    throw std::runtime_error("policy: unknown kind '" + kind + "'");
}

inline std::unique_ptr<Policy> Policy::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("Policy::load: cannot open " + path.string());
    std::string header;
    if (!std::getline(is, header) || header != "policy v1")
        throw std::runtime_error("Policy::load: bad header in " + path.string());
    return deserialize(is);
}

// Visitation estimate from a dataset: counts per discretized (state, action)
// cell at each stage, normalized per stage.
inline DensityEstimate density_estimate(const Dataset& d, int n_actions, int bins_per_dim = 10) {
    if (bins_per_dim < 1) throw std::invalid_argument("density_estimate: bins_per_dim must be positive");
    DensityEstimate out;
    out.bins_per_dim = bins_per_dim;
    out.n_actions = n_actions;
    int horizon = 0;
    for (const Episode& ep : d.episodes) horizon = std::max(horizon, static_cast<int>(ep.steps.size()));
    out.prob.resize(horizon);

    std::vector<double> comps;
    bool first = true;
    for (const Episode& ep : d.episodes)
        for (const StepRecord& rec : ep.steps) {
            DensityEstimate::state_components(rec.state, comps);
            if (first) {
                out.state_dim = static_cast<int>(comps.size());
                out.lo = comps;
                out.hi = comps;
                first = false;
            }
            for (int i = 0; i < out.state_dim; ++i) {
                out.lo[i] = std::min(out.lo[i], comps[i]);
                out.hi[i] = std::max(out.hi[i], comps[i]);
            }
        }
    if (first) return out;  // empty dataset: every lookup reads zero

    std::vector<std::map<std::vector<int>, long>> counts(horizon);
    std::vector<long> totals(horizon, 0);
    std::vector<int> key;
    for (const Episode& ep : d.episodes)
        for (std::size_t h = 0; h < ep.steps.size(); ++h) {
            out.bin_key(ep.steps[h].state, ep.steps[h].action, key);
            ++counts[h][key];
            ++totals[h];
        }
    for (int h = 0; h < horizon; ++h)
        for (const auto& [k, c] : counts[h])
            out.prob[h][k] = static_cast<double>(c) / static_cast<double>(totals[h]);
    return out;
}

}  // namespace airmdp
