#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "rng.hpp"

namespace airmdp {

// ---------------------------------------------------------------------------
// Number formatting: shortest decimal text that round-trips the exact binary
// value, used by every file format in the project.

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw std::runtime_error("format_double: conversion failed");
    return std::string(buf, ptr);
}

inline double parse_double(std::string_view text) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size())
        throw std::runtime_error("parse_double: bad number '" + std::string(text) + "'");
    return v;
}

inline long long parse_int(std::string_view text) {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size())
        throw std::runtime_error("parse_int: bad integer '" + std::string(text) + "'");
    return v;
}

// ---------------------------------------------------------------------------
// States

enum class EndoKind { Int, Real };

// Endogenous component of a factored state: a non-negative integer (share or
// stock counts) or a small real vector.
struct EndoValue {
    std::variant<long long, std::vector<double>> value;

    static EndoValue integer(long long v) { return EndoValue{v}; }
    static EndoValue real(std::vector<double> v) { return EndoValue{std::move(v)}; }
    static EndoValue real1(double v) { return EndoValue{std::vector<double>{v}}; }

    EndoKind kind() const {
        return std::holds_alternative<long long>(value) ? EndoKind::Int : EndoKind::Real;
    }
    long long as_int() const { return std::get<long long>(value); }
    const std::vector<double>& as_real() const { return std::get<std::vector<double>>(value); }

    // Single-number view, valid for Int or 1-dim Real.
    double scalar() const {
        if (kind() == EndoKind::Int) return static_cast<double>(as_int());
        const auto& r = as_real();
        if (r.size() != 1) throw std::logic_error("EndoValue::scalar on multi-dim value");
        return r[0];
    }

    int dim() const { return kind() == EndoKind::Int ? 1 : static_cast<int>(as_real().size()); }

    bool operator==(const EndoValue& o) const { return value == o.value; }
};

struct FactoredState {
    std::vector<double> exo;
    EndoValue endo;
};

// ---------------------------------------------------------------------------
// Problem description shared by algorithms and bounds.

struct AirSpec {
    int horizon = 0;
    double eps_air = 0.0;
    double eps_p = 0.0;
    double r_max = 0.0;
    double v_max = 0.0;  // always horizon * r_max
    int n_actions = 0;
    std::vector<EndoValue> endo_sweep;

    static AirSpec make(int horizon, double eps_air, double eps_p, double r_max, int n_actions,
                        std::vector<EndoValue> sweep) {
        AirSpec s;
        s.horizon = horizon;
        s.eps_air = eps_air;
        s.eps_p = eps_p;
        s.r_max = r_max;
        s.v_max = static_cast<double>(horizon) * r_max;
        s.n_actions = n_actions;
        s.endo_sweep = std::move(sweep);
        s.check();
        return s;
    }

    void check() const {
        if (horizon <= 0) throw std::invalid_argument("AirSpec: horizon must be positive");
        if (n_actions <= 0) throw std::invalid_argument("AirSpec: n_actions must be positive");
        if (eps_air < 0 || eps_air > 1) throw std::invalid_argument("AirSpec: eps_air outside [0,1]");
        if (eps_p < 0 || eps_p > 1) throw std::invalid_argument("AirSpec: eps_p outside [0,1]");
        if (r_max <= 0) throw std::invalid_argument("AirSpec: r_max must be positive");
        if (v_max != horizon * r_max) throw std::invalid_argument("AirSpec: v_max != horizon * r_max");
    }
};

inline std::vector<EndoValue> integer_sweep(long long lo, long long hi) {
    std::vector<EndoValue> s;
    for (long long v = lo; v <= hi; ++v) s.push_back(EndoValue::integer(v));
    return s;
}

// ---------------------------------------------------------------------------
// Episodes and datasets

struct StepRecord {
    FactoredState state;
    int action = 0;
    double reward = 0.0;
};

struct Episode {
    std::vector<StepRecord> steps;
};

struct DatasetMeta {
    std::string env;     // "order", "inventory", "tabular", ...
    std::string policy;  // collection policy id
    double eps_air = 0.0;
    std::uint64_t seed = 0;
    int horizon = 0;
    int n_actions = 0;
    int exo_dim = 0;
    EndoKind endo_kind = EndoKind::Int;
    int endo_dim = 1;
};

struct Dataset {
    DatasetMeta meta;
    std::vector<Episode> episodes;

    std::size_t n_episodes() const { return episodes.size(); }
};

// Structural checks; each violation is reported, none throws.
inline std::vector<std::string> validate_dataset(const Dataset& d, const AirSpec& spec) {
    std::vector<std::string> violations;
    auto complain = [&](std::size_t ep, int h, const std::string& what) {
        violations.push_back("episode " + std::to_string(ep) + " step " + std::to_string(h) + ": " + what);
    };
    for (std::size_t i = 0; i < d.episodes.size(); ++i) {
        const Episode& ep = d.episodes[i];
        if (static_cast<int>(ep.steps.size()) != spec.horizon) {
            violations.push_back("episode " + std::to_string(i) + ": length " +
                                 std::to_string(ep.steps.size()) + " != horizon " +
                                 std::to_string(spec.horizon));
            continue;
        }
        for (int h = 0; h < spec.horizon; ++h) {
            const StepRecord& rec = ep.steps[h];
            if (static_cast<int>(rec.state.exo.size()) != d.meta.exo_dim)
                complain(i, h, "exo dimension mismatch");
            if (rec.state.endo.kind() != d.meta.endo_kind)
                complain(i, h, "endo kind mismatch");
            if (rec.state.endo.kind() == EndoKind::Int && rec.state.endo.as_int() < 0)
                complain(i, h, "negative integer endo");
            if (rec.action < 0 || rec.action >= spec.n_actions)
                complain(i, h, "action " + std::to_string(rec.action) + " outside [0," +
                                   std::to_string(spec.n_actions) + ")");
            if (!std::isfinite(rec.reward))
                complain(i, h, "non-finite reward");
            else if (rec.reward > spec.r_max || rec.reward < -spec.r_max)
                complain(i, h, "reward " + format_double(rec.reward) + " outside [-r_max, r_max]");
            for (double x : rec.state.exo)
                if (!std::isfinite(x)) { complain(i, h, "non-finite exo value"); break; }
        }
    }
    return violations;
}

// Partition into (round(fraction*N), rest) by a seeded shuffle, half-up.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& d, double fraction, RngStream rng) {
    if (fraction < 0.0 || fraction > 1.0)
        throw std::invalid_argument("split_dataset: fraction outside [0,1]");
    const std::size_t n = d.episodes.size();
    const auto n_first =
        static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(i) - 1));
        std::swap(order[i - 1], order[j]);
    }
    Dataset first, second;
    first.meta = d.meta;
    second.meta = d.meta;
    for (std::size_t i = 0; i < n; ++i)
        (i < n_first ? first : second).episodes.push_back(d.episodes[order[i]]);
    return {std::move(first), std::move(second)};
}

// ---------------------------------------------------------------------------
// Dataset CSV + sidecar meta file.
//
// CSV columns: episode,h,exo_0..exo_{k-1},endo_0..endo_{m-1},action,reward.
// The sidecar <path>.meta holds key=value lines describing the collection.

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    return out;
}

}  // namespace detail

inline void write_dataset(const Dataset& d, const std::filesystem::path& path) {
    std::ofstream csv(path);
    if (!csv) throw std::runtime_error("write_dataset: cannot open " + path.string());
    csv << "episode,h";
    for (int k = 0; k < d.meta.exo_dim; ++k) csv << ",exo_" << k;
    for (int m = 0; m < d.meta.endo_dim; ++m) csv << ",endo_" << m;
    csv << ",action,reward\n";
    for (std::size_t i = 0; i < d.episodes.size(); ++i) {
        const Episode& ep = d.episodes[i];
        for (std::size_t h = 0; h < ep.steps.size(); ++h) {
            const StepRecord& rec = ep.steps[h];
            csv << i << ',' << h;
            for (double x : rec.state.exo) csv << ',' << format_double(x);
            if (rec.state.endo.kind() == EndoKind::Int) {
                csv << ',' << rec.state.endo.as_int();
            } else {
                for (double e : rec.state.endo.as_real()) csv << ',' << format_double(e);
            }
            csv << ',' << rec.action << ',' << format_double(rec.reward) << '\n';
        }
    }
    csv.close();

    std::ofstream meta(path.string() + ".meta");
    if (!meta) throw std::runtime_error("write_dataset: cannot open meta for " + path.string());
    meta << "env=" << d.meta.env << '\n'
         << "policy=" << d.meta.policy << '\n'
         << "eps_air=" << format_double(d.meta.eps_air) << '\n'
         << "seed=" << d.meta.seed << '\n'
         << "H=" << d.meta.horizon << '\n'
         << "n_actions=" << d.meta.n_actions << '\n'
         << "exo_dim=" << d.meta.exo_dim << '\n'
         << "endo_kind=" << (d.meta.endo_kind == EndoKind::Int ? "int" : "real") << '\n'
         << "endo_dim=" << d.meta.endo_dim << '\n';
}

inline Dataset read_dataset(const std::filesystem::path& path) {
    std::ifstream meta_in(path.string() + ".meta");
    if (!meta_in) throw std::runtime_error("read_dataset: missing meta file " + path.string() + ".meta");
    DatasetMeta meta;
    std::string line;
    int meta_line = 0;
    while (std::getline(meta_in, line)) {
        ++meta_line;
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("read_dataset: meta line " + std::to_string(meta_line) +
                                     " has no '='");
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "env") meta.env = val;
        else if (key == "policy") meta.policy = val;
        else if (key == "eps_air") meta.eps_air = parse_double(val);
        else if (key == "seed") meta.seed = static_cast<std::uint64_t>(parse_int(val));
        else if (key == "H") meta.horizon = static_cast<int>(parse_int(val));
        else if (key == "n_actions") meta.n_actions = static_cast<int>(parse_int(val));
        else if (key == "exo_dim") meta.exo_dim = static_cast<int>(parse_int(val));
        else if (key == "endo_dim") meta.endo_dim = static_cast<int>(parse_int(val));
        else if (key == "endo_kind") {
            if (val == "int") meta.endo_kind = EndoKind::Int;
            else if (val == "real") meta.endo_kind = EndoKind::Real;
            else throw std::runtime_error("read_dataset: unknown endo_kind '" + val + "'");
        }
        // Unknown keys are preserved-by-ignoring so meta files can be extended.
    }

    std::ifstream csv(path);
    if (!csv) throw std::runtime_error("read_dataset: cannot open " + path.string());
    if (!std::getline(csv, line)) throw std::runtime_error("read_dataset: empty file " + path.string());

    std::string expected_header = "episode,h";
    for (int k = 0; k < meta.exo_dim; ++k) expected_header += ",exo_" + std::to_string(k);
    for (int m = 0; m < meta.endo_dim; ++m) expected_header += ",endo_" + std::to_string(m);
    expected_header += ",action,reward";
    if (line != expected_header)
        throw std::runtime_error("read_dataset: line 1: header '" + line + "' does not match meta (expected '" +
                                 expected_header + "')");

    Dataset d;
    d.meta = meta;
    const std::size_t n_cols = 2 + static_cast<std::size_t>(meta.exo_dim) +
                               static_cast<std::size_t>(meta.endo_dim) + 2;
    int line_no = 1;
    while (std::getline(csv, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != n_cols)
            throw std::runtime_error("read_dataset: line " + std::to_string(line_no) + ": expected " +
                                     std::to_string(n_cols) + " fields, got " +
                                     std::to_string(fields.size()));
        try {
            const auto episode = static_cast<std::size_t>(parse_int(fields[0]));
            const auto h = static_cast<std::size_t>(parse_int(fields[1]));
            if (episode > d.episodes.size())
                throw std::runtime_error("episode index skips ahead");
            if (episode == d.episodes.size()) d.episodes.emplace_back();
            Episode& ep = d.episodes[episode];
            if (h != ep.steps.size()) throw std::runtime_error("step index out of order");
            StepRecord rec;
            std::size_t f = 2;
            rec.state.exo.reserve(meta.exo_dim);
            for (int k = 0; k < meta.exo_dim; ++k) rec.state.exo.push_back(parse_double(fields[f++]));
            if (meta.endo_kind == EndoKind::Int) {
                rec.state.endo = EndoValue::integer(parse_int(fields[f++]));
            } else {
                std::vector<double> e;
                e.reserve(meta.endo_dim);
                for (int m = 0; m < meta.endo_dim; ++m) e.push_back(parse_double(fields[f++]));
                rec.state.endo = EndoValue::real(std::move(e));
            }
            rec.action = static_cast<int>(parse_int(fields[f++]));
            rec.reward = parse_double(fields[f++]);
            ep.steps.push_back(std::move(rec));
        } catch (const std::exception& e) {
            throw std::runtime_error("read_dataset: line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return d;
}

}  // namespace airmdp
