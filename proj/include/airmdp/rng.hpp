#pragma once

#include <cstdint>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace airmdp {

// Counter-based stream: every draw is a hash of (key, counter), so streams
// can be split by label without sharing state. Equal (seed, label) pairs
// give identical sequences; distinct labels give statistically independent
// ones.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::string_view label) : key_(seed ^ kSeedTag) {
        absorb_label(label);
    }

    // Derives an independent stream. Labels compose with '/': a stream built
    // as RngStream(s, "a/b") equals RngStream(s, "a").child("b").
    RngStream child(std::string_view sublabel) const {
        RngStream c(*this);
        c.counter_ = 0;
        c.have_cached_ = false;
        c.absorb_label(sublabel);
        return c;
    }

    std::uint64_t next_u64() { return mix64(key_ + kGolden * ++counter_); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Inclusive integer range.
    long long uniform_int(long long lo, long long hi) {
        if (lo > hi) throw std::invalid_argument("uniform_int: empty range");
        const auto span = static_cast<std::uint64_t>(hi - lo);
        if (span == UINT64_MAX) return static_cast<long long>(next_u64());
        // Rejection to avoid modulo bias.
        const std::uint64_t n = span + 1;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t draw;
        do { draw = next_u64(); } while (draw >= limit);
        return lo + static_cast<long long>(draw % n);
    }

    // Standard normal, Marsaglia polar method.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform01() - 1.0;
            v = 2.0 * uniform01() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double scale = std::sqrt(-2.0 * std::log(s) / s);
        cached_ = v * scale;
        have_cached_ = true;
        return u * scale;
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Index draw from an unnormalized non-negative weight vector.
    std::size_t categorical(std::span<const double> weights) {
        if (weights.empty()) throw std::invalid_argument("categorical: no weights");
        double total = 0.0;
        for (double w : weights) {
            if (!(w >= 0.0)) throw std::invalid_argument("categorical: negative weight");
            total += w;
        }
        if (total <= 0.0) throw std::invalid_argument("categorical: zero total weight");
        double u = uniform01() * total;
        for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
            u -= weights[i];
            if (u < 0.0) return i;
        }
        return weights.size() - 1;
    }

    bool bernoulli(double p) { return uniform01() < p; }

private:
    static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;
    static constexpr std::uint64_t kSeedTag = 0x5A17AB1E0FC0FFEEull;

    static std::uint64_t mix64(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ull;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBull;
        z ^= z >> 31;
        return z;
    }

    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 0xCBF29CE484222325ull;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001B3ull;
        }
        return h;
    }

    void absorb_label(std::string_view label) {
        std::size_t start = 0;
        while (start <= label.size()) {
            const std::size_t slash = label.find('/', start);
            const std::size_t end = (slash == std::string_view::npos) ? label.size() : slash;
            key_ = mix64(key_ ^ fnv1a(label.substr(start, end - start)));
            if (slash == std::string_view::npos) break;
            start = slash + 1;
        }
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    bool have_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace airmdp
