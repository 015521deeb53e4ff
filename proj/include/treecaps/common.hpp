#pragma once

// Shared small utilities: deterministic RNG, seed mixing, number formatting.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

namespace treecaps {

// splitmix64 finalizer; used to derive independent seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t seed_combine(std::uint64_t a, std::uint64_t b) {
    return mix64(a ^ mix64(b));
}

inline std::uint64_t seed_combine(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return seed_combine(seed_combine(a, b), c);
}

// Deterministic RNG. All draws go through explicit helpers rather than
// <random> distributions, whose algorithms are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x106689d45497fdb5ull) {}

    std::uint64_t next_u64() {
        // xorshift64* keeps the state small and the stream portable.
        std::uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545f4914f6cdd1dull;
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::int64_t below(std::int64_t n) {
        return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
    }

    // uniform integer in [lo, hi] inclusive
    std::int64_t range(std::int64_t lo, std::int64_t hi) { return lo + below(hi - lo + 1); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(below(i + 1))]);
        }
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Shortest-round-trip-ish formatting for CSV/JSON output.
inline std::string fmt_g(double x, int precision = 9) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", precision, x);
    return std::string(buf);
}

inline std::string fmt_fixed(double x, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, x);
    return std::string(buf);
}

}  // namespace treecaps
