#pragma once

#include <cstdint>
#include <cmath>
#include <initializer_list>
#include <numbers>
#include <span>

namespace gbaf {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::uint64_t rotl64(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
}

} // namespace detail

/// Deterministic, stdlib-independent random stream (xoshiro256++ seeded via
/// splitmix64). Streams derived from the same seed but different keys are
/// statistically independent; the derivation is stable across platforms so
/// fixed seeds reproduce draws bit-exactly everywhere.
class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed) { reseed(seed, {}); }
    RandomStream(std::uint64_t seed, std::initializer_list<std::uint64_t> key) { reseed(seed, key); }

    /// Derive an independent substream keyed by the given words.
    RandomStream derive(std::initializer_list<std::uint64_t> key) const {
        RandomStream s(0);
        std::uint64_t mix = state_[0] ^ detail::rotl64(state_[2], 17);
        for (std::uint64_t k : key) {
            mix ^= detail::splitmix64(k);
            mix = detail::splitmix64(mix);
        }
        s.seed_state(mix);
        return s;
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl64(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = detail::rotl64(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Unbiased integer in [0, n); n > 0.
    std::uint64_t uniform_below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    /// Standard normal via Box-Muller (one spare cached).
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    void fill_gaussian(std::span<double> out, double sigma) {
        for (double& v : out) v = sigma * gaussian();
    }

private:
    void reseed(std::uint64_t seed, std::initializer_list<std::uint64_t> key) {
        std::uint64_t mix = seed;
        mix = detail::splitmix64(mix);
        for (std::uint64_t k : key) {
            mix ^= detail::splitmix64(k);
            mix = detail::splitmix64(mix);
        }
        seed_state(mix);
    }

    void seed_state(std::uint64_t mix) {
        for (auto& w : state_) w = detail::splitmix64(mix);
        // xoshiro must not start from the all-zero state
        if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
        has_spare_ = false;
    }

    std::uint64_t state_[4] = {};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace gbaf
