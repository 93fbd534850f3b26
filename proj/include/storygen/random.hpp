#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace storygen {

/// xoshiro256** seeded through splitmix64.
///
/// The generator and every derived distribution below are defined bit-for-bit
/// here so that seeded runs replay identically on any platform; the standard
/// library distributions do not give that guarantee.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    /// Independent stream derived from (seed, stream). Used to split one run
    /// seed into per-stage or per-step generators.
    Rng(std::uint64_t seed, std::uint64_t stream) { reseed(mix(seed, stream)); }

    void reseed(std::uint64_t seed)
    {
        std::uint64_t x = seed;
        for (auto& s : state_) s = splitmix64(x);
    }

    std::uint64_t next()
    {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n)
    {
        // Lemire-style rejection keeps the result unbiased.
        const std::uint64_t limit = -n % n;
        for (;;) {
            const std::uint64_t r = next();
            if (r >= limit) return r % n;
        }
    }

    /// Standard normal via Box-Muller (one value per call, no caching).
    double normal(double mean = 0.0, double stddev = 1.0)
    {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return mean + stddev * std::sqrt(-2.0 * std::log(u1)) *
                          std::cos(2.0 * std::numbers::pi * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    using State = std::array<std::uint64_t, 4>;
    const State& state() const { return state_; }
    void set_state(const State& s) { state_ = s; }

    static std::uint64_t mix(std::uint64_t a, std::uint64_t b)
    {
        std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
        return splitmix64(x);
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static std::uint64_t splitmix64(std::uint64_t& x)
    {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    State state_{};
};

/// Fisher-Yates shuffle driven by Rng (std::shuffle is not portable).
template <typename Container>
void shuffle(Container& c, Rng& rng)
{
    for (std::size_t i = c.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i));
        using std::swap;
        swap(c[i - 1], c[j]);
    }
}

}  // namespace storygen
