#pragma once

#include <cmath>
#include <cstdint>

namespace qkdec {

/// Counter-based deterministic PRNG. Output i is a pure function of
/// (key, i), so identical seeds reproduce identical sequences across
/// platforms for the same call order, and independent sub-streams can be
/// split off cheaply for parallel work.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(mix64(seed ^ kSeedSalt)) {}

    std::uint64_t next_u64() { return mix64(key_ + kGolden * ++counter_); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Unbiased integer in [0, n). Rejection sampling, no modulo bias.
    std::uint64_t bounded(std::uint64_t n) {
        const std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    /// Random sign, +1.0 or -1.0.
    double sign() { return (next_u64() >> 63) ? 1.0 : -1.0; }

    /// Standard normal draw via the Marsaglia polar method (no inverse CDF).
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        has_spare_ = true;
        return u * m;
    }

    /// Independent stream derived from (key, index). Does not disturb this
    /// stream's counter, so sub-streams are stable regardless of how much
    /// the parent has been consumed.
    Rng substream(std::uint64_t index) const {
        Rng r(0);
        r.key_ = mix64(key_ ^ mix64(index + kStreamSalt));
        r.counter_ = 0;
        r.has_spare_ = false;
        return r;
    }

private:
    // SplitMix64 finalizer; full-avalanche bijection on 64 bits.
    static std::uint64_t mix64(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;
    static constexpr std::uint64_t kSeedSalt = 0x8afb9e366d1e2f4cull;
    static constexpr std::uint64_t kStreamSalt = 0x632be59bd9b4e019ull;

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace qkdec
