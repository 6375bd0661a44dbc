#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <vector>

namespace simclip {

/// Seeded 64-bit Mersenne Twister with distribution code written out by hand.
/// The standard distributions are implementation-defined, so draws here are
/// reproducible across standard libraries as long as mt19937_64 is.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : Rng({seed}) {}

    /// Seeds from several words, e.g. (seed, epoch) or (seed, stream tag).
    Rng(std::initializer_list<std::uint64_t> words) {
        std::vector<std::uint32_t> halves;
        halves.reserve(words.size() * 2);
        for (std::uint64_t w : words) {
            halves.push_back(static_cast<std::uint32_t>(w));
            halves.push_back(static_cast<std::uint32_t>(w >> 32));
        }
        std::seed_seq seq(halves.begin(), halves.end());
        engine_.seed(seq);
    }

    std::uint64_t next() { return engine_(); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    /// Uniform integer in [0, bound), rejection-sampled to stay unbiased.
    std::uint64_t below(std::uint64_t bound) {
        const std::uint64_t limit = bound == 0 ? 0 : (~std::uint64_t{0} - bound + 1) % bound;
        for (;;) {
            const std::uint64_t x = engine_();
            if (x >= limit) return x % bound;
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Stream tags so that independent consumers of one user seed never share draws.
namespace streams {
inline constexpr std::uint64_t init = 0x696e6974;     // "init"
inline constexpr std::uint64_t dropout = 0x64726f70;  // "drop"
inline constexpr std::uint64_t shuffle = 0x73687566;  // "shuf"
inline constexpr std::uint64_t synth = 0x73796e74;    // "synt"
}  // namespace streams

}  // namespace simclip
