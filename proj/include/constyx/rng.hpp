#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>

namespace constyx {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Keyed splitmix64 stream. A stream is identified by a tuple of counters
// (seed, image, pixel, draw kind, ...), so draws do not depend on the order
// in which pixels or images are visited. Satisfies UniformRandomBitGenerator.
class CounterRng {
public:
    using result_type = std::uint64_t;

    explicit CounterRng(std::uint64_t seed = 0) noexcept : state_(splitmix64(seed)) {}
    CounterRng(std::initializer_list<std::uint64_t> key) noexcept {
        std::uint64_t s = 0x6a09e667f3bcc909ULL;
        for (auto k : key) s = splitmix64(s ^ splitmix64(k));
        state_ = s;
    }

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller (no cached second value, so every draw
    // consumes exactly two words).
    double normal() noexcept {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    std::uint64_t state_ = 0;
};

// Stream identifiers for the different random draws in an augmentation pass.
enum class DrawKind : std::uint64_t { IntraClass = 1, CrossDomain = 2, RandomMask = 3 };

}  // namespace constyx
