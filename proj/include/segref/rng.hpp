#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace segref {

// Deterministic RNG used everywhere in the engine. std::mt19937_64 output is
// pinned by the standard, and the distributions below are hand-rolled so that
// draws are byte-identical across platforms (the std:: distribution objects
// are implementation-defined).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, bound). bound = 0 yields 0.
    std::uint64_t uniform_u64(std::uint64_t bound) {
        if (bound == 0) return 0;
        // Multiply-shift bounded draw; a touch of modulo bias is irrelevant
        // for simulation bounds (all << 2^64) and keeps the draw branch-free.
        unsigned __int128 wide = static_cast<unsigned __int128>(next_u64()) * bound;
        return static_cast<std::uint64_t>(wide >> 64);
    }

    // Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (hi <= lo) return lo;
        return lo + static_cast<std::int64_t>(
                        uniform_u64(static_cast<std::uint64_t>(hi - lo) + 1));
    }

    // Uniform real in [0, 1) with 53 bits of precision.
    double uniform_real() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    bool bernoulli(double p) {
        if (p <= 0.0) return false;
        if (p >= 1.0) return true;
        return uniform_real() < p;
    }

private:
    std::mt19937_64 engine_;
};

// SplitMix64 step, used to derive independent child seeds from a base seed
// plus a stream tag. Same inputs always give the same child seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> stream) {
    std::uint64_t s = mix_seed(base);
    for (std::uint64_t tag : stream) {
        s = mix_seed(s ^ mix_seed(tag));
    }
    return s;
}

}  // namespace segref
