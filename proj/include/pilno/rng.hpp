#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace pilno {

// Deterministic uniform generator. std::uniform_real_distribution is
// implementation-defined, so doubles are built directly from the raw 64-bit
// stream: identical seeds give identical draws on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform integer in [0, n). Rejection-free modulo is fine here: n is tiny
    // compared to 2^64, so the bias is far below anything observable.
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

private:
    std::mt19937_64 engine_;
};

} // namespace pilno
