#pragma once

#include <cstdint>
#include <random>

#include "docvce/tensor.hpp"

namespace docvce {

/// Seeded source of all randomness in a run. Copyable; a copy continues the
/// same stream independently.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    bool bernoulli(double p) { return uniform() < p; }

    std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

    Tensor normal(const Shape& shape) {
        Tensor t(shape);
        for (double& v : t.values()) v = normal();
        return t;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// splitmix64 finalizer; maps (base seed, stream id) to an independent seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace docvce
