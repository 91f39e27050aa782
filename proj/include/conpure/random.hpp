#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace conpure {

/// Seedable random source. Every stochastic routine takes one explicitly.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Inclusive integer range.
    int uniform_int(int lo, int hi);

    template <typename T>
    void fill_normal(std::span<T> out) {
        for (auto& v : out) v = static_cast<T>(normal());
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// splitmix64 finalizer; decorrelates nearby integer seeds.
std::uint64_t mix_seed(std::uint64_t seed);

}  // namespace conpure
