#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace faultsim::numerics {

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a(std::string_view text);

/// Reproducible random stream. Child streams are derived from the seed and a
/// label only, so the parent's draw count never influences a child.
class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed);

    std::uint64_t seed() const { return seed_; }
    RandomStream child(std::string_view label) const;

    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);
    double normal(double mean = 0.0, double stddev = 1.0);
    bool bernoulli(double p);
    std::size_t index(std::size_t n);       // uniform in [0, n)
    std::size_t categorical(std::span<const double> weights);
    std::vector<std::size_t> permutation(std::size_t n);

    std::mt19937_64& engine() { return engine_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

} // namespace faultsim::numerics
