#include "faultsim/numerics/random.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace faultsim::numerics {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

RandomStream::RandomStream(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

RandomStream RandomStream::child(std::string_view label) const {
    return RandomStream(splitmix64(seed_ ^ splitmix64(fnv1a(label))));
}

double RandomStream::uniform() {
    return std::generate_canonical<double, 53>(engine_);
}

double RandomStream::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double RandomStream::normal(double mean, double stddev) {
    return mean + stddev * normal_(engine_);
}

bool RandomStream::bernoulli(double p) {
    return uniform() < p;
}

std::size_t RandomStream::index(std::size_t n) {
    if (n == 0) {
        throw std::invalid_argument("RandomStream::index: empty range");
    }
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    return dist(engine_);
}

std::size_t RandomStream::categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) {
            throw std::invalid_argument("RandomStream::categorical: negative weight");
        }
        total += w;
    }
    if (weights.empty() || total <= 0.0) {
        throw std::invalid_argument("RandomStream::categorical: no positive weight");
    }
    double u = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (u < weights[i]) {
            return i;
        }
        u -= weights[i];
    }
    // Rounding can leave u marginally above the last bucket.
    for (std::size_t i = weights.size(); i-- > 0;) {
        if (weights[i] > 0.0) {
            return i;
        }
    }
    return weights.size() - 1;
}

std::vector<std::size_t> RandomStream::permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    // Fisher-Yates with our own index draw; std::shuffle's algorithm is unspecified.
    for (std::size_t i = n; i > 1; --i) {
        std::swap(p[i - 1], p[index(i)]);
    }
    return p;
}

} // namespace faultsim::numerics
