#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace diffolio {

// SplitMix64 finalizer; used to derive independent substream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Counter-based substream seed for (base, stream).
constexpr std::uint64_t substream_seed(std::uint64_t base, std::uint64_t stream) {
    return mix64(mix64(base) ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

constexpr std::uint64_t substream_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
    return substream_seed(substream_seed(base, a), b);
}

using Rng = std::mt19937_64;

// Standard normal draws via Box-Muller on the raw engine output, so sequences
// do not depend on the standard library's distribution implementation.
class NormalSampler {
public:
    double operator()(Rng& rng) {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform01(rng);
        } while (u1 <= 0.0);
        const double u2 = uniform01(rng);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double th = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(th);
        has_spare_ = true;
        return r * std::cos(th);
    }

    static double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

private:
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline Eigen::VectorXd normal_vector(Rng& rng, NormalSampler& ns, Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = ns(rng);
    return v;
}

// Uniform integer in [lo, hi] via rejection, independent of std distributions.
inline std::uint64_t uniform_int(Rng& rng, std::uint64_t lo, std::uint64_t hi) {
    const std::uint64_t span = hi - lo + 1;
    if (span == 0) return rng();
    const std::uint64_t limit = (~std::uint64_t{0} / span) * span;
    std::uint64_t x = 0;
    do {
        x = rng();
    } while (x >= limit);
    return lo + x % span;
}

}  // namespace diffolio
