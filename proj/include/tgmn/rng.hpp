#pragma once

#include "tgmn/common.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace tgmn {

/// Deterministic random source. All distributions are implemented on top of
/// the raw mt19937_64 stream instead of std:: distributions, whose output is
/// implementation-defined; this keeps seeded runs byte-identical across
/// standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

    std::uint64_t raw() { return gen_(); }

    /// Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller on two fresh uniforms.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Uniform integer in [0, n). Unbiased rejection sampling.
    std::uint64_t integer(std::uint64_t n) {
        require(n > 0, "Rng::integer: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = gen_();
        while (x >= limit) x = gen_();
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(integer(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Derive an independent child stream; stable in (seed, tag) only, so the
    /// parent's consumption state never leaks into the child.
    Rng split(std::uint64_t tag) const {
        std::uint64_t s = fnv1a(&seed_, sizeof seed_);
        s = fnv1a(&tag, sizeof tag, s);
        return Rng(s);
    }

    Rng split(const std::string& tag) const {
        std::uint64_t s = fnv1a(&seed_, sizeof seed_);
        s = fnv1a(tag, s);
        return Rng(s);
    }

    Mat normal_matrix(Eigen::Index rows, Eigen::Index cols, double mean, double stddev) {
        Mat m(rows, cols);
        for (Eigen::Index c = 0; c < cols; ++c)
            for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = normal(mean, stddev);
        return m;
    }

    Mat uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
        Mat m(rows, cols);
        for (Eigen::Index c = 0; c < cols; ++c)
            for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = uniform(lo, hi);
        return m;
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
};

}  // namespace tgmn
