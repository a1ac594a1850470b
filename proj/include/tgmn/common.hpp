#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tgmn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Bad argument values or shape mismatches; maps to CLI exit code 1.
struct argument_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Unparseable or inconsistent input data; maps to CLI exit code 2.
struct data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed file contents (wrong header, truncation, bad numbers).
struct format_error : data_error {
    using data_error::data_error;
};

/// Input file is missing a required column.
struct schema_error : data_error {
    using data_error::data_error;
};

/// Non-finite values or numerically impossible requests; CLI exit code 3.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Empirical quantile with linear interpolation between order statistics
/// (the numpy default). q in [0,1].
inline double quantile(std::vector<double> xs, double q) {
    if (xs.empty()) throw argument_error("quantile: empty input");
    std::sort(xs.begin(), xs.end());
    if (xs.size() == 1) return xs[0];
    double pos = q * static_cast<double>(xs.size() - 1);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    auto hi = static_cast<std::size_t>(std::ceil(pos));
    double frac = pos - static_cast<double>(lo);
    return xs[lo] * (1.0 - frac) + xs[hi] * frac;
}

/// FNV-1a over raw bytes. Used for freeze checksums and config hashes.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(s.data(), s.size(), h);
}

/// Bitwise checksum of a matrix; any change to any entry changes the hash.
inline std::uint64_t checksum(const Mat& m) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto r = static_cast<std::uint64_t>(m.rows());
    auto c = static_cast<std::uint64_t>(m.cols());
    h = fnv1a(&r, sizeof r, h);
    h = fnv1a(&c, sizeof c, h);
    return fnv1a(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()), h);
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw argument_error(msg);
}

inline void require_finite(const Mat& m, const std::string& what) {
    if (!m.allFinite()) throw numeric_error(what + ": non-finite values");
}

}  // namespace tgmn
