#pragma once

#include "tgmn/common.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

namespace tgmn {

/// Shortest decimal rendering that parses back to the identical double.
inline std::string format_double(double x) {
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view sv, const std::string& context) {
    double x = 0;
    auto res = std::from_chars(sv.data(), sv.data() + sv.size(), x);
    if (res.ec != std::errc{} || res.ptr != sv.data() + sv.size())
        throw format_error(context + ": bad number '" + std::string(sv) + "'");
    return x;
}

inline long parse_long(std::string_view sv, const std::string& context) {
    long x = 0;
    auto res = std::from_chars(sv.data(), sv.data() + sv.size(), x);
    if (res.ec != std::errc{} || res.ptr != sv.data() + sv.size())
        throw format_error(context + ": bad integer '" + std::string(sv) + "'");
    return x;
}

/// Matrix file format: line 1 is `rows cols`, then `rows` lines of `cols`
/// space-separated decimal floats. Round-trips bit-exactly.
inline void write_matrix(std::ostream& out, const Mat& m) {
    out << m.rows() << ' ' << m.cols() << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            if (c) out << ' ';
            out << format_double(m(r, c));
        }
        out << '\n';
    }
}

inline void write_matrix(const std::string& path, const Mat& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot open for writing: " + path);
    write_matrix(out, m);
    if (!out) throw data_error("write failed: " + path);
}

inline Mat read_matrix(std::istream& in, const std::string& name = "matrix") {
    std::string line;
    if (!std::getline(in, line)) throw format_error(name + ": missing header line");
    std::istringstream hdr(line);
    long rows = -1, cols = -1;
    if (!(hdr >> rows >> cols) || rows < 0 || cols < 0)
        throw format_error(name + ": bad header '" + line + "'");
    std::string tail;
    if (hdr >> tail) throw format_error(name + ": trailing tokens in header");
    Mat m(rows, cols);
    for (long r = 0; r < rows; ++r) {
        if (!std::getline(in, line))
            throw format_error(name + ": truncated at row " + std::to_string(r));
        std::string_view sv(line);
        for (long c = 0; c < cols; ++c) {
            while (!sv.empty() && sv.front() == ' ') sv.remove_prefix(1);
            std::size_t end = sv.find(' ');
            std::string_view tok = sv.substr(0, end);
            if (tok.empty())
                throw format_error(name + ": row " + std::to_string(r) + " has fewer than " +
                                   std::to_string(cols) + " columns");
            m(r, c) = parse_double(tok, name + " row " + std::to_string(r));
            sv.remove_prefix(tok.size());
        }
        while (!sv.empty() && sv.front() == ' ') sv.remove_prefix(1);
        if (!sv.empty())
            throw format_error(name + ": row " + std::to_string(r) + " has more than " +
                               std::to_string(cols) + " columns");
    }
    return m;
}

inline Mat read_matrix(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open: " + path);
    return read_matrix(in, std::filesystem::path(path).filename().string());
}

}  // namespace tgmn
