#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "trajprune/errors.hpp"

namespace trajprune {

// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    double back = 0.0;
    std::sscanf(buf, "%lf", &back);
    if (back == v) {
        for (int prec = 1; prec < 17; ++prec) {
            char shorter[64];
            std::snprintf(shorter, sizeof(shorter), "%.*g", prec, v);
            std::sscanf(shorter, "%lf", &back);
            if (back == v) return shorter;
        }
    }
    return buf;
}

inline std::string slurp_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParamError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void spit_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParamError("cannot write file: " + path);
    out << content;
    if (!out) throw ParamError("write failed: " + path);
}

inline std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline double parse_double(const std::string& s, const std::string& what) {
    try {
        std::size_t pos = 0;
        double v = std::stod(trim(s), &pos);
        if (pos != trim(s).size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ParamError("cannot parse number for " + what + ": '" + s + "'");
    }
}

inline long parse_long(const std::string& s, const std::string& what) {
    try {
        std::size_t pos = 0;
        long v = std::stol(trim(s), &pos);
        if (pos != trim(s).size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ParamError("cannot parse integer for " + what + ": '" + s + "'");
    }
}

}  // namespace trajprune
