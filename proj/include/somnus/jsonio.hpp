#pragma once

// JSON output helpers. Floating-point values are rounded to 9 significant
// digits before serialization so artifacts stay compact and stable.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <span>
#include <vector>

#include "somnus/errors.hpp"

namespace somnus {

inline double json_number(double v) {
    if (!std::isfinite(v)) return v;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::strtod(buf, nullptr);
}

template <typename V>
nlohmann::json json_numbers(std::span<const V> values) {
    auto out = nlohmann::json::array();
    for (V v : values) out.push_back(json_number(static_cast<double>(v)));
    return out;
}

template <typename V>
nlohmann::json json_numbers(const std::vector<V>& values) {
    return json_numbers(std::span<const V>(values));
}

/// Non-finite values have no JSON representation; they are written as null.
inline nlohmann::json json_number_or_null(double v) {
    return std::isfinite(v) ? nlohmann::json(json_number(v)) : nlohmann::json(nullptr);
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j, int indent = 2) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write " + path.string());
    os << j.dump(indent) << '\n';
    if (!os) throw DataError("failed writing " + path.string());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

}  // namespace somnus
