// SPDX-License-Identifier: Apache-2.0
#include "fmattn/core/keyvalue.hpp"

#include <sstream>

#include "fmattn/core/error.hpp"

namespace fmattn::core {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text, std::string context) {
    KeyValues kv;
    kv.context_ = std::move(context);
    std::istringstream is(text);
    std::string line;
    std::size_t number = 0;
    while (std::getline(is, line)) {
        ++number;
        const std::string body = trim(line);
        if (body.empty() || body[0] == '#') continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos)
            throw ConfigError(kv.context_ + ": line " + std::to_string(number) + " is not key=value: '" + body + "'");
        kv.values_[trim(body.substr(0, eq))] = trim(body.substr(eq + 1));
    }
    return kv;
}

const std::string& KeyValues::text(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(context_ + ": missing key '" + key + "'");
    return it->second;
}

std::string KeyValues::text(const std::string& key, const std::string& fallback) const {
    return has(key) ? text(key) : fallback;
}

std::size_t KeyValues::size(const std::string& key) const {
    const std::string& value = text(key);
    std::size_t used = 0;
    unsigned long long parsed = 0;
    try {
        parsed = std::stoull(value, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != value.size() || value.empty() || value[0] == '-')
        throw ConfigError(context_ + ": '" + key + "' expects a non-negative integer, got '" + value + "'");
    return static_cast<std::size_t>(parsed);
}

std::size_t KeyValues::size(const std::string& key, std::size_t fallback) const {
    return has(key) ? size(key) : fallback;
}

double KeyValues::number(const std::string& key) const {
    const std::string& value = text(key);
    std::size_t used = 0;
    double parsed = 0;
    try {
        parsed = std::stod(value, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != value.size() || value.empty())
        throw ConfigError(context_ + ": '" + key + "' expects a number, got '" + value + "'");
    return parsed;
}

double KeyValues::number(const std::string& key, double fallback) const {
    return has(key) ? number(key) : fallback;
}

}  // namespace fmattn::core
