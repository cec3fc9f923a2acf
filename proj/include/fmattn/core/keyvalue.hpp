// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <string>

namespace fmattn::core {

/// `key=value` text, one pair per line. Blank lines and lines starting with
/// '#' are ignored; whitespace around keys and values is trimmed. Lookup
/// failures and malformed numbers throw ConfigError naming `context`.
class KeyValues {
  public:
    KeyValues() = default;
    static KeyValues parse(const std::string& text, std::string context);

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    const std::string& text(const std::string& key) const;
    std::string text(const std::string& key, const std::string& fallback) const;

    std::size_t size(const std::string& key) const;
    std::size_t size(const std::string& key, std::size_t fallback) const;

    double number(const std::string& key) const;
    double number(const std::string& key, double fallback) const;

    const std::map<std::string, std::string>& entries() const { return values_; }

  private:
    std::string context_;
    std::map<std::string, std::string> values_;
};

}  // namespace fmattn::core
