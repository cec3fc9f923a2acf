// SPDX-License-Identifier: Apache-2.0
#include "fmattn/lm/data.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "fmattn/core/error.hpp"

namespace fmattn::lm {

TokenStream tokenize(const std::string& bytes) {
    TokenStream tokens;
    tokens.reserve(bytes.size());
    for (unsigned char b : bytes) tokens.push_back(b);
    return tokens;
}

Splits split(const TokenStream& tokens, const std::array<double, 3>& ratios) {
    const double total = ratios[0] + ratios[1] + ratios[2];
    for (double r : ratios)
        if (!(r >= 0)) throw ConfigError("split: ratios must be non-negative");
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split: ratios must sum to 1");
    if (tokens.empty()) throw ConfigError("split: empty token stream");
    const auto n = static_cast<double>(tokens.size());
    const auto train = static_cast<std::size_t>(std::floor(ratios[0] * n + 1e-9));
    const auto valid = static_cast<std::size_t>(std::floor(ratios[1] * n + 1e-9));
    Splits s;
    s.train.assign(tokens.begin(), tokens.begin() + train);
    s.valid.assign(tokens.begin() + train, tokens.begin() + train + valid);
    s.test.assign(tokens.begin() + train + valid, tokens.end());
    return s;
}

Splits ingest(const std::string& path, const std::array<double, 3>& ratios) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("ingest: cannot read '" + path + "'");
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.empty()) throw ConfigError("ingest: '" + path + "' is empty");
    return split(tokenize(bytes), ratios);
}

}  // namespace fmattn::lm
