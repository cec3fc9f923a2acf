// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace fmattn::lm {

using TokenStream = std::vector<int>;

struct Splits {
    TokenStream train, valid, test;
};

/// Byte-level tokenisation: every byte becomes its value (0..255).
TokenStream tokenize(const std::string& bytes);

/// Contiguous train / valid / test splits. The first two sizes are
/// floor(ratio * size); the test split takes the remainder.
Splits split(const TokenStream& tokens, const std::array<double, 3>& ratios);

/// Reads `path` and splits it. Throws std::runtime_error when the file cannot
/// be read and ConfigError when it is empty or the ratios are invalid.
Splits ingest(const std::string& path, const std::array<double, 3>& ratios = {0.9, 0.05, 0.05});

}  // namespace fmattn::lm
