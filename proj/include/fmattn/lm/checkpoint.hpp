// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fmattn/lm/model.hpp"

// File layout:
//   fmattn-checkpoint 1
//   config <line count>
//   <model config, key=value lines>
//   manifest <entry count>
//   <name> <extent>x<extent>... <byte offset> <element count>
//   data <byte count>
//   <raw little-endian IEEE-754 binary32 values>
// Offsets are relative to the first data byte and tile it exactly.

namespace fmattn::lm {

struct ManifestEntry {
    std::string name;
    core::Shape shape;
    std::uint64_t offset = 0;  // bytes
    std::uint64_t count = 0;   // elements
};

struct CheckpointInfo {
    ModelConfig config;
    std::vector<ManifestEntry> manifest;
};

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path);

/// Restores parameters bit-for-bit (as FP32). Throws std::runtime_error on
/// malformed files.
Model<float> load_checkpoint(const std::string& path);

CheckpointInfo read_checkpoint_info(const std::string& path);

}  // namespace fmattn::lm
