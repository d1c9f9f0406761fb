// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "sftn/nn.hpp"

// Versioned binary checkpoints: magic "SFTN", u32 format version, an
// architecture descriptor, then per-tensor shape headers and little-endian
// 32-bit payloads (parameters plus batchnorm running buffers).

namespace sftn {

inline constexpr uint32_t kCheckpointVersion = 1;

void save_blocknet(BlockNet<float>& net, const std::string& path);
BlockNet<float> load_blocknet(const std::string& path);

// FNV-1a over the raw file bytes.
uint64_t file_hash(const std::string& path);

}  // namespace sftn
