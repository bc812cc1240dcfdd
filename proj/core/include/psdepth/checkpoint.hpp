#pragma once

#include <string>
#include <utility>
#include <vector>

#include "psdepth/tensor.hpp"

namespace psd {

// Checkpoint container format:
//   magic "UDCK", format version u32, tensor count u32, then per tensor:
//   name length u32 + UTF-8 name, rank u32, extents u64 each,
//   little-endian f64 payload. Round trips are bit-exact.
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& path);

}  // namespace psd
