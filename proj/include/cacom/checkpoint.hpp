#pragma once

// Named-parameter checkpoints.
//
//   "CACM" | version u32 | count u32 | count x {
//       name_len u32 | name bytes (UTF-8) | rank u32 | dims u32[rank] | f32[numel] }
//
// Every integer and float is little-endian.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cacom/tensor.hpp"

namespace cacom::ad {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors);
/// Throws std::runtime_error on bad magic, unknown version or truncation.
std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace cacom::ad
