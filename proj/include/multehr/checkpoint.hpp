#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "multehr/tensor.hpp"

namespace multehr {

// Name -> tensor, iterated in name order so files are byte-reproducible.
using TensorMap = std::map<std::string, Tensor>;

inline constexpr char kCheckpointMagic[] = "MTEHR1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: "MTEHR1", u32 version, then per tensor:
//   u32 name length, UTF-8 name, u32 rank, u64 dims[rank], f64 payload.
// All integers and floats little-endian.
void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors);
TensorMap load_checkpoint(const std::filesystem::path& path);

}  // namespace multehr
