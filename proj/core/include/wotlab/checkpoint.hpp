#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "wotlab/models.hpp"
#include "wotlab/tensor.hpp"

namespace wotlab {

struct CheckpointMeta {
  ModelSpec spec{};
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::string tag;  // "final", "best", "swa", ...

  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
  ParamVector weights;
  CheckpointMeta meta;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout on disk:
//   "WOTC" | u32 version | u32 meta_len | meta_len bytes of UTF-8 JSON
//   | u64 parameter count | count little-endian float32 values
// The JSON carries the model spec, seed, epoch, tag and the layout table.
void save_checkpoint(const std::filesystem::path& path, const ParamVector& weights, const CheckpointMeta& meta);

// Throws CheckpointError on a bad magic, unknown version, truncation, or a
// parameter count / layout that disagrees with the stored model spec.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Loads and additionally requires the layout to match `spec`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelSpec& spec);

}  // namespace wotlab
