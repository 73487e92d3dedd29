#pragma once

#include <filesystem>
#include <optional>

#include "pete/model.hpp"

namespace pete {

// Checkpoint layout, version 1:
//   [ UTF-8 JSON header ][ payload: little-endian float32 arrays ][ u64 LE payload length ]
// The header carries {format_version, config, manifest}; manifest entries
// are {name, shape, offset} with contiguous byte offsets in parameter order.
// save followed by load reproduces every parameter bitwise.
inline constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& path);

// Rebuilds the model from the stored config and payload. When `expect` is
// given, its derived parameter shapes must match the manifest; the first
// mismatched tensor is named in the error.
Model load_checkpoint(const std::filesystem::path& path,
                      const std::optional<ModelConfig>& expect = std::nullopt);

}  // namespace pete
