// Copyright 2026 The WPLab Authors
// SPDX-License-Identifier: Apache-2.0

// Flat checkpoint file: "WPCK", u32 version, u64 header length, a JSON header
// {config, tensors:[{name, dtype, shape, offset}], meta}, then the tensors as
// little-endian f32, row-major, in directory order. Offsets are in bytes from
// the start of the payload.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

#include "wplab/model.hpp"

namespace wplab {

inline constexpr std::string_view kCheckpointMagic = "WPCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ModelParams params;
  std::map<std::string, std::string> meta;
};

std::string checkpoint_bytes(const ModelParams& params, const std::map<std::string, std::string>& meta = {});
/// Throws CheckpointError on a bad magic or version, a malformed header, a
/// truncated payload, or tensors that disagree with the header config.
Checkpoint parse_checkpoint(std::string_view bytes);

/// Atomic: writes a temporary next to `path` and renames it into place.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& meta = {});
Checkpoint read_checkpoint(const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

std::string model_config_json(const ModelConfig& config);
ModelConfig model_config_from_json(std::string_view text);

}  // namespace wplab
