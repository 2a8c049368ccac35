#pragma once

#include <filesystem>

#include "sit/model.hpp"

namespace sit {

/// A checkpoint is a directory holding `manifest.txt` (configuration, confound
/// statistics and a tensor registry of name, shape, offset and byte length)
/// and `weights.bin` (little-endian float32 tensors in registry order).
void save_checkpoint(const SiTModel<float>& model, const std::filesystem::path& dir);

/// Rebuilds the model from the manifest configuration and checks every
/// registry entry against the shapes that configuration implies.
SiTModel<float> load_checkpoint(const std::filesystem::path& dir);

/// Configuration only, without reading the weights.
SiTConfig load_checkpoint_config(const std::filesystem::path& dir);

}  // namespace sit
