#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "sit/model.hpp"

namespace sit {

/// Built-in model configurations:
///   sit-tiny-ico   L12 h3 D192 mlp768, 320 ico patches of 153 vertices, 4 channels
///   sit-small-ico  L12 h6 D384 mlp1536, same patching
///   sit-tiny-hcp   sit-tiny-ico with 115 channels, embedding dropout 0.5, FFN dropout 0.3
///   sit-tiny-quad  sit-tiny with 177 paired quad patches of 50 vertices, binary classification
///   sit-narrow-ico L2 h2 D64 mlp256 on the ico patching (desk-scale training)
SiTConfig profile(const std::string& name);
std::vector<std::string> profile_names();

/// Applies one `key = value` model setting. `profile = <name>` replaces the
/// whole configuration with that profile, so it belongs on the first line.
void apply_model_setting(SiTConfig& config, const std::string& key, const std::string& value);
/// Settings file on top of `base`; the result is validated.
SiTConfig parse_model_config(std::istream& in, SiTConfig base = profile("sit-tiny-ico"));
SiTConfig load_model_config(const std::filesystem::path& path, SiTConfig base = profile("sit-tiny-ico"));
std::vector<std::pair<std::string, std::string>> model_config_entries(const SiTConfig& config);

}  // namespace sit
