#include "sit/profiles.hpp"

#include <fmt/format.h>

#include "sit/error.hpp"
#include "sit/text_io.hpp"

namespace sit {

namespace {

SiTConfig tiny_ico() {
  SiTConfig c;
  c.layers = 12;
  c.heads = 3;
  c.dim = 192;
  c.mlp = 768;
  c.patches = 320;
  c.vertices = 153;
  c.channels = 4;
  return c;
}

}  // namespace

SiTConfig profile(const std::string& name) {
  SiTConfig c = tiny_ico();
  if (name == "sit-tiny-ico") {
    // defaults
  } else if (name == "sit-small-ico") {
    c.heads = 6;
    c.dim = 384;
    c.mlp = 1536;
  } else if (name == "sit-tiny-hcp") {
    c.channels = 115;
    c.dropout_embed = 0.5;
    c.dropout_ffn = 0.3;
  } else if (name == "sit-tiny-quad") {
    c.patches = 177;
    c.vertices = 50;
    c.head_kind = HeadKind::classification;
    c.classes = 2;
  } else if (name == "sit-narrow-ico") {
    c.layers = 2;
    c.heads = 2;
    c.dim = 64;
    c.mlp = 256;
  } else {
    throw ConfigurationError(fmt::format("unknown profile '{}'", name));
  }
  c.validate();
  return c;
}

std::vector<std::string> profile_names() {
  return {"sit-tiny-ico", "sit-small-ico", "sit-tiny-hcp", "sit-tiny-quad", "sit-narrow-ico"};
}

void apply_model_setting(SiTConfig& c, const std::string& key, const std::string& value) {
  if (key == "profile") c = profile(value);
  else if (key == "layers") c.layers = parse_setting<int>(key, value);
  else if (key == "heads") c.heads = parse_setting<int>(key, value);
  else if (key == "dim") c.dim = parse_setting<int>(key, value);
  else if (key == "mlp") c.mlp = parse_setting<int>(key, value);
  else if (key == "patches") c.patches = parse_setting<int>(key, value);
  else if (key == "vertices") c.vertices = parse_setting<int>(key, value);
  else if (key == "channels") c.channels = parse_setting<int>(key, value);
  else if (key == "dropout_embed") c.dropout_embed = parse_setting<double>(key, value);
  else if (key == "dropout_ffn") c.dropout_ffn = parse_setting<double>(key, value);
  else if (key == "dropout_attn") c.dropout_attn = parse_setting<double>(key, value);
  else if (key == "head") c.head_kind = parse_head_kind(value);
  else if (key == "classes") c.classes = parse_setting<int>(key, value);
  else if (key == "head_hidden") c.head_hidden = parse_setting<int>(key, value);
  else if (key == "deconfound") c.deconfound = parse_setting_bool(key, value);
  else if (key == "mpp") c.mpp = parse_setting_bool(key, value);
  else if (key == "layernorm_eps") c.layernorm_eps = parse_setting<double>(key, value);
  else throw ConfigurationError(fmt::format("unknown model setting '{}'", key));
}

SiTConfig parse_model_config(std::istream& in, SiTConfig base) {
  read_settings(in, [&](const std::string& key, const std::string& value) { apply_model_setting(base, key, value); });
  base.validate();
  return base;
}

SiTConfig load_model_config(const std::filesystem::path& path, SiTConfig base) {
  auto in = open_input(path);
  return parse_model_config(in, std::move(base));
}

std::vector<std::pair<std::string, std::string>> model_config_entries(const SiTConfig& c) {
  return {
      {"layers", std::to_string(c.layers)},
      {"heads", std::to_string(c.heads)},
      {"dim", std::to_string(c.dim)},
      {"mlp", std::to_string(c.mlp)},
      {"patches", std::to_string(c.patches)},
      {"vertices", std::to_string(c.vertices)},
      {"channels", std::to_string(c.channels)},
      {"dropout_embed", fmt::format("{:.17g}", c.dropout_embed)},
      {"dropout_ffn", fmt::format("{:.17g}", c.dropout_ffn)},
      {"dropout_attn", fmt::format("{:.17g}", c.dropout_attn)},
      {"head", to_string(c.head_kind)},
      {"classes", std::to_string(c.classes)},
      {"head_hidden", std::to_string(c.head_hidden)},
      {"deconfound", c.deconfound ? "true" : "false"},
      {"mpp", c.mpp ? "true" : "false"},
      {"layernorm_eps", fmt::format("{:.17g}", c.layernorm_eps)},
  };
}

}  // namespace sit
