#include "sit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "sit/text_io.hpp"

namespace sit {

namespace fs = std::filesystem;

namespace {

constexpr const char* kManifest = "manifest.txt";
constexpr const char* kWeights = "weights.bin";

std::uint32_t byteswap32(std::uint32_t x) {
  return (x >> 24) | ((x >> 8) & 0xFF00u) | ((x << 8) & 0xFF0000u) | (x << 24);
}

void write_floats(std::ostream& out, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, data + i, 4);
      bits = byteswap32(bits);
      out.write(reinterpret_cast<const char*>(&bits), 4);
    }
  }
}

void read_floats(const char* bytes, float* data, std::size_t n) {
  std::memcpy(data, bytes, n * sizeof(float));
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, data + i, 4);
      bits = byteswap32(bits);
      std::memcpy(data + i, &bits, 4);
    }
  }
}

void write_config(std::ostream& out, const SiTConfig& c) {
  fmt::print(out, "layers {}\nheads {}\ndim {}\nmlp {}\npatches {}\nvertices {}\nchannels {}\n", c.layers, c.heads,
             c.dim, c.mlp, c.patches, c.vertices, c.channels);
  fmt::print(out, "dropout_embed {:.17g}\ndropout_ffn {:.17g}\ndropout_attn {:.17g}\n", c.dropout_embed,
             c.dropout_ffn, c.dropout_attn);
  fmt::print(out, "head_kind {}\nclasses {}\nhead_hidden {}\ndeconfound {}\nmpp {}\nlayernorm_eps {:.17g}\n",
             to_string(c.head_kind), c.classes, c.head_hidden, int(c.deconfound), int(c.mpp), c.layernorm_eps);
}

struct Manifest {
  SiTConfig config;
  ConfoundStats confound;
  struct Entry {
    std::string name;
    long rows = 0, cols = 0;
    std::size_t offset = 0, bytes = 0;
  };
  std::vector<Entry> tensors;
};

Manifest read_manifest(const fs::path& dir) {
  auto in = open_input(dir / kManifest);
  LineReader reader(in);
  auto header = reader.tokens();
  if (header.size() != 2 || header[0] != "SITCHECKPOINT" || header[1] != "v1") {
    reader.fail("expected header 'SITCHECKPOINT v1'");
  }
  Manifest m;
  std::map<std::string, std::string> values;
  std::vector<std::string_view> tok;
  while (reader.try_tokens(tok)) {
    if (tok[0] == "tensor") {
      if (tok.size() != 6) reader.fail("tensor line needs: name rows cols offset bytes");
      m.tensors.push_back({std::string(tok[1]), reader.parse<long>(tok[2]), reader.parse<long>(tok[3]),
                           reader.parse<std::size_t>(tok[4]), reader.parse<std::size_t>(tok[5])});
      continue;
    }
    if (tok.size() != 2) reader.fail(fmt::format("expected 'key value', got '{}'", reader.line()));
    if (!values.emplace(std::string(tok[0]), std::string(tok[1])).second) {
      reader.fail(fmt::format("duplicate key '{}'", tok[0]));
    }
  }
  auto take = [&](const std::string& key) -> std::string {
    auto it = values.find(key);
    if (it == values.end()) throw ValidationError(fmt::format("checkpoint manifest lacks '{}'", key));
    std::string v = it->second;
    values.erase(it);
    return v;
  };
  auto as_int = [&](const std::string& key) {
    const std::string v = take(key);
    return reader.parse<int>(v);
  };
  auto as_double = [&](const std::string& key) {
    const std::string v = take(key);
    return reader.parse<double>(v);
  };
  SiTConfig& c = m.config;
  c.layers = as_int("layers");
  c.heads = as_int("heads");
  c.dim = as_int("dim");
  c.mlp = as_int("mlp");
  c.patches = as_int("patches");
  c.vertices = as_int("vertices");
  c.channels = as_int("channels");
  c.dropout_embed = as_double("dropout_embed");
  c.dropout_ffn = as_double("dropout_ffn");
  c.dropout_attn = as_double("dropout_attn");
  c.head_kind = parse_head_kind(take("head_kind"));
  c.classes = as_int("classes");
  c.head_hidden = as_int("head_hidden");
  c.deconfound = as_int("deconfound") != 0;
  c.mpp = as_int("mpp") != 0;
  c.layernorm_eps = as_double("layernorm_eps");
  m.confound.running_mean = as_double("confound.running_mean");
  m.confound.running_var = as_double("confound.running_var");
  m.confound.initialized = as_int("confound.initialized") != 0;
  m.confound.momentum = as_double("confound.momentum");
  m.confound.eps = as_double("confound.eps");
  if (!values.empty()) throw ValidationError(fmt::format("unknown manifest key '{}'", values.begin()->first));
  try {
    c.validate();
  } catch (const ConfigurationError& e) {
    throw ValidationError(fmt::format("checkpoint configuration is invalid: {}", e.detail()));
  }
  return m;
}

}  // namespace

void save_checkpoint(const SiTModel<float>& model, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create checkpoint directory '{}': {}", dir.string(), ec.message()));

  auto manifest = open_output(dir / kManifest);
  auto blob = open_output(dir / kWeights, std::ios::out | std::ios::binary);
  manifest << "SITCHECKPOINT v1\n";
  write_config(manifest, model.config);
  const ConfoundStats& s = model.confound;
  fmt::print(manifest,
             "confound.running_mean {:.17g}\nconfound.running_var {:.17g}\nconfound.initialized {}\n"
             "confound.momentum {:.17g}\nconfound.eps {:.17g}\n",
             s.running_mean, s.running_var, int(s.initialized), s.momentum, s.eps);
  std::size_t offset = 0;
  for_each_parameter(model.params, [&](const std::string& name, const Matrix<float>& m) {
    const std::size_t bytes = static_cast<std::size_t>(m.size()) * sizeof(float);
    fmt::print(manifest, "tensor {} {} {} {} {}\n", name, m.rows(), m.cols(), offset, bytes);
    write_floats(blob, m.data(), static_cast<std::size_t>(m.size()));
    offset += bytes;
  });
  if (!manifest || !blob) throw IoError(fmt::format("failed writing checkpoint '{}'", dir.string()));
}

SiTConfig load_checkpoint_config(const fs::path& dir) { return read_manifest(dir).config; }

SiTModel<float> load_checkpoint(const fs::path& dir) {
  const Manifest m = read_manifest(dir);
  SiTModel<float> model{m.config, zero_params<float>(m.config), m.confound};

  std::ifstream blob(dir / kWeights, std::ios::binary);
  if (!blob) throw IoError(fmt::format("cannot open '{}'", (dir / kWeights).string()));
  const std::string bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());

  std::size_t index = 0;
  std::size_t expected_offset = 0;
  for_each_parameter(model.params, [&](const std::string& name, Matrix<float>& t) {
    if (index >= m.tensors.size()) throw ValidationError(fmt::format("checkpoint registry lacks tensor '{}'", name));
    const auto& e = m.tensors[index++];
    const std::size_t want = static_cast<std::size_t>(t.size()) * sizeof(float);
    if (e.name != name || e.rows != t.rows() || e.cols != t.cols() || e.bytes != want) {
      throw ValidationError(fmt::format("checkpoint tensor '{}' ({}x{}) does not match the expected '{}' ({}x{})",
                                        e.name, e.rows, e.cols, name, t.rows(), t.cols()));
    }
    if (e.offset != expected_offset || e.offset + e.bytes > bytes.size()) {
      throw ValidationError(fmt::format("checkpoint tensor '{}' has an invalid offset or the blob is truncated", name));
    }
    read_floats(bytes.data() + e.offset, t.data(), static_cast<std::size_t>(t.size()));
    expected_offset += e.bytes;
  });
  if (index != m.tensors.size()) {
    throw ValidationError(fmt::format("checkpoint registry has unexpected tensor '{}'", m.tensors[index].name));
  }
  if (expected_offset != bytes.size()) throw ValidationError("checkpoint blob has trailing bytes");
  return model;
}

}  // namespace sit
