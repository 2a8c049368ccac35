#include "sit/mesh_io.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "sit/error.hpp"
#include "sit/text_io.hpp"

namespace sit {

namespace {

template <typename Face>
void write_impl(std::ostream& out, const char* kind, const std::vector<Vec3>& vertices,
                const std::vector<Face>& faces, const std::vector<Channel>& channels) {
  fmt::print(out, "SURFMESH v1 {} {} {} {}\n", kind, vertices.size(), faces.size(), channels.size());
  for (const auto& v : vertices) fmt::print(out, "{:.9g} {:.9g} {:.9g}\n", v.x(), v.y(), v.z());
  for (const auto& f : faces) {
    if constexpr (std::tuple_size_v<Face> == 3) {
      fmt::print(out, "{} {} {}\n", f[0], f[1], f[2]);
    } else {
      fmt::print(out, "{} {} {} {}\n", f[0], f[1], f[2], f[3]);
    }
  }
  for (const auto& c : channels) {
    if (c.name.empty() || c.name.find_first_of(" \t\r\n") != std::string::npos) {
      throw ValidationError(fmt::format("channel name '{}' must be a non-empty token", c.name));
    }
    fmt::print(out, "CHANNEL {}\n", c.name);
    for (float value : c.values) fmt::print(out, "{:.9g}\n", value);
  }
  if (!out) throw IoError("failed to write mesh stream");
}

template <typename Face>
std::vector<Face> read_faces(LineReader& reader, std::size_t count) {
  std::vector<Face> faces(count);
  for (auto& f : faces) {
    auto tokens = reader.tokens();
    if (tokens.size() != f.size()) {
      reader.fail(fmt::format("expected {} face indices, found {}", f.size(), tokens.size()));
    }
    for (std::size_t k = 0; k < f.size(); ++k) f[k] = reader.parse<std::int32_t>(tokens[k]);
  }
  return faces;
}

}  // namespace

void write_mesh(std::ostream& out, const TriMesh& mesh) {
  write_impl(out, "tri", mesh.vertices, mesh.faces, mesh.channels);
}

void write_mesh(std::ostream& out, const QuadMesh& mesh) {
  write_impl(out, "quad", mesh.vertices, mesh.faces, mesh.channels);
}

AnyMesh read_mesh(std::istream& in) {
  LineReader reader(in);
  auto header = reader.tokens();
  if (header.size() != 6 || header[0] != "SURFMESH" || header[1] != "v1") {
    reader.fail("expected header 'SURFMESH v1 <tri|quad> <V> <F> <C>'");
  }
  const bool is_tri = header[2] == "tri";
  if (!is_tri && header[2] != "quad") reader.fail("mesh kind must be 'tri' or 'quad'");
  const auto nv = reader.parse<std::size_t>(header[3]);
  const auto nf = reader.parse<std::size_t>(header[4]);
  const auto nc = reader.parse<std::size_t>(header[5]);

  std::vector<Vec3> vertices(nv);
  for (auto& v : vertices) {
    auto tokens = reader.tokens();
    if (tokens.size() != 3) reader.fail("expected 3 vertex coordinates");
    v = Vec3(reader.parse<float>(tokens[0]), reader.parse<float>(tokens[1]),
             reader.parse<float>(tokens[2]));
  }

  std::vector<Tri> tris;
  std::vector<Quad> quads;
  if (is_tri) {
    tris = read_faces<Tri>(reader, nf);
  } else {
    quads = read_faces<Quad>(reader, nf);
  }

  std::vector<Channel> channels(nc);
  for (auto& c : channels) {
    auto tokens = reader.tokens();
    if (tokens.size() != 2 || tokens[0] != "CHANNEL") reader.fail("expected 'CHANNEL <name>'");
    c.name = std::string(tokens[1]);
    c.values.resize(nv);
    for (auto& value : c.values) {
      auto t = reader.tokens();
      if (t.size() != 1) reader.fail("expected one channel value per line");
      value = reader.parse<float>(t[0]);
    }
  }
  reader.expect_end();

  if (is_tri) {
    TriMesh mesh{std::move(vertices), std::move(tris), std::move(channels)};
    validate(mesh);
    return mesh;
  }
  QuadMesh mesh = make_quad_mesh(std::move(vertices), std::move(quads));
  mesh.channels = std::move(channels);
  validate(mesh);
  return mesh;
}

void save_mesh(const TriMesh& mesh, const std::filesystem::path& path) {
  auto out = open_output(path);
  write_mesh(out, mesh);
}

void save_mesh(const QuadMesh& mesh, const std::filesystem::path& path) {
  auto out = open_output(path);
  write_mesh(out, mesh);
}

AnyMesh load_mesh(const std::filesystem::path& path) {
  auto in = open_input(path);
  try {
    return read_mesh(in);
  } catch (const ParseError& e) {
    throw ParseError(fmt::format("{}: {}", path.string(), e.reason()), e.line());
  }
}

TriMesh load_tri_mesh(const std::filesystem::path& path) {
  auto mesh = load_mesh(path);
  if (auto* tri = std::get_if<TriMesh>(&mesh)) return std::move(*tri);
  throw ValidationError(fmt::format("{}: expected a triangle mesh", path.string()));
}

QuadMesh load_quad_mesh(const std::filesystem::path& path) {
  auto mesh = load_mesh(path);
  if (auto* quad = std::get_if<QuadMesh>(&mesh)) return std::move(*quad);
  throw ValidationError(fmt::format("{}: expected a quad mesh", path.string()));
}

}  // namespace sit
