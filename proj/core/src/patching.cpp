#include "sit/patching.hpp"

#include <algorithm>
#include <istream>
#include <ostream>

#include <fmt/format.h>
#include <fmt/ostream.h>
#include <fmt/ranges.h>

#include "sit/error.hpp"
#include "sit/text_io.hpp"

namespace sit {

namespace {

struct GridPos {
  int r;
  int s;
};

GridPos mid(GridPos a, GridPos b) { return {(a.r + b.r) / 2, (a.s + b.s) / 2}; }

// Number of subdivision levels separating two face counts (ratio 4^levels).
int levels_between(std::size_t fine_faces, std::size_t coarse_faces) {
  if (coarse_faces == 0 || fine_faces % coarse_faces != 0) return -1;
  std::size_t ratio = fine_faces / coarse_faces;
  int levels = 0;
  while (ratio > 1) {
    if (ratio % 4 != 0) return -1;
    ratio /= 4;
    ++levels;
  }
  return levels;
}

// Fills a grid of fine vertex indices by walking the 4-ary face hierarchy.
// Every leaf writes its corners at the grid positions implied by the child
// layout; disagreement between two leaves means the fine mesh does not
// descend from the coarse one.
class GridBuilder {
 public:
  GridBuilder(std::size_t cells, int side) : grid_(cells, -1), side_(side) {}

  void set(std::size_t cell, std::int32_t vertex) {
    auto& slot = grid_[cell];
    if (slot >= 0 && slot != vertex) {
      throw StructuralError(fmt::format("lineage mismatch: grid cell {} claims vertices {} and {}", cell,
                                        slot, vertex));
    }
    slot = vertex;
  }

  const std::vector<std::int32_t>& grid() const { return grid_; }
  int side() const { return side_; }

  void require_complete(std::size_t patch) const {
    if (std::find(grid_.begin(), grid_.end(), -1) != grid_.end()) {
      throw StructuralError(fmt::format("patch {} has unfilled grid cells", patch));
    }
  }

 private:
  std::vector<std::int32_t> grid_;
  int side_;
};

void fill_triangle(const std::vector<Tri>& fine, std::size_t start, int depth, GridPos a, GridPos b, GridPos c,
                   GridBuilder& g) {
  auto cell = [](GridPos p) { return static_cast<std::size_t>(p.r) * (p.r + 1) / 2 + p.s; };
  if (depth == 0) {
    const Tri& f = fine[start];
    g.set(cell(a), f[0]);
    g.set(cell(b), f[1]);
    g.set(cell(c), f[2]);
    return;
  }
  const std::size_t child = std::size_t{1} << (2 * (depth - 1));
  const GridPos ab = mid(a, b), bc = mid(b, c), ca = mid(c, a);
  fill_triangle(fine, start, depth - 1, a, ab, ca, g);
  fill_triangle(fine, start + child, depth - 1, ab, b, bc, g);
  fill_triangle(fine, start + 2 * child, depth - 1, ca, bc, c, g);
  fill_triangle(fine, start + 3 * child, depth - 1, ab, bc, ca, g);
}

void fill_quad(const std::vector<Quad>& fine, std::size_t start, int depth, const std::array<GridPos, 4>& q,
               GridBuilder& g) {
  const int side = g.side();
  auto cell = [side](GridPos p) { return static_cast<std::size_t>(p.r) * side + p.s; };
  if (depth == 0) {
    const Quad& f = fine[start];
    for (int k = 0; k < 4; ++k) g.set(cell(q[k]), f[k]);
    return;
  }
  const std::size_t child = std::size_t{1} << (2 * (depth - 1));
  const GridPos center = mid(q[0], q[2]);
  for (int k = 0; k < 4; ++k) {
    const GridPos next = mid(q[k], q[(k + 1) % 4]);
    const GridPos prev = mid(q[(k + 3) % 4], q[k]);
    fill_quad(fine, start + k * child, depth - 1, {q[k], next, center, prev}, g);
  }
}

void require_shared_prefix(const std::vector<Vec3>& fine, const std::vector<Vec3>& coarse) {
  if (fine.size() < coarse.size()) {
    throw StructuralError("fine mesh has fewer vertices than the coarse mesh");
  }
  for (std::size_t i = 0; i < coarse.size(); ++i) {
    if (fine[i] != coarse[i]) {
      throw StructuralError(fmt::format("vertex {} differs between fine and coarse meshes; no common lineage", i));
    }
  }
}

void check_coverage(const PatchTable& table) {
  const auto mult = vertex_multiplicity(table);
  for (std::size_t v = 0; v < mult.size(); ++v) {
    if (mult[v] == 0) throw StructuralError(fmt::format("carrier vertex {} is not covered by any patch", v));
  }
}

}  // namespace

PatchTable build_ico_patch_table(const TriMesh& fine, const TriMesh& coarse) {
  validate(fine);
  validate(coarse);
  const int depth = levels_between(fine.face_count(), coarse.face_count());
  if (depth < 0) {
    throw StructuralError(fmt::format("face counts {} and {} are not related by subdivision", fine.face_count(),
                                      coarse.face_count()));
  }
  require_shared_prefix(fine.vertices, coarse.vertices);

  const int n = 1 << depth;
  const std::size_t cells = static_cast<std::size_t>(n + 1) * (n + 2) / 2;
  const std::size_t block = std::size_t{1} << (2 * depth);

  PatchTable table;
  table.patch_count = static_cast<int>(coarse.face_count());
  table.patch_vertices = static_cast<int>(cells);
  table.carrier_id = fingerprint(fine);
  table.carrier_vertex_count = fine.vertex_count();
  table.indices.reserve(coarse.face_count() * cells);

  for (std::size_t f = 0; f < coarse.face_count(); ++f) {
    GridBuilder g(cells, n + 1);
    fill_triangle(fine.faces, f * block, depth, {0, 0}, {n, 0}, {n, n}, g);
    g.require_complete(f);
    const auto& grid = g.grid();
    const Tri& corners = coarse.faces[f];
    if (grid.front() != corners[0] || grid[cells - 1 - n] != corners[1] || grid.back() != corners[2]) {
      throw StructuralError(fmt::format("coarse face {} corners do not match its fine descendants", f));
    }
    table.indices.insert(table.indices.end(), grid.begin(), grid.end());
  }
  check_coverage(table);
  return table;
}

PatchTable build_ico_patch_table(const Icosphere& fine, const Icosphere& coarse) {
  if (fine.order < coarse.order) throw StructuralError("fine icosphere has lower order than the coarse one");
  return build_ico_patch_table(fine.mesh, coarse.mesh);
}

PatchTable build_quad_patch_table(const QuadMesh& control, const QuadMesh& fine,
                                  const std::optional<std::vector<ElementPair>>& pairing) {
  validate(control);
  validate(fine);
  const int depth = levels_between(fine.face_count(), control.face_count());
  if (depth < 1) {
    throw StructuralError(fmt::format("fine mesh ({} faces) is not a subdivision of the control mesh ({} faces)",
                                      fine.face_count(), control.face_count()));
  }
  if (fine.vertex_count() < control.vertex_count()) {
    throw StructuralError("fine mesh has fewer vertices than the control mesh");
  }
  const int n = 1 << depth;
  const int side = n + 1;
  const std::size_t cells = static_cast<std::size_t>(side) * side;
  const std::size_t block = std::size_t{1} << (2 * depth);

  std::vector<std::vector<std::int32_t>> grids(control.face_count());
  for (std::size_t f = 0; f < control.face_count(); ++f) {
    GridBuilder g(cells, side);
    fill_quad(fine.faces, f * block, depth, {GridPos{0, 0}, GridPos{0, n}, GridPos{n, n}, GridPos{n, 0}}, g);
    g.require_complete(f);
    const auto& grid = g.grid();
    const Quad& c = control.faces[f];
    if (grid[0] != c[0] || grid[static_cast<std::size_t>(n)] != c[1] || grid[cells - 1] != c[2] ||
        grid[cells - 1 - static_cast<std::size_t>(n)] != c[3]) {
      throw StructuralError(fmt::format("control element {} corners do not match its fine descendants", f));
    }
    grids[f] = grid;
  }

  PatchTable table;
  table.carrier_id = fingerprint(fine);
  table.carrier_vertex_count = fine.vertex_count();

  if (!pairing) {
    table.patch_count = static_cast<int>(grids.size());
    table.patch_vertices = static_cast<int>(cells);
    for (const auto& g : grids) table.indices.insert(table.indices.end(), g.begin(), g.end());
    check_coverage(table);
    return table;
  }

  const auto elements = static_cast<std::int32_t>(control.face_count());
  std::vector<int> seen(control.face_count(), -1);
  for (std::size_t p = 0; p < pairing->size(); ++p) {
    const auto [a, b] = (*pairing)[p];
    for (std::int32_t e : {a, b}) {
      if (e < 0 || e >= elements) {
        throw ValidationError(fmt::format("pair {} references element {} (control mesh has {})", p, e, elements));
      }
      if (seen[static_cast<std::size_t>(e)] >= 0) {
        throw ValidationError(fmt::format("element {} appears in pairs {} and {}", e, seen[static_cast<std::size_t>(e)], p));
      }
      seen[static_cast<std::size_t>(e)] = static_cast<int>(p);
    }
  }
  std::vector<std::int32_t> unpaired;
  for (std::int32_t e = 0; e < elements; ++e) {
    if (seen[static_cast<std::size_t>(e)] < 0) unpaired.push_back(e);
  }
  if (!unpaired.empty()) {
    throw ValidationError(fmt::format("unpaired control elements: {}", fmt::join(unpaired, ", ")));
  }

  table.patch_count = static_cast<int>(pairing->size());
  table.patch_vertices = static_cast<int>(2 * cells);
  for (const auto& [a, b] : *pairing) {
    const auto& ga = grids[static_cast<std::size_t>(a)];
    const auto& gb = grids[static_cast<std::size_t>(b)];
    table.indices.insert(table.indices.end(), ga.begin(), ga.end());
    table.indices.insert(table.indices.end(), gb.begin(), gb.end());
  }
  check_coverage(table);
  return table;
}

PatchSequence extract_sequence(const FeatureField& field, const PatchTable& table) {
  if (!field.carrier_id.empty() && !table.carrier_id.empty() && field.carrier_id != table.carrier_id) {
    throw ShapeError("field carrier does not match the patch table carrier");
  }
  if (table.carrier_vertex_count != 0 &&
      static_cast<std::size_t>(field.vertex_count()) != table.carrier_vertex_count) {
    throw ShapeError(fmt::format("field has {} vertices; patch table carrier has {}", field.vertex_count(),
                                 table.carrier_vertex_count));
  }
  const auto c = static_cast<int>(field.channel_count());
  PatchSequence seq;
  seq.patch_count = table.patch_count;
  seq.patch_vertices = table.patch_vertices;
  seq.channels = c;
  seq.data.resize(table.patch_count, static_cast<Eigen::Index>(table.patch_vertices) * c);
  for (int r = 0; r < table.patch_count; ++r) {
    const auto row = table.row(r);
    for (int k = 0; k < table.patch_vertices; ++k) {
      const std::int32_t v = row[static_cast<std::size_t>(k)];
      if (v < 0 || v >= field.vertex_count()) {
        throw ShapeError(fmt::format("patch {} references vertex {} outside the field", r, v));
      }
      seq.data.block(r, static_cast<Eigen::Index>(k) * c, 1, c) = field.values.row(v);
    }
  }
  return seq;
}

FeatureField scatter_sequence(const PatchSequence& sequence, const PatchTable& table) {
  if (sequence.patch_count != table.patch_count || sequence.patch_vertices != table.patch_vertices) {
    throw ShapeError("sequence does not match the patch table");
  }
  const int c = sequence.channels;
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(table.carrier_vertex_count), c);
  const auto mult = vertex_multiplicity(table);
  for (int r = 0; r < table.patch_count; ++r) {
    const auto row = table.row(r);
    for (int k = 0; k < table.patch_vertices; ++k) {
      sum.row(row[static_cast<std::size_t>(k)]) +=
          sequence.data.block(r, static_cast<Eigen::Index>(k) * c, 1, c).cast<double>();
    }
  }
  FieldMatrix values(sum.rows(), c);
  for (Eigen::Index v = 0; v < sum.rows(); ++v) {
    const double m = std::max(1, mult[static_cast<std::size_t>(v)]);
    values.row(v) = (sum.row(v) / m).cast<float>();
  }
  std::vector<std::string> names;
  for (int i = 0; i < c; ++i) names.push_back(fmt::format("c{}", i));
  return FeatureField{table.carrier_id, std::move(values), std::move(names)};
}

std::vector<int> vertex_multiplicity(const PatchTable& table) {
  std::size_t count = table.carrier_vertex_count;
  for (auto v : table.indices) count = std::max(count, static_cast<std::size_t>(v) + 1);
  std::vector<int> mult(count, 0);
  for (auto v : table.indices) ++mult[static_cast<std::size_t>(v)];
  return mult;
}

void write_patch_table(std::ostream& out, const PatchTable& table) {
  fmt::print(out, "PATCHTABLE v1 {} {}\n", table.patch_count, table.patch_vertices);
  for (int r = 0; r < table.patch_count; ++r) fmt::print(out, "{}\n", fmt::join(table.row(r), " "));
  if (!out) throw IoError("failed to write patch table");
}

PatchTable read_patch_table(std::istream& in) {
  LineReader reader(in);
  auto header = reader.tokens();
  if (header.size() != 4 || header[0] != "PATCHTABLE" || header[1] != "v1") {
    reader.fail("expected header 'PATCHTABLE v1 <N> <V>'");
  }
  PatchTable table;
  table.patch_count = reader.parse<int>(header[2]);
  table.patch_vertices = reader.parse<int>(header[3]);
  if (table.patch_count <= 0 || table.patch_vertices <= 0) reader.fail("N and V must be positive");
  table.indices.reserve(static_cast<std::size_t>(table.patch_count) * table.patch_vertices);
  for (int r = 0; r < table.patch_count; ++r) {
    auto t = reader.tokens();
    if (static_cast<int>(t.size()) != table.patch_vertices) {
      reader.fail(fmt::format("expected {} indices, found {}", table.patch_vertices, t.size()));
    }
    for (auto tok : t) {
      const auto v = reader.parse<std::int32_t>(tok);
      if (v < 0) reader.fail("negative vertex index");
      table.indices.push_back(v);
    }
  }
  reader.expect_end();
  for (auto v : table.indices) {
    table.carrier_vertex_count = std::max(table.carrier_vertex_count, static_cast<std::size_t>(v) + 1);
  }
  return table;
}

void save_patch_table(const PatchTable& table, const std::filesystem::path& path) {
  auto out = open_output(path);
  write_patch_table(out, table);
}

PatchTable load_patch_table(const std::filesystem::path& path) {
  auto in = open_input(path);
  return read_patch_table(in);
}

std::vector<ElementPair> read_pairing(std::istream& in) {
  LineReader reader(in);
  std::vector<ElementPair> pairs;
  std::vector<std::string_view> t;
  while (reader.try_tokens(t)) {
    if (t.size() != 2) reader.fail("expected two element indices per line");
    pairs.emplace_back(reader.parse<std::int32_t>(t[0]), reader.parse<std::int32_t>(t[1]));
  }
  return pairs;
}

std::vector<ElementPair> load_pairing(const std::filesystem::path& path) {
  auto in = open_input(path);
  return read_pairing(in);
}

void save_pairing(const std::vector<ElementPair>& pairs, const std::filesystem::path& path) {
  auto out = open_output(path);
  for (const auto& [a, b] : pairs) fmt::print(out, "{} {}\n", a, b);
  if (!out) throw IoError("failed to write pairing file");
}

}  // namespace sit
