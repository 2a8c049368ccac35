#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sit/mesh.hpp"
#include "sit/resample.hpp"

namespace sit {

/// N rows of V carrier-vertex indices. Vertices on patch boundaries appear in
/// every patch that contains them.
struct PatchTable {
  int patch_count = 0;
  int patch_vertices = 0;
  std::vector<std::int32_t> indices;  // row-major N x V
  std::string carrier_id;
  std::size_t carrier_vertex_count = 0;

  std::span<const std::int32_t> row(int r) const {
    return {indices.data() + static_cast<std::size_t>(r) * patch_vertices,
            static_cast<std::size_t>(patch_vertices)};
  }
};

/// Flattened patch sequence, N x (V*C), vertex-major within a row: all channels
/// of the row's first vertex, then the second vertex, and so on.
struct PatchSequence {
  int patch_count = 0;
  int patch_vertices = 0;
  int channels = 0;
  FieldMatrix data;
};

using ElementPair = std::pair<std::int32_t, std::int32_t>;

/// One patch per coarse face: all fine vertices inside it, in row-major order
/// of the triangular grid whose apex is the face's first corner, second corner
/// at the start of the last row and third corner at its end. The fine mesh
/// must descend from the coarse mesh through the face layout produced by
/// build_icosphere; anything else is a StructuralError.
PatchTable build_ico_patch_table(const TriMesh& fine, const TriMesh& coarse);
PatchTable build_ico_patch_table(const Icosphere& fine, const Icosphere& coarse);

/// One (2^d + 1)^2 grid per control element (5 x 5 after two Catmull-Clark
/// steps), row-major from the element's first corner towards its second.
/// With a pairing, each row concatenates the grids of the two paired elements;
/// without one, each element is its own patch.
PatchTable build_quad_patch_table(const QuadMesh& control, const QuadMesh& fine,
                                  const std::optional<std::vector<ElementPair>>& pairing = std::nullopt);

PatchSequence extract_sequence(const FeatureField& field, const PatchTable& table);

/// Inverse of extract_sequence: each vertex receives the mean of every copy of
/// itself in the sequence.
FeatureField scatter_sequence(const PatchSequence& sequence, const PatchTable& table);

/// Number of rows each carrier vertex appears in.
std::vector<int> vertex_multiplicity(const PatchTable& table);

/// "PATCHTABLE v1 <N> <V>" followed by N lines of V indices.
void write_patch_table(std::ostream& out, const PatchTable& table);
PatchTable read_patch_table(std::istream& in);
void save_patch_table(const PatchTable& table, const std::filesystem::path& path);
PatchTable load_patch_table(const std::filesystem::path& path);

/// One "i j" pair of control element indices per line.
std::vector<ElementPair> read_pairing(std::istream& in);
std::vector<ElementPair> load_pairing(const std::filesystem::path& path);
void save_pairing(const std::vector<ElementPair>& pairs, const std::filesystem::path& path);

}  // namespace sit
