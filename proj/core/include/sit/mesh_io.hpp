#pragma once

#include <filesystem>
#include <iosfwd>
#include <variant>

#include "sit/mesh.hpp"

namespace sit {

using AnyMesh = std::variant<TriMesh, QuadMesh>;

// Native text format:
//
//   SURFMESH v1 <tri|quad> <V> <F> <C>
//   V lines of "x y z"
//   F lines of 3 or 4 vertex indices
//   C blocks of "CHANNEL <name>" followed by V values
//
// Floats are written with 9 significant digits, which reproduces 32-bit
// values bit-exactly on reload.

void write_mesh(std::ostream& out, const TriMesh& mesh);
void write_mesh(std::ostream& out, const QuadMesh& mesh);
AnyMesh read_mesh(std::istream& in);

void save_mesh(const TriMesh& mesh, const std::filesystem::path& path);
void save_mesh(const QuadMesh& mesh, const std::filesystem::path& path);
AnyMesh load_mesh(const std::filesystem::path& path);

TriMesh load_tri_mesh(const std::filesystem::path& path);
QuadMesh load_quad_mesh(const std::filesystem::path& path);

}  // namespace sit
