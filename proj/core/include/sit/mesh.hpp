#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace sit {

using Vec3 = Eigen::Vector3f;
using Tri = std::array<std::int32_t, 3>;
using Quad = std::array<std::int32_t, 4>;
/// Undirected edge stored as (min, max).
using Edge = std::pair<std::int32_t, std::int32_t>;

inline Edge make_edge(std::int32_t a, std::int32_t b) {
  return a < b ? Edge{a, b} : Edge{b, a};
}

/// Named per-vertex scalar array.
struct Channel {
  std::string name;
  std::vector<float> values;

  friend bool operator==(const Channel&, const Channel&) = default;
};

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<Tri> faces;
  std::vector<Channel> channels;

  std::size_t vertex_count() const { return vertices.size(); }
  std::size_t face_count() const { return faces.size(); }
};

struct QuadMesh {
  std::vector<Vec3> vertices;
  std::vector<Quad> faces;
  /// Sorted; edges used by exactly one face.
  std::vector<Edge> boundary_edges;
  /// parent_face[f] is the face of the previous level that f subdivides.
  /// Empty for meshes that were not produced by subdivision.
  std::vector<std::int32_t> parent_face;
  std::vector<Channel> channels;

  std::size_t vertex_count() const { return vertices.size(); }
  std::size_t face_count() const { return faces.size(); }
};

struct Icosphere {
  int order = 0;
  TriMesh mesh;
  /// Face of order-1 each face subdivides; empty at order 0.
  std::vector<std::int32_t> parent_face;
};

bool operator==(const TriMesh& a, const TriMesh& b);
bool operator==(const QuadMesh& a, const QuadMesh& b);

inline constexpr int kMaxIcosphereOrder = 8;

/// Regular icosahedron subdivided `order` times. Midpoints of level k are
/// appended in ascending (min, max) parent-edge order and projected to the
/// unit sphere; the children of face f are faces 4f..4f+3, laid out as
/// (a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca).
Icosphere build_icosphere(int order);

/// Expected counts for an icosphere of the given order.
std::size_t icosphere_vertex_count(int order);
std::size_t icosphere_face_count(int order);

/// Builds a QuadMesh from raw geometry: validates indices, checks that the
/// surface is an oriented 2-manifold (each edge used by at most two faces in
/// opposite directions) and fills boundary_edges.
QuadMesh make_quad_mesh(std::vector<Vec3> vertices, std::vector<Quad> faces);

/// One Catmull-Clark step. Output vertices are ordered as
/// [repositioned originals | face points (face order) | edge points (ascending edge key)];
/// the children of face f are faces 4f..4f+3 with child k = (v_k, e_k, face_point, e_{k-1}),
/// where e_k is the edge point of edge (v_k, v_{k+1}).
QuadMesh catmull_clark(const QuadMesh& mesh);

/// Axis-aligned cube [-1, 1]^3 with outward-facing quads.
QuadMesh make_cube();
/// Planar nx-by-ny sheet of unit quads in the z = 0 plane, counter-clockwise seen from +z.
QuadMesh make_quad_grid(int nx, int ny);

/// Throws ValidationError when indices are out of range, a face is degenerate
/// or a channel has the wrong length.
void validate(const TriMesh& mesh);
void validate(const QuadMesh& mesh);

std::vector<Edge> unique_edges(const std::vector<Tri>& faces);
std::vector<Edge> unique_edges(const std::vector<Quad>& faces);

/// V - E + F.
long euler_characteristic(const TriMesh& mesh);
long euler_characteristic(const QuadMesh& mesh);

/// Stable 64-bit FNV-1a digest of geometry and connectivity, hex encoded.
/// Used as the carrier identity of fields and patch tables.
std::string fingerprint(const TriMesh& mesh);
std::string fingerprint(const QuadMesh& mesh);

}  // namespace sit
