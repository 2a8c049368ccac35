#include "sit/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <string>

#include <fmt/format.h>

#include "sit/error.hpp"

namespace sit {

namespace {

using Vec3d = Eigen::Vector3d;

template <typename Face>
bool same_faces(const std::vector<Face>& a, const std::vector<Face>& b) {
  return a == b;
}

bool same_vertices(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

// Sorted unique edge list plus lookup by key.
class EdgeIndex {
 public:
  template <typename Face>
  explicit EdgeIndex(const std::vector<Face>& faces) {
    edges_.reserve(faces.size() * std::tuple_size_v<Face>);
    for (const auto& f : faces) {
      for (std::size_t k = 0; k < f.size(); ++k) {
        edges_.push_back(make_edge(f[k], f[(k + 1) % f.size()]));
      }
    }
    std::sort(edges_.begin(), edges_.end());
    edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());
  }

  std::int32_t index_of(std::int32_t a, std::int32_t b) const {
    const Edge e = make_edge(a, b);
    auto it = std::lower_bound(edges_.begin(), edges_.end(), e);
    return static_cast<std::int32_t>(it - edges_.begin());
  }

  const std::vector<Edge>& edges() const { return edges_; }

 private:
  std::vector<Edge> edges_;
};

template <typename Face>
void validate_faces(const std::vector<Face>& faces, std::size_t vertex_count) {
  for (std::size_t f = 0; f < faces.size(); ++f) {
    const auto& face = faces[f];
    for (std::size_t k = 0; k < face.size(); ++k) {
      if (face[k] < 0 || static_cast<std::size_t>(face[k]) >= vertex_count) {
        throw ValidationError(fmt::format("face {} references vertex {} but the mesh has {} vertices",
                                          f, face[k], vertex_count));
      }
      for (std::size_t j = k + 1; j < face.size(); ++j) {
        if (face[k] == face[j]) {
          throw ValidationError(fmt::format("face {} is degenerate (vertex {} repeated)", f, face[k]));
        }
      }
    }
  }
}

void validate_channels(const std::vector<Channel>& channels, std::size_t vertex_count) {
  for (const auto& c : channels) {
    if (c.values.size() != vertex_count) {
      throw ValidationError(fmt::format("channel '{}' has {} values for {} vertices", c.name,
                                        c.values.size(), vertex_count));
    }
  }
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

template <typename Face>
std::string fingerprint_impl(const std::vector<Vec3>& vertices, const std::vector<Face>& faces) {
  std::uint64_t h = kFnvOffset;
  const std::uint64_t counts[2] = {vertices.size(), faces.size()};
  fnv_bytes(h, counts, sizeof(counts));
  for (const auto& v : vertices) fnv_bytes(h, v.data(), 3 * sizeof(float));
  for (const auto& f : faces) fnv_bytes(h, f.data(), f.size() * sizeof(std::int32_t));
  return fmt::format("{:016x}", h);
}

Vec3 to_float(const Vec3d& v) { return v.cast<float>(); }

}  // namespace

bool operator==(const TriMesh& a, const TriMesh& b) {
  return same_vertices(a.vertices, b.vertices) && same_faces(a.faces, b.faces) &&
         a.channels == b.channels;
}

bool operator==(const QuadMesh& a, const QuadMesh& b) {
  return same_vertices(a.vertices, b.vertices) && same_faces(a.faces, b.faces) &&
         a.boundary_edges == b.boundary_edges && a.channels == b.channels;
}

std::size_t icosphere_vertex_count(int order) {
  return 10 * (std::size_t{1} << (2 * order)) + 2;
}

std::size_t icosphere_face_count(int order) {
  return 20 * (std::size_t{1} << (2 * order));
}

Icosphere build_icosphere(int order) {
  if (order < 0) throw ArgumentError("icosphere order must be non-negative");
  if (order > kMaxIcosphereOrder) {
    throw ResourceLimitError(
        fmt::format("icosphere order {} exceeds the limit of {}", order, kMaxIcosphereOrder));
  }

  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3d> positions = {
      {-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
      {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1},
  };
  for (auto& p : positions) p.normalize();
  std::vector<Tri> faces = {
      {0, 11, 5}, {0, 5, 1}, {0, 1, 7}, {0, 7, 10}, {0, 10, 11},
      {1, 5, 9}, {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
      {3, 9, 4}, {3, 4, 2}, {3, 2, 6}, {3, 6, 8}, {3, 8, 9},
      {4, 9, 5}, {2, 4, 11}, {6, 2, 10}, {8, 6, 7}, {9, 8, 1},
  };

  for (int level = 0; level < order; ++level) {
    const EdgeIndex edges(faces);
    const auto base = static_cast<std::int32_t>(positions.size());
    positions.reserve(positions.size() + edges.edges().size());
    for (const auto& [a, b] : edges.edges()) {
      positions.push_back((positions[a] + positions[b]).normalized());
    }
    std::vector<Tri> next;
    next.reserve(faces.size() * 4);
    for (const auto& [a, b, c] : faces) {
      const std::int32_t ab = base + edges.index_of(a, b);
      const std::int32_t bc = base + edges.index_of(b, c);
      const std::int32_t ca = base + edges.index_of(c, a);
      next.push_back({a, ab, ca});
      next.push_back({ab, b, bc});
      next.push_back({ca, bc, c});
      next.push_back({ab, bc, ca});
    }
    faces = std::move(next);
  }

  Icosphere ico;
  ico.order = order;
  ico.mesh.vertices.reserve(positions.size());
  for (const auto& p : positions) ico.mesh.vertices.push_back(to_float(p));
  ico.mesh.faces = std::move(faces);
  if (order > 0) {
    ico.parent_face.resize(ico.mesh.faces.size());
    for (std::size_t f = 0; f < ico.parent_face.size(); ++f) {
      ico.parent_face[f] = static_cast<std::int32_t>(f / 4);
    }
  }
  return ico;
}

QuadMesh make_quad_mesh(std::vector<Vec3> vertices, std::vector<Quad> faces) {
  validate_faces(faces, vertices.size());

  // Directed half-edge census: each undirected edge may carry at most one
  // half-edge in each direction.
  std::map<Edge, std::pair<int, int>> uses;  // (forward a<b uses, backward uses)
  for (const auto& f : faces) {
    for (int k = 0; k < 4; ++k) {
      const std::int32_t a = f[k];
      const std::int32_t b = f[(k + 1) % 4];
      auto& u = uses[make_edge(a, b)];
      (a < b ? u.first : u.second) += 1;
    }
  }
  QuadMesh mesh;
  for (const auto& [edge, count] : uses) {
    const int total = count.first + count.second;
    if (total > 2) {
      throw StructuralError(fmt::format("non-manifold edge ({}, {}) is shared by {} faces",
                                        edge.first, edge.second, total));
    }
    if (count.first > 1 || count.second > 1) {
      throw StructuralError(fmt::format("edge ({}, {}) is used twice in the same direction "
                                        "(inconsistent orientation)",
                                        edge.first, edge.second));
    }
    if (total == 1) mesh.boundary_edges.push_back(edge);
  }
  mesh.vertices = std::move(vertices);
  mesh.faces = std::move(faces);
  return mesh;
}

QuadMesh catmull_clark(const QuadMesh& mesh) {
  validate(mesh);
  const auto nv = static_cast<std::int32_t>(mesh.vertices.size());
  const auto nf = static_cast<std::int32_t>(mesh.faces.size());

  // Re-derive adjacency so manifoldness is checked on every call.
  const QuadMesh checked = make_quad_mesh(mesh.vertices, mesh.faces);
  const EdgeIndex edges(mesh.faces);
  const auto ne = static_cast<std::int32_t>(edges.edges().size());

  std::vector<Vec3d> old(nv);
  for (std::int32_t i = 0; i < nv; ++i) old[i] = mesh.vertices[i].cast<double>();

  std::vector<Vec3d> face_points(nf, Vec3d::Zero());
  for (std::int32_t f = 0; f < nf; ++f) {
    for (auto v : mesh.faces[f]) face_points[f] += old[v];
    face_points[f] /= 4.0;
  }

  // Faces adjacent to each edge.
  std::vector<std::array<std::int32_t, 2>> edge_faces(ne, {-1, -1});
  for (std::int32_t f = 0; f < nf; ++f) {
    const auto& q = mesh.faces[f];
    for (int k = 0; k < 4; ++k) {
      auto& slot = edge_faces[edges.index_of(q[k], q[(k + 1) % 4])];
      (slot[0] < 0 ? slot[0] : slot[1]) = f;
    }
  }

  std::vector<char> is_boundary_vertex(nv, 0);
  std::vector<std::vector<std::int32_t>> boundary_neighbors(nv);
  for (const auto& [a, b] : checked.boundary_edges) {
    is_boundary_vertex[a] = is_boundary_vertex[b] = 1;
    boundary_neighbors[a].push_back(b);
    boundary_neighbors[b].push_back(a);
  }

  std::vector<Vec3d> edge_points(ne);
  for (std::int32_t e = 0; e < ne; ++e) {
    const auto [a, b] = edges.edges()[e];
    const auto [f0, f1] = edge_faces[e];
    if (f1 < 0) {
      edge_points[e] = 0.5 * (old[a] + old[b]);
    } else {
      edge_points[e] = 0.25 * (old[a] + old[b] + face_points[f0] + face_points[f1]);
    }
  }

  // Interior stencil: (Q + 2R + (n - 3) S) / n with Q the mean of adjacent
  // face points, R the mean of incident edge midpoints, n the valence.
  std::vector<Vec3d> face_sum(nv, Vec3d::Zero());
  std::vector<int> face_valence(nv, 0);
  for (std::int32_t f = 0; f < nf; ++f) {
    for (auto v : mesh.faces[f]) {
      face_sum[v] += face_points[f];
      face_valence[v] += 1;
    }
  }
  std::vector<Vec3d> mid_sum(nv, Vec3d::Zero());
  std::vector<int> edge_valence(nv, 0);
  for (const auto& [a, b] : edges.edges()) {
    const Vec3d mid = 0.5 * (old[a] + old[b]);
    mid_sum[a] += mid;
    mid_sum[b] += mid;
    edge_valence[a] += 1;
    edge_valence[b] += 1;
  }

  std::vector<Vec3d> moved(nv);
  for (std::int32_t v = 0; v < nv; ++v) {
    if (edge_valence[v] == 0) {
      moved[v] = old[v];  // isolated vertex
    } else if (is_boundary_vertex[v]) {
      const auto& nb = boundary_neighbors[v];
      if (nb.size() != 2) {
        throw StructuralError(fmt::format(
            "boundary vertex {} has {} boundary edges; expected 2", v, nb.size()));
      }
      moved[v] = 0.125 * (old[nb[0]] + old[nb[1]]) + 0.75 * old[v];
    } else {
      const double n = edge_valence[v];
      const Vec3d q = face_sum[v] / face_valence[v];
      const Vec3d r = mid_sum[v] / n;
      moved[v] = (q + 2.0 * r + (n - 3.0) * old[v]) / n;
    }
  }

  std::vector<Vec3> vertices;
  vertices.reserve(nv + nf + ne);
  for (const auto& p : moved) vertices.push_back(to_float(p));
  for (const auto& p : face_points) vertices.push_back(to_float(p));
  for (const auto& p : edge_points) vertices.push_back(to_float(p));

  std::vector<Quad> faces;
  faces.reserve(4 * static_cast<std::size_t>(nf));
  for (std::int32_t f = 0; f < nf; ++f) {
    const auto& q = mesh.faces[f];
    const std::int32_t fp = nv + f;
    for (int k = 0; k < 4; ++k) {
      const std::int32_t next = nv + nf + edges.index_of(q[k], q[(k + 1) % 4]);
      const std::int32_t prev = nv + nf + edges.index_of(q[(k + 3) % 4], q[k]);
      faces.push_back({q[k], next, fp, prev});
    }
  }

  QuadMesh out = make_quad_mesh(std::move(vertices), std::move(faces));
  out.parent_face.resize(out.faces.size());
  for (std::size_t f = 0; f < out.parent_face.size(); ++f) {
    out.parent_face[f] = static_cast<std::int32_t>(f / 4);
  }
  return out;
}

QuadMesh make_cube() {
  std::vector<Vec3> v = {
      {-1, -1, -1}, {1, -1, -1}, {1, 1, -1}, {-1, 1, -1},
      {-1, -1, 1},  {1, -1, 1},  {1, 1, 1},  {-1, 1, 1},
  };
  std::vector<Quad> f = {
      {0, 3, 2, 1}, {4, 5, 6, 7}, {0, 1, 5, 4},
      {2, 3, 7, 6}, {1, 2, 6, 5}, {0, 4, 7, 3},
  };
  return make_quad_mesh(std::move(v), std::move(f));
}

QuadMesh make_quad_grid(int nx, int ny) {
  if (nx < 1 || ny < 1) throw ArgumentError("quad grid needs at least one cell per side");
  std::vector<Vec3> v;
  v.reserve(static_cast<std::size_t>(nx + 1) * (ny + 1));
  for (int j = 0; j <= ny; ++j) {
    for (int i = 0; i <= nx; ++i) v.emplace_back(float(i), float(j), 0.0f);
  }
  auto id = [nx](int i, int j) { return static_cast<std::int32_t>(j * (nx + 1) + i); };
  std::vector<Quad> f;
  f.reserve(static_cast<std::size_t>(nx) * ny);
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) f.push_back({id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)});
  }
  return make_quad_mesh(std::move(v), std::move(f));
}

void validate(const TriMesh& mesh) {
  validate_faces(mesh.faces, mesh.vertices.size());
  validate_channels(mesh.channels, mesh.vertices.size());
}

void validate(const QuadMesh& mesh) {
  validate_faces(mesh.faces, mesh.vertices.size());
  validate_channels(mesh.channels, mesh.vertices.size());
}

std::vector<Edge> unique_edges(const std::vector<Tri>& faces) { return EdgeIndex(faces).edges(); }
std::vector<Edge> unique_edges(const std::vector<Quad>& faces) { return EdgeIndex(faces).edges(); }

long euler_characteristic(const TriMesh& mesh) {
  return static_cast<long>(mesh.vertices.size()) - static_cast<long>(unique_edges(mesh.faces).size()) +
         static_cast<long>(mesh.faces.size());
}

long euler_characteristic(const QuadMesh& mesh) {
  return static_cast<long>(mesh.vertices.size()) - static_cast<long>(unique_edges(mesh.faces).size()) +
         static_cast<long>(mesh.faces.size());
}

std::string fingerprint(const TriMesh& mesh) { return fingerprint_impl(mesh.vertices, mesh.faces); }
std::string fingerprint(const QuadMesh& mesh) { return fingerprint_impl(mesh.vertices, mesh.faces); }

}  // namespace sit
