#include "sit/resample.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <unordered_map>

#include <Eigen/Geometry>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <spdlog/spdlog.h>

#include "sit/error.hpp"
#include "sit/text_io.hpp"

namespace sit {

namespace {

using Vec3d = Eigen::Vector3d;

constexpr double kSphereTolerance = 1e-4;
constexpr double kSnap = 1e-12;

void require_on_sphere(const std::vector<Vec3>& vertices, const char* which) {
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    const double r = vertices[i].cast<double>().norm();
    if (std::abs(r - 1.0) > kSphereTolerance) {
      throw ValidationError(fmt::format("{} vertex {} has radius {} (not on the unit sphere)", which, i, r));
    }
  }
}

// Uniform hash grid over the face bounding boxes. Every spherical triangle is
// inserted into each cell overlapped by its corner box grown by the sag
// between the flat face and the sphere, so a query direction only needs the
// faces of its own cell.
class FaceLocator {
 public:
  explicit FaceLocator(const TriMesh& mesh) : mesh_(mesh) {
    const std::size_t nf = mesh.faces.size();
    cross_.resize(nf);
    centroid_.resize(nf);
    double edge_sum = 0.0;
    for (std::size_t f = 0; f < nf; ++f) {
      const auto& t = mesh.faces[f];
      const Vec3d p0 = mesh.vertices[t[0]].cast<double>();
      const Vec3d p1 = mesh.vertices[t[1]].cast<double>();
      const Vec3d p2 = mesh.vertices[t[2]].cast<double>();
      cross_[f] = {p1.cross(p2), p2.cross(p0), p0.cross(p1)};
      centroid_[f] = ((p0 + p1 + p2) / 3.0).normalized();
      edge_sum += (p1 - p0).norm();
    }
    const double mean_edge = nf ? edge_sum / double(nf) : 2.0;
    resolution_ = std::clamp(static_cast<int>(std::ceil(2.0 / (2.0 * mean_edge))), 1, 256);
    cell_ = 2.0 / resolution_;

    for (std::size_t f = 0; f < nf; ++f) {
      const auto& t = mesh.faces[f];
      Vec3d lo = Vec3d::Constant(1e300), hi = Vec3d::Constant(-1e300);
      for (auto v : t) {
        const Vec3d p = mesh.vertices[v].cast<double>();
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
      }
      const Vec3d p0 = mesh.vertices[t[0]].cast<double>();
      const Vec3d n = (cross_[f][0] + cross_[f][1] + cross_[f][2]);
      const double sag = n.norm() > 0 ? std::max(0.0, 1.0 - std::abs(n.normalized().dot(p0))) : 1.0;
      const double margin = sag + 1e-6;
      lo.array() -= margin;
      hi.array() += margin;
      const auto a = cell_of(lo);
      const auto b = cell_of(hi);
      for (int i = a[0]; i <= b[0]; ++i)
        for (int j = a[1]; j <= b[1]; ++j)
          for (int k = a[2]; k <= b[2]; ++k) cells_[key(i, j, k)].push_back(static_cast<std::int32_t>(f));
    }
  }

  ResampleRow locate(const Vec3d& point) const {
    const Vec3d d = point.normalized();
    const auto c = cell_of(d);
    if (auto it = cells_.find(key(c[0], c[1], c[2])); it != cells_.end()) {
      for (std::int32_t f : it->second) {
        ResampleRow row;
        if (try_face(f, d, row)) return row;
      }
    }
    // Numerical miss: fall back to the face with the nearest centroid.
    std::int32_t best = 0;
    double best_dot = -2.0;
    for (std::size_t f = 0; f < centroid_.size(); ++f) {
      const double dot = centroid_[f].dot(d);
      if (dot > best_dot) {
        best_dot = dot;
        best = static_cast<std::int32_t>(f);
      }
    }
    spdlog::warn("resample: direction ({:.6f}, {:.6f}, {:.6f}) hit no face; using nearest face {}",
                 d.x(), d.y(), d.z(), best);
    ResampleRow row;
    fill_row(best, d, row);
    return row;
  }

 private:
  bool try_face(std::int32_t f, const Vec3d& d, ResampleRow& row) const {
    const auto& c = cross_[f];
    const double s0 = d.dot(c[0]), s1 = d.dot(c[1]), s2 = d.dot(c[2]);
    const double total = s0 + s1 + s2;
    if (total <= 0.0) return false;  // back-facing: the ray misses this face's plane
    const double tol = -kSnap * (std::abs(s0) + std::abs(s1) + std::abs(s2));
    if (s0 < tol || s1 < tol || s2 < tol) return false;
    fill_row(f, d, row);
    return true;
  }

  void fill_row(std::int32_t f, const Vec3d& d, ResampleRow& row) const {
    const auto& c = cross_[f];
    std::array<double, 3> w = {d.dot(c[0]), d.dot(c[1]), d.dot(c[2])};
    for (auto& x : w) x = std::max(0.0, x);
    double total = w[0] + w[1] + w[2];
    if (total <= 0.0) {
      w = {1.0 / 3, 1.0 / 3, 1.0 / 3};
      total = 1.0;
    }
    for (auto& x : w) {
      x /= total;
      if (x < kSnap) x = 0.0;
    }
    for (std::size_t i = 0; i < 3; ++i) {
      if (w[i] > 1.0 - kSnap) {
        w = {0.0, 0.0, 0.0};
        w[i] = 1.0;
      }
    }
    total = w[0] + w[1] + w[2];
    for (auto& x : w) x /= total;
    row.face = f;
    row.corners = mesh_.faces[f];
    row.weights = w;
  }

  std::array<int, 3> cell_of(const Vec3d& p) const {
    std::array<int, 3> c{};
    for (int i = 0; i < 3; ++i) {
      c[i] = std::clamp(static_cast<int>(std::floor((p[i] + 1.0) / cell_)), 0, resolution_ - 1);
    }
    return c;
  }

  std::int64_t key(int i, int j, int k) const {
    return (static_cast<std::int64_t>(i) * resolution_ + j) * resolution_ + k;
  }

  const TriMesh& mesh_;
  std::vector<std::array<Vec3d, 3>> cross_;
  std::vector<Vec3d> centroid_;
  int resolution_ = 1;
  double cell_ = 2.0;
  std::unordered_map<std::int64_t, std::vector<std::int32_t>> cells_;
};

}  // namespace

FeatureField make_field(std::string carrier_id, FieldMatrix values, std::vector<std::string> channel_names) {
  if (!values.allFinite()) throw ValidationError("feature field contains NaN or Inf values");
  if (channel_names.empty()) {
    for (Eigen::Index c = 0; c < values.cols(); ++c) channel_names.push_back(fmt::format("c{}", c));
  }
  if (static_cast<Eigen::Index>(channel_names.size()) != values.cols()) {
    throw ShapeError(fmt::format("{} channel names for {} channels", channel_names.size(), values.cols()));
  }
  return FeatureField{std::move(carrier_id), std::move(values), std::move(channel_names)};
}

FeatureField field_from_mesh(const TriMesh& mesh) {
  validate(mesh);
  FieldMatrix values(static_cast<Eigen::Index>(mesh.vertex_count()),
                     static_cast<Eigen::Index>(mesh.channels.size()));
  std::vector<std::string> names;
  for (std::size_t c = 0; c < mesh.channels.size(); ++c) {
    names.push_back(mesh.channels[c].name);
    for (std::size_t v = 0; v < mesh.vertex_count(); ++v) {
      values(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(c)) = mesh.channels[c].values[v];
    }
  }
  return make_field(fingerprint(mesh), std::move(values), std::move(names));
}

TriMesh with_field(TriMesh mesh, const FeatureField& field) {
  if (field.vertex_count() != static_cast<Eigen::Index>(mesh.vertex_count())) {
    throw ShapeError(fmt::format("field has {} rows for a mesh with {} vertices", field.vertex_count(),
                                 mesh.vertex_count()));
  }
  mesh.channels.clear();
  for (Eigen::Index c = 0; c < field.channel_count(); ++c) {
    Channel ch{field.channel_names[static_cast<std::size_t>(c)], {}};
    ch.values.resize(mesh.vertex_count());
    for (Eigen::Index v = 0; v < field.vertex_count(); ++v) ch.values[static_cast<std::size_t>(v)] = field.values(v, c);
    mesh.channels.push_back(std::move(ch));
  }
  return mesh;
}

ResampleTable build_resample_table(const TriMesh& source, const std::vector<Eigen::Vector3d>& points,
                                   std::string destination_id) {
  validate(source);
  require_on_sphere(source.vertices, "source");
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (std::abs(points[i].norm() - 1.0) > kSphereTolerance) {
      throw ValidationError(fmt::format("destination point {} is not on the unit sphere", i));
    }
  }
  const FaceLocator locator(source);
  ResampleTable table;
  table.source_id = fingerprint(source);
  table.destination_id = std::move(destination_id);
  table.source_vertex_count = source.vertex_count();
  table.rows.reserve(points.size());
  for (const auto& p : points) table.rows.push_back(locator.locate(p));
  return table;
}

ResampleTable build_resample_table(const TriMesh& source, const TriMesh& destination) {
  require_on_sphere(destination.vertices, "destination");
  std::vector<Eigen::Vector3d> points;
  points.reserve(destination.vertex_count());
  for (const auto& v : destination.vertices) points.push_back(v.cast<double>());
  return build_resample_table(source, points, fingerprint(destination));
}

FeatureField apply_resample(const FeatureField& field, const ResampleTable& table) {
  if (static_cast<std::size_t>(field.vertex_count()) != table.source_vertex_count) {
    throw ShapeError(fmt::format("field has {} vertices but the table expects {}", field.vertex_count(),
                                 table.source_vertex_count));
  }
  if (!field.carrier_id.empty() && !table.source_id.empty() && field.carrier_id != table.source_id) {
    throw ShapeError("field carrier does not match the resample table source mesh");
  }
  const Eigen::Index channels = field.channel_count();
  FieldMatrix out(static_cast<Eigen::Index>(table.rows.size()), channels);
  for (std::size_t d = 0; d < table.rows.size(); ++d) {
    const auto& row = table.rows[d];
    for (Eigen::Index c = 0; c < channels; ++c) {
      const float a = field.values(row.corners[0], c);
      const float b = field.values(row.corners[1], c);
      const float e = field.values(row.corners[2], c);
      const double v = row.weights[0] * a + row.weights[1] * b + row.weights[2] * e;
      // A convex combination stays within its corner range; clamp away rounding.
      const float lo = std::min({a, b, e});
      const float hi = std::max({a, b, e});
      out(static_cast<Eigen::Index>(d), c) = std::clamp(static_cast<float>(v), lo, hi);
    }
  }
  return FeatureField{table.destination_id, std::move(out), field.channel_names};
}

Axis parse_axis(const std::string& text) {
  if (text == "x" || text == "X") return Axis::x;
  if (text == "y" || text == "Y") return Axis::y;
  if (text == "z" || text == "Z") return Axis::z;
  throw ArgumentError(fmt::format("unknown rotation axis '{}' (expected x, y or z)", text));
}

const char* to_string(Axis axis) {
  switch (axis) {
    case Axis::x: return "x";
    case Axis::y: return "y";
    case Axis::z: return "z";
  }
  return "?";
}

Eigen::Matrix3d rotation_matrix(Axis axis, double degrees) {
  const double radians = degrees * std::numbers::pi / 180.0;
  const Vec3d unit = axis == Axis::x ? Vec3d::UnitX() : axis == Axis::y ? Vec3d::UnitY() : Vec3d::UnitZ();
  return Eigen::AngleAxisd(radians, unit).toRotationMatrix();
}

ResampleTable rotation_table(const Icosphere& ico, Axis axis, double degrees) {
  const Eigen::Matrix3d inverse = rotation_matrix(axis, degrees).transpose();
  std::vector<Eigen::Vector3d> points;
  points.reserve(ico.mesh.vertex_count());
  for (const auto& v : ico.mesh.vertices) points.push_back(inverse * v.cast<double>());
  return build_resample_table(ico.mesh, points, fingerprint(ico.mesh));
}

RotationAugmentation::RotationAugmentation(const Icosphere& ico, double angle_cap) {
  rotations_.push_back({Axis::x, 0.0});
  tables_.emplace_back();
  for (Axis axis : {Axis::x, Axis::y, Axis::z}) {
    for (int step = 1; step <= 6; ++step) {
      const double angle = 5.0 * step;
      if (angle > angle_cap + 1e-9) break;
      for (double sign : {1.0, -1.0}) {
        rotations_.push_back({axis, sign * angle});
        tables_.push_back(rotation_table(ico, axis, sign * angle));
      }
    }
  }
}

std::size_t RotationAugmentation::draw(Rng& rng) const {
  return static_cast<std::size_t>(rng.uniform_index(rotations_.size()));
}

const ResampleTable* RotationAugmentation::table(std::size_t i) const {
  return i == 0 ? nullptr : &tables_.at(i);
}

void write_resample_table(std::ostream& out, const ResampleTable& table) {
  fmt::print(out, "RESAMPLE v1 {}\n", table.rows.size());
  for (const auto& r : table.rows) {
    fmt::print(out, "{} {:.17g} {:.17g} {:.17g}\n", r.face, r.weights[0], r.weights[1], r.weights[2]);
  }
  if (!out) throw IoError("failed to write resample table");
}

ResampleTable read_resample_table(std::istream& in, const TriMesh& source) {
  LineReader reader(in);
  auto header = reader.tokens();
  if (header.size() != 3 || header[0] != "RESAMPLE" || header[1] != "v1") {
    reader.fail("expected header 'RESAMPLE v1 <Vdst>'");
  }
  const auto count = reader.parse<std::size_t>(header[2]);
  ResampleTable table;
  table.source_id = fingerprint(source);
  table.source_vertex_count = source.vertex_count();
  table.rows.resize(count);
  for (auto& row : table.rows) {
    auto t = reader.tokens();
    if (t.size() != 4) reader.fail("expected 'face w0 w1 w2'");
    row.face = reader.parse<std::int32_t>(t[0]);
    if (row.face < 0 || static_cast<std::size_t>(row.face) >= source.face_count()) {
      throw ValidationError(fmt::format("line {}: face {} out of range", reader.line_number(), row.face));
    }
    row.corners = source.faces[static_cast<std::size_t>(row.face)];
    for (int i = 0; i < 3; ++i) row.weights[i] = reader.parse<double>(t[i + 1]);
    const double sum = row.weights[0] + row.weights[1] + row.weights[2];
    if (std::abs(sum - 1.0) > 1e-6 || *std::min_element(row.weights.begin(), row.weights.end()) < 0.0) {
      throw ValidationError(fmt::format("line {}: weights must be non-negative and sum to 1",
                                        reader.line_number()));
    }
  }
  reader.expect_end();
  return table;
}

void save_resample_table(const ResampleTable& table, const std::filesystem::path& path) {
  auto out = open_output(path);
  write_resample_table(out, table);
}

ResampleTable load_resample_table(const std::filesystem::path& path, const TriMesh& source) {
  auto in = open_input(path);
  return read_resample_table(in, source);
}

}  // namespace sit
