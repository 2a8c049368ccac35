#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "sit/mesh.hpp"
#include "sit/rng.hpp"

namespace sit {

using FieldMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Per-vertex multi-channel data on a carrier mesh (V rows, C columns).
struct FeatureField {
  std::string carrier_id;
  FieldMatrix values;
  std::vector<std::string> channel_names;

  Eigen::Index vertex_count() const { return values.rows(); }
  Eigen::Index channel_count() const { return values.cols(); }
};

/// Validates finiteness and name count.
FeatureField make_field(std::string carrier_id, FieldMatrix values,
                        std::vector<std::string> channel_names = {});
/// Field from the named channels carried by a mesh.
FeatureField field_from_mesh(const TriMesh& mesh);
/// Copy of `mesh` whose channels are replaced by the field's columns.
TriMesh with_field(TriMesh mesh, const FeatureField& field);

struct ResampleRow {
  std::int32_t face = -1;
  std::array<std::int32_t, 3> corners{};
  std::array<double, 3> weights{};
};

/// For each destination vertex: the source face containing it and the
/// barycentric weights of its gnomonic projection onto that face.
struct ResampleTable {
  std::string source_id;
  std::string destination_id;
  std::size_t source_vertex_count = 0;
  std::vector<ResampleRow> rows;

  std::size_t destination_vertex_count() const { return rows.size(); }
};

/// Locates every destination vertex (as a direction from the origin) in the
/// source triangulation. Both meshes must lie on the unit sphere within 1e-4.
/// A point on a shared edge or vertex is assigned to the lowest-index face
/// containing it.
ResampleTable build_resample_table(const TriMesh& source, const TriMesh& destination);
ResampleTable build_resample_table(const TriMesh& source, const std::vector<Eigen::Vector3d>& points,
                                   std::string destination_id);

/// out[d, c] = sum_i w_i * field[corner_i(d), c].
FeatureField apply_resample(const FeatureField& field, const ResampleTable& table);

enum class Axis { x, y, z };
Axis parse_axis(const std::string& text);
const char* to_string(Axis axis);
Eigen::Matrix3d rotation_matrix(Axis axis, double degrees);

/// Table realising f_rot(v) = f(R^-1 v) on the icosphere for a rotation by
/// `degrees` about `axis`.
ResampleTable rotation_table(const Icosphere& ico, Axis axis, double degrees);

struct Rotation {
  Axis axis = Axis::x;
  double degrees = 0.0;
};

/// Candidate augmentation rotations: identity plus ±{5, 10, ..., 30} degrees
/// about each axis, truncated at `angle_cap` degrees.
class RotationAugmentation {
 public:
  RotationAugmentation(const Icosphere& ico, double angle_cap = 10.0);

  /// Uniform over the candidate set; index 0 is the identity.
  std::size_t draw(Rng& rng) const;
  std::size_t size() const { return rotations_.size(); }
  const Rotation& rotation(std::size_t i) const { return rotations_[i]; }
  /// nullptr for the identity.
  const ResampleTable* table(std::size_t i) const;

 private:
  std::vector<Rotation> rotations_;
  std::vector<ResampleTable> tables_;
};

/// Text format: "RESAMPLE v1 <Vdst>" then one "face w0 w1 w2" line per vertex.
void write_resample_table(std::ostream& out, const ResampleTable& table);
/// Corner indices are resolved against `source`.
ResampleTable read_resample_table(std::istream& in, const TriMesh& source);
void save_resample_table(const ResampleTable& table, const std::filesystem::path& path);
ResampleTable load_resample_table(const std::filesystem::path& path, const TriMesh& source);

}  // namespace sit
