#include "sit/synthetic.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "sit/error.hpp"

namespace sit {

Eigen::Matrix<double, kSyntheticBasis, 1> spherical_harmonics(const Eigen::Vector3d& v) {
  const double x = v.x(), y = v.y(), z = v.z();
  const double pi = std::numbers::pi;
  Eigen::Matrix<double, kSyntheticBasis, 1> out;
  out(0) = 0.5 * std::sqrt(1.0 / pi);
  const double c1 = std::sqrt(3.0 / (4.0 * pi));
  out(1) = c1 * y;
  out(2) = c1 * z;
  out(3) = c1 * x;
  out(4) = 0.5 * std::sqrt(15.0 / pi) * x * y;
  out(5) = 0.5 * std::sqrt(15.0 / pi) * y * z;
  out(6) = 0.25 * std::sqrt(5.0 / pi) * (3.0 * z * z - 1.0);
  out(7) = 0.5 * std::sqrt(15.0 / pi) * x * z;
  out(8) = 0.25 * std::sqrt(15.0 / pi) * (x * x - y * y);
  out(9) = 0.25 * std::sqrt(35.0 / (2.0 * pi)) * y * (3.0 * x * x - y * y);
  out(10) = 0.5 * std::sqrt(105.0 / pi) * x * y * z;
  out(11) = 0.25 * std::sqrt(21.0 / (2.0 * pi)) * y * (5.0 * z * z - 1.0);
  out(12) = 0.25 * std::sqrt(7.0 / pi) * z * (5.0 * z * z - 3.0);
  out(13) = 0.25 * std::sqrt(21.0 / (2.0 * pi)) * x * (5.0 * z * z - 1.0);
  out(14) = 0.25 * std::sqrt(105.0 / pi) * z * (x * x - y * y);
  out(15) = 0.25 * std::sqrt(35.0 / (2.0 * pi)) * x * (x * x - 3.0 * y * y);
  return out;
}

Dataset gen_synthetic(const Icosphere& ico, int examples, Rng& rng, const SyntheticOptions& options) {
  if (examples < 0) throw ArgumentError("example count must be non-negative");
  if (options.channels < 1) throw ArgumentError("synthetic fields need at least one channel");
  Dataset data;
  if (options.table) {
    data.table = options.table;
  } else {
    if (ico.order < 2) throw ArgumentError("synthetic data needs an icosphere of order 2 or more");
    data.table = std::make_shared<PatchTable>(build_ico_patch_table(ico, build_icosphere(2)));
  }

  const auto nv = static_cast<Eigen::Index>(ico.mesh.vertex_count());
  Eigen::MatrixXd basis(nv, kSyntheticBasis);
  for (Eigen::Index i = 0; i < nv; ++i) {
    basis.row(i) = spherical_harmonics(ico.mesh.vertices[static_cast<std::size_t>(i)].cast<double>()).transpose();
  }
  std::vector<std::string> names;
  for (int c = 0; c < options.channels; ++c) names.push_back(fmt::format("sh{}", c));
  const std::string carrier = fingerprint(ico.mesh);
  const Rng root(rng.next_u64());

  for (int e = 0; e < examples; ++e) {
    Rng stream = root.substream(static_cast<std::uint64_t>(e));
    Eigen::MatrixXd coeff(kSyntheticBasis, options.channels);
    for (int c = 0; c < options.channels; ++c) {
      for (int k = 0; k < kSyntheticBasis; ++k) coeff(k, c) = stream.normal();
    }
    const FieldMatrix values = (basis * coeff).cast<float>();
    Example ex;
    ex.field = make_field(carrier, values, names);
    ex.target = coeff(kSyntheticTargetBasis, 0);
    data.examples.push_back(std::move(ex));
  }
  return data;
}

Dataset as_classification(Dataset dataset) {
  for (auto& ex : dataset.examples) ex.target = ex.target > 0.0 ? 1.0 : 0.0;
  return dataset;
}

}  // namespace sit
