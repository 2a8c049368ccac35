#pragma once

#include <Eigen/Core>

#include "sit/dataset.hpp"

namespace sit {

/// Number of real spherical harmonics of degree at most 3.
inline constexpr int kSyntheticBasis = 16;

/// Real spherical harmonics Y_lm, l <= 3, at a unit vector; index l*l + l + m.
Eigen::Matrix<double, kSyntheticBasis, 1> spherical_harmonics(const Eigen::Vector3d& v);

/// Index of the basis function whose coefficient is the regression target
/// (channel 0, l = 1, m = 0).
inline constexpr int kSyntheticTargetBasis = 2;

struct SyntheticOptions {
  int channels = 4;
  /// Patch table used to cut the fields into sequences; built from the
  /// icosphere and its order-2 ancestor when null.
  std::shared_ptr<const PatchTable> table;
};

/// Random band-limited fields: every channel is a sum of the 16 harmonics with
/// standard-normal coefficients. The regression target is the coefficient of
/// Y_10 in channel 0 and the class is 1 when it is positive.
Dataset gen_synthetic(const Icosphere& ico, int examples, Rng& rng, const SyntheticOptions& options = {});

/// Class labels of a synthetic regression dataset (sign of the target).
Dataset as_classification(Dataset dataset);

}  // namespace sit
