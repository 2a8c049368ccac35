#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "sit/patching.hpp"
#include "sit/resample.hpp"

namespace sit {

struct Example {
  FeatureField field;
  /// Regression value, or the class index for classification.
  double target = 0.0;
  std::optional<double> confound;
  /// Sampling category for the adaptive sampler; -1 when unassigned.
  int category = -1;
};

/// Examples sharing one patch table (and so one N, V and C).
struct Dataset {
  std::shared_ptr<const PatchTable> table;
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }

  /// Throws ShapeError unless every field fits the table and has the same
  /// channel count.
  void validate() const;
  int channels() const;

  /// Patch sequence of example i, optionally rotated first.
  PatchSequence sequence(std::size_t i, const ResampleTable* rotation = nullptr) const;
  std::vector<double> targets() const;
  std::vector<double> confounds() const;
};

}  // namespace sit
