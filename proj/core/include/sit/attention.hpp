#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sit/model.hpp"
#include "sit/patching.hpp"

namespace sit {

/// Which attention matrices a rollout uses at each layer.
struct HeadSelector {
  bool averaged = true;
  int head = 0;

  static HeadSelector mean() { return {true, 0}; }
  static HeadSelector single(int h) { return {false, h}; }
  std::string label() const;
};

/// Inclusive layer range; `last` = -1 means the final layer.
struct LayerRange {
  int first = 0;
  int last = -1;
};

struct AttentionMap {
  /// N non-negative scores summing to 1.
  Eigen::VectorXd patch_scores;
  HeadSelector heads;
  LayerRange layers;  // resolved, never -1
  /// True when the token row carried no mass onto patches and the scores
  /// fell back to uniform.
  bool degenerate = false;
};

/// R = Ã(last) ... Ã(first), with Ã = row-normalise(A + I). Throws
/// ValidationError when an input row departs from a unit sum by more than 1e-4.
Eigen::MatrixXd rollout_matrix(const AttentionStack& stack, const HeadSelector& heads, const LayerRange& layers = {});

/// First row of R without the token column, renormalised to sum 1.
AttentionMap rollout(const AttentionStack& stack, const HeadSelector& heads, const LayerRange& layers = {});

/// Each carrier vertex gets the mean score of the patches containing it
/// (linear in the scores, no normalisation).
Eigen::VectorXd upsample_scores(const Eigen::VectorXd& scores, const PatchTable& table);

/// upsample_scores followed by division by the maximum, as a one-channel field.
FeatureField upsample_map(const AttentionMap& map, const PatchTable& table, const std::string& channel = "attention");

struct ExportOptions {
  /// Heads to export individually; empty means every head.
  std::vector<int> heads;
  LayerRange layers;
  std::optional<double> confound;
};

struct ExportResult {
  std::filesystem::path mesh_path;
  std::filesystem::path manifest_path;
  std::vector<std::string> channels;
};

/// Writes `attention.surf` (the fine mesh with one channel per requested head
/// plus "mean") and `attention_manifest.json` describing the provenance.
ExportResult export_maps(const SiTModel<float>& model, const PatchSequence& sequence, const PatchTable& table,
                         const TriMesh& fine, const std::filesystem::path& out_dir, const ExportOptions& options = {});

}  // namespace sit
