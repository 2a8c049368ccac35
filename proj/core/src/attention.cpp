#include "sit/attention.hpp"

#include <cmath>

#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "sit/error.hpp"
#include "sit/mesh_io.hpp"
#include "sit/text_io.hpp"

namespace sit {

namespace {

LayerRange resolve(const AttentionStack& stack, const LayerRange& r) {
  const int l = stack.layer_count();
  if (l == 0) throw ArgumentError("rollout of an empty attention stack");
  LayerRange out{r.first, r.last < 0 ? l - 1 : r.last};
  if (out.first < 0 || out.first > out.last || out.last >= l) {
    throw ArgumentError(fmt::format("layer range [{}, {}] outside 0..{}", r.first, r.last, l - 1));
  }
  return out;
}

void check_stochastic(const Eigen::MatrixXd& a, int layer, int head) {
  if (a.rows() != a.cols()) throw ShapeError(fmt::format("attention matrix {}/{} is not square", layer, head));
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double sum = a.row(r).sum();
    if (std::abs(sum - 1.0) > 1e-4 || a.row(r).minCoeff() < -1e-12) {
      throw ValidationError(
          fmt::format("attention layer {} head {} row {} is not stochastic (sum {})", layer, head, r, sum));
    }
  }
}

}  // namespace

std::string HeadSelector::label() const { return averaged ? "mean" : fmt::format("head{}", head); }

Eigen::MatrixXd rollout_matrix(const AttentionStack& stack, const HeadSelector& heads, const LayerRange& layers) {
  const LayerRange range = resolve(stack, layers);
  const int h = stack.head_count();
  if (!heads.averaged && (heads.head < 0 || heads.head >= h)) {
    throw ArgumentError(fmt::format("head {} outside 0..{}", heads.head, h - 1));
  }
  const Eigen::Index s = stack.layers.front().front().rows();
  Eigen::MatrixXd result = Eigen::MatrixXd::Identity(s, s);
  for (int l = range.first; l <= range.last; ++l) {
    const auto& layer = stack.layers[static_cast<std::size_t>(l)];
    if (static_cast<int>(layer.size()) != h) throw ShapeError(fmt::format("layer {} has {} heads", l, layer.size()));
    for (int k = 0; k < h; ++k) {
      const auto& a = layer[static_cast<std::size_t>(k)];
      if (a.rows() != s) throw ShapeError(fmt::format("attention layer {} head {} has the wrong size", l, k));
      check_stochastic(a, l, k);
    }
    Eigen::MatrixXd a;
    if (heads.averaged) {
      a = Eigen::MatrixXd::Zero(s, s);
      for (const auto& m : layer) a += m;
      a /= double(h);
    } else {
      a = layer[static_cast<std::size_t>(heads.head)];
    }
    a += Eigen::MatrixXd::Identity(s, s);
    a.array().colwise() /= a.rowwise().sum().array();
    result = a * result;
  }
  return result;
}

AttentionMap rollout(const AttentionStack& stack, const HeadSelector& heads, const LayerRange& layers) {
  const Eigen::MatrixXd r = rollout_matrix(stack, heads, layers);
  AttentionMap map;
  map.heads = heads;
  map.layers = resolve(stack, layers);
  const Eigen::Index n = r.cols() - 1;
  if (n < 1) throw ShapeError("rollout needs at least one patch token");
  map.patch_scores = r.row(0).tail(n).transpose();
  const double mass = map.patch_scores.sum();
  if (!(mass > 1e-12)) {
    spdlog::warn("attention rollout: the token attends only to itself; reporting uniform patch scores");
    map.patch_scores = Eigen::VectorXd::Constant(n, 1.0 / double(n));
    map.degenerate = true;
  } else {
    map.patch_scores /= mass;
  }
  return map;
}

Eigen::VectorXd upsample_scores(const Eigen::VectorXd& scores, const PatchTable& table) {
  if (scores.size() != table.patch_count) {
    throw ShapeError(fmt::format("{} scores for a table of {} patches", scores.size(), table.patch_count));
  }
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(table.carrier_vertex_count));
  Eigen::VectorXd count = Eigen::VectorXd::Zero(sum.size());
  for (int r = 0; r < table.patch_count; ++r) {
    for (auto v : table.row(r)) {
      sum(v) += scores(r);
      count(v) += 1.0;
    }
  }
  for (Eigen::Index v = 0; v < sum.size(); ++v) {
    if (count(v) > 0) sum(v) /= count(v);
  }
  return sum;
}

FeatureField upsample_map(const AttentionMap& map, const PatchTable& table, const std::string& channel) {
  Eigen::VectorXd v = upsample_scores(map.patch_scores, table);
  const double top = v.maxCoeff();
  if (top > 0.0) v /= top;
  return make_field(table.carrier_id, v.cast<float>(), {channel});
}

ExportResult export_maps(const SiTModel<float>& model, const PatchSequence& sequence, const PatchTable& table,
                         const TriMesh& fine, const std::filesystem::path& out_dir, const ExportOptions& options) {
  if (fine.vertex_count() != table.carrier_vertex_count) {
    throw ShapeError("export_maps: the mesh does not carry the patch table");
  }
  ForwardOptions fo;
  fo.capture_attention = true;
  if (model.config.deconfound) fo.confound = options.confound;
  Rng rng(0);
  const auto fwd = forward(model, sequence, fo, rng);

  std::vector<HeadSelector> selectors;
  if (options.heads.empty()) {
    for (int h = 0; h < model.config.heads; ++h) selectors.push_back(HeadSelector::single(h));
  } else {
    for (int h : options.heads) selectors.push_back(HeadSelector::single(h));
  }
  selectors.push_back(HeadSelector::mean());

  TriMesh out = fine;
  out.channels.clear();
  ExportResult result;
  nlohmann::ordered_json manifest;
  manifest["carrier"] = table.carrier_id;
  manifest["mesh_fingerprint"] = fingerprint(fine);
  manifest["patches"] = table.patch_count;
  manifest["model"] = {{"layers", model.config.layers}, {"heads", model.config.heads}, {"dim", model.config.dim}};
  manifest["maps"] = nlohmann::ordered_json::array();
  for (const auto& sel : selectors) {
    const AttentionMap map = rollout(fwd.attention, sel, options.layers);
    const FeatureField field = upsample_map(map, table, sel.label());
    out.channels.push_back({sel.label(), std::vector<float>(field.values.data(), field.values.data() + field.values.size())});
    result.channels.push_back(sel.label());
    manifest["maps"].push_back({{"channel", sel.label()},
                                {"head_mode", sel.averaged ? "averaged" : "head"},
                                {"head", sel.averaged ? -1 : sel.head},
                                {"layer_first", map.layers.first},
                                {"layer_last", map.layers.last},
                                {"normalisation", "max"},
                                {"degenerate", map.degenerate},
                                {"patch_scores", std::vector<double>(map.patch_scores.data(),
                                                                     map.patch_scores.data() + map.patch_scores.size())}});
  }
  result.mesh_path = out_dir / "attention.surf";
  result.manifest_path = out_dir / "attention_manifest.json";
  save_mesh(out, result.mesh_path);
  auto m = open_output(result.manifest_path);
  m << manifest.dump(2) << '\n';
  if (!m) throw IoError(fmt::format("failed writing '{}'", result.manifest_path.string()));
  return result;
}

}  // namespace sit
