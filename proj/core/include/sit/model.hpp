#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "sit/nn.hpp"
#include "sit/patching.hpp"
#include "sit/rng.hpp"

namespace sit {

using nn::Matrix;

enum class HeadKind { regression, classification };

const char* to_string(HeadKind kind);
HeadKind parse_head_kind(const std::string& text);

struct SiTConfig {
  int layers = 12;
  int heads = 3;
  int dim = 192;
  int mlp = 768;
  int patches = 320;
  int vertices = 153;
  int channels = 4;
  double dropout_embed = 0.0;
  double dropout_ffn = 0.0;
  double dropout_attn = 0.0;
  HeadKind head_kind = HeadKind::regression;
  int classes = 2;  // classification only
  /// Width of the hidden layer of the prediction MLP; -1 means `dim`,
  /// 0 means a single linear layer.
  int head_hidden = -1;
  bool deconfound = false;
  /// Instantiate the masked-patch-prediction decoder and mask token.
  bool mpp = false;
  double layernorm_eps = 1e-6;

  int head_dim() const { return dim / heads; }
  int patch_dim() const { return vertices * channels; }
  int sequence_length() const { return patches + 1; }
  int outputs() const { return head_kind == HeadKind::regression ? 1 : classes; }
  int hidden_width() const { return head_hidden < 0 ? dim : head_hidden; }

  /// Throws ConfigurationError on inconsistent values.
  void validate() const;

  friend bool operator==(const SiTConfig&, const SiTConfig&) = default;
};

/// Exact learnable-parameter count implied by a configuration.
std::size_t parameter_count(const SiTConfig& config);

template <typename T>
struct BlockParams {
  nn::LayerNormParams<T> ln1;
  nn::LinearParams<T> wq, wk, wv;  // no bias
  nn::LinearParams<T> wout;
  nn::LayerNormParams<T> ln2;
  nn::LinearParams<T> ffn1, ffn2;
};

template <typename T>
struct SiTParams {
  nn::LinearParams<T> embed;  // V*C -> D
  Matrix<T> token;            // 1 x D
  Matrix<T> pos;              // (N+1) x D
  std::vector<BlockParams<T>> blocks;
  nn::LayerNormParams<T> final_ln;
  nn::LinearParams<T> head_hidden;  // D -> hidden (absent for a linear head)
  nn::LinearParams<T> head_out;     // hidden (or D) -> outputs
  nn::LinearParams<T> mpp_decoder;  // D -> V*C, when config.mpp
  Matrix<T> mask_token;             // 1 x D, when config.mpp
  nn::LinearParams<T> confound_fc;  // 1 -> D, when config.deconfound
};

/// Visits every learnable tensor as (name, matrix) in a fixed registry order.
/// Absent optional components (empty matrices) are skipped.
template <typename Params, typename Fn>
void for_each_parameter(Params& p, Fn&& fn) {
  auto visit = [&](const std::string& name, auto& m) {
    if (m.size() > 0) fn(name, m);
  };
  auto linear = [&](const std::string& name, auto& l) {
    visit(name + ".weight", l.weight);
    visit(name + ".bias", l.bias);
  };
  auto norm = [&](const std::string& name, auto& n) {
    visit(name + ".gain", n.gain);
    visit(name + ".shift", n.shift);
  };
  linear("embed", p.embed);
  visit("token", p.token);
  visit("pos", p.pos);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    auto& b = p.blocks[l];
    const std::string pre = "blocks." + std::to_string(l) + ".";
    norm(pre + "ln1", b.ln1);
    linear(pre + "wq", b.wq);
    linear(pre + "wk", b.wk);
    linear(pre + "wv", b.wv);
    linear(pre + "wout", b.wout);
    norm(pre + "ln2", b.ln2);
    linear(pre + "ffn1", b.ffn1);
    linear(pre + "ffn2", b.ffn2);
  }
  norm("final_ln", p.final_ln);
  linear("head.hidden", p.head_hidden);
  linear("head.out", p.head_out);
  linear("mpp.decoder", p.mpp_decoder);
  visit("mpp.mask_token", p.mask_token);
  linear("confound.fc", p.confound_fc);
}

/// Running statistics of the confound batch-norm.
struct ConfoundStats {
  double running_mean = 0.0;
  double running_var = 1.0;
  bool initialized = false;
  double momentum = 0.1;
  double eps = 1e-5;

  friend bool operator==(const ConfoundStats&, const ConfoundStats&) = default;
};

struct BatchStats {
  double mean = 0.0;
  double var = 0.0;
};

BatchStats batch_stats(const std::vector<double>& values);
/// Exponential running update; the first call copies the batch statistics.
void update_running_stats(ConfoundStats& stats, const BatchStats& batch);
/// Initialises running statistics from a full training set.
void initialize_confound_stats(ConfoundStats& stats, const std::vector<double>& values);

template <typename T>
struct SiTModel {
  SiTConfig config;
  SiTParams<T> params;
  ConfoundStats confound;

  std::size_t parameter_total() const;
};

/// Truncated-normal weights (std 0.02), zero biases, unit LayerNorm gains.
template <typename T>
SiTModel<T> init_model(const SiTConfig& config, Rng& rng);

/// Parameter tree of the right shapes filled with zeros (gradient buffers).
template <typename T>
SiTParams<T> zero_params(const SiTConfig& config);

template <typename To, typename From>
SiTModel<To> cast_model(const SiTModel<From>& model);

/// Re-draws the prediction head (used when fine-tuning a pretrained encoder).
template <typename T>
void reset_head(SiTModel<T>& model, Rng& rng);

/// params += scale * other, entry by entry.
template <typename T>
void accumulate(SiTParams<T>& params, const SiTParams<T>& other, T scale = T(1));

// ---------------------------------------------------------------------------
// Masked patch prediction corruption.

enum class CorruptionKind : unsigned char { none, mask_token, swap, keep };

struct MppCorruption {
  std::vector<CorruptionKind> kind;   // per patch
  std::vector<std::int32_t> source;   // swap source per patch (-1 otherwise)
  std::vector<char> mask;             // 1 for every selected patch

  int patch_count() const { return static_cast<int>(kind.size()); }
  int selected() const;
};

/// Selects round(ratio * N) patches uniformly without replacement and assigns
/// each independently to mask-token (80%), random swap (10%, source uniform
/// over all N patches) or keep (10%).
MppCorruption draw_mpp_corruption(int patches, double ratio, Rng& rng);

template <typename T>
Matrix<T> apply_mpp_corruption(const Matrix<T>& embedded, const MppCorruption& plan, const Matrix<T>& mask_token);

template <typename T>
struct MppCorruptResult {
  Matrix<T> corrupted;
  MppCorruption plan;
};

template <typename T>
MppCorruptResult<T> mpp_corrupt(const Matrix<T>& embedded, const Matrix<T>& mask_token, double ratio, Rng& rng);

/// Mean squared error over the masked rows (all V*C entries of each).
template <typename T>
T mpp_loss(const Matrix<T>& decoded, const Matrix<T>& target, const std::vector<char>& mask);
template <typename T>
Matrix<T> mpp_loss_grad(const Matrix<T>& decoded, const Matrix<T>& target, const std::vector<char>& mask);

// ---------------------------------------------------------------------------
// Forward / backward.

/// Per-layer, per-head (N+1) x (N+1) attention matrices.
struct AttentionStack {
  std::vector<std::vector<Eigen::MatrixXd>> layers;

  int layer_count() const { return static_cast<int>(layers.size()); }
  int head_count() const { return layers.empty() ? 0 : static_cast<int>(layers.front().size()); }
};

struct ForwardOptions {
  bool training = false;
  /// Raw confound value; ignored unless config.deconfound.
  std::optional<double> confound;
  /// Batch statistics for the confound batch-norm in training mode;
  /// running statistics are used otherwise.
  const BatchStats* confound_batch = nullptr;
  const MppCorruption* corruption = nullptr;
  /// Run the MPP decoder on the final patch tokens.
  bool decode = false;
  bool capture_attention = false;
};

template <typename T>
struct EmbedCache {
  Matrix<T> patches;
  Matrix<T> embedded;  // linear output, before corruption
  Matrix<T> drop_mask;
  std::optional<T> confound_z;
  std::optional<MppCorruption> corruption;
};

template <typename T>
struct BlockCache {
  Matrix<T> x;
  nn::LayerNormCache<T> ln1;
  Matrix<T> xn1, q, k, v;
  std::vector<Matrix<T>> attn;
  std::vector<Matrix<T>> attn_mask;
  Matrix<T> concat;
  Matrix<T> z;
  nn::LayerNormCache<T> ln2;
  Matrix<T> xn2, h_pre, h_mask, h_drop;
};

template <typename T>
struct ForwardCache {
  EmbedCache<T> embed;
  std::vector<BlockCache<T>> blocks;
  nn::LayerNormCache<T> final_ln;
  Matrix<T> normed;  // final LayerNorm output, all tokens
  Matrix<T> head_pre, head_act;
  bool decoded = false;
};

template <typename T>
struct ForwardResult {
  Matrix<T> prediction;  // 1 x outputs
  Matrix<T> decoded;     // N x (V*C) when requested
  AttentionStack attention;
  ForwardCache<T> cache;
};

/// Normalised confound -> D-vector through the 1 -> D fully connected map.
/// Uses `batch` in training mode, the running statistics otherwise.
template <typename T>
Matrix<T> deconfound_embed(double confound, const SiTModel<T>& model, const BatchStats* batch);

/// X(0) = [token; patch embeddings (+ confound embedding)] + E_pos.
template <typename T>
Matrix<T> embed_sequence(const Matrix<T>& patches, const SiTModel<T>& model, const ForwardOptions& options, Rng& rng,
                         EmbedCache<T>* cache = nullptr);

/// Z = MHSA(LN1(X)) + X. Appends one matrix per head to `attention` when given.
template <typename T>
Matrix<T> mhsa_forward(const Matrix<T>& x, const BlockParams<T>& block, const SiTConfig& config, bool training, Rng& rng,
                       BlockCache<T>* cache = nullptr, std::vector<Eigen::MatrixXd>* attention = nullptr);

/// X' = FFN2(dropout(GELU(FFN1(LN2(Z))))) + Z.
template <typename T>
Matrix<T> ffn_forward(const Matrix<T>& z, const BlockParams<T>& block, const SiTConfig& config, bool training, Rng& rng,
                      BlockCache<T>* cache = nullptr);

template <typename T>
ForwardResult<T> forward(const SiTModel<T>& model, const Matrix<T>& patches, const ForwardOptions& options, Rng& rng);

template <typename T>
ForwardResult<T> forward(const SiTModel<T>& model, const PatchSequence& sequence, const ForwardOptions& options,
                         Rng& rng);

/// Accumulates parameter gradients of a scalar loss into `grads`, given the
/// loss gradient with respect to the prediction (may be empty) and, for MPP,
/// with respect to the decoded patches.
template <typename T>
void backward(const SiTModel<T>& model, const ForwardCache<T>& cache, const Matrix<T>& d_prediction,
              const Matrix<T>* d_decoded, SiTParams<T>& grads);

/// Backward through one MHSA sublayer: returns dX given dZ; adds parameter gradients.
template <typename T>
Matrix<T> mhsa_backward(const Matrix<T>& dz, const BlockParams<T>& block, const SiTConfig& config,
                        const BlockCache<T>& cache, BlockParams<T>& grads);

/// Backward through one FFN sublayer: returns dZ given dX'; adds parameter gradients.
template <typename T>
Matrix<T> ffn_backward(const Matrix<T>& dx_next, const BlockParams<T>& block, const BlockCache<T>& cache,
                       BlockParams<T>& grads);

// ---------------------------------------------------------------------------
// Losses.

template <typename T>
struct LossResult {
  T loss;
  Matrix<T> grad;
};

/// Squared error of a 1 x 1 prediction.
template <typename T>
LossResult<T> mse_loss(const Matrix<T>& prediction, T target);
/// Softmax cross-entropy of 1 x k logits against a class index.
template <typename T>
LossResult<T> cross_entropy_loss(const Matrix<T>& logits, int target);

}  // namespace sit
