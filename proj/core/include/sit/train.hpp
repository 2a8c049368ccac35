#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "sit/dataset.hpp"
#include "sit/model.hpp"

namespace sit {

enum class OptimizerKind { sgd, adam };
enum class LossKind { mse, cross_entropy, mpp };
enum class SamplerKind { shuffle, adaptive };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 1e-3;
  double momentum = 0.9;  // SGD
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 16;
  long iterations = 1000;
  bool augment = false;
  double angle_cap = 10.0;
  SamplerKind sampler = SamplerKind::shuffle;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::mse;
  double mpp_ratio = 0.5;
  /// Write a checkpoint every this many iterations (0: only at the end).
  long checkpoint_interval = 0;
  /// No checkpoints when empty.
  std::filesystem::path checkpoint_dir;
  int workers = 1;

  /// Throws ConfigurationError.
  void validate() const;
};

/// Applies one `key = value` setting; unknown keys and bad values are
/// ConfigurationErrors.
void apply_train_setting(TrainConfig& config, const std::string& key, const std::string& value);
/// `key = value` lines; '#' starts a comment.
TrainConfig parse_train_config(std::istream& in);
TrainConfig load_train_config(const std::filesystem::path& path);
/// Every setting as (key, value) text, in a fixed order.
std::vector<std::pair<std::string, std::string>> train_config_entries(const TrainConfig& config);

const char* to_string(OptimizerKind kind);
const char* to_string(LossKind kind);
const char* to_string(SamplerKind kind);

/// Infinite index stream: draws a category uniformly, then an example of that
/// category uniformly (with replacement).
class AdaptiveSampler {
 public:
  /// Categories must be 0..K-1 with every category non-empty.
  AdaptiveSampler(const std::vector<int>& categories, Rng rng);
  explicit AdaptiveSampler(const Dataset& dataset, Rng rng);

  std::size_t next();
  std::size_t category_count() const { return members_.size(); }

 private:
  std::vector<std::vector<std::size_t>> members_;
  Rng rng_;
};

/// Epoch-wise permutations of 0..n-1.
class ShuffleSampler {
 public:
  ShuffleSampler(std::size_t n, Rng rng);
  std::size_t next();

 private:
  std::vector<std::size_t> order_;
  std::size_t cursor_;
  Rng rng_;
};

/// Plain SGD with momentum or Adam over a whole parameter tree.
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& config);
  /// Tensors whose names start with "head." are left alone when `freeze_head`.
  void step(SiTParams<float>& params, const SiTParams<float>& grads, bool freeze_head = false);
  long steps() const { return steps_; }

 private:
  TrainConfig config_;
  long steps_ = 0;
  std::vector<Matrix<float>> first_, second_;
};

struct TrainContext {
  /// Required when config.augment is set.
  const RotationAugmentation* augmentation = nullptr;
  std::function<void(long iteration, double loss)> on_iteration;
};

/// Iteration-budgeted training. Returns the per-iteration mean batch loss.
/// The loss kind comes from config.loss; MPP leaves the prediction head
/// untouched. A non-finite loss aborts with a NumericError naming the
/// iteration.
std::vector<double> train_loop(SiTModel<float>& model, const Dataset& data, const TrainConfig& config,
                               const TrainContext& context = {});

/// train_loop with the MPP objective.
std::vector<double> pretrain_mpp(SiTModel<float>& model, const Dataset& data, TrainConfig config,
                                 const TrainContext& context = {});

struct Evaluation {
  /// Scalar prediction for regression; probability of class 1 (binary) or
  /// the arg-max class for classification.
  std::vector<double> predictions;
  std::vector<double> targets;
  std::vector<std::pair<std::string, double>> metrics;

  double metric(const std::string& name) const;
};

/// Evaluation-mode forward over every example: MSE, MAE and Pearson r for
/// regression; accuracy and (binary) AUC for classification.
Evaluation evaluate(const SiTModel<float>& model, const Dataset& data, int workers = 1);

}  // namespace sit
