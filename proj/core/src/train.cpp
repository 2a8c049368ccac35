#include "sit/train.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <numeric>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "sit/checkpoint.hpp"
#include "sit/error.hpp"
#include "sit/metrics.hpp"
#include "sit/text_io.hpp"

namespace sit {

namespace {

constexpr std::uint64_t kSamplerStream = 1;
constexpr std::uint64_t kBatchStream = 2;

std::vector<std::size_t> contiguous_bounds(std::size_t n, std::size_t parts) {
  std::vector<std::size_t> bounds(parts + 1);
  for (std::size_t w = 0; w <= parts; ++w) bounds[w] = w * n / parts;
  return bounds;
}

/// Runs fn(worker, begin, end) over a static contiguous partition and
/// rethrows the first failure in worker order.
template <typename Fn>
void run_partitioned(std::size_t n, int workers, Fn&& fn) {
  const std::size_t parts = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(workers), n));
  const auto bounds = contiguous_bounds(n, parts);
  if (parts == 1) {
    fn(std::size_t{0}, bounds[0], bounds[1]);
    return;
  }
  std::vector<std::exception_ptr> errors(parts);
  std::vector<std::thread> threads;
  threads.reserve(parts);
  for (std::size_t w = 0; w < parts; ++w) {
    threads.emplace_back([&, w] {
      try {
        fn(w, bounds[w], bounds[w + 1]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

bool is_head(const std::string& name) { return name.rfind("head.", 0) == 0; }

}  // namespace

const char* to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

const char* to_string(LossKind kind) {
  switch (kind) {
    case LossKind::mse: return "mse";
    case LossKind::cross_entropy: return "cross_entropy";
    case LossKind::mpp: return "mpp";
  }
  return "?";
}

const char* to_string(SamplerKind kind) { return kind == SamplerKind::shuffle ? "shuffle" : "adaptive"; }

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigurationError(msg);
  };
  require(batch_size >= 1, "batch_size must be at least 1");
  require(iterations >= 1, "iterations must be at least 1");
  require(lr >= 0.0 && std::isfinite(lr), "lr must be finite and non-negative");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "Adam betas must lie in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be positive");
  require(angle_cap >= 0.0, "angle_cap must be non-negative");
  require(mpp_ratio > 0.0 && mpp_ratio <= 1.0, "mpp_ratio must lie in (0, 1]");
  require(checkpoint_interval >= 0, "checkpoint_interval must be non-negative");
  require(workers >= 1, "workers must be at least 1");
}

void apply_train_setting(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "optimizer") {
    if (value == "sgd") c.optimizer = OptimizerKind::sgd;
    else if (value == "adam") c.optimizer = OptimizerKind::adam;
    else throw ConfigurationError(fmt::format("unknown optimizer '{}'", value));
  } else if (key == "lr") {
    c.lr = parse_setting<double>(key, value);
  } else if (key == "momentum") {
    c.momentum = parse_setting<double>(key, value);
  } else if (key == "beta1") {
    c.beta1 = parse_setting<double>(key, value);
  } else if (key == "beta2") {
    c.beta2 = parse_setting<double>(key, value);
  } else if (key == "adam_eps") {
    c.adam_eps = parse_setting<double>(key, value);
  } else if (key == "batch_size") {
    c.batch_size = parse_setting<int>(key, value);
  } else if (key == "iterations") {
    c.iterations = parse_setting<long>(key, value);
  } else if (key == "augment") {
    c.augment = parse_setting_bool(key, value);
  } else if (key == "angle_cap") {
    c.angle_cap = parse_setting<double>(key, value);
  } else if (key == "sampler") {
    if (value == "shuffle") c.sampler = SamplerKind::shuffle;
    else if (value == "adaptive") c.sampler = SamplerKind::adaptive;
    else throw ConfigurationError(fmt::format("unknown sampler '{}'", value));
  } else if (key == "seed") {
    c.seed = parse_setting<std::uint64_t>(key, value);
  } else if (key == "loss") {
    if (value == "mse") c.loss = LossKind::mse;
    else if (value == "cross_entropy") c.loss = LossKind::cross_entropy;
    else if (value == "mpp") c.loss = LossKind::mpp;
    else throw ConfigurationError(fmt::format("unknown loss '{}'", value));
  } else if (key == "mpp_ratio") {
    c.mpp_ratio = parse_setting<double>(key, value);
  } else if (key == "checkpoint_interval") {
    c.checkpoint_interval = parse_setting<long>(key, value);
  } else if (key == "checkpoint_dir") {
    c.checkpoint_dir = value;
  } else if (key == "workers") {
    c.workers = parse_setting<int>(key, value);
  } else {
    throw ConfigurationError(fmt::format("unknown training setting '{}'", key));
  }
}

TrainConfig parse_train_config(std::istream& in) {
  TrainConfig c;
  read_settings(in, [&](const std::string& key, const std::string& value) { apply_train_setting(c, key, value); });
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_train_config(in);
}

std::vector<std::pair<std::string, std::string>> train_config_entries(const TrainConfig& c) {
  return {
      {"optimizer", to_string(c.optimizer)},
      {"lr", fmt::format("{:.17g}", c.lr)},
      {"momentum", fmt::format("{:.17g}", c.momentum)},
      {"beta1", fmt::format("{:.17g}", c.beta1)},
      {"beta2", fmt::format("{:.17g}", c.beta2)},
      {"adam_eps", fmt::format("{:.17g}", c.adam_eps)},
      {"batch_size", std::to_string(c.batch_size)},
      {"iterations", std::to_string(c.iterations)},
      {"augment", c.augment ? "true" : "false"},
      {"angle_cap", fmt::format("{:.17g}", c.angle_cap)},
      {"sampler", to_string(c.sampler)},
      {"seed", std::to_string(c.seed)},
      {"loss", to_string(c.loss)},
      {"mpp_ratio", fmt::format("{:.17g}", c.mpp_ratio)},
      {"checkpoint_interval", std::to_string(c.checkpoint_interval)},
      {"checkpoint_dir", c.checkpoint_dir.string()},
      {"workers", std::to_string(c.workers)},
  };
}

// ---------------------------------------------------------------------------

AdaptiveSampler::AdaptiveSampler(const std::vector<int>& categories, Rng rng) : rng_(rng) {
  if (categories.empty()) throw ConfigurationError("adaptive sampling over an empty dataset");
  for (std::size_t i = 0; i < categories.size(); ++i) {
    const int c = categories[i];
    if (c < 0) throw ConfigurationError(fmt::format("example {} has no sampling category", i));
    if (static_cast<std::size_t>(c) >= members_.size()) members_.resize(static_cast<std::size_t>(c) + 1);
    members_[static_cast<std::size_t>(c)].push_back(i);
  }
  for (std::size_t c = 0; c < members_.size(); ++c) {
    if (members_[c].empty()) throw ConfigurationError(fmt::format("sampling category {} has no examples", c));
  }
}

AdaptiveSampler::AdaptiveSampler(const Dataset& dataset, Rng rng)
    : AdaptiveSampler(
          [&] {
            std::vector<int> c;
            for (const auto& ex : dataset.examples) c.push_back(ex.category);
            return c;
          }(),
          rng) {}

std::size_t AdaptiveSampler::next() {
  const auto& group = members_[rng_.uniform_index(members_.size())];
  return group[rng_.uniform_index(group.size())];
}

ShuffleSampler::ShuffleSampler(std::size_t n, Rng rng) : order_(n), cursor_(n), rng_(rng) {
  if (n == 0) throw ConfigurationError("sampling from an empty dataset");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
}

std::size_t ShuffleSampler::next() {
  if (cursor_ == order_.size()) {
    for (std::size_t i = order_.size() - 1; i > 0; --i) std::swap(order_[i], order_[rng_.uniform_index(i + 1)]);
    cursor_ = 0;
  }
  return order_[cursor_++];
}

// ---------------------------------------------------------------------------

Optimizer::Optimizer(const TrainConfig& config) : config_(config) { config_.validate(); }

void Optimizer::step(SiTParams<float>& params, const SiTParams<float>& grads, bool freeze_head) {
  std::vector<std::pair<std::string, Matrix<float>*>> p;
  std::vector<const Matrix<float>*> g;
  for_each_parameter(params, [&](const std::string& name, Matrix<float>& m) { p.emplace_back(name, &m); });
  for_each_parameter(grads, [&](const std::string&, const Matrix<float>& m) { g.push_back(&m); });
  if (p.size() != g.size()) throw ShapeError("optimizer: gradient tree does not match the parameters");
  if (first_.empty()) {
    first_.resize(p.size());
    second_.resize(p.size());
  }
  ++steps_;
  const auto lr = static_cast<float>(config_.lr);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (freeze_head && is_head(p[i].first)) continue;
    if (config_.optimizer == OptimizerKind::sgd) {
      nn::sgd_step(*p[i].second, *g[i], first_[i], lr, static_cast<float>(config_.momentum));
    } else {
      nn::adam_step(*p[i].second, *g[i], first_[i], second_[i], lr, static_cast<float>(config_.beta1),
                    static_cast<float>(config_.beta2), static_cast<float>(config_.adam_eps), steps_);
    }
  }
}

// ---------------------------------------------------------------------------

std::vector<double> train_loop(SiTModel<float>& model, const Dataset& data, const TrainConfig& config,
                               const TrainContext& context) {
  config.validate();
  data.validate();
  if (data.empty()) throw ArgumentError("training on an empty dataset");
  const SiTConfig& mc = model.config;
  if (data.table->patch_count != mc.patches || data.table->patch_vertices != mc.vertices ||
      data.channels() != mc.channels) {
    throw ShapeError(fmt::format("dataset sequences are {}x{}x{}, the model expects {}x{}x{}",
                                 data.table->patch_count, data.table->patch_vertices, data.channels(), mc.patches,
                                 mc.vertices, mc.channels));
  }
  if (config.loss == LossKind::mse && mc.head_kind != HeadKind::regression) {
    throw ConfigurationError("MSE training needs a regression head");
  }
  if (config.loss == LossKind::cross_entropy && mc.head_kind != HeadKind::classification) {
    throw ConfigurationError("cross-entropy training needs a classification head");
  }
  if (config.loss == LossKind::mpp && !mc.mpp) throw ConfigurationError("MPP training needs a model with mpp enabled");
  if (config.augment && !context.augmentation) {
    throw ConfigurationError("augmentation requested without rotation tables");
  }
  if (mc.deconfound) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!data.examples[i].confound) throw ConfigurationError(fmt::format("example {} has no confound value", i));
    }
    if (!model.confound.initialized) initialize_confound_stats(model.confound, data.confounds());
  }
  if (config.loss == LossKind::cross_entropy) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double t = data.examples[i].target;
      if (t != std::floor(t) || t < 0 || t >= mc.classes) {
        throw ConfigurationError(fmt::format("example {} has class {} outside 0..{}", i, t, mc.classes - 1));
      }
    }
  }

  const Rng master(config.seed);
  std::function<std::size_t()> draw;
  std::optional<AdaptiveSampler> adaptive;
  std::optional<ShuffleSampler> shuffle;
  if (config.sampler == SamplerKind::adaptive) {
    adaptive.emplace(data, master.substream(kSamplerStream));
    draw = [&] { return adaptive->next(); };
  } else {
    shuffle.emplace(data.size(), master.substream(kSamplerStream));
    draw = [&] { return shuffle->next(); };
  }
  const Rng batch_root = master.substream(kBatchStream);

  const auto batch = static_cast<std::size_t>(config.batch_size);
  const std::size_t parts = std::min<std::size_t>(static_cast<std::size_t>(config.workers), batch);
  std::vector<SiTParams<float>> worker_grads(parts, zero_params<float>(mc));
  SiTParams<float> grads = zero_params<float>(mc);
  Optimizer optimizer(config);
  std::vector<double> history;
  history.reserve(static_cast<std::size_t>(config.iterations));
  std::vector<std::size_t> indices(batch);
  std::vector<double> losses(batch);
  const float scale = 1.0f / static_cast<float>(batch);

  auto save = [&](const std::string& tag) {
    if (!config.checkpoint_dir.empty()) save_checkpoint(model, config.checkpoint_dir / tag);
  };

  for (long it = 1; it <= config.iterations; ++it) {
    for (auto& i : indices) i = draw();

    BatchStats stats;
    if (mc.deconfound) {
      std::vector<double> values;
      for (auto i : indices) values.push_back(*data.examples[i].confound);
      stats = batch_stats(values);
    }
    const Rng iter_rng = batch_root.substream(static_cast<std::uint64_t>(it));

    run_partitioned(batch, static_cast<int>(parts), [&](std::size_t w, std::size_t begin, std::size_t end) {
      SiTParams<float>& g = worker_grads[w];
      for_each_parameter(g, [](const std::string&, Matrix<float>& m) { m.setZero(); });
      for (std::size_t s = begin; s < end; ++s) {
        Rng rng = iter_rng.substream(s);
        const Example& ex = data.examples[indices[s]];
        const ResampleTable* rotation = nullptr;
        if (config.augment) rotation = context.augmentation->table(context.augmentation->draw(rng));
        const PatchSequence seq = data.sequence(indices[s], rotation);

        ForwardOptions options;
        options.training = true;
        if (mc.deconfound) {
          options.confound = ex.confound;
          options.confound_batch = &stats;
        }
        MppCorruption plan;
        if (config.loss == LossKind::mpp) {
          plan = draw_mpp_corruption(mc.patches, config.mpp_ratio, rng);
          options.corruption = &plan;
        }
        auto fwd = forward(model, seq.data, options, rng);
        if (config.loss == LossKind::mpp) {
          losses[s] = mpp_loss(fwd.decoded, seq.data, plan.mask);
          Matrix<float> d = mpp_loss_grad(fwd.decoded, seq.data, plan.mask) * scale;
          backward(model, fwd.cache, Matrix<float>(), &d, g);
        } else {
          auto l = config.loss == LossKind::mse ? mse_loss(fwd.prediction, static_cast<float>(ex.target))
                                                : cross_entropy_loss(fwd.prediction, static_cast<int>(ex.target));
          losses[s] = l.loss;
          l.grad *= scale;
          backward(model, fwd.cache, l.grad, static_cast<const Matrix<float>*>(nullptr), g);
        }
      }
    });

    double loss = 0.0;
    for (double l : losses) loss += l;
    loss /= double(batch);
    if (!std::isfinite(loss)) {
      throw NumericError(fmt::format("training loss became {} at iteration {}", loss, it), it);
    }
    for_each_parameter(grads, [](const std::string&, Matrix<float>& m) { m.setZero(); });
    for (const auto& g : worker_grads) accumulate(grads, g);
    optimizer.step(model.params, grads, config.loss == LossKind::mpp);
    if (mc.deconfound) update_running_stats(model.confound, stats);

    history.push_back(loss);
    if (context.on_iteration) context.on_iteration(it, loss);
    if (config.checkpoint_interval > 0 && it % config.checkpoint_interval == 0 && it != config.iterations) {
      save(fmt::format("iter_{:06d}", it));
    }
  }
  save("final");
  return history;
}

std::vector<double> pretrain_mpp(SiTModel<float>& model, const Dataset& data, TrainConfig config,
                                 const TrainContext& context) {
  config.loss = LossKind::mpp;
  return train_loop(model, data, config, context);
}

// ---------------------------------------------------------------------------

double Evaluation::metric(const std::string& name) const {
  for (const auto& [k, v] : metrics) {
    if (k == name) return v;
  }
  throw ArgumentError(fmt::format("no metric named '{}'", name));
}

Evaluation evaluate(const SiTModel<float>& model, const Dataset& data, int workers) {
  if (data.empty()) throw ArgumentError("evaluate: empty dataset");
  data.validate();
  const SiTConfig& mc = model.config;
  Evaluation ev;
  ev.targets = data.targets();
  ev.predictions.resize(data.size());
  std::vector<int> argmax(data.size());
  run_partitioned(data.size(), workers, [&](std::size_t, std::size_t begin, std::size_t end) {
    Rng rng(0);  // unused in evaluation mode
    for (std::size_t i = begin; i < end; ++i) {
      ForwardOptions options;
      if (mc.deconfound) {
        if (!data.examples[i].confound) throw ConfigurationError(fmt::format("example {} has no confound value", i));
        options.confound = data.examples[i].confound;
      }
      const auto fwd = forward(model, data.sequence(i).data, options, rng);
      if (mc.head_kind == HeadKind::regression) {
        ev.predictions[i] = fwd.prediction(0, 0);
      } else {
        const Matrix<float> p = nn::softmax_rows(fwd.prediction);
        Eigen::Index best = 0;
        p.row(0).maxCoeff(&best);
        argmax[i] = static_cast<int>(best);
        ev.predictions[i] = mc.classes == 2 ? double(p(0, 1)) : double(best);
      }
    }
  });

  if (mc.head_kind == HeadKind::regression) {
    double mse = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) mse += std::pow(ev.predictions[i] - ev.targets[i], 2);
    ev.metrics.emplace_back("mse", mse / double(data.size()));
    ev.metrics.emplace_back("mae", mean_absolute_error(ev.predictions, ev.targets));
    ev.metrics.emplace_back("pearson_r", pearson_r(ev.predictions, ev.targets));
  } else {
    std::size_t correct = 0;
    std::vector<int> labels;
    for (std::size_t i = 0; i < data.size(); ++i) {
      correct += argmax[i] == static_cast<int>(ev.targets[i]);
      labels.push_back(static_cast<int>(ev.targets[i]));
    }
    ev.metrics.emplace_back("accuracy", double(correct) / double(data.size()));
    if (mc.classes == 2) {
      const bool both = std::count(labels.begin(), labels.end(), 1) > 0 && std::count(labels.begin(), labels.end(), 0) > 0;
      if (both) {
        ev.metrics.emplace_back("auc", roc_auc(ev.predictions, labels));
      } else {
        spdlog::warn("evaluate: only one class present, AUC undefined");
        ev.metrics.emplace_back("auc", std::numeric_limits<double>::quiet_NaN());
      }
    }
  }
  return ev;
}

}  // namespace sit
