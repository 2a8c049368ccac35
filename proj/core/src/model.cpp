#include "sit/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "sit/error.hpp"

namespace sit {

const char* to_string(HeadKind kind) {
  return kind == HeadKind::regression ? "regression" : "classification";
}

HeadKind parse_head_kind(const std::string& text) {
  if (text == "regression") return HeadKind::regression;
  if (text == "classification") return HeadKind::classification;
  throw ConfigurationError(fmt::format("unknown head kind '{}'", text));
}

void SiTConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigurationError(msg);
  };
  require(layers > 0 && heads > 0 && dim > 0 && mlp > 0, "layers, heads, dim and mlp must be positive");
  require(patches > 0 && vertices > 0 && channels > 0, "patches, vertices and channels must be positive");
  require(dim % heads == 0, fmt::format("dim {} is not divisible by heads {}", dim, heads));
  require(head_kind == HeadKind::regression || classes >= 2, "classification needs at least two classes");
  require(head_hidden >= -1, "head_hidden must be -1, 0 or positive");
  for (double r : {dropout_embed, dropout_ffn, dropout_attn}) {
    require(r >= 0.0 && r < 1.0, fmt::format("dropout rate {} outside [0, 1)", r));
  }
  require(layernorm_eps > 0.0, "layernorm_eps must be positive");
}

std::size_t parameter_count(const SiTConfig& c) {
  c.validate();
  const std::size_t d = c.dim, n = c.patches, pd = c.patch_dim(), mlp = c.mlp, k = c.outputs();
  const std::size_t hidden = c.hidden_width();
  std::size_t total = pd * d + d;  // patch embedding
  total += d;                      // regression/classification token
  total += (n + 1) * d;            // positional embedding
  const std::size_t block = 2 * d          // ln1
                            + 3 * d * d    // W_Q, W_K, W_V
                            + d * d + d    // W_out
                            + 2 * d        // ln2
                            + d * mlp + mlp + mlp * d + d;  // FFN
  total += block * static_cast<std::size_t>(c.layers);
  total += 2 * d;  // final LayerNorm
  total += hidden > 0 ? d * hidden + hidden + hidden * k + k : d * k + k;
  if (c.mpp) total += d * pd + pd + d;
  if (c.deconfound) total += d + d;
  return total;
}

BatchStats batch_stats(const std::vector<double>& values) {
  if (values.empty()) throw ArgumentError("batch statistics need at least one value");
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / double(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return {mean, var / double(values.size())};
}

void update_running_stats(ConfoundStats& stats, const BatchStats& batch) {
  if (!stats.initialized) {
    stats.running_mean = batch.mean;
    stats.running_var = batch.var;
    stats.initialized = true;
    return;
  }
  stats.running_mean = (1.0 - stats.momentum) * stats.running_mean + stats.momentum * batch.mean;
  stats.running_var = (1.0 - stats.momentum) * stats.running_var + stats.momentum * batch.var;
}

void initialize_confound_stats(ConfoundStats& stats, const std::vector<double>& values) {
  const BatchStats b = batch_stats(values);
  stats.running_mean = b.mean;
  stats.running_var = b.var;
  stats.initialized = true;
}

namespace {

template <typename T>
void init_linear_shape(nn::LinearParams<T>& l, Eigen::Index in, Eigen::Index out, bool bias) {
  l.weight = Matrix<T>::Zero(out, in);
  l.bias = bias ? Matrix<T>::Zero(1, out) : Matrix<T>();
}

template <typename T>
std::vector<Matrix<T>*> parameter_pointers(SiTParams<T>& p) {
  std::vector<Matrix<T>*> out;
  for_each_parameter(p, [&](const std::string&, Matrix<T>& m) { out.push_back(&m); });
  return out;
}

template <typename T>
std::vector<const Matrix<T>*> parameter_pointers(const SiTParams<T>& p) {
  std::vector<const Matrix<T>*> out;
  for_each_parameter(p, [&](const std::string&, const Matrix<T>& m) { out.push_back(&m); });
  return out;
}

bool ends_with(const std::string& s, const char* suffix) {
  const std::string x(suffix);
  return s.size() >= x.size() && s.compare(s.size() - x.size(), x.size(), x) == 0;
}

template <typename T>
void init_tensor(const std::string& name, Matrix<T>& m, Rng& rng) {
  if (ends_with(name, ".gain")) {
    m.setOnes();
  } else if (ends_with(name, ".bias") || ends_with(name, ".shift")) {
    m.setZero();
  } else {
    nn::init_truncated_normal(m, rng);
  }
}

template <typename T>
T normalized_confound(double confound, const ConfoundStats& stats, const BatchStats* batch) {
  if (batch) return static_cast<T>((confound - batch->mean) / std::sqrt(batch->var + stats.eps));
  if (!stats.initialized) {
    throw StateError("confound batch-norm statistics are uninitialised; initialise them from training data");
  }
  return static_cast<T>((confound - stats.running_mean) / std::sqrt(stats.running_var + stats.eps));
}

}  // namespace

template <typename T>
std::size_t SiTModel<T>::parameter_total() const {
  std::size_t total = 0;
  for_each_parameter(params, [&](const std::string&, const Matrix<T>& m) { total += static_cast<std::size_t>(m.size()); });
  return total;
}

template <typename T>
SiTParams<T> zero_params(const SiTConfig& c) {
  c.validate();
  const Eigen::Index d = c.dim;
  SiTParams<T> p;
  init_linear_shape(p.embed, c.patch_dim(), d, true);
  p.token = Matrix<T>::Zero(1, d);
  p.pos = Matrix<T>::Zero(c.sequence_length(), d);
  p.blocks.resize(static_cast<std::size_t>(c.layers));
  for (auto& b : p.blocks) {
    b.ln1 = {Matrix<T>::Zero(1, d), Matrix<T>::Zero(1, d)};
    init_linear_shape(b.wq, d, d, false);
    init_linear_shape(b.wk, d, d, false);
    init_linear_shape(b.wv, d, d, false);
    init_linear_shape(b.wout, d, d, true);
    b.ln2 = {Matrix<T>::Zero(1, d), Matrix<T>::Zero(1, d)};
    init_linear_shape(b.ffn1, d, c.mlp, true);
    init_linear_shape(b.ffn2, c.mlp, d, true);
  }
  p.final_ln = {Matrix<T>::Zero(1, d), Matrix<T>::Zero(1, d)};
  const int hidden = c.hidden_width();
  if (hidden > 0) {
    init_linear_shape(p.head_hidden, d, hidden, true);
    init_linear_shape(p.head_out, hidden, c.outputs(), true);
  } else {
    init_linear_shape(p.head_out, d, c.outputs(), true);
  }
  if (c.mpp) {
    init_linear_shape(p.mpp_decoder, d, c.patch_dim(), true);
    p.mask_token = Matrix<T>::Zero(1, d);
  }
  if (c.deconfound) init_linear_shape(p.confound_fc, 1, d, true);
  return p;
}

template <typename T>
SiTModel<T> init_model(const SiTConfig& config, Rng& rng) {
  SiTModel<T> model{config, zero_params<T>(config), ConfoundStats{}};
  for_each_parameter(model.params, [&](const std::string& name, Matrix<T>& m) { init_tensor(name, m, rng); });
  return model;
}

template <typename To, typename From>
SiTModel<To> cast_model(const SiTModel<From>& model) {
  SiTModel<To> out{model.config, zero_params<To>(model.config), model.confound};
  auto dst = parameter_pointers(out.params);
  auto src = parameter_pointers(model.params);
  for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] = src[i]->template cast<To>();
  return out;
}

template <typename T>
void reset_head(SiTModel<T>& model, Rng& rng) {
  auto reset = [&](const std::string& name, nn::LinearParams<T>& l) {
    if (l.weight.size()) init_tensor(name + ".weight", l.weight, rng);
    if (l.bias.size()) l.bias.setZero();
  };
  reset("head.hidden", model.params.head_hidden);
  reset("head.out", model.params.head_out);
}

template <typename T>
void accumulate(SiTParams<T>& params, const SiTParams<T>& other, T scale) {
  auto dst = parameter_pointers(params);
  auto src = parameter_pointers(other);
  if (dst.size() != src.size()) throw ShapeError("accumulate: parameter trees differ");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i]->rows() != src[i]->rows() || dst[i]->cols() != src[i]->cols()) {
      throw ShapeError("accumulate: parameter shapes differ");
    }
    *dst[i] += scale * *src[i];
  }
}

// ---------------------------------------------------------------------------

int MppCorruption::selected() const {
  return static_cast<int>(std::count(mask.begin(), mask.end(), char(1)));
}

MppCorruption draw_mpp_corruption(int patches, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw ArgumentError(fmt::format("MPP ratio {} must lie in (0, 1]", ratio));
  }
  if (patches <= 0) throw ArgumentError("MPP needs at least one patch");
  const long count = std::lround(ratio * patches);
  if (count <= 0) throw ArgumentError(fmt::format("MPP ratio {} selects no patch out of {}", ratio, patches));

  std::vector<std::int32_t> order(static_cast<std::size_t>(patches));
  std::iota(order.begin(), order.end(), 0);
  for (long i = 0; i < count; ++i) {  // partial Fisher-Yates
    const auto j = i + static_cast<long>(rng.uniform_index(static_cast<std::uint64_t>(patches - i)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  std::sort(order.begin(), order.begin() + count);

  MppCorruption plan;
  plan.kind.assign(static_cast<std::size_t>(patches), CorruptionKind::none);
  plan.source.assign(static_cast<std::size_t>(patches), -1);
  plan.mask.assign(static_cast<std::size_t>(patches), 0);
  for (long i = 0; i < count; ++i) {
    const auto p = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
    plan.mask[p] = 1;
    const double u = rng.uniform();
    if (u < 0.8) {
      plan.kind[p] = CorruptionKind::mask_token;
    } else if (u < 0.9) {
      plan.kind[p] = CorruptionKind::swap;
      plan.source[p] = static_cast<std::int32_t>(rng.uniform_index(static_cast<std::uint64_t>(patches)));
    } else {
      plan.kind[p] = CorruptionKind::keep;
    }
  }
  return plan;
}

template <typename T>
Matrix<T> apply_mpp_corruption(const Matrix<T>& embedded, const MppCorruption& plan, const Matrix<T>& mask_token) {
  if (embedded.rows() != plan.patch_count()) throw ShapeError("corruption plan does not match the sequence length");
  if (mask_token.rows() != 1 || mask_token.cols() != embedded.cols()) {
    throw ShapeError("mask token width does not match the embedding width");
  }
  Matrix<T> out = embedded;
  for (int i = 0; i < plan.patch_count(); ++i) {
    switch (plan.kind[static_cast<std::size_t>(i)]) {
      case CorruptionKind::mask_token: out.row(i) = mask_token.row(0); break;
      case CorruptionKind::swap: out.row(i) = embedded.row(plan.source[static_cast<std::size_t>(i)]); break;
      default: break;
    }
  }
  return out;
}

template <typename T>
MppCorruptResult<T> mpp_corrupt(const Matrix<T>& embedded, const Matrix<T>& mask_token, double ratio, Rng& rng) {
  MppCorruptResult<T> r;
  r.plan = draw_mpp_corruption(static_cast<int>(embedded.rows()), ratio, rng);
  r.corrupted = apply_mpp_corruption(embedded, r.plan, mask_token);
  return r;
}

template <typename T>
T mpp_loss(const Matrix<T>& decoded, const Matrix<T>& target, const std::vector<char>& mask) {
  if (decoded.rows() != target.rows() || decoded.cols() != target.cols() ||
      static_cast<std::size_t>(decoded.rows()) != mask.size()) {
    throw ShapeError("mpp_loss: decoded, target and mask disagree in shape");
  }
  T sum = 0;
  long rows = 0;
  for (Eigen::Index r = 0; r < decoded.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    sum += (decoded.row(r) - target.row(r)).squaredNorm();
    ++rows;
  }
  if (rows == 0) throw ArgumentError("mpp_loss: the mask selects no patch");
  return sum / static_cast<T>(rows * decoded.cols());
}

template <typename T>
Matrix<T> mpp_loss_grad(const Matrix<T>& decoded, const Matrix<T>& target, const std::vector<char>& mask) {
  const long rows = std::count(mask.begin(), mask.end(), char(1));
  if (rows == 0) throw ArgumentError("mpp_loss: the mask selects no patch");
  Matrix<T> g = Matrix<T>::Zero(decoded.rows(), decoded.cols());
  const T scale = T(2) / static_cast<T>(rows * decoded.cols());
  for (Eigen::Index r = 0; r < decoded.rows(); ++r) {
    if (mask[static_cast<std::size_t>(r)]) g.row(r) = scale * (decoded.row(r) - target.row(r));
  }
  return g;
}

// ---------------------------------------------------------------------------

template <typename T>
Matrix<T> deconfound_embed(double confound, const SiTModel<T>& model, const BatchStats* batch) {
  if (!model.config.deconfound) throw StateError("the model has no deconfounding embedder");
  Matrix<T> z(1, 1);
  z(0, 0) = normalized_confound<T>(confound, model.confound, batch);
  return nn::linear_forward(z, model.params.confound_fc);
}

template <typename T>
Matrix<T> embed_sequence(const Matrix<T>& patches, const SiTModel<T>& model, const ForwardOptions& options, Rng& rng,
                         EmbedCache<T>* cache) {
  const SiTConfig& c = model.config;
  const SiTParams<T>& p = model.params;
  if (patches.rows() != c.patches || patches.cols() != c.patch_dim()) {
    throw ShapeError(fmt::format("sequence is {}x{}, model expects {}x{}", patches.rows(), patches.cols(), c.patches,
                                 c.patch_dim()));
  }
  Matrix<T> embedded = nn::linear_forward(patches, p.embed);
  Matrix<T> corrupted;
  if (options.corruption) {
    if (!c.mpp) throw StateError("MPP corruption requested on a model without a mask token");
    corrupted = apply_mpp_corruption(embedded, *options.corruption, p.mask_token);
  }
  auto drop = nn::dropout<T>(options.corruption ? corrupted : embedded, c.dropout_embed, rng, options.training);

  std::optional<T> z;
  if (c.deconfound && options.confound) {
    const BatchStats* batch = options.training ? options.confound_batch : nullptr;
    if (options.training && !batch) throw ArgumentError("training-mode confound embedding needs batch statistics");
    z = normalized_confound<T>(*options.confound, model.confound, batch);
    Matrix<T> zm(1, 1);
    zm(0, 0) = *z;
    const Matrix<T> e = nn::linear_forward(zm, p.confound_fc);
    drop.y.rowwise() += e.row(0);
  }

  Matrix<T> x(c.sequence_length(), c.dim);
  x.row(0) = p.token.row(0);
  x.bottomRows(c.patches) = drop.y;
  x += p.pos;

  if (cache) {
    cache->patches = patches;
    cache->embedded = std::move(embedded);
    cache->drop_mask = std::move(drop.mask);
    cache->confound_z = z;
    cache->corruption = options.corruption ? std::optional<MppCorruption>(*options.corruption) : std::nullopt;
  }
  return x;
}

template <typename T>
Matrix<T> mhsa_forward(const Matrix<T>& x, const BlockParams<T>& block, const SiTConfig& config, bool training, Rng& rng,
                       BlockCache<T>* cache, std::vector<Eigen::MatrixXd>* attention) {
  if (x.cols() != config.dim) throw ShapeError("mhsa: input width does not match the model dimension");
  const Eigen::Index s = x.rows();
  const int dh = config.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  nn::LayerNormCache<T> ln_cache;
  Matrix<T> xn = nn::layernorm_forward(x, block.ln1, static_cast<T>(config.layernorm_eps), &ln_cache);
  Matrix<T> q = nn::linear_forward(xn, block.wq);
  Matrix<T> k = nn::linear_forward(xn, block.wk);
  Matrix<T> v = nn::linear_forward(xn, block.wv);

  Matrix<T> concat(s, config.dim);
  std::vector<Matrix<T>> attn(static_cast<std::size_t>(config.heads));
  std::vector<Matrix<T>> masks(static_cast<std::size_t>(config.heads));
  for (int h = 0; h < config.heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * dh;
    Matrix<T> a(s, s);
    a.noalias() = q.middleCols(off, dh) * k.middleCols(off, dh).transpose();
    a *= scale;
    nn::softmax_rows_inplace<T>(a);
    if (attention) attention->push_back(a.template cast<double>());
    auto drop = nn::dropout<T>(a, config.dropout_attn, rng, training);
    concat.middleCols(off, dh).noalias() = (drop.mask.size() ? drop.y : a) * v.middleCols(off, dh);
    attn[static_cast<std::size_t>(h)] = std::move(a);
    masks[static_cast<std::size_t>(h)] = std::move(drop.mask);
  }
  Matrix<T> z = nn::linear_forward(concat, block.wout);
  z += x;

  if (cache) {
    cache->x = x;
    cache->ln1 = std::move(ln_cache);
    cache->xn1 = std::move(xn);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attn = std::move(attn);
    cache->attn_mask = std::move(masks);
    cache->concat = std::move(concat);
  }
  return z;
}

template <typename T>
Matrix<T> ffn_forward(const Matrix<T>& z, const BlockParams<T>& block, const SiTConfig& config, bool training, Rng& rng,
                      BlockCache<T>* cache) {
  nn::LayerNormCache<T> ln_cache;
  Matrix<T> xn = nn::layernorm_forward(z, block.ln2, static_cast<T>(config.layernorm_eps), &ln_cache);
  Matrix<T> h_pre = nn::linear_forward(xn, block.ffn1);
  auto drop = nn::dropout<T>(nn::gelu(h_pre), config.dropout_ffn, rng, training);
  Matrix<T> out = nn::linear_forward(drop.y, block.ffn2);
  out += z;
  if (cache) {
    cache->z = z;
    cache->ln2 = std::move(ln_cache);
    cache->xn2 = std::move(xn);
    cache->h_pre = std::move(h_pre);
    cache->h_mask = std::move(drop.mask);
    cache->h_drop = std::move(drop.y);
  }
  return out;
}

template <typename T>
ForwardResult<T> forward(const SiTModel<T>& model, const Matrix<T>& patches, const ForwardOptions& options, Rng& rng) {
  const SiTConfig& c = model.config;
  const SiTParams<T>& p = model.params;
  ForwardResult<T> r;
  ForwardCache<T>& cache = r.cache;

  Matrix<T> x = embed_sequence(patches, model, options, rng, &cache.embed);
  cache.blocks.resize(p.blocks.size());
  if (options.capture_attention) r.attention.layers.resize(p.blocks.size());
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    auto* attn = options.capture_attention ? &r.attention.layers[l] : nullptr;
    Matrix<T> z = mhsa_forward(x, p.blocks[l], c, options.training, rng, &cache.blocks[l], attn);
    x = ffn_forward(z, p.blocks[l], c, options.training, rng, &cache.blocks[l]);
  }
  cache.normed = nn::layernorm_forward(x, p.final_ln, static_cast<T>(c.layernorm_eps), &cache.final_ln);

  const Matrix<T> head_in = cache.normed.topRows(1);
  if (p.head_hidden.weight.size() > 0) {
    cache.head_pre = nn::linear_forward(head_in, p.head_hidden);
    cache.head_act = nn::gelu(cache.head_pre);
    r.prediction = nn::linear_forward(cache.head_act, p.head_out);
  } else {
    r.prediction = nn::linear_forward(head_in, p.head_out);
  }

  if (options.decode || options.corruption) {
    if (!c.mpp) throw StateError("the model has no MPP decoder");
    r.decoded = nn::linear_forward(Matrix<T>(cache.normed.bottomRows(c.patches)), p.mpp_decoder);
    cache.decoded = true;
  }
  return r;
}

template <typename T>
ForwardResult<T> forward(const SiTModel<T>& model, const PatchSequence& sequence, const ForwardOptions& options,
                         Rng& rng) {
  if constexpr (std::is_same_v<T, float>) {
    return forward(model, sequence.data, options, rng);
  } else {
    return forward(model, Matrix<T>(sequence.data.template cast<T>()), options, rng);
  }
}

template <typename T>
Matrix<T> mhsa_backward(const Matrix<T>& dz, const BlockParams<T>& block, const SiTConfig& config,
                        const BlockCache<T>& cache, BlockParams<T>& grads) {
  const int dh = config.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  auto gout = nn::linear_backward(cache.concat, block.wout, dz);
  grads.wout.weight += gout.dweight;
  grads.wout.bias += gout.dbias;

  Matrix<T> dq(dz.rows(), config.dim), dk(dz.rows(), config.dim), dv(dz.rows(), config.dim);
  for (int h = 0; h < config.heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h) * dh;
    const Matrix<T>& a = cache.attn[static_cast<std::size_t>(h)];
    const Matrix<T>& mask = cache.attn_mask[static_cast<std::size_t>(h)];
    const Matrix<T> d_out = gout.dx.middleCols(off, dh);
    Matrix<T> d_attn(a.rows(), a.cols());
    d_attn.noalias() = d_out * cache.v.middleCols(off, dh).transpose();
    if (mask.size()) {
      dv.middleCols(off, dh).noalias() = a.cwiseProduct(mask).transpose() * d_out;
      d_attn = d_attn.cwiseProduct(mask);
    } else {
      dv.middleCols(off, dh).noalias() = a.transpose() * d_out;
    }
    Matrix<T> ds = nn::softmax_rows_backward(a, d_attn);
    ds *= scale;
    dq.middleCols(off, dh).noalias() = ds * cache.k.middleCols(off, dh);
    dk.middleCols(off, dh).noalias() = ds.transpose() * cache.q.middleCols(off, dh);
  }
  auto gq = nn::linear_backward(cache.xn1, block.wq, dq);
  auto gk = nn::linear_backward(cache.xn1, block.wk, dk);
  auto gv = nn::linear_backward(cache.xn1, block.wv, dv);
  grads.wq.weight += gq.dweight;
  grads.wk.weight += gk.dweight;
  grads.wv.weight += gv.dweight;
  const Matrix<T> dxn = gq.dx + gk.dx + gv.dx;
  auto gln = nn::layernorm_backward(dxn, block.ln1, cache.ln1);
  grads.ln1.gain += gln.dgain;
  grads.ln1.shift += gln.dshift;
  return dz + gln.dx;
}

template <typename T>
Matrix<T> ffn_backward(const Matrix<T>& dx_next, const BlockParams<T>& block, const BlockCache<T>& cache,
                       BlockParams<T>& grads) {
  auto g2 = nn::linear_backward(cache.h_drop, block.ffn2, dx_next);
  grads.ffn2.weight += g2.dweight;
  grads.ffn2.bias += g2.dbias;
  const Matrix<T> dh = nn::gelu_backward(cache.h_pre, nn::dropout_backward(cache.h_mask, g2.dx));
  auto g1 = nn::linear_backward(cache.xn2, block.ffn1, dh);
  grads.ffn1.weight += g1.dweight;
  grads.ffn1.bias += g1.dbias;
  auto gln = nn::layernorm_backward(g1.dx, block.ln2, cache.ln2);
  grads.ln2.gain += gln.dgain;
  grads.ln2.shift += gln.dshift;
  return dx_next + gln.dx;
}

template <typename T>
void backward(const SiTModel<T>& model, const ForwardCache<T>& cache, const Matrix<T>& d_prediction,
              const Matrix<T>* d_decoded, SiTParams<T>& grads) {
  const SiTConfig& c = model.config;
  const SiTParams<T>& p = model.params;
  Matrix<T> dnormed = Matrix<T>::Zero(c.sequence_length(), c.dim);

  if (d_prediction.size() > 0) {
    const Matrix<T> head_in = cache.normed.topRows(1);
    if (p.head_hidden.weight.size() > 0) {
      auto go = nn::linear_backward(cache.head_act, p.head_out, d_prediction);
      grads.head_out.weight += go.dweight;
      grads.head_out.bias += go.dbias;
      const Matrix<T> dpre = nn::gelu_backward(cache.head_pre, go.dx);
      auto gh = nn::linear_backward(head_in, p.head_hidden, dpre);
      grads.head_hidden.weight += gh.dweight;
      grads.head_hidden.bias += gh.dbias;
      dnormed.row(0) += gh.dx.row(0);
    } else {
      auto go = nn::linear_backward(head_in, p.head_out, d_prediction);
      grads.head_out.weight += go.dweight;
      grads.head_out.bias += go.dbias;
      dnormed.row(0) += go.dx.row(0);
    }
  }
  if (d_decoded) {
    if (!cache.decoded) throw StateError("backward: decoded gradient given but the forward pass did not decode");
    auto gd = nn::linear_backward(Matrix<T>(cache.normed.bottomRows(c.patches)), p.mpp_decoder, *d_decoded);
    grads.mpp_decoder.weight += gd.dweight;
    grads.mpp_decoder.bias += gd.dbias;
    dnormed.bottomRows(c.patches) += gd.dx;
  }

  auto gfin = nn::layernorm_backward(dnormed, p.final_ln, cache.final_ln);
  grads.final_ln.gain += gfin.dgain;
  grads.final_ln.shift += gfin.dshift;
  Matrix<T> dx = std::move(gfin.dx);

  for (std::size_t l = p.blocks.size(); l-- > 0;) {
    const Matrix<T> dz = ffn_backward(dx, p.blocks[l], cache.blocks[l], grads.blocks[l]);
    dx = mhsa_backward(dz, p.blocks[l], c, cache.blocks[l], grads.blocks[l]);
  }

  // Embedding.
  const EmbedCache<T>& e = cache.embed;
  grads.token.row(0) += dx.row(0);
  grads.pos += dx;
  const Matrix<T> dpatch = dx.bottomRows(c.patches);
  if (e.confound_z) {
    const Matrix<T> colsum = dpatch.colwise().sum();
    grads.confound_fc.weight.col(0) += colsum.row(0).transpose() * *e.confound_z;
    grads.confound_fc.bias += colsum;
  }
  Matrix<T> dcorrupted = nn::dropout_backward(e.drop_mask, dpatch);
  Matrix<T> dembedded;
  if (e.corruption) {
    dembedded = Matrix<T>::Zero(dcorrupted.rows(), dcorrupted.cols());
    for (int i = 0; i < e.corruption->patch_count(); ++i) {
      switch (e.corruption->kind[static_cast<std::size_t>(i)]) {
        case CorruptionKind::mask_token: grads.mask_token.row(0) += dcorrupted.row(i); break;
        case CorruptionKind::swap: dembedded.row(e.corruption->source[static_cast<std::size_t>(i)]) += dcorrupted.row(i); break;
        default: dembedded.row(i) += dcorrupted.row(i); break;
      }
    }
  } else {
    dembedded = std::move(dcorrupted);
  }
  auto ge = nn::linear_backward(e.patches, p.embed, dembedded, false);
  grads.embed.weight += ge.dweight;
  grads.embed.bias += ge.dbias;
}

template <typename T>
LossResult<T> mse_loss(const Matrix<T>& prediction, T target) {
  if (prediction.size() != 1) throw ShapeError("mse_loss expects a scalar prediction");
  const T diff = prediction(0, 0) - target;
  Matrix<T> g(1, 1);
  g(0, 0) = T(2) * diff;
  return {diff * diff, std::move(g)};
}

template <typename T>
LossResult<T> cross_entropy_loss(const Matrix<T>& logits, int target) {
  if (logits.rows() != 1 || target < 0 || target >= logits.cols()) {
    throw ShapeError("cross_entropy_loss: target class out of range");
  }
  Matrix<T> prob = nn::softmax_rows(logits);
  const T loss = -std::log(std::max(prob(0, target), std::numeric_limits<T>::min()));
  prob(0, target) -= T(1);
  return {loss, std::move(prob)};
}

#define SIT_INSTANTIATE(T)                                                                                        \
  template struct SiTModel<T>;                                                                                    \
  template SiTParams<T> zero_params<T>(const SiTConfig&);                                                         \
  template SiTModel<T> init_model<T>(const SiTConfig&, Rng&);                                                     \
  template void reset_head<T>(SiTModel<T>&, Rng&);                                                                \
  template void accumulate<T>(SiTParams<T>&, const SiTParams<T>&, T);                                             \
  template Matrix<T> apply_mpp_corruption<T>(const Matrix<T>&, const MppCorruption&, const Matrix<T>&);           \
  template MppCorruptResult<T> mpp_corrupt<T>(const Matrix<T>&, const Matrix<T>&, double, Rng&);                  \
  template T mpp_loss<T>(const Matrix<T>&, const Matrix<T>&, const std::vector<char>&);                           \
  template Matrix<T> mpp_loss_grad<T>(const Matrix<T>&, const Matrix<T>&, const std::vector<char>&);              \
  template Matrix<T> deconfound_embed<T>(double, const SiTModel<T>&, const BatchStats*);                          \
  template Matrix<T> embed_sequence<T>(const Matrix<T>&, const SiTModel<T>&, const ForwardOptions&, Rng&,         \
                                       EmbedCache<T>*);                                                           \
  template Matrix<T> mhsa_forward<T>(const Matrix<T>&, const BlockParams<T>&, const SiTConfig&, bool, Rng&,       \
                                     BlockCache<T>*, std::vector<Eigen::MatrixXd>*);                              \
  template Matrix<T> ffn_forward<T>(const Matrix<T>&, const BlockParams<T>&, const SiTConfig&, bool, Rng&,        \
                                    BlockCache<T>*);                                                              \
  template ForwardResult<T> forward<T>(const SiTModel<T>&, const Matrix<T>&, const ForwardOptions&, Rng&);        \
  template ForwardResult<T> forward<T>(const SiTModel<T>&, const PatchSequence&, const ForwardOptions&, Rng&);    \
  template void backward<T>(const SiTModel<T>&, const ForwardCache<T>&, const Matrix<T>&, const Matrix<T>*,       \
                            SiTParams<T>&);                                                                       \
  template Matrix<T> mhsa_backward<T>(const Matrix<T>&, const BlockParams<T>&, const SiTConfig&,                  \
                                      const BlockCache<T>&, BlockParams<T>&);                                     \
  template Matrix<T> ffn_backward<T>(const Matrix<T>&, const BlockParams<T>&, const BlockCache<T>&,               \
                                     BlockParams<T>&);                                                            \
  template LossResult<T> mse_loss<T>(const Matrix<T>&, T);                                                        \
  template LossResult<T> cross_entropy_loss<T>(const Matrix<T>&, int);

SIT_INSTANTIATE(float)
SIT_INSTANTIATE(double)
#undef SIT_INSTANTIATE

template SiTModel<double> cast_model<double, float>(const SiTModel<float>&);
template SiTModel<float> cast_model<float, double>(const SiTModel<double>&);
template SiTModel<float> cast_model<float, float>(const SiTModel<float>&);
template SiTModel<double> cast_model<double, double>(const SiTModel<double>&);

}  // namespace sit
