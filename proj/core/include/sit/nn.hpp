#pragma once

// Dense building blocks with hand-derived backward passes. Everything is
// templated on the scalar so the same code trains in float and is checked
// against finite differences in double.

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <string>

#include <fmt/format.h>

#include "sit/error.hpp"
#include "sit/rng.hpp"

namespace sit::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

// ---------------------------------------------------------------------------
// Linear: y = x W^T + b, W is out x in, b is 1 x out (or empty for no bias).

template <typename T>
struct LinearParams {
  Matrix<T> weight;
  Matrix<T> bias;

  Eigen::Index in() const { return weight.cols(); }
  Eigen::Index out() const { return weight.rows(); }
  bool has_bias() const { return bias.size() > 0; }
};

template <typename T>
struct LinearGrads {
  Matrix<T> dx;
  Matrix<T> dweight;
  Matrix<T> dbias;
};

template <typename T>
Matrix<T> linear_forward(const Matrix<T>& x, const LinearParams<T>& p) {
  require_shape(x.cols() == p.in(),
                fmt::format("linear: input has {} columns, layer expects {}", x.cols(), p.in()));
  Matrix<T> y(x.rows(), p.out());
  y.noalias() = x * p.weight.transpose();
  if (p.has_bias()) y.rowwise() += p.bias.row(0);
  return y;
}

template <typename T>
LinearGrads<T> linear_backward(const Matrix<T>& x, const LinearParams<T>& p, const Matrix<T>& dy,
                               bool need_dx = true) {
  require_shape(dy.rows() == x.rows() && dy.cols() == p.out() && x.cols() == p.in(),
                "linear_backward: shape mismatch");
  LinearGrads<T> g;
  if (need_dx) {
    g.dx.resize(x.rows(), p.in());
    g.dx.noalias() = dy * p.weight;
  }
  g.dweight.resize(p.out(), p.in());
  g.dweight.noalias() = dy.transpose() * x;
  if (p.has_bias()) g.dbias = dy.colwise().sum();
  return g;
}

// ---------------------------------------------------------------------------
// LayerNorm over the last dimension.

template <typename T>
struct LayerNormParams {
  Matrix<T> gain;   // 1 x D
  Matrix<T> shift;  // 1 x D
};

template <typename T>
struct LayerNormCache {
  Matrix<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

template <typename T>
struct LayerNormGrads {
  Matrix<T> dx;
  Matrix<T> dgain;
  Matrix<T> dshift;
};

template <typename T>
Matrix<T> layernorm_forward(const Matrix<T>& x, const LayerNormParams<T>& p, T eps,
                            LayerNormCache<T>* cache = nullptr) {
  const Eigen::Index d = x.cols();
  require_shape(d > 0, "layernorm: feature dimension is zero");
  require_shape(p.gain.cols() == d && p.shift.cols() == d, "layernorm: parameter width mismatch");
  Matrix<T> xhat(x.rows(), d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    rstd(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mean) * rstd(r);
  }
  Matrix<T> y = (xhat.array().rowwise() * p.gain.row(0).array()).rowwise() + p.shift.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename T>
LayerNormGrads<T> layernorm_backward(const Matrix<T>& dy, const LayerNormParams<T>& p,
                                     const LayerNormCache<T>& cache) {
  const Eigen::Index d = dy.cols();
  require_shape(cache.xhat.rows() == dy.rows() && cache.xhat.cols() == d, "layernorm_backward: shape mismatch");
  LayerNormGrads<T> g;
  g.dgain = (dy.array() * cache.xhat.array()).colwise().sum();
  g.dshift = dy.colwise().sum();
  const Matrix<T> dxhat = dy.array().rowwise() * p.gain.row(0).array();
  g.dx.resize(dy.rows(), d);
  const T inv_d = T(1) / static_cast<T>(d);
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T sum = dxhat.row(r).sum();
    const T dot = dxhat.row(r).dot(cache.xhat.row(r));
    g.dx.row(r) = (dxhat.row(r).array() * static_cast<T>(d) - sum - cache.xhat.row(r).array() * dot) *
                  (cache.rstd(r) * inv_d);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Row softmax.

template <typename T, typename Derived>
void softmax_rows_inplace(Eigen::MatrixBase<Derived>& x) {
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T m = x.row(r).maxCoeff();
    x.row(r) = (x.row(r).array() - m).exp();
    x.row(r) /= x.row(r).sum();
  }
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& x) {
  Matrix<T> y = x;
  softmax_rows_inplace<T>(y);
  return y;
}

/// dx = y * (dy - rowsum(dy * y)).
template <typename T>
Matrix<T> softmax_rows_backward(const Matrix<T>& y, const Matrix<T>& dy) {
  require_shape(y.rows() == dy.rows() && y.cols() == dy.cols(), "softmax_backward: shape mismatch");
  Matrix<T> dx(y.rows(), y.cols());
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const T dot = y.row(r).dot(dy.row(r));
    dx.row(r) = y.row(r).array() * (dy.row(r).array() - dot);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// GELU, exact Gaussian-CDF form: x * Phi(x).

template <typename T>
Matrix<T> gelu(const Matrix<T>& x) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  return x.unaryExpr([inv_sqrt2](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); });
}

template <typename T>
Matrix<T> gelu_backward(const Matrix<T>& x, const Matrix<T>& dy) {
  require_shape(x.rows() == dy.rows() && x.cols() == dy.cols(), "gelu_backward: shape mismatch");
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  const T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  const Matrix<T> slope = x.unaryExpr([=](T v) {
    const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
    const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
    return cdf + v * pdf;
  });
  return dy.cwiseProduct(slope);
}

// ---------------------------------------------------------------------------
// Inverted dropout. The returned mask holds 0 or 1/(1-rate) per entry and is
// empty when the op is the identity (evaluation mode or rate 0).

template <typename T>
struct DropoutResult {
  Matrix<T> y;
  Matrix<T> mask;
};

inline void check_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ArgumentError(fmt::format("dropout rate {} must lie in [0, 1)", rate));
  }
}

template <typename T>
DropoutResult<T> dropout(const Matrix<T>& x, double rate, Rng& rng, bool training) {
  check_dropout_rate(rate);
  if (!training || rate == 0.0) return {x, Matrix<T>()};
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  Matrix<T> mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < rate ? T(0) : scale;
  return {x.cwiseProduct(mask), std::move(mask)};
}

template <typename T>
Matrix<T> dropout_backward(const Matrix<T>& mask, const Matrix<T>& dy) {
  if (mask.size() == 0) return dy;
  require_shape(mask.rows() == dy.rows() && mask.cols() == dy.cols(), "dropout_backward: shape mismatch");
  return dy.cwiseProduct(mask);
}

// ---------------------------------------------------------------------------
// Optimisers.

/// velocity = momentum * velocity + grad; param -= lr * velocity.
template <typename T>
void sgd_step(Matrix<T>& param, const Matrix<T>& grad, Matrix<T>& velocity, T lr, T momentum) {
  require_shape(param.rows() == grad.rows() && param.cols() == grad.cols(), "sgd_step: shape mismatch");
  if (velocity.size() == 0) velocity = Matrix<T>::Zero(param.rows(), param.cols());
  velocity = momentum * velocity + grad;
  param -= lr * velocity;
}

/// Adam with bias correction; `step` counts from 1.
template <typename T>
void adam_step(Matrix<T>& param, const Matrix<T>& grad, Matrix<T>& m, Matrix<T>& v, T lr, T beta1, T beta2,
               T eps, long step) {
  require_shape(param.rows() == grad.rows() && param.cols() == grad.cols(), "adam_step: shape mismatch");
  if (step < 1) throw ArgumentError("adam step counter must start at 1");
  if (m.size() == 0) m = Matrix<T>::Zero(param.rows(), param.cols());
  if (v.size() == 0) v = Matrix<T>::Zero(param.rows(), param.cols());
  m = beta1 * m + (T(1) - beta1) * grad;
  v = beta2 * v + (T(1) - beta2) * grad.cwiseAbs2();
  const T c1 = T(1) - std::pow(beta1, static_cast<T>(step));
  const T c2 = T(1) - std::pow(beta2, static_cast<T>(step));
  param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

// ---------------------------------------------------------------------------
// Initialisation.

/// Truncated normal (±2 std), std 0.02.
template <typename T>
void init_truncated_normal(Matrix<T>& m, Rng& rng, double stddev = 0.02) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.truncated_normal(stddev, 2.0));
}

template <typename T>
LinearParams<T> make_linear(Eigen::Index in, Eigen::Index out, bool bias, Rng& rng) {
  LinearParams<T> p;
  p.weight.resize(out, in);
  init_truncated_normal(p.weight, rng);
  if (bias) p.bias = Matrix<T>::Zero(1, out);
  return p;
}

template <typename T>
LayerNormParams<T> make_layernorm(Eigen::Index d) {
  return {Matrix<T>::Ones(1, d), Matrix<T>::Zero(1, d)};
}

}  // namespace sit::nn
