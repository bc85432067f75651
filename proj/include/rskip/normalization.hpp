#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace rskip {

inline constexpr double kDefaultNormEps = 1e-5;
inline constexpr double kDefaultBatchNormMomentum = 0.1;

/// Trainable affine parameters of a layer normalization over the last axis.
struct LayerNormParams {
  Tensor gain;  // [d], initialized to 1
  Tensor bias;  // [d], initialized to 0
  double eps = kDefaultNormEps;

  static LayerNormParams create(std::size_t d, double eps = kDefaultNormEps) {
    if (d == 0) throw ConfigError("layer norm width must be positive");
    if (!(eps > 0.0)) throw ConfigError("layer norm eps must be positive");
    return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true), eps};
  }

  std::size_t width() const { return gain.size(); }
};

/// Per-row statistics actually used by a layer_norm forward.
/// `sigma` is the denominator sqrt(population variance + eps).
struct LayerNormStats {
  std::vector<double> mean;
  std::vector<double> sigma;
};

/// y = gain * (x - mean) / sqrt(var + eps) + bias, row-wise over a [batch x d] input.
inline Tensor layer_norm(const Tensor& x, const LayerNormParams& p, LayerNormStats* stats = nullptr) {
  detail::require_matrix(x, "layer_norm");
  const std::size_t batch = x.shape()[0], d = x.shape()[1];
  if (p.gain.size() != d || p.bias.size() != d)
    throw DimensionError("layer_norm: parameters of width " + std::to_string(p.gain.size()) + " for input " +
                         to_string(x.shape()));

  const auto& xv = x.values();
  const auto& w = p.gain.values();
  const auto& b = p.bias.values();
  std::vector<double> xhat(xv.size()), out(xv.size()), sigma(batch), mu(batch);
  for (std::size_t r = 0; r < batch; ++r) {
    const double* row = xv.data() + r * d;
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += row[j];
    m /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - m) * (row[j] - m);
    var /= static_cast<double>(d);
    const double s = std::sqrt(var + p.eps);
    mu[r] = m;
    sigma[r] = s;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - m) / s;
      out[r * d + j] = w[j] * xhat[r * d + j] + b[j];
    }
  }
  if (stats) *stats = {mu, sigma};

  return Tensor::from_op(
      "layer_norm", x.shape(), std::move(out), {x, p.gain, p.bias},
      [xhat = std::move(xhat), sigma = std::move(sigma), batch, d](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& g = self.pending;
        const auto& w = pw.data;
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < batch; ++r) {
          const double* gr = g.data() + r * d;
          const double* xr = xhat.data() + r * d;
          if (pw.requires_grad)
            for (std::size_t j = 0; j < d; ++j) pw.pending[j] += gr[j] * xr[j];
          if (pb.requires_grad)
            for (std::size_t j = 0; j < d; ++j) pb.pending[j] += gr[j];
          if (!px.requires_grad) continue;
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = gr[j] * w[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xr[j];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) px.pending[r * d + j] += (dxhat[j] - m1 - xr[j] * m2) / sigma[r];
        }
      });
}

enum class NormMode { kTraining, kInference };

/// Batch normalization over the batch axis with exponential-moving-average running statistics.
struct BatchNormParams {
  Tensor gain;
  Tensor bias;
  Tensor running_mean;  // not trainable
  Tensor running_var;   // not trainable; population variance
  double momentum = kDefaultBatchNormMomentum;
  double eps = kDefaultNormEps;
  NormMode mode = NormMode::kTraining;

  static BatchNormParams create(std::size_t d, double momentum = kDefaultBatchNormMomentum,
                                double eps = kDefaultNormEps) {
    if (d == 0) throw ConfigError("batch norm width must be positive");
    if (!(momentum > 0.0 && momentum < 1.0)) throw ConfigError("batch norm momentum must lie in (0, 1)");
    if (!(eps > 0.0)) throw ConfigError("batch norm eps must be positive");
    return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true), Tensor::zeros({d}), Tensor::full({d}, 1.0),
            momentum, eps, NormMode::kTraining};
  }

  std::size_t width() const { return gain.size(); }
};

inline Tensor batch_norm(const Tensor& x, BatchNormParams& p) {
  detail::require_matrix(x, "batch_norm");
  const std::size_t batch = x.shape()[0], d = x.shape()[1];
  if (p.gain.size() != d || p.bias.size() != d)
    throw DimensionError("batch_norm: parameters of width " + std::to_string(p.gain.size()) + " for input " +
                         to_string(x.shape()));
  const bool training = p.mode == NormMode::kTraining;
  if (training && batch < 2) throw ContractError("batch_norm in training mode needs a batch of at least 2");

  const auto& xv = x.values();
  const auto& w = p.gain.values();
  const auto& b = p.bias.values();
  std::vector<double> mu(d, 0.0), sigma(d, 0.0);
  if (training) {
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t j = 0; j < d; ++j) mu[j] += xv[r * d + j];
    for (auto& m : mu) m /= static_cast<double>(batch);
    std::vector<double> var(d, 0.0);
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t j = 0; j < d; ++j) var[j] += (xv[r * d + j] - mu[j]) * (xv[r * d + j] - mu[j]);
    auto rm = p.running_mean.mutable_data();
    auto rv = p.running_var.mutable_data();
    for (std::size_t j = 0; j < d; ++j) {
      var[j] /= static_cast<double>(batch);
      sigma[j] = std::sqrt(var[j] + p.eps);
      rm[j] = (1.0 - p.momentum) * rm[j] + p.momentum * mu[j];
      rv[j] = (1.0 - p.momentum) * rv[j] + p.momentum * var[j];
    }
  } else {
    const auto& rm = p.running_mean.values();
    const auto& rv = p.running_var.values();
    for (std::size_t j = 0; j < d; ++j) {
      mu[j] = rm[j];
      sigma[j] = std::sqrt(rv[j] + p.eps);
    }
  }

  std::vector<double> xhat(xv.size()), out(xv.size());
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xv[r * d + j] - mu[j]) / sigma[j];
      out[r * d + j] = w[j] * xhat[r * d + j] + b[j];
    }

  return Tensor::from_op(
      "batch_norm", x.shape(), std::move(out), {x, p.gain, p.bias},
      [xhat = std::move(xhat), sigma = std::move(sigma), batch, d, training](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& g = self.pending;
        const auto& w = pw.data;
        std::vector<double> m1(d, 0.0), m2(d, 0.0);
        for (std::size_t r = 0; r < batch; ++r)
          for (std::size_t j = 0; j < d; ++j) {
            const double gv = g[r * d + j];
            const double xh = xhat[r * d + j];
            if (pw.requires_grad) pw.pending[j] += gv * xh;
            if (pb.requires_grad) pb.pending[j] += gv;
            m1[j] += gv * w[j];
            m2[j] += gv * w[j] * xh;
          }
        if (!px.requires_grad) return;
        for (std::size_t j = 0; j < d; ++j) {
          m1[j] /= static_cast<double>(batch);
          m2[j] /= static_cast<double>(batch);
        }
        for (std::size_t r = 0; r < batch; ++r)
          for (std::size_t j = 0; j < d; ++j) {
            const double dxhat = g[r * d + j] * w[j];
            px.pending[r * d + j] +=
                training ? (dxhat - m1[j] - xhat[r * d + j] * m2[j]) / sigma[j] : dxhat / sigma[j];
          }
      });
}

}  // namespace rskip
