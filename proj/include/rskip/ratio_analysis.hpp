#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace rskip {

/// Normalization statistics and affine parameters of one recursion level of a
/// recursive skip block, exactly as used by its forward pass.
struct RatioLevel {
  Tensor sigma;  // [batch], sqrt(var + eps)
  Tensor mu;     // [batch]
  Tensor gain;   // [d]
  Tensor bias;   // [d]
};

/// Captured witnesses of y_k = LN_k(x + y_{k-1}), y_1 = LN_1(x + f); one level per k.
struct RatioWitness {
  std::vector<RatioLevel> levels;

  std::size_t lambda() const { return levels.size(); }
  std::size_t batch() const { return levels.empty() ? 0 : levels.front().sigma.size(); }
  std::size_t width() const { return levels.empty() ? 0 : levels.front().gain.size(); }

  void validate() const {
    if (levels.empty()) throw ContractError("ratio witness has no levels");
    for (const auto& lv : levels) {
      if (lv.sigma.size() != batch() || lv.mu.size() != batch() || lv.gain.size() != width() ||
          lv.bias.size() != width())
        throw ContractError("ratio witness levels have inconsistent extents");
      for (double s : lv.sigma.values())
        if (!(s > 0.0)) throw ContractError("ratio witness sigma must be positive");
    }
  }
};

/// y = coef_x * x + coef_f * f + constant, elementwise over [batch x d].
struct Decomposition {
  Tensor coef_x;
  Tensor coef_f;
  Tensor constant;

  Tensor reconstruct(const Tensor& x, const Tensor& f) const {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = coef_x.at(i) * x.at(i) + coef_f.at(i) * f.at(i) + constant.at(i);
    return Tensor(x.shape(), std::move(out));
  }

  /// coef_x / coef_f
  Tensor ratio() const {
    std::vector<double> out(coef_x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = coef_x.at(i) / coef_f.at(i);
    return Tensor(coef_x.shape(), std::move(out));
  }
};

/// Unrolls the recursion into a linear combination of x and f.
///
/// Treating every level's (mu, sigma) as given, level k is the affine map
///   y_k = r_k * (x + y_{k-1}) + (b_k - r_k * mu_k),   r_k = w_k / sigma_k,
/// so the coefficients satisfy a_k = r_k (1 + a_{k-1}), c_k = r_k c_{k-1},
/// C_k = r_k C_{k-1} + b_k - r_k mu_k, starting from a_1 = c_1 = r_1.
inline Decomposition unroll_decompose(const RatioWitness& witness, const Tensor& x, const Tensor& f) {
  witness.validate();
  if (x.shape() != f.shape()) throw DimensionError("unroll_decompose: x and f shapes differ");
  if (x.rank() != 2 || x.shape()[0] != witness.batch() || x.shape()[1] != witness.width())
    throw ContractError("unroll_decompose: witness of " + std::to_string(witness.batch()) + "x" +
                        std::to_string(witness.width()) + " does not match input " + to_string(x.shape()));

  const std::size_t batch = witness.batch(), d = witness.width();
  std::vector<double> a(batch * d), c(batch * d), k(batch * d);
  for (std::size_t lvl = 0; lvl < witness.levels.size(); ++lvl) {
    const auto& L = witness.levels[lvl];
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t i = r * d + j;
        const double rk = L.gain.at(j) / L.sigma.at(r);
        const double shift = L.bias.at(j) - rk * L.mu.at(r);
        if (lvl == 0) {
          a[i] = rk;
          c[i] = rk;
          k[i] = shift;
        } else {
          a[i] = rk * (1.0 + a[i]);
          c[i] = rk * c[i];
          k[i] = rk * k[i] + shift;
        }
      }
  }
  return {Tensor(x.shape(), std::move(a)), Tensor(x.shape(), std::move(c)), Tensor(x.shape(), std::move(k))};
}

/// Upper bound of the outer sum in the closed-form shortcut/residual ratio
/// 1 + sum_{i=1}^{U} prod_{j=1}^{i} sigma_j / w_j.
enum class RatioIndexing {
  kRecursion,  // U = lambda - 1; agrees with the unrolled coefficients for every lambda
  kLiteral,    // U = lambda; the bound as commonly quoted, over-counts by one term
};

inline const char* to_string(RatioIndexing indexing) {
  return indexing == RatioIndexing::kRecursion ? "sum_to_lambda_minus_1" : "sum_to_lambda";
}

/// Closed-form ratio of the shortcut coefficient to the residual coefficient, [batch x d].
inline Tensor ratio_general(const RatioWitness& witness, RatioIndexing indexing = RatioIndexing::kRecursion) {
  witness.validate();
  const std::size_t batch = witness.batch(), d = witness.width(), lambda = witness.lambda();
  const std::size_t upper = indexing == RatioIndexing::kRecursion ? lambda - 1 : lambda;
  for (std::size_t lvl = 0; lvl < upper; ++lvl)
    for (double w : witness.levels[lvl].gain.values())
      if (w == 0.0)
        throw SingularRatioError("layer norm gain at recursion level " + std::to_string(lvl + 1) +
                                 " is exactly zero; the ratio is unbounded");

  std::vector<double> out(batch * d);
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      double total = 1.0, prod = 1.0;
      for (std::size_t lvl = 0; lvl < upper; ++lvl) {
        const auto& L = witness.levels[lvl];
        prod *= L.sigma.at(r) / L.gain.at(j);
        total += prod;
      }
      out[r * d + j] = total;
    }
  return Tensor({batch, d}, std::move(out));
}

/// Largest |a - b| / |b| over entries where |coef_f| exceeds `floor`.
inline double max_ratio_discrepancy(const Tensor& closed_form, const Decomposition& dec, double floor = 1e-8) {
  const Tensor unrolled = dec.ratio();
  double worst = 0.0;
  for (std::size_t i = 0; i < unrolled.size(); ++i) {
    if (std::abs(dec.coef_f.at(i)) <= floor) continue;
    const double err = std::abs(closed_form.at(i) - unrolled.at(i)) / std::abs(unrolled.at(i));
    worst = std::max(worst, std::isnan(err) ? INFINITY : err);
  }
  return worst;
}

inline double max_abs_difference(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("max_abs_difference: shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = std::abs(a.at(i) - b.at(i));
    worst = std::max(worst, std::isnan(e) ? INFINITY : e);
  }
  return worst;
}

}  // namespace rskip
