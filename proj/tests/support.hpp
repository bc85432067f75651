#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "rskip/rskip.hpp"

namespace rskip::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  std::vector<double> v(numel(shape));
  for (auto& e : v) e = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Random values bounded away from zero, so relu kinks are never probed.
inline Tensor away_from_zero(Rng& rng, Shape shape, double margin = 0.05) {
  std::vector<double> v(numel(shape));
  for (auto& e : v) {
    const double m = rng.uniform(margin, 1.0);
    e = rng.uniform() < 0.5 ? -m : m;
  }
  return Tensor(std::move(shape), std::move(v));
}

/// Scalar probe sum(out * weights) with fixed random weights.
inline Tensor weighted_sum(const Tensor& out, const Tensor& weights) { return sum(ewmul(out, weights)); }

/// Every construction with lambda (or c) up to 4.
inline std::vector<SkipConstruction> constructions_up_to_4() {
  std::vector<SkipConstruction> out{SkipConstruction::plain(), SkipConstruction::wskip_ln()};
  for (double l : {0.5, 1.0, 2.0, 3.0, 4.0}) {
    out.push_back(SkipConstruction::xskip(l));
    out.push_back(SkipConstruction::xskip_ln(l));
    out.push_back(SkipConstruction::xskip_bn(l));
  }
  for (int l = 1; l <= 4; ++l) {
    out.push_back(SkipConstruction::rskip_ln(l));
    out.push_back(SkipConstruction::rskip_bn(l));
  }
  for (double c : {0.5, 1.0, 2.0, 3.0, 4.0}) out.push_back(SkipConstruction::contracted_ln(c));
  return out;
}

/// A small block with randomized normalization gains/biases and w_skip.
inline ResidualBlock random_block(const SkipConstruction& c, Rng& rng, std::size_t width = 4, std::size_t hidden = 3) {
  ResidualBlock block(c, ResidualBranch::affine_relu(width, hidden, rng));
  for (auto& p : block.parameters()) {
    if (p.decay) continue;
    const bool gain_like = p.name.find("gain") != std::string::npos || p.name == "w_skip";
    for (auto& v : p.value.mutable_data()) v = gain_like ? rng.uniform(0.5, 1.5) : rng.uniform(-0.5, 0.5);
  }
  return block;
}

/// Finite-difference check of sum(block(x) * w) with respect to x and every block parameter.
/// The probe weights are small so that round-off in exactly-zero gradients (branch
/// biases under batch norm) stays below the relative-error floor.
inline GradcheckReport block_gradcheck(const SkipConstruction& c, Rng& rng, std::size_t batch = 3) {
  ResidualBlock block = random_block(c, rng);
  const Tensor w = random_tensor(rng, {batch, block.width()}, -1e-4, 1e-4);
  std::vector<Tensor> inputs{random_tensor(rng, {batch, block.width()}, -2.0, 2.0)};
  for (auto& p : block.parameters()) inputs.push_back(p.value);
  return gradcheck([&](const std::vector<Tensor>& in) { return weighted_sum(block.forward(in[0]), w); }, inputs);
}

inline std::vector<double> values_of(const Tensor& t) { return t.values(); }

inline std::vector<double> grad_of(const Tensor& t) { return {t.grad().begin(), t.grad().end()}; }

}  // namespace rskip::testing
