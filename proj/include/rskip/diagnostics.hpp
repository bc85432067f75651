#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "datasets.hpp"
#include "gradcheck.hpp"
#include "residual_blocks.hpp"

namespace rskip {

/// Mean per-sample L2 norm of d(loss)/d(block output), one entry per block.
struct GradReport {
  std::string construction;
  std::vector<double> mean_norms;  // index k = output of block k (0 = closest to the input)
  std::size_t samples = 0;
  std::uint64_t seed = 0;

  /// max / min across blocks.
  double spread() const {
    if (mean_norms.empty()) throw ContractError("empty gradient report");
    const auto [lo, hi] = std::minmax_element(mean_norms.begin(), mean_norms.end());
    return *hi / *lo;
  }

  /// Rows "construction,block_index,mean_grad_norm" (header included).
  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "construction,block_index,mean_grad_norm\n";
    for (std::size_t k = 0; k < mean_norms.size(); ++k) os << construction << ',' << k << ',' << mean_norms[k] << '\n';
    return os.str();
  }
};

struct SweepOptions {
  std::size_t samples = 2000;  // drawn without replacement; capped at the data size
  std::size_t batch_size = 100;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<std::size_t> sweep_indices(const Dataset& data, const SweepOptions& opts) {
  if (data.size() == 0 || opts.samples == 0) throw ContractError("sweep needs a non-empty sample set");
  if (opts.batch_size == 0) throw ContractError("sweep batch size must be positive");
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(opts.seed);
  rng.shuffle(idx.begin(), idx.end());
  idx.resize(std::min(opts.samples, idx.size()));
  return idx;
}

// Normalization layers are switched to inference for the duration of a probe
// so per-sample quantities do not depend on batch composition.
class InferenceScope {
 public:
  explicit InferenceScope(ResidualModel& m) : model_(m), previous_(m.mode()) { m.set_mode(NormMode::kInference); }
  ~InferenceScope() { model_.set_mode(previous_); }
  InferenceScope(const InferenceScope&) = delete;
  InferenceScope& operator=(const InferenceScope&) = delete;

 private:
  ResidualModel& model_;
  NormMode previous_;
};

}  // namespace detail

/// Forward + backward of the summed classification loss over the sampled data,
/// recording each block output's per-sample gradient norm.
inline GradReport gradient_norm_sweep(ResidualModel& model, const Dataset& data, const SweepOptions& opts = {}) {
  if (data.dim != model.config().input_dim)
    throw DimensionError("sweep data width " + std::to_string(data.dim) + " does not match model input " +
                         std::to_string(model.config().input_dim));
  const auto idx = detail::sweep_indices(data, opts);
  detail::InferenceScope scope(model);

  std::vector<double> totals(model.depth(), 0.0);
  for (std::size_t start = 0; start < idx.size(); start += opts.batch_size) {
    const std::span<const std::size_t> batch(idx.data() + start, std::min(opts.batch_size, idx.size() - start));
    ForwardTrace trace;
    Tensor logits = model.forward(data.gather_features(batch), &trace);
    softmax_cross_entropy(logits, data.gather_labels(batch), Reduction::kSum).backward();
    const std::size_t width = model.config().width;
    for (std::size_t k = 0; k < trace.block_outputs.size(); ++k) {
      const auto g = trace.block_outputs[k].grad();
      for (std::size_t r = 0; r < batch.size(); ++r) {
        double sq = 0.0;
        for (std::size_t j = 0; j < width; ++j) sq += g[r * width + j] * g[r * width + j];
        totals[k] += std::sqrt(sq);
      }
    }
  }
  model.zero_grad();

  GradReport report{model.config().construction.label(), {}, idx.size(), opts.seed};
  for (double t : totals) report.mean_norms.push_back(t / static_cast<double>(idx.size()));
  return report;
}

struct EffectiveScaleTable {
  std::string construction;
  std::vector<double> per_block;
  double average = 0.0;  // mean over blocks
  std::size_t samples = 0;

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "construction,block_index,effective_scale\n";
    for (std::size_t k = 0; k < per_block.size(); ++k) os << construction << ',' << k << ',' << per_block[k] << '\n';
    os << construction << ",mean," << average << '\n';
    return os.str();
  }
};

/// effective_scale of every block on the activations actually reaching it, sample-weighted.
inline EffectiveScaleTable effective_scale_sweep(ResidualModel& model, const Dataset& data,
                                                 const SweepOptions& opts = {}) {
  const auto kind = model.config().construction.kind;
  if (!(kind == SkipKind::kXSkipLN || kind == SkipKind::kRSkipLN || kind == SkipKind::kWSkipLN ||
        kind == SkipKind::kContractedFLN))
    throw ContractError("effective scale sweep needs a layer-normalized construction, got " +
                        model.config().construction.label());
  if (model.depth() == 0) throw ContractError("effective scale sweep needs at least one block");
  const auto idx = detail::sweep_indices(data, opts);
  detail::InferenceScope scope(model);

  std::vector<double> totals(model.depth(), 0.0);
  for (std::size_t start = 0; start < idx.size(); start += opts.batch_size) {
    const std::span<const std::size_t> batch(idx.data() + start, std::min(opts.batch_size, idx.size() - start));
    Tensor h = model.project_in(data.gather_features(batch)).detach();
    for (std::size_t k = 0; k < model.depth(); ++k) {
      auto& block = model.blocks()[k];
      totals[k] += effective_scale(block, h) * static_cast<double>(batch.size());
      h = block.forward(h).detach();
    }
  }
  EffectiveScaleTable table{model.config().construction.label(), {}, 0.0, idx.size()};
  for (double t : totals) table.per_block.push_back(t / static_cast<double>(idx.size()));
  table.average = std::accumulate(table.per_block.begin(), table.per_block.end(), 0.0) /
                  static_cast<double>(table.per_block.size());
  return table;
}

/// Gradient reaching the input of the block stack when `upstream` is injected
/// at its output. Projections are bypassed.
inline std::vector<double> stack_input_gradient(ResidualModel& model, const Tensor& stack_input,
                                                std::span<const double> upstream) {
  Tensor h0 = stack_input.clone(true);
  Tensor h = h0;
  for (auto& block : model.blocks()) h = block.forward(h);
  if (model.depth() == 0) throw ContractError("stack_input_gradient needs at least one block");
  h.backward(upstream);
  model.zero_grad();
  return {h0.grad().begin(), h0.grad().end()};
}

/// One line of a ratio check: worst-case agreement between a recursive block's
/// forward output, its unrolled decomposition and the closed-form ratio.
struct RatioCheckRow {
  std::size_t lambda = 0;
  std::size_t instances = 0;
  double max_reconstruction_error = 0.0;  // absolute
  double max_ratio_discrepancy = 0.0;     // relative, closed form summed to lambda - 1
  double max_literal_discrepancy = 0.0;   // relative, closed form summed to lambda
};

struct RatioCheckOptions {
  std::vector<std::size_t> lambdas{1, 2, 3, 4};
  std::size_t instances = 100;
  std::size_t batch = 4;
  std::size_t width = 8;
  std::size_t hidden = 6;
  std::uint64_t seed = 0;
};

/// Random recursive LN blocks with gains in [0.5, 1.5] and biases in [-0.5, 0.5].
inline std::vector<RatioCheckRow> ratio_check(const RatioCheckOptions& opts = {}) {
  Rng rng(opts.seed);
  std::vector<RatioCheckRow> rows;
  for (auto lambda : opts.lambdas) {
    if (lambda == 0) throw ConfigError("ratio check lambda must be >= 1");
    RatioCheckRow row{lambda, opts.instances, 0.0, 0.0, 0.0};
    for (std::size_t t = 0; t < opts.instances; ++t) {
      ResidualBlock block(SkipConstruction::rskip_ln(static_cast<int>(lambda)),
                          ResidualBranch::affine_relu(opts.width, opts.hidden, rng));
      for (auto& ln : block.layer_norms()) {
        for (auto& g : ln.gain.mutable_data()) g = rng.uniform(0.5, 1.5);
        for (auto& b : ln.bias.mutable_data()) b = rng.uniform(-0.5, 0.5);
      }
      std::vector<double> xv(opts.batch * opts.width);
      for (auto& v : xv) v = rng.uniform(-2.0, 2.0);
      const Tensor x({opts.batch, opts.width}, std::move(xv));
      BlockTrace trace;
      const Tensor y = block.forward(x, &trace);
      const auto dec = unroll_decompose(trace.witness, x, trace.branch_output);
      row.max_reconstruction_error =
          std::max(row.max_reconstruction_error, max_abs_difference(dec.reconstruct(x, trace.branch_output), y));
      row.max_ratio_discrepancy =
          std::max(row.max_ratio_discrepancy, max_ratio_discrepancy(ratio_general(trace.witness), dec));
      row.max_literal_discrepancy = std::max(
          row.max_literal_discrepancy, max_ratio_discrepancy(ratio_general(trace.witness, RatioIndexing::kLiteral), dec));
    }
    rows.push_back(row);
  }
  return rows;
}

inline std::string ratio_check_csv(const std::vector<RatioCheckRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "lambda,instances,max_reconstruction_error,max_ratio_discrepancy,max_literal_discrepancy\n";
  for (const auto& r : rows)
    os << r.lambda << ',' << r.instances << ',' << r.max_reconstruction_error << ',' << r.max_ratio_discrepancy << ','
       << r.max_literal_discrepancy << '\n';
  return os.str();
}

struct GradcheckSuiteRow {
  std::string name;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradcheckSuiteOptions {
  std::size_t instances = 20;
  std::uint64_t seed = 0;
  double eps = 1e-5;
  double tol = 1e-4;
  std::size_t max_lambda = 4;
};

namespace detail {

inline Tensor random_leaf(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(numel(shape));
  for (auto& e : v) e = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

/// Entries with |v| in [0.05, 1]; keeps relu inputs off the kink.
inline Tensor off_kink(Rng& rng, Shape shape) {
  std::vector<double> v(numel(shape));
  for (auto& e : v) {
    const double m = rng.uniform(0.05, 1.0);
    e = rng.uniform() < 0.5 ? -m : m;
  }
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace detail

/// Constructions covered by the gradient check, lambda (or c) up to `max_lambda`.
inline std::vector<SkipConstruction> gradcheck_constructions(std::size_t max_lambda) {
  std::vector<SkipConstruction> out{SkipConstruction::plain(), SkipConstruction::wskip_ln()};
  std::vector<double> scales{0.5};
  for (std::size_t l = 1; l <= max_lambda; ++l) scales.push_back(static_cast<double>(l));
  for (double l : scales) {
    out.push_back(SkipConstruction::xskip(l));
    out.push_back(SkipConstruction::xskip_ln(l));
    out.push_back(SkipConstruction::xskip_bn(l));
    out.push_back(SkipConstruction::contracted_ln(l));
  }
  for (std::size_t l = 1; l <= max_lambda; ++l) {
    out.push_back(SkipConstruction::rskip_ln(static_cast<int>(l)));
    out.push_back(SkipConstruction::rskip_bn(static_cast<int>(l)));
  }
  return out;
}

/// Finite-difference checks of every differentiable operation and every block construction.
inline std::vector<GradcheckSuiteRow> gradcheck_suite(const GradcheckSuiteOptions& opts = {}) {
  using Inputs = std::vector<Tensor>;
  Rng rng(opts.seed);
  std::vector<GradcheckSuiteRow> rows;
  auto probe = [](const Tensor& out, const Tensor& w) { return sum(ewmul(out, w)); };
  auto run = [&](const std::string& name, auto&& make) {
    GradcheckSuiteRow row{name, opts.instances, 0.0, true};
    for (std::size_t t = 0; t < opts.instances; ++t) {
      auto [fn, inputs] = make();
      const auto r = gradcheck(fn, inputs, opts.eps, opts.tol);
      row.max_rel_error = std::max(row.max_rel_error, r.max_rel_error);
      row.passed = row.passed && r.passed;
    }
    rows.push_back(row);
  };
  using Case = std::pair<std::function<Tensor(const Inputs&)>, Inputs>;
  auto R = [&](Shape s, double lo = -1.0, double hi = 1.0) { return detail::random_leaf(rng, std::move(s), lo, hi); };

  run("add", [&]() -> Case {
    const Tensor w = R({3, 4});
    return {[w, probe](const Inputs& in) { return probe(add(in[0], in[1]), w); }, {R({3, 4}), R({3, 4})}};
  });
  run("add_broadcast", [&]() -> Case {
    const Tensor w = R({3, 4});
    return {[w, probe](const Inputs& in) { return probe(add(in[0], in[1]), w); }, {R({3, 4}), R({4})}};
  });
  run("scale", [&]() -> Case {
    const Tensor w = R({3, 4});
    const double c = rng.uniform(-3.0, 3.0);
    return {[w, c, probe](const Inputs& in) { return probe(scale(in[0], c), w); }, {R({3, 4})}};
  });
  run("ewmul", [&]() -> Case {
    const Tensor w = R({3, 4});
    return {[w, probe](const Inputs& in) { return probe(ewmul(in[0], in[1]), w); }, {R({3, 4}), R({3, 4})}};
  });
  run("ewmul_broadcast", [&]() -> Case {
    const Tensor w = R({3, 4});
    return {[w, probe](const Inputs& in) { return probe(ewmul(in[0], in[1]), w); }, {R({3, 4}), R({4})}};
  });
  run("matmul", [&]() -> Case {
    const Tensor w = R({3, 2});
    return {[w, probe](const Inputs& in) { return probe(matmul(in[0], in[1]), w); }, {R({3, 4}), R({4, 2})}};
  });
  run("relu", [&]() -> Case {
    const Tensor w = R({3, 4});
    return {[w, probe](const Inputs& in) { return probe(relu(in[0]), w); }, {detail::off_kink(rng, {3, 4})}};
  });
  run("sum", [&]() -> Case {
    const Tensor w = R({3, 4});
    return {[w](const Inputs& in) { return sum(ewmul(in[0], w)); }, {R({3, 4})}};
  });
  run("mean", [&]() -> Case {
    return {[](const Inputs& in) { return mean(ewmul(in[0], in[0])); }, {R({3, 4})}};
  });
  run("softmax_cross_entropy", [&]() -> Case {
    std::vector<int> labels(5);
    for (auto& y : labels) y = static_cast<int>(rng.below(4));
    const bool use_sum = rng.uniform() < 0.5;
    return {[labels, use_sum](const Inputs& in) {
              return softmax_cross_entropy(in[0], labels, use_sum ? Reduction::kSum : Reduction::kMean);
            },
            {R({5, 4}, -3.0, 3.0)}};
  });
  run("layer_norm", [&]() -> Case {
    const Tensor w = R({4, 6});
    return {[w, probe](const Inputs& in) { return probe(layer_norm(in[0], {in[1], in[2], kDefaultNormEps}), w); },
            {R({4, 6}, -2.0, 2.0), R({6}, 0.5, 1.5), R({6})}};
  });
  for (auto mode : {NormMode::kTraining, NormMode::kInference}) {
    run(mode == NormMode::kTraining ? "batch_norm_training" : "batch_norm_inference", [&]() -> Case {
      const Tensor w = R({5, 3});
      const Tensor rm = R({3}), rv = R({3}, 0.5, 2.0);
      return {[w, rm, rv, mode, probe](const Inputs& in) {
                BatchNormParams p = BatchNormParams::create(3);
                p.gain = in[1];
                p.bias = in[2];
                p.running_mean = rm.clone();
                p.running_var = rv.clone();
                p.mode = mode;
                return probe(batch_norm(in[0], p), w);
              },
              {R({5, 3}, -2.0, 2.0), R({3}, 0.5, 1.5), R({3})}};
    });
  }

  for (const auto& c : gradcheck_constructions(opts.max_lambda)) {
    run("block " + c.label(), [&]() -> Case {
      auto block = std::make_shared<ResidualBlock>(c, ResidualBranch::affine_relu(4, 3, rng));
      for (auto& p : block->parameters()) {
        if (p.decay) continue;
        const bool gain_like = p.name.find("gain") != std::string::npos || p.name.find("w_skip") != std::string::npos;
        for (auto& v : p.value.mutable_data()) v = gain_like ? rng.uniform(0.5, 1.5) : rng.uniform(-0.5, 0.5);
      }
      // Small probe weights keep round-off in exactly-zero gradients (branch
      // biases under batch norm) below the relative-error floor.
      const Tensor w = R({3, 4}, -1e-4, 1e-4);
      Inputs inputs{R({3, 4}, -2.0, 2.0)};
      for (auto& p : block->parameters()) inputs.push_back(p.value);
      return {[block, w, probe](const Inputs& in) { return probe(block->forward(in[0]), w); }, inputs};
    });
  }
  return rows;
}

inline std::string gradcheck_suite_csv(const std::vector<GradcheckSuiteRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "target,instances,max_rel_error,passed\n";
  for (const auto& r : rows) os << r.name << ',' << r.instances << ',' << r.max_rel_error << ',' << (r.passed ? 1 : 0) << '\n';
  return os.str();
}

}  // namespace rskip
