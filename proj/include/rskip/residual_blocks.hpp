#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "normalization.hpp"
#include "random.hpp"
#include "ratio_analysis.hpp"
#include "tensor.hpp"

namespace rskip {

/// How a block combines its shortcut x with its residual branch F(x).
enum class SkipKind : std::uint32_t {
  kPlainSkip = 0,      // x + F
  kXSkip = 1,          // lambda x + F
  kXSkipLN = 2,        // LN(lambda x + F)
  kRSkipLN = 3,        // y_1 = LN(x + F), y_k = LN_k(x + y_{k-1})
  kWSkipLN = 4,        // LN(w * x + F), w learned per feature
  kXSkipBN = 5,        // BN(lambda x + F)
  kRSkipBN = 6,        // recursive form with BN
  kContractedFLN = 7,  // LN(x + c F)
};

inline constexpr SkipKind kAllSkipKinds[] = {SkipKind::kPlainSkip, SkipKind::kXSkip,   SkipKind::kXSkipLN,
                                             SkipKind::kRSkipLN,   SkipKind::kWSkipLN, SkipKind::kXSkipBN,
                                             SkipKind::kRSkipBN,   SkipKind::kContractedFLN};

inline const char* kind_name(SkipKind k) {
  switch (k) {
    case SkipKind::kPlainSkip: return "plain";
    case SkipKind::kXSkip: return "xskip";
    case SkipKind::kXSkipLN: return "xskip-ln";
    case SkipKind::kRSkipLN: return "rskip-ln";
    case SkipKind::kWSkipLN: return "wskip-ln";
    case SkipKind::kXSkipBN: return "xskip-bn";
    case SkipKind::kRSkipBN: return "rskip-bn";
    case SkipKind::kContractedFLN: return "contracted-ln";
  }
  return "unknown";
}

inline std::optional<SkipKind> kind_from_name(const std::string& name) {
  for (auto k : kAllSkipKinds)
    if (name == kind_name(k)) return k;
  return std::nullopt;
}

inline bool uses_layer_norm(SkipKind k) {
  return k == SkipKind::kXSkipLN || k == SkipKind::kRSkipLN || k == SkipKind::kWSkipLN ||
         k == SkipKind::kContractedFLN;
}
inline bool uses_batch_norm(SkipKind k) { return k == SkipKind::kXSkipBN || k == SkipKind::kRSkipBN; }
inline bool is_recursive(SkipKind k) { return k == SkipKind::kRSkipLN || k == SkipKind::kRSkipBN; }
inline bool uses_lambda(SkipKind k) {
  return k == SkipKind::kXSkip || k == SkipKind::kXSkipLN || k == SkipKind::kXSkipBN || is_recursive(k);
}

namespace detail {
inline std::string format_number(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}
}  // namespace detail

struct SkipConstruction {
  SkipKind kind = SkipKind::kPlainSkip;
  double lambda = 1.0;          // shortcut scale, or recursion depth for the recursive kinds
  double residual_scale = 1.0;  // c in LN(x + c F)

  static SkipConstruction plain() { return {SkipKind::kPlainSkip, 1.0, 1.0}; }
  static SkipConstruction xskip(double lambda) { return {SkipKind::kXSkip, lambda, 1.0}; }
  static SkipConstruction xskip_ln(double lambda) { return {SkipKind::kXSkipLN, lambda, 1.0}; }
  static SkipConstruction rskip_ln(int lambda) { return {SkipKind::kRSkipLN, static_cast<double>(lambda), 1.0}; }
  static SkipConstruction wskip_ln() { return {SkipKind::kWSkipLN, 1.0, 1.0}; }
  static SkipConstruction xskip_bn(double lambda) { return {SkipKind::kXSkipBN, lambda, 1.0}; }
  static SkipConstruction rskip_bn(int lambda) { return {SkipKind::kRSkipBN, static_cast<double>(lambda), 1.0}; }
  static SkipConstruction contracted_ln(double c) { return {SkipKind::kContractedFLN, 1.0, c}; }

  void validate() const {
    if (uses_lambda(kind)) {
      if (!(std::isfinite(lambda) && lambda > 0.0))
        throw ConfigError(std::string(kind_name(kind)) + ": lambda must be a positive real");
      if (is_recursive(kind) && (lambda < 1.0 || std::floor(lambda) != lambda))
        throw ConfigError(std::string(kind_name(kind)) + ": lambda must be an integer >= 1");
    } else if (lambda != 1.0) {
      throw ConfigError(std::string(kind_name(kind)) + " does not take lambda; leave it at 1");
    }
    if (kind == SkipKind::kContractedFLN) {
      if (!(std::isfinite(residual_scale) && residual_scale > 0.0))
        throw ConfigError("contracted-ln: residual scale must be a positive real");
    } else if (residual_scale != 1.0) {
      throw ConfigError(std::string(kind_name(kind)) + " does not take a residual scale; leave it at 1");
    }
  }

  std::size_t recursion_depth() const { return is_recursive(kind) ? static_cast<std::size_t>(lambda) : 1; }

  /// Short method name, e.g. "2xSkip", "2rSkip+LN", "LN(x+3F)".
  std::string label() const {
    const auto l = detail::format_number(lambda);
    switch (kind) {
      case SkipKind::kPlainSkip: return "x+F";
      case SkipKind::kXSkip: return l + "xSkip";
      case SkipKind::kXSkipLN: return l + "xSkip+LN";
      case SkipKind::kRSkipLN: return l + "rSkip+LN";
      case SkipKind::kWSkipLN: return "wSkip+LN";
      case SkipKind::kXSkipBN: return l + "xSkip+BN";
      case SkipKind::kRSkipBN: return l + "rSkip+BN";
      case SkipKind::kContractedFLN: return "LN(x+" + detail::format_number(residual_scale) + "F)";
    }
    return "?";
  }

  /// Block formula, e.g. "LN(x+LN(x+F))".
  std::string architecture() const {
    const auto l = detail::format_number(lambda);
    const std::string sx = lambda == 1.0 ? "x" : l + "x";
    auto recursive = [&](const char* g) {
      std::string s = std::string(g) + "(x+F)";
      for (std::size_t k = 1; k < recursion_depth(); ++k) s = std::string(g) + "(x+" + s + ")";
      return s;
    };
    switch (kind) {
      case SkipKind::kPlainSkip: return "x+F";
      case SkipKind::kXSkip: return sx + "+F";
      case SkipKind::kXSkipLN: return "LN(" + sx + "+F)";
      case SkipKind::kRSkipLN: return recursive("LN");
      case SkipKind::kWSkipLN: return "LN(w*x+F)";
      case SkipKind::kXSkipBN: return "BN(" + sx + "+F)";
      case SkipKind::kRSkipBN: return recursive("BN");
      case SkipKind::kContractedFLN: return "LN(x+" + detail::format_number(residual_scale) + "*F)";
    }
    return "?";
  }

  /// Normalization column: "-", "LN" or "BN".
  std::string norm_label() const {
    if (uses_layer_norm(kind)) return "LN";
    if (uses_batch_norm(kind)) return "BN";
    return "-";
  }

  /// Inverse of label(); also accepts "plain" and "1xSkip" style names.
  static SkipConstruction parse(const std::string& text) {
    static const std::regex scaled(R"(^([0-9]*\.?[0-9]+)(x|r)Skip(\+(LN|BN))?$)");
    static const std::regex contracted(R"(^LN\(x\+([0-9]*\.?[0-9]+)\*?F\)$)");
    std::smatch m;
    SkipConstruction c;
    if (text == "x+F" || text == "plain") {
      c = plain();
    } else if (text == "wSkip+LN") {
      c = wskip_ln();
    } else if (std::regex_match(text, m, scaled)) {
      const double l = std::stod(m[1]);
      const bool rec = m[2] == "r";
      const std::string g = m[4];
      if (rec && g == "LN") c = {SkipKind::kRSkipLN, l, 1.0};
      else if (rec && g == "BN") c = {SkipKind::kRSkipBN, l, 1.0};
      else if (rec) throw ConfigError("recursive skip needs a normalization: " + text);
      else if (g == "LN") c = xskip_ln(l);
      else if (g == "BN") c = xskip_bn(l);
      else c = xskip(l);
    } else if (std::regex_match(text, m, contracted)) {
      c = contracted_ln(std::stod(m[1]));
    } else {
      throw ConfigError("unrecognized construction '" + text + "'");
    }
    c.validate();
    return c;
  }

  friend bool operator==(const SkipConstruction&, const SkipConstruction&) = default;
};

/// A trainable tensor with its optimizer treatment.
struct Parameter {
  std::string name;
  Tensor value;
  bool decay = true;  // weight decay applies; false for normalization gains/biases and w_skip
};

/// The residual transform F: R^d -> R^d.
class ResidualBranch {
 public:
  using Fn = std::function<Tensor(const Tensor&)>;

  /// relu(x W1 + b1) W2 + b2 with W1: d x h, W2: h x d, fan-in scaled uniform init.
  static ResidualBranch affine_relu(std::size_t width, std::size_t hidden, Rng& rng) {
    if (width == 0 || hidden == 0) throw ConfigError("branch widths must be positive");
    ResidualBranch br;
    br.width_ = width;
    br.hidden_ = hidden;
    br.params_ = {fan_in_uniform({width, hidden}, width, rng), fan_in_uniform({hidden}, width, rng),
                  fan_in_uniform({hidden, width}, hidden, rng), fan_in_uniform({width}, hidden, rng)};
    return br;
  }

  /// Caller-supplied differentiable map; `params` are exposed for optimization.
  static ResidualBranch custom(std::size_t width, Fn fn, std::vector<Tensor> params = {}) {
    ResidualBranch br;
    br.width_ = width;
    br.fn_ = std::move(fn);
    br.params_ = std::move(params);
    return br;
  }

  Tensor operator()(const Tensor& x) const {
    if (fn_) {
      Tensor out = fn_(x);
      if (out.shape() != x.shape())
        throw DimensionError("residual branch changed shape " + to_string(x.shape()) + " -> " +
                             to_string(out.shape()));
      return out;
    }
    return add(matmul(relu(add(matmul(x, params_[0]), params_[1])), params_[2]), params_[3]);
  }

  bool is_affine_relu() const { return !fn_; }
  std::size_t width() const { return width_; }
  std::size_t hidden() const { return hidden_; }
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }

  /// Zero the output layer so that F(x) == 0 exactly (and so does its Jacobian).
  void zero_output() {
    if (fn_) throw ContractError("zero_output() needs the built-in affine+relu branch");
    for (auto* t : {&params_[2], &params_[3]})
      for (auto& v : t->mutable_data()) v = 0.0;
  }

 private:
  static Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> v(numel(shape));
    for (auto& e : v) e = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(v), true);
  }

  std::size_t width_ = 0;
  std::size_t hidden_ = 0;
  std::vector<Tensor> params_;
  Fn fn_;
};

struct BlockOptions {
  double norm_eps = kDefaultNormEps;
  double bn_momentum = kDefaultBatchNormMomentum;
  double w_skip_init = 1.0;
};

/// Intermediate values captured by a block forward.
struct BlockTrace {
  Tensor branch_output;  // F(x)
  RatioWitness witness;  // one level per layer norm applied, in application order
};

class ResidualBlock {
 public:
  ResidualBlock(SkipConstruction construction, ResidualBranch branch, BlockOptions opts = {})
      : construction_(construction), branch_(std::move(branch)) {
    construction_.validate();
    const std::size_t d = branch_.width();
    const std::size_t levels = construction_.recursion_depth();
    if (uses_layer_norm(construction_.kind))
      for (std::size_t k = 0; k < levels; ++k) ln_.push_back(LayerNormParams::create(d, opts.norm_eps));
    if (uses_batch_norm(construction_.kind))
      for (std::size_t k = 0; k < levels; ++k) bn_.push_back(BatchNormParams::create(d, opts.bn_momentum, opts.norm_eps));
    if (construction_.kind == SkipKind::kWSkipLN) w_skip_ = Tensor::full({d}, opts.w_skip_init, true);
  }

  const SkipConstruction& construction() const { return construction_; }
  std::size_t width() const { return branch_.width(); }
  ResidualBranch& branch() { return branch_; }
  const ResidualBranch& branch() const { return branch_; }
  std::vector<LayerNormParams>& layer_norms() { return ln_; }
  const std::vector<LayerNormParams>& layer_norms() const { return ln_; }
  std::vector<BatchNormParams>& batch_norms() { return bn_; }
  const std::optional<Tensor>& w_skip() const { return w_skip_; }

  void set_mode(NormMode mode) {
    for (auto& b : bn_) b.mode = mode;
  }

  /// Trainable tensors in declaration order: branch, w_skip, then norms by level.
  std::vector<Parameter> parameters(const std::string& prefix = "") const {
    std::vector<Parameter> out;
    static const char* kBranchNames[] = {"branch.w1", "branch.b1", "branch.w2", "branch.b2"};
    const auto& bp = branch_.parameters();
    for (std::size_t i = 0; i < bp.size(); ++i)
      out.push_back({prefix + (branch_.is_affine_relu() ? kBranchNames[i] : "branch.p" + std::to_string(i)), bp[i], true});
    if (w_skip_) out.push_back({prefix + "w_skip", *w_skip_, false});
    for (std::size_t k = 0; k < ln_.size(); ++k) {
      out.push_back({prefix + "ln" + std::to_string(k + 1) + ".gain", ln_[k].gain, false});
      out.push_back({prefix + "ln" + std::to_string(k + 1) + ".bias", ln_[k].bias, false});
    }
    for (std::size_t k = 0; k < bn_.size(); ++k) {
      out.push_back({prefix + "bn" + std::to_string(k + 1) + ".gain", bn_[k].gain, false});
      out.push_back({prefix + "bn" + std::to_string(k + 1) + ".bias", bn_[k].bias, false});
    }
    return out;
  }

  /// Non-trainable state (batch norm running statistics).
  std::vector<Tensor> buffers() const {
    std::vector<Tensor> out;
    for (const auto& b : bn_) {
      out.push_back(b.running_mean);
      out.push_back(b.running_var);
    }
    return out;
  }

  Tensor forward(const Tensor& x, BlockTrace* trace = nullptr) {
    if (x.rank() != 2 || x.shape()[1] != width())
      throw DimensionError("block of width " + std::to_string(width()) + " got input " + to_string(x.shape()));
    const double lambda = construction_.lambda;
    Tensor f = branch_(x);
    if (trace) *trace = {f, {}};

    auto ln = [&](std::size_t k, const Tensor& in) {
      if (!trace) return layer_norm(in, ln_[k]);
      LayerNormStats st;
      Tensor out = layer_norm(in, ln_[k], &st);
      const std::size_t batch = in.shape()[0];
      trace->witness.levels.push_back({Tensor({batch}, std::move(st.sigma)), Tensor({batch}, std::move(st.mean)),
                                       ln_[k].gain.detach(), ln_[k].bias.detach()});
      return out;
    };
    auto scaled_x = [&] { return lambda == 1.0 ? x : scale(x, lambda); };

    switch (construction_.kind) {
      case SkipKind::kPlainSkip: return add(x, f);
      case SkipKind::kXSkip: return add(scaled_x(), f);
      case SkipKind::kXSkipLN: return ln(0, add(scaled_x(), f));
      case SkipKind::kRSkipLN: {
        Tensor y = ln(0, add(x, f));
        for (std::size_t k = 1; k < ln_.size(); ++k) y = ln(k, add(x, y));
        return y;
      }
      case SkipKind::kWSkipLN: return ln(0, add(ewmul(x, *w_skip_), f));
      case SkipKind::kXSkipBN: return batch_norm(add(scaled_x(), f), bn_[0]);
      case SkipKind::kRSkipBN: {
        Tensor y = batch_norm(add(x, f), bn_[0]);
        for (std::size_t k = 1; k < bn_.size(); ++k) y = batch_norm(add(x, y), bn_[k]);
        return y;
      }
      case SkipKind::kContractedFLN: {
        const double c = construction_.residual_scale;
        return ln(0, add(x, c == 1.0 ? f : scale(f, c)));
      }
    }
    throw ContractError("unhandled skip kind");
  }

 private:
  SkipConstruction construction_;
  ResidualBranch branch_;
  std::vector<LayerNormParams> ln_;
  std::vector<BatchNormParams> bn_;
  std::optional<Tensor> w_skip_;
};

inline Tensor forward_block(ResidualBlock& block, const Tensor& x, BlockTrace* trace = nullptr) {
  return block.forward(x, trace);
}

/// Shortcut-to-residual coefficient ratio of an LN block on input x, averaged
/// over batch and features. Recursive blocks use the unrolled witnesses.
inline double effective_scale(ResidualBlock& block, const Tensor& x) {
  const auto& c = block.construction();
  if (x.rank() != 2 || x.shape()[1] != block.width())
    throw DimensionError("effective_scale: input " + to_string(x.shape()) + " for block of width " +
                         std::to_string(block.width()));
  auto mean_of = [](const Tensor& t) {
    double s = 0.0;
    for (double v : t.values()) s += v;
    return s / static_cast<double>(t.size());
  };
  switch (c.kind) {
    case SkipKind::kXSkipLN: return c.lambda;
    case SkipKind::kContractedFLN: return 1.0 / c.residual_scale;
    case SkipKind::kWSkipLN: return mean_of(*block.w_skip());
    case SkipKind::kRSkipLN: {
      BlockTrace trace;
      block.forward(x.detach(), &trace);
      return mean_of(ratio_general(trace.witness, RatioIndexing::kRecursion));
    }
    default:
      throw ContractError("effective_scale is defined for layer-normalized shortcut blocks, not " + c.label());
  }
}

struct ModelConfig {
  SkipConstruction construction;
  std::size_t depth = 16;
  std::size_t input_dim = 2;
  std::size_t width = 64;
  std::size_t hidden = 16;
  std::size_t classes = 3;
  std::uint64_t seed = 0;
  BlockOptions block;

  void validate() const {
    construction.validate();
    if (input_dim == 0 || width == 0 || hidden == 0 || classes == 0)
      throw ConfigError("model widths must be positive");
    if (!(block.norm_eps > 0.0)) throw ConfigError("normalization eps must be positive");
    if (!(block.bn_momentum > 0.0 && block.bn_momentum < 1.0)) throw ConfigError("batch norm momentum must lie in (0, 1)");
    if (!std::isfinite(block.w_skip_init)) throw ConfigError("w_skip init must be finite");
  }
};

/// Values recorded by forward_model when a trace is supplied.
struct ForwardTrace {
  bool capture_witness = false;
  std::vector<Tensor> block_outputs;  // gradient-retaining
  std::vector<BlockTrace> blocks;     // filled when capture_witness
};

/// Input projection, a stack of residual blocks sharing one construction, output projection.
class ResidualModel {
 public:
  ResidualModel(ModelConfig cfg, Tensor in_w, Tensor in_b, std::vector<ResidualBlock> blocks, Tensor out_w,
                Tensor out_b)
      : cfg_(std::move(cfg)),
        in_w_(std::move(in_w)),
        in_b_(std::move(in_b)),
        blocks_(std::move(blocks)),
        out_w_(std::move(out_w)),
        out_b_(std::move(out_b)) {}

  const ModelConfig& config() const { return cfg_; }
  std::vector<ResidualBlock>& blocks() { return blocks_; }
  const std::vector<ResidualBlock>& blocks() const { return blocks_; }
  std::size_t depth() const { return blocks_.size(); }

  void set_mode(NormMode mode) {
    mode_ = mode;
    for (auto& b : blocks_) b.set_mode(mode);
  }
  NormMode mode() const { return mode_; }

  Tensor project_in(const Tensor& x) const {
    if (x.rank() != 2 || x.shape()[1] != cfg_.input_dim)
      throw DimensionError("model expects inputs of width " + std::to_string(cfg_.input_dim) + ", got " +
                           to_string(x.shape()));
    return add(matmul(x, in_w_), in_b_);
  }

  Tensor project_out(const Tensor& h) const { return add(matmul(h, out_w_), out_b_); }

  Tensor forward(const Tensor& x, ForwardTrace* trace = nullptr) {
    Tensor h = project_in(x);
    for (auto& block : blocks_) {
      if (trace && trace->capture_witness) {
        trace->blocks.emplace_back();
        h = block.forward(h, &trace->blocks.back());
      } else {
        h = block.forward(h);
      }
      if (trace) {
        h.retain_grad();
        trace->block_outputs.push_back(h);
      }
    }
    return project_out(h);
  }

  /// Declaration order: input projection, blocks in order, output projection.
  std::vector<Parameter> parameters() const {
    std::vector<Parameter> out{{"input.weight", in_w_, true}, {"input.bias", in_b_, true}};
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      auto bp = blocks_[i].parameters("block" + std::to_string(i) + ".");
      out.insert(out.end(), bp.begin(), bp.end());
    }
    out.push_back({"output.weight", out_w_, true});
    out.push_back({"output.bias", out_b_, true});
    return out;
  }

  std::vector<Tensor> buffers() const {
    std::vector<Tensor> out;
    for (const auto& b : blocks_) {
      auto bb = b.buffers();
      out.insert(out.end(), bb.begin(), bb.end());
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.value.zero_grad();
  }

  void zero_branch_outputs() {
    for (auto& b : blocks_) b.branch().zero_output();
  }

 private:
  ModelConfig cfg_;
  Tensor in_w_, in_b_;
  std::vector<ResidualBlock> blocks_;
  Tensor out_w_, out_b_;
  NormMode mode_ = NormMode::kTraining;
};

/// Deterministic model initialization from cfg.seed. Depth 0 yields the two projections only.
inline ResidualModel build_model(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  auto uniform = [&](Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> v(numel(shape));
    for (auto& e : v) e = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(v), true);
  };
  Tensor in_w = uniform({cfg.input_dim, cfg.width}, cfg.input_dim);
  Tensor in_b = uniform({cfg.width}, cfg.input_dim);
  std::vector<ResidualBlock> blocks;
  blocks.reserve(cfg.depth);
  for (std::size_t i = 0; i < cfg.depth; ++i)
    blocks.emplace_back(cfg.construction, ResidualBranch::affine_relu(cfg.width, cfg.hidden, rng), cfg.block);
  Tensor out_w = uniform({cfg.width, cfg.classes}, cfg.width);
  Tensor out_b = uniform({cfg.classes}, cfg.width);
  return ResidualModel(cfg, std::move(in_w), std::move(in_b), std::move(blocks), std::move(out_w), std::move(out_b));
}

inline Tensor forward_model(ResidualModel& model, const Tensor& x, ForwardTrace* trace = nullptr) {
  return model.forward(x, trace);
}

/// Copies parameter and buffer values from `src` into `dst`; layouts must match.
inline void copy_state(const ResidualModel& src, ResidualModel& dst) {
  auto sp = src.parameters();
  auto dp = dst.parameters();
  auto sb = src.buffers();
  auto db = dst.buffers();
  if (sp.size() != dp.size() || sb.size() != db.size()) throw ContractError("copy_state: model layouts differ");
  for (std::size_t i = 0; i < sp.size(); ++i) {
    if (sp[i].value.shape() != dp[i].value.shape()) throw ContractError("copy_state: parameter shapes differ");
    std::copy(sp[i].value.values().begin(), sp[i].value.values().end(), dp[i].value.mutable_data().begin());
  }
  for (std::size_t i = 0; i < sb.size(); ++i)
    std::copy(sb[i].values().begin(), sb[i].values().end(), db[i].mutable_data().begin());
}

}  // namespace rskip
