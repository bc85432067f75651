#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "datasets.hpp"
#include "residual_blocks.hpp"

namespace rskip {

struct TrainConfig {
  ModelConfig model;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 0.1;
  std::vector<double> milestones{0.5, 0.75};  // fractions of `epochs` where lr is multiplied by lr_decay
  double lr_decay = 0.1;
  std::size_t warmup_epochs = 1;  // run at lr * warmup_factor first
  double warmup_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 2e-4;
  std::uint64_t seed = 0;  // model initialization and batch order

  void validate() const {
    model.validate();
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(lr_decay > 0.0)) throw ConfigError("lr decay factor must be positive");
    if (!(warmup_factor > 0.0)) throw ConfigError("warm-up factor must be positive");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    for (double m : milestones)
      if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("lr milestones are fractions in [0, 1]");
  }

  /// Piecewise-constant schedule; epoch is 0-based.
  double lr_at(std::size_t epoch) const {
    double rate = epoch < warmup_epochs ? lr * warmup_factor : lr;
    for (double m : milestones)
      if (static_cast<double>(epoch) >= std::floor(m * static_cast<double>(epochs))) rate *= lr_decay;
    return rate;
  }
};

/// SGD with momentum; weight decay is added to the gradient only for parameters flagged `decay`.
class Sgd {
 public:
  Sgd(std::vector<Parameter> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.value.size(), 0.0);
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      auto values = p.value.mutable_data();
      const auto g = p.value.grad();
      auto& v = velocity_[i];
      const double wd = p.decay ? weight_decay_ : 0.0;
      for (std::size_t j = 0; j < values.size(); ++j) {
        v[j] = momentum_ * v[j] + g[j] + wd * values[j];
        values[j] -= lr * v[j];
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  const std::vector<Parameter>& parameters() const { return params_; }

 private:
  std::vector<Parameter> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
  double weight_decay_;
};

struct RunResult {
  double test_error = 1.0;
  std::vector<double> train_loss;  // one per completed epoch
  std::vector<double> val_loss;
  double wall_clock_seconds = 0.0;
  TrainConfig config;
  std::uint64_t seed = 0;
  bool failed = false;
  std::optional<std::size_t> failed_epoch;  // 1-based epoch whose loss became non-finite
};

struct TrainOutcome {
  ResidualModel model;
  RunResult result;
};

/// Mean loss and error rate of `model` on `data` in inference mode.
inline std::pair<double, double> evaluate(ResidualModel& model, const Dataset& data, std::size_t batch_size = 256) {
  const NormMode previous = model.mode();
  model.set_mode(NormMode::kInference);
  double loss = 0.0;
  std::size_t wrong = 0;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::span<const std::size_t> batch(idx.data() + start, std::min(batch_size, idx.size() - start));
    const auto labels = data.gather_labels(batch);
    const Tensor logits = model.forward(data.gather_features(batch)).detach();
    loss += softmax_cross_entropy(logits, labels, Reduction::kSum).item();
    const std::size_t classes = logits.cols();
    for (std::size_t r = 0; r < batch.size(); ++r) {
      const auto row = logits.data().subspan(r * classes, classes);
      const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (pred != labels[r]) ++wrong;
    }
  }
  model.set_mode(previous);
  const auto n = static_cast<double>(data.size());
  return {loss / n, static_cast<double>(wrong) / n};
}

namespace detail {

inline std::vector<std::vector<double>> snapshot(const ResidualModel& m) {
  std::vector<std::vector<double>> s;
  for (const auto& p : m.parameters()) s.push_back(p.value.values());
  for (const auto& b : m.buffers()) s.push_back(b.values());
  return s;
}

inline void restore(ResidualModel& m, const std::vector<std::vector<double>>& s) {
  std::size_t i = 0;
  for (auto& p : m.parameters()) {
    std::copy(s[i].begin(), s[i].end(), p.value.mutable_data().begin());
    ++i;
  }
  for (auto b : m.buffers()) {
    std::copy(s[i].begin(), s[i].end(), b.mutable_data().begin());
    ++i;
  }
}

}  // namespace detail

/// Trains a freshly built model. A non-finite loss marks the run failed, rolls the
/// model back to the start of the failing epoch and stops; the failed run reports
/// error 1.0.
inline TrainOutcome train_model(const TrainConfig& cfg, const DataSplit& data) {
  cfg.validate();
  if (data.train.size() == 0 || data.test.size() == 0) throw ContractError("training needs non-empty train and test sets");
  if (data.train.dim != cfg.model.input_dim || data.train.classes != cfg.model.classes)
    throw DimensionError("dataset shape does not match the model configuration");

  const auto start = std::chrono::steady_clock::now();
  ModelConfig mc = cfg.model;
  mc.seed = cfg.seed;
  TrainOutcome out{build_model(mc), {}};
  auto& model = out.model;
  auto& result = out.result;
  result.config = cfg;
  result.seed = cfg.seed;

  Sgd opt(model.parameters(), cfg.momentum, cfg.weight_decay);
  Rng order_rng(cfg.seed ^ 0x5DEECE66DULL);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const bool needs_pairs = uses_batch_norm(cfg.model.construction.kind);

  for (std::size_t epoch = 0; epoch < cfg.epochs && !result.failed; ++epoch) {
    const auto saved = detail::snapshot(model);
    model.set_mode(NormMode::kTraining);
    order_rng.shuffle(order.begin(), order.end());
    const double lr = cfg.lr_at(epoch);
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::span<const std::size_t> batch(order.data() + s, std::min(cfg.batch_size, order.size() - s));
      if (needs_pairs && batch.size() < 2) continue;
      Tensor loss = softmax_cross_entropy(model.forward(data.train.gather_features(batch)),
                                          data.train.gather_labels(batch));
      const double l = loss.item();
      if (!std::isfinite(l)) {
        total = l;
        break;
      }
      opt.zero_grad();
      loss.backward();
      opt.step(lr);
      total += l * static_cast<double>(batch.size());
      seen += batch.size();
    }
    const double train_loss = seen ? total / static_cast<double>(seen) : total;
    const double val_loss = std::isfinite(train_loss) ? evaluate(model, data.test).first : train_loss;
    result.train_loss.push_back(train_loss);
    result.val_loss.push_back(val_loss);
    if (!std::isfinite(train_loss) || !std::isfinite(val_loss)) {
      result.failed = true;
      result.failed_epoch = epoch + 1;
      detail::restore(model, saved);
    }
  }
  opt.zero_grad();
  model.set_mode(NormMode::kInference);
  result.test_error = result.failed ? 1.0 : evaluate(model, data.test).second;
  result.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

inline RunResult train(const TrainConfig& cfg, const DataSplit& data) { return train_model(cfg, data).result; }

/// Per-epoch curves as "epoch,train_loss,val_loss".
inline std::string curves_csv(const RunResult& r) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < r.train_loss.size(); ++e) os << e + 1 << ',' << r.train_loss[e] << ',' << r.val_loss[e] << '\n';
  return os.str();
}

struct MatrixRow {
  SkipConstruction construction;
  std::uint64_t seed = 0;
  double error = 1.0;
  bool failed = false;
  std::size_t failed_epoch = 0;  // 0 when the run completed

  friend bool operator==(const MatrixRow&, const MatrixRow&) = default;
};

struct MatrixSummary {
  SkipConstruction construction;
  std::size_t runs = 0;
  std::size_t failed_runs = 0;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for a single run
  double median = 0.0;

  friend bool operator==(const MatrixSummary&, const MatrixSummary&) = default;
};

struct MatrixResult {
  std::vector<MatrixRow> rows;
  std::vector<MatrixSummary> summaries;

  const MatrixSummary& summary(const SkipConstruction& c) const {
    for (const auto& s : summaries)
      if (s.construction == c) return s;
    throw ContractError("no summary for " + c.label());
  }
};

inline MatrixSummary summarize(const SkipConstruction& c, const std::vector<MatrixRow>& rows) {
  MatrixSummary s{c, 0, 0, 0.0, 0.0, 0.0};
  std::vector<double> errs;
  for (const auto& r : rows)
    if (r.construction == c) {
      errs.push_back(r.error);
      s.failed_runs += r.failed ? 1 : 0;
    }
  s.runs = errs.size();
  if (errs.empty()) return s;
  for (double e : errs) s.mean += e;
  s.mean /= static_cast<double>(errs.size());
  if (errs.size() > 1) {
    double sq = 0.0;
    for (double e : errs) sq += (e - s.mean) * (e - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(errs.size() - 1));
  }
  std::sort(errs.begin(), errs.end());
  const std::size_t n = errs.size();
  s.median = n % 2 ? errs[n / 2] : 0.5 * (errs[n / 2 - 1] + errs[n / 2]);
  return s;
}

/// Cross product of kinds and lambdas; kinds without a lambda appear once.
inline std::vector<SkipConstruction> expand_constructions(const std::vector<SkipKind>& kinds,
                                                          const std::vector<double>& lambdas) {
  std::vector<SkipConstruction> out;
  for (auto k : kinds) {
    if (!uses_lambda(k)) {
      SkipConstruction c{k, 1.0, 1.0};
      c.validate();
      out.push_back(c);
      continue;
    }
    for (double l : lambdas) {
      SkipConstruction c{k, l, 1.0};
      c.validate();
      out.push_back(c);
    }
  }
  return out;
}

/// Trains every construction under every seed. Failed runs stay in the table
/// with error 1.0 and the sweep continues.
inline MatrixResult run_matrix(const std::vector<SkipConstruction>& constructions, const std::vector<std::uint64_t>& seeds,
                               const TrainConfig& base, const DataSplit& data,
                               const std::function<void(const MatrixRow&)>& on_row = {}) {
  for (const auto& c : constructions) c.validate();
  if (seeds.empty()) throw ConfigError("matrix needs at least one seed");
  MatrixResult out;
  for (const auto& c : constructions) {
    for (auto seed : seeds) {
      TrainConfig cfg = base;
      cfg.model.construction = c;
      cfg.seed = seed;
      const auto r = train(cfg, data);
      out.rows.push_back({c, seed, r.test_error, r.failed, r.failed_epoch.value_or(0)});
      if (on_row) on_row(out.rows.back());
    }
    out.summaries.push_back(summarize(c, out.rows));
  }
  return out;
}

/// Columns: row,method,architecture,lambda,G,seed,error,std,median,failed
/// "run" rows carry one seed; "summary" rows carry mean error, std, median and the failed-run count.
inline std::string matrix_csv(const MatrixResult& m) {
  std::ostringstream os;
  os.precision(17);
  os << "row,method,architecture,lambda,G,seed,error,std,median,failed\n";
  for (const auto& s : m.summaries) {
    const auto& c = s.construction;
    for (const auto& r : m.rows)
      if (r.construction == c)
        os << "run," << c.label() << ',' << c.architecture() << ',' << c.lambda << ',' << c.norm_label() << ','
           << r.seed << ',' << r.error << ",,," << (r.failed ? r.failed_epoch : 0) << '\n';
    os << "summary," << c.label() << ',' << c.architecture() << ',' << c.lambda << ',' << c.norm_label() << ",,"
       << s.mean << ',' << s.stddev << ',' << s.median << ',' << s.failed_runs << '\n';
  }
  return os.str();
}

/// Parses matrix_csv output. For run rows the `failed` column holds the failing
/// epoch (0 = completed).
inline MatrixResult parse_matrix_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "row,method,architecture,lambda,G,seed,error,std,median,failed")
    throw FormatError("matrix csv: unexpected header");
  MatrixResult m;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 10) throw FormatError("matrix csv: expected 10 fields in '" + line + "'");
    const auto c = SkipConstruction::parse(f[1]);
    if (f[0] == "run") {
      const auto fe = std::stoull(f[9]);
      m.rows.push_back({c, std::stoull(f[5]), std::stod(f[6]), fe != 0, static_cast<std::size_t>(fe)});
    } else if (f[0] == "summary") {
      MatrixSummary s{c, 0, std::stoull(f[9]), std::stod(f[6]), std::stod(f[7]), std::stod(f[8])};
      for (const auto& r : m.rows) s.runs += r.construction == c ? 1 : 0;
      m.summaries.push_back(s);
    } else {
      throw FormatError("matrix csv: unknown row type '" + f[0] + "'");
    }
  }
  return m;
}

}  // namespace rskip
