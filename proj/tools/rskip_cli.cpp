#include <openssl/evp.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rskip/rskip.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace rskip;

namespace {

struct Options {
  std::vector<std::string> constructions;
  double lambda = 0.0;  // 0: take it from the construction label
  std::size_t depth = 16;
  std::size_t width = 64;
  std::string dataset = "spiral";
  std::string data_path;
  std::size_t subset = 1000;
  std::size_t epochs = 40;
  std::uint64_t seed = 0;
  std::size_t seeds = 5;
  std::string out = "rskip_out";
  double lr = 0.01;
  std::size_t samples = 2000;
  bool zero_branch = false;
  std::size_t instances = 0;
  std::size_t max_lambda = 4;
};

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Run {
 public:
  Run(std::string command, const Options& opts) : dir_(opts.out) {
    fs::create_directories(dir_);
    manifest_["command"] = std::move(command);
  }

  json& config() { return manifest_["config"]; }

  fs::path write(const std::string& name, const std::string& content) {
    const auto path = dir_ / name;
    std::ofstream(path, std::ios::binary) << content;
    record(path);
    return path;
  }

  void record(const fs::path& path) {
    const auto bytes = read_file(path);
    manifest_["artifacts"].push_back({{"path", path.filename().string()}, {"bytes", bytes.size()}, {"sha256", sha256_hex(bytes)}});
  }

  void finish() {
    const auto path = dir_ / "manifest.json";
    std::ofstream(path) << manifest_.dump(2) << '\n';
    std::cout << "wrote " << path.string() << '\n';
  }

 private:
  fs::path dir_;
  json manifest_;
};

SkipConstruction resolve(const std::string& text, double lambda) {
  if (auto kind = kind_from_name(text)) {
    SkipConstruction c{*kind, 1.0, 1.0};
    if (lambda > 0.0) {
      if (*kind == SkipKind::kContractedFLN) c.residual_scale = lambda;
      else c.lambda = lambda;
    }
    c.validate();
    return c;
  }
  SkipConstruction c = SkipConstruction::parse(text);
  if (lambda > 0.0) {
    if (c.kind == SkipKind::kContractedFLN) c.residual_scale = lambda;
    else if (uses_lambda(c.kind)) c.lambda = lambda;
    else throw ConfigError(c.label() + " does not take --lambda");
    c.validate();
  }
  return c;
}

DatasetSpec dataset_spec(const Options& o) {
  DatasetSpec spec = desk_dataset();
  spec.source = parse_source(o.dataset);
  if (spec.source == DatasetSource::kMoons) spec.classes = 2;
  if (spec.source == DatasetSource::kCifar10) {
    std::string path = o.data_path;
    if (path.empty())
      if (const char* env = std::getenv("RSKIP_DATA_DIR")) path = env;
    if (path.empty()) throw ConfigError("cifar10 needs --data-path or RSKIP_DATA_DIR");
    spec.path = path;
    spec.subset = o.subset;
    spec.test_subset = o.subset;
    spec.classes = kCifarClasses;
  }
  return spec;
}

TrainConfig train_config(const Options& o, const SkipConstruction& c, const Dataset& train) {
  TrainConfig cfg = desk_train_config(c);
  cfg.model.depth = o.depth;
  cfg.model.width = o.width;
  cfg.model.input_dim = train.dim;
  cfg.model.classes = train.classes;
  cfg.epochs = o.epochs;
  cfg.lr = o.lr;
  cfg.seed = o.seed;
  return cfg;
}

json describe(const SkipConstruction& c) {
  return {{"label", c.label()}, {"kind", kind_name(c.kind)}, {"lambda", c.lambda},
          {"residual_scale", c.residual_scale}, {"architecture", c.architecture()}};
}

json describe(const TrainConfig& cfg) {
  return {{"construction", describe(cfg.model.construction)},
          {"depth", cfg.model.depth},
          {"input_dim", cfg.model.input_dim},
          {"width", cfg.model.width},
          {"hidden", cfg.model.hidden},
          {"classes", cfg.model.classes},
          {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"lr", cfg.lr},
          {"milestones", cfg.milestones},
          {"lr_decay", cfg.lr_decay},
          {"warmup_epochs", cfg.warmup_epochs},
          {"warmup_factor", cfg.warmup_factor},
          {"momentum", cfg.momentum},
          {"weight_decay", cfg.weight_decay},
          {"norm_eps", cfg.model.block.norm_eps},
          {"bn_momentum", cfg.model.block.bn_momentum},
          {"seed", cfg.seed}};
}

json describe(const DatasetSpec& s) {
  json j{{"source", source_name(s.source)}, {"seed", s.seed}};
  if (s.source == DatasetSource::kCifar10) {
    j["path"] = s.path.string();
    j["subset"] = s.subset;
    j["test_subset"] = s.test_subset;
  } else {
    j["classes"] = s.classes;
    j["train_count"] = s.train_count;
    j["test_count"] = s.test_count;
    j["noise"] = s.noise;
    j["spiral_turns"] = s.spiral_turns;
  }
  return j;
}

SkipConstruction single_construction(const Options& o) {
  if (o.constructions.size() > 1) throw ConfigError("this command takes a single --construction");
  return resolve(o.constructions.empty() ? "plain" : o.constructions.front(), o.lambda);
}

int cmd_train(const Options& o) {
  const auto spec = dataset_spec(o);
  const auto data = load_dataset(spec);
  const auto cfg = train_config(o, single_construction(o), data.train);
  auto out = train_model(cfg, data);
  const auto& r = out.result;

  Run run("train", o);
  run.config() = {{"train", describe(cfg)}, {"dataset", describe(spec)}};
  MatrixResult table;
  table.rows.push_back({cfg.model.construction, cfg.seed, r.test_error, r.failed, r.failed_epoch.value_or(0)});
  table.summaries.push_back(summarize(cfg.model.construction, table.rows));
  run.write("results.csv", matrix_csv(table));
  run.write("curves.csv", curves_csv(r));
  const auto ckpt = fs::path(o.out) / "checkpoint.bin";
  save_checkpoint(out.model, ckpt);
  run.record(ckpt);
  run.finish();
  std::cout << cfg.model.construction.label() << " seed " << cfg.seed << ": test error " << r.test_error
            << (r.failed ? " (diverged at epoch " + std::to_string(*r.failed_epoch) + ")" : "") << '\n';
  return 0;
}

int cmd_matrix(const Options& o) {
  const auto spec = dataset_spec(o);
  const auto data = load_dataset(spec);
  std::vector<SkipConstruction> cs;
  for (const auto& t : o.constructions) cs.push_back(resolve(t, o.lambda));
  if (cs.empty()) cs = desk_matrix_constructions();
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < o.seeds; ++i) seeds.push_back(o.seed + i);
  const auto base = train_config(o, SkipConstruction::plain(), data.train);

  const auto m = run_matrix(cs, seeds, base, data, [](const MatrixRow& r) {
    std::cout << r.construction.label() << " seed " << r.seed << ": " << r.error << (r.failed ? " (diverged)" : "")
              << std::endl;
  });
  Run run("matrix", o);
  json labels = json::array();
  for (const auto& c : cs) labels.push_back(describe(c));
  run.config() = {{"base", describe(base)}, {"constructions", labels}, {"seeds", seeds}, {"dataset", describe(spec)}};
  run.write("matrix.csv", matrix_csv(m));
  run.finish();
  return 0;
}

int cmd_gradnorm(const Options& o) {
  const auto spec = dataset_spec(o);
  const auto data = load_dataset(spec);
  const auto cfg = train_config(o, single_construction(o), data.train);
  auto out = train_model(cfg, data);
  if (o.zero_branch) out.model.zero_branch_outputs();
  const SweepOptions sweep{o.samples, 100, o.seed};
  const auto report = gradient_norm_sweep(out.model, data.train, sweep);

  Run run("gradnorm", o);
  run.config() = {{"train", describe(cfg)},
                  {"dataset", describe(spec)},
                  {"samples", sweep.samples},
                  {"zero_branch", o.zero_branch},
                  {"trained_test_error", out.result.test_error},
                  {"training_failed", out.result.failed}};
  run.write("gradnorm.csv", report.to_csv());
  if (uses_layer_norm(cfg.model.construction.kind))
    run.write("effective_scale.csv", effective_scale_sweep(out.model, data.test, sweep).to_csv());
  run.finish();
  std::cout << report.construction << ": gradient-norm spread " << report.spread() << '\n';
  return 0;
}

int cmd_ratio_check(const Options& o) {
  RatioCheckOptions opts;
  opts.lambdas.clear();
  for (std::size_t l = 1; l <= o.max_lambda; ++l) opts.lambdas.push_back(l);
  opts.instances = o.instances ? o.instances : 100;
  opts.seed = o.seed;
  const auto rows = ratio_check(opts);
  Run run("ratio-check", o);
  run.config() = {{"lambdas", opts.lambdas}, {"instances", opts.instances}, {"batch", opts.batch},
                  {"width", opts.width}, {"hidden", opts.hidden}, {"seed", opts.seed}};
  const auto csv = ratio_check_csv(rows);
  run.write("ratio_check.csv", csv);
  run.finish();
  std::cout << csv;
  bool ok = true;
  for (const auto& r : rows) ok = ok && r.max_reconstruction_error <= 1e-10 && r.max_ratio_discrepancy <= 1e-10;
  return ok ? 0 : 1;
}

int cmd_gradcheck(const Options& o) {
  GradcheckSuiteOptions opts;
  opts.instances = o.instances ? o.instances : 20;
  opts.seed = o.seed;
  opts.max_lambda = o.max_lambda;
  const auto rows = gradcheck_suite(opts);
  Run run("gradcheck", o);
  run.config() = {{"instances", opts.instances}, {"seed", opts.seed}, {"eps", opts.eps}, {"tol", opts.tol},
                  {"max_lambda", opts.max_lambda}};
  const auto csv = gradcheck_suite_csv(rows);
  run.write("gradcheck.csv", csv);
  run.finish();
  std::cout << csv;
  bool ok = true;
  for (const auto& r : rows) ok = ok && r.passed;
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Residual skip-connection experiments"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub, bool training) {
    sub->add_option("--out", o.out, "Output directory")->capture_default_str();
    sub->add_option("--seed", o.seed, "Seed")->capture_default_str();
    if (!training) return;
    sub->add_option("--width", o.width, "Block width")->capture_default_str();
    sub->add_option("--construction", o.constructions,
                    "Construction label (2xSkip, 2rSkip+LN, LN(x+3F), ...) or kind name (xskip-ln, ...)");
    sub->add_option("--lambda", o.lambda, "Shortcut scale / recursion depth / residual scale override");
    sub->add_option("--depth", o.depth, "Number of residual blocks")->capture_default_str();
    sub->add_option("--dataset", o.dataset, "spiral, moons or cifar10")->capture_default_str();
    sub->add_option("--data-path", o.data_path, "CIFAR-10 binary directory (default $RSKIP_DATA_DIR)");
    sub->add_option("--subset", o.subset, "CIFAR-10 train/test subset size, 0 for all")->capture_default_str();
    sub->add_option("--epochs", o.epochs, "Training epochs")->capture_default_str();
    sub->add_option("--lr", o.lr, "Peak learning rate")->capture_default_str();
  };

  auto* train = app.add_subcommand("train", "Train one model");
  common(train, true);
  auto* matrix = app.add_subcommand("matrix", "Train every construction under several seeds");
  common(matrix, true);
  matrix->add_option("--seeds", o.seeds, "Number of consecutive seeds starting at --seed")->capture_default_str();
  auto* gradnorm = app.add_subcommand("gradnorm", "Per-block gradient norms of a trained model");
  common(gradnorm, true);
  gradnorm->add_option("--samples", o.samples, "Samples in the sweep")->capture_default_str();
  gradnorm->add_flag("--zero-branch", o.zero_branch, "Zero every residual branch before the sweep");
  auto* ratio = app.add_subcommand("ratio-check", "Check the unrolled decomposition of recursive LN blocks");
  common(ratio, false);
  ratio->add_option("--max-lambda", o.max_lambda, "Check lambda = 1..max")->capture_default_str();
  ratio->add_option("--instances", o.instances, "Random instances per lambda (default 100)");
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every op and construction");
  common(grad, false);
  grad->add_option("--max-lambda", o.max_lambda, "Largest lambda checked")->capture_default_str();
  grad->add_option("--instances", o.instances, "Random instances per target (default 20)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (train->parsed()) return cmd_train(o);
    if (matrix->parsed()) return cmd_matrix(o);
    if (gradnorm->parsed()) return cmd_gradnorm(o);
    if (ratio->parsed()) return cmd_ratio_check(o);
    if (grad->parsed()) return cmd_gradcheck(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
