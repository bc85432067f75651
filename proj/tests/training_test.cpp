#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <numeric>
#include <vector>

#include "support.hpp"

using namespace rskip;

namespace {

TrainConfig small_train(const SkipConstruction& c, std::size_t depth = 3, std::size_t epochs = 3) {
  TrainConfig cfg;
  cfg.model.construction = c;
  cfg.model.depth = depth;
  cfg.model.width = 8;
  cfg.model.hidden = 4;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.lr = 0.05;
  return cfg;
}

DataSplit spiral(std::size_t n = 96) {
  DatasetSpec spec;
  spec.train_count = n;
  spec.test_count = n / 2;
  spec.seed = 2;
  return gen_synthetic(spec);
}

/// Two classes split by the line x0 + x1 = 0 with a margin of 0.2.
DataSplit separable(std::uint64_t seed) {
  Rng rng(seed);
  DataSplit s{{2, 2, {}, {}}, {2, 2, {}, {}}};
  for (auto* d : {&s.train, &s.test})
    for (int i = 0; i < 200; ++i) {
      double p[2];
      do {
        p[0] = rng.uniform(-1.0, 1.0);
        p[1] = rng.uniform(-1.0, 1.0);
      } while (std::abs(p[0] + p[1]) < 0.2);
      d->push(p, p[0] + p[1] > 0.0 ? 1 : 0);
    }
  return s;
}

}  // namespace

TEST(Train, ZeroEpochsReportsTheUntrainedModel) {
  const auto data = spiral(300);
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto cfg = small_train(SkipConstruction::plain(), 3, 0);
    cfg.seed = seed;
    const auto r = train(cfg, data);
    ModelConfig mc = cfg.model;
    mc.seed = seed;
    auto fresh = build_model(mc);
    EXPECT_EQ(r.test_error, evaluate(fresh, data.test).second);
    EXPECT_TRUE(r.train_loss.empty());
    total += r.test_error;
  }
  EXPECT_NEAR(total / 10.0, 1.0 - 1.0 / 3.0, 0.15);
}

TEST(Train, SeparableDataIsLearnedByShallowPlainSkip) {
  TrainConfig cfg = small_train(SkipConstruction::plain(), 2, 50);
  cfg.model.classes = 2;
  cfg.lr = 0.01;
  const auto r = train(cfg, separable(3));
  EXPECT_FALSE(r.failed);
  EXPECT_LT(r.test_error, 0.05);
}

TEST(Train, CurvesHaveOneEntryPerEpoch) {
  const auto r = train(small_train(SkipConstruction::xskip_bn(1.0), 3, 4), spiral());
  EXPECT_EQ(r.train_loss.size(), 4u);
  EXPECT_EQ(r.val_loss.size(), 4u);
  EXPECT_GE(r.test_error, 0.0);
  EXPECT_LE(r.test_error, 1.0);
  EXPECT_EQ(curves_csv(r).substr(0, 25), "epoch,train_loss,val_loss");
}

TEST(Train, DeterministicGivenSeed) {
  for (const auto& c : {SkipConstruction::rskip_ln(2), SkipConstruction::xskip_bn(2.0), SkipConstruction::wskip_ln()}) {
    auto cfg = small_train(c);
    cfg.seed = 8;
    const auto a = train(cfg, spiral()), b = train(cfg, spiral());
    EXPECT_EQ(a.train_loss, b.train_loss);
    EXPECT_EQ(a.val_loss, b.val_loss);
    EXPECT_EQ(a.test_error, b.test_error);
    cfg.seed = 9;
    EXPECT_NE(train(cfg, spiral()).train_loss, a.train_loss);
  }
}

TEST(Train, DivergenceIsRecordedNotThrown) {
  auto cfg = small_train(SkipConstruction::xskip(3.0), 12, 5);
  cfg.lr = 5.0;
  cfg.warmup_epochs = 0;
  const auto r = train(cfg, spiral());
  EXPECT_TRUE(r.failed);
  ASSERT_TRUE(r.failed_epoch.has_value());
  EXPECT_EQ(r.test_error, 1.0);
  EXPECT_EQ(r.train_loss.size(), *r.failed_epoch);
}

TEST(Train, ConfigValidation) {
  auto cfg = small_train(SkipConstruction::plain());
  cfg.lr = 0.0;
  EXPECT_THROW(train(cfg, spiral()), ConfigError);
  cfg = small_train(SkipConstruction::plain());
  cfg.weight_decay = -1.0;
  EXPECT_THROW(train(cfg, spiral()), ConfigError);
  cfg = small_train(SkipConstruction::plain());
  cfg.model.input_dim = 3;
  EXPECT_THROW(train(cfg, spiral()), DimensionError);
}

TEST(Schedule, WarmupAndMilestones) {
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.lr = 0.1;
  cfg.warmup_epochs = 1;
  cfg.warmup_factor = 0.1;
  EXPECT_DOUBLE_EQ(cfg.lr_at(0), 0.01);
  EXPECT_DOUBLE_EQ(cfg.lr_at(1), 0.1);
  EXPECT_DOUBLE_EQ(cfg.lr_at(19), 0.1);
  EXPECT_DOUBLE_EQ(cfg.lr_at(20), 0.1 * 0.1);
  EXPECT_DOUBLE_EQ(cfg.lr_at(30), 0.1 * 0.1 * 0.1);
}

TEST(Sgd, WeightDecaySkipsNormalizationParameters) {
  ModelConfig mc;
  mc.construction = SkipConstruction::wskip_ln();
  mc.depth = 2;
  mc.width = 4;
  mc.hidden = 3;
  auto model = build_model(mc);
  const auto params = model.parameters();
  std::vector<std::vector<double>> before;
  for (auto p : params) {
    before.push_back(p.value.values());
    for (auto& g : p.value.mutable_grad()) g = 1.0;  // frozen gradient
  }
  const double lr = 0.5, wd = 0.1;
  Sgd opt(params, 0.0, wd);
  opt.step(lr);
  std::size_t decayed = 0, exempt = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const bool is_norm = params[i].name.find(".ln") != std::string::npos || params[i].name.find("w_skip") != std::string::npos;
    EXPECT_EQ(params[i].decay, !is_norm) << params[i].name;
    const auto after = params[i].value.values();
    for (std::size_t j = 0; j < after.size(); ++j) {
      const double expected = params[i].decay ? before[i][j] - lr * (1.0 + wd * before[i][j]) : before[i][j] - lr;
      EXPECT_DOUBLE_EQ(after[j], expected) << params[i].name;
    }
    (params[i].decay ? decayed : exempt) += 1;
  }
  EXPECT_EQ(exempt, 2u * (1 + 2));
  EXPECT_EQ(decayed, 4u + 2u * 4);
}

TEST(Sgd, MomentumAccumulates) {
  Tensor p = Tensor::vector({1.0}, true);
  Sgd opt({{"p", p, false}}, 0.9, 0.0);
  for (int i = 0; i < 2; ++i) {
    p.mutable_grad()[0] = 1.0;
    opt.step(0.1);
  }
  EXPECT_DOUBLE_EQ(p.at(0), 1.0 - 0.1 * 1.0 - 0.1 * 1.9);
}

TEST(Matrix, BookkeepingAndSummaries) {
  const std::vector<SkipConstruction> cs{SkipConstruction::xskip(1), SkipConstruction::xskip(2),
                                         SkipConstruction::xskip_ln(2), SkipConstruction::rskip_ln(2)};
  std::size_t streamed = 0;
  const auto m = run_matrix(cs, {0, 1, 2, 3, 4}, small_train(SkipConstruction::plain(), 2, 1), spiral(48),
                            [&](const MatrixRow&) { ++streamed; });
  EXPECT_EQ(m.rows.size(), 20u);
  EXPECT_EQ(m.summaries.size(), 4u);
  EXPECT_EQ(streamed, 20u);
  const std::string csv = matrix_csv(m);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 20 + 4);
  for (const auto& s : m.summaries) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& r : m.rows)
      if (r.construction == s.construction) {
        total += r.error;
        ++n;
      }
    EXPECT_EQ(n, 5u);
    EXPECT_DOUBLE_EQ(s.mean, total / 5.0);
  }
}

TEST(Matrix, CsvRoundTrip) {
  MatrixResult m;
  const auto a = SkipConstruction::xskip(2), b = SkipConstruction::contracted_ln(3);
  m.rows = {{a, 0, 0.125, false, 0}, {a, 1, 1.0, true, 3}, {b, 0, 0.1 + 0.2, false, 0}, {b, 7, 1.0 / 3.0, false, 0}};
  m.summaries = {summarize(a, m.rows), summarize(b, m.rows)};
  const auto parsed = parse_matrix_csv(matrix_csv(m));
  EXPECT_EQ(parsed.rows, m.rows);
  EXPECT_EQ(parsed.summaries, m.summaries);
  EXPECT_THROW(parse_matrix_csv("bad header\n"), FormatError);
}

TEST(Matrix, SummaryStatistics) {
  const auto c = SkipConstruction::plain();
  const std::vector<MatrixRow> rows{{c, 0, 0.1, false, 0}, {c, 1, 0.4, false, 0}, {c, 2, 1.0, true, 2},
                                    {c, 3, 0.3, false, 0}};
  const auto s = summarize(c, rows);
  EXPECT_EQ(s.runs, 4u);
  EXPECT_EQ(s.failed_runs, 1u);
  EXPECT_DOUBLE_EQ(s.mean, 0.45);
  EXPECT_DOUBLE_EQ(s.median, 0.35);
  const double var = ((0.1 - 0.45) * (0.1 - 0.45) + (0.4 - 0.45) * (0.4 - 0.45) + (1.0 - 0.45) * (1.0 - 0.45) +
                      (0.3 - 0.45) * (0.3 - 0.45)) / 3.0;
  EXPECT_DOUBLE_EQ(s.stddev, std::sqrt(var));
}

TEST(Matrix, ExpandConstructions) {
  const auto cs = expand_constructions({SkipKind::kPlainSkip, SkipKind::kXSkip, SkipKind::kRSkipLN}, {1.0, 2.0});
  ASSERT_EQ(cs.size(), 5u);
  EXPECT_EQ(cs[0], SkipConstruction::plain());
  EXPECT_EQ(cs[4], SkipConstruction::rskip_ln(2));
  EXPECT_THROW(expand_constructions({SkipKind::kRSkipLN}, {1.5}), ConfigError);
}
