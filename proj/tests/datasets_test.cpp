#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "support.hpp"

using namespace rskip;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("rskip_datasets_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// Writes `records` CIFAR records; record r has label r % 10 and pixel i equal to (r + i) % 256.
void write_batch(const fs::path& file, std::size_t records, int bad_label_at = -1) {
  std::ofstream out(file, std::ios::binary);
  std::vector<char> rec(kCifarRecordBytes);
  for (std::size_t r = 0; r < records; ++r) {
    rec[0] = static_cast<char>(static_cast<int>(r) == bad_label_at ? 10 : r % 10);
    for (std::size_t i = 0; i < kCifarImageBytes; ++i) rec[1 + i] = static_cast<char>((r + i) % 256);
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
}

}  // namespace

TEST(Synthetic, NoiseFreeSpiralIsSeparableByArm) {
  DatasetSpec spec;
  spec.noise = 0.0;
  spec.train_count = 600;
  spec.classes = 3;
  for (double turns : {0.5, 1.0}) {
    spec.spiral_turns = turns;
    const auto split = gen_synthetic(spec);
    for (std::size_t i = 0; i < split.train.size(); ++i)
      ASSERT_EQ(spiral_arm(split.train.features[2 * i], split.train.features[2 * i + 1], 3, turns),
                split.train.labels[i]);
  }
}

TEST(Synthetic, BalancedAndDeterministic) {
  DatasetSpec spec;
  spec.train_count = 100;
  spec.test_count = 31;
  spec.classes = 4;
  spec.seed = 5;
  const auto a = gen_synthetic(spec), b = gen_synthetic(spec);
  EXPECT_EQ(a.train.features, b.train.features);
  EXPECT_EQ(a.test.labels, b.test.labels);
  std::vector<int> counts(4);
  for (int y : a.train.labels) ++counts[static_cast<std::size_t>(y)];
  EXPECT_EQ(counts, (std::vector<int>{25, 25, 25, 25}));
  spec.seed = 6;
  EXPECT_NE(gen_synthetic(spec).train.features, a.train.features);
}

TEST(Synthetic, MoonsAndValidation) {
  DatasetSpec spec;
  spec.source = DatasetSource::kMoons;
  spec.classes = 2;
  const auto split = gen_synthetic(spec);
  EXPECT_EQ(split.train.size(), spec.train_count);
  EXPECT_EQ(split.train.classes, 2u);
  spec.classes = 3;
  EXPECT_THROW(gen_synthetic(spec), ConfigError);
  spec.source = DatasetSource::kSpiral;
  spec.classes = 1;
  EXPECT_THROW(gen_synthetic(spec), ConfigError);
  spec.classes = 3;
  spec.noise = -1.0;
  EXPECT_THROW(gen_synthetic(spec), ConfigError);
  EXPECT_THROW(parse_source("imagenet"), ConfigError);
  EXPECT_EQ(parse_source("cifar10-binary"), DatasetSource::kCifar10);
}

TEST(Cifar, ParsesFullBatchBitExact) {
  const auto dir = temp_dir("full");
  write_batch(dir / "data_batch_1.bin", 10000);
  const auto d = read_cifar10_batch(dir / "data_batch_1.bin");
  ASSERT_EQ(d.size(), 10000u);
  ASSERT_EQ(d.dim, 3072u);
  for (std::size_t r : {0u, 1u, 4999u, 9999u}) {
    EXPECT_EQ(d.labels[r], static_cast<int>(r % 10));
    for (std::size_t i : {0u, 1023u, 1024u, 3071u})
      EXPECT_EQ(d.features[r * 3072 + i], static_cast<double>((r + i) % 256) / 255.0);
  }
  fs::remove_all(dir);
}

TEST(Cifar, TruncatedFileNamesTheFile) {
  const auto dir = temp_dir("trunc");
  const auto file = dir / "data_batch_1.bin";
  write_batch(file, 3);
  fs::resize_file(file, 3 * kCifarRecordBytes - 5);
  try {
    read_cifar10_batch(file);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(file.string()), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Cifar, LabelOutOfRangeIsRejected) {
  const auto dir = temp_dir("label");
  write_batch(dir / "test_batch.bin", 5, 3);
  EXPECT_THROW(read_cifar10_batch(dir / "test_batch.bin"), FormatError);
  EXPECT_THROW(read_cifar10_batch(dir / "missing.bin"), FormatError);
  fs::remove_all(dir);
}

TEST(Cifar, LoadStratifiesAndStandardizes) {
  const auto dir = temp_dir("load");
  write_batch(dir / "data_batch_1.bin", 200);
  write_batch(dir / "data_batch_2.bin", 100);
  write_batch(dir / "test_batch.bin", 100);
  const auto a = load_cifar10(dir, 50, 20, 3);
  const auto b = load_cifar10(dir, 50, 20, 3);
  EXPECT_EQ(a.train.features, b.train.features);
  EXPECT_EQ(a.train.size(), 50u);
  EXPECT_EQ(a.test.size(), 20u);
  std::vector<int> counts(10);
  for (int y : a.train.labels) ++counts[static_cast<std::size_t>(y)];
  for (int c : counts) EXPECT_EQ(c, 5);
  const std::size_t plane = 1024;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double s = 0.0;
    for (std::size_t r = 0; r < a.train.size(); ++r)
      for (std::size_t p = 0; p < plane; ++p) s += a.train.features[r * 3072 + ch * plane + p];
    EXPECT_NEAR(s / static_cast<double>(a.train.size() * plane), 0.0, 1e-9);
  }
  const auto full = load_cifar10(dir, 0, 0, 3);
  EXPECT_EQ(full.train.size(), 300u);
  fs::remove_all(dir);
  EXPECT_THROW(load_cifar10(dir, 10, 10, 0), FormatError);
}

TEST(Cifar, StratifiedSubsetIsDeterministic) {
  Dataset d{1, 3, {}, {}};
  for (int i = 0; i < 30; ++i) {
    const double v = i;
    d.push(std::span(&v, 1), i % 3);
  }
  Rng r1(4), r2(4);
  const auto a = stratified_subset(d, 7, r1), b = stratified_subset(d, 7, r2);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 7u);
  Rng r3(4);
  EXPECT_EQ(stratified_subset(d, 0, r3).size(), 30u);
}
