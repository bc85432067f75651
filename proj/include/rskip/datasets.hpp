#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "random.hpp"
#include "tensor.hpp"

namespace rskip {

/// Row-major feature matrix with integer labels.
struct Dataset {
  std::size_t dim = 0;
  std::size_t classes = 0;
  std::vector<double> features;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }

  void push(std::span<const double> x, int label) {
    features.insert(features.end(), x.begin(), x.end());
    labels.push_back(label);
  }

  Tensor gather_features(std::span<const std::size_t> idx) const {
    std::vector<double> out;
    out.reserve(idx.size() * dim);
    for (auto i : idx) out.insert(out.end(), features.begin() + i * dim, features.begin() + (i + 1) * dim);
    return Tensor({idx.size(), dim}, std::move(out));
  }

  std::vector<int> gather_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }

  /// First `n` samples.
  Dataset head(std::size_t n) const {
    Dataset d{dim, classes, {}, {}};
    n = std::min(n, size());
    d.features.assign(features.begin(), features.begin() + n * dim);
    d.labels.assign(labels.begin(), labels.begin() + n);
    return d;
  }
};

struct DataSplit {
  Dataset train;
  Dataset test;
};

enum class DatasetSource { kSpiral, kMoons, kCifar10 };

inline const char* source_name(DatasetSource s) {
  switch (s) {
    case DatasetSource::kSpiral: return "spiral";
    case DatasetSource::kMoons: return "moons";
    case DatasetSource::kCifar10: return "cifar10";
  }
  return "?";
}

inline DatasetSource parse_source(const std::string& name) {
  if (name == "spiral" || name == "synthetic-spiral") return DatasetSource::kSpiral;
  if (name == "moons" || name == "synthetic-moons") return DatasetSource::kMoons;
  if (name == "cifar10" || name == "cifar10-binary") return DatasetSource::kCifar10;
  throw ConfigError("unknown dataset '" + name + "'");
}

struct DatasetSpec {
  DatasetSource source = DatasetSource::kSpiral;
  std::filesystem::path path;  // cifar10 directory
  std::size_t classes = 3;
  std::size_t train_count = 1024;
  std::size_t test_count = 512;
  double noise = 0.1;
  double spiral_turns = 1.0;
  std::size_t subset = 1000;       // cifar10 training subset; 0 keeps everything
  std::size_t test_subset = 1000;  // cifar10 test subset; 0 keeps everything
  std::uint64_t seed = 0;
};

/// Spiral arm index of a noise-free spiral point; inverse of the generator below.
inline int spiral_arm(double px, double py, std::size_t classes, double turns) {
  const double r = std::hypot(px, py);
  const double two_pi = 2.0 * std::numbers::pi;
  const double offset = std::atan2(py, px) - two_pi * turns * r;
  const double k = std::round(offset / (two_pi / static_cast<double>(classes)));
  const auto K = static_cast<long long>(classes);
  return static_cast<int>(((static_cast<long long>(k) % K) + K) % K);
}

/// Spiral arms or two moons with isotropic Gaussian noise. Labels cycle through
/// the classes within each split, so every split is balanced to within one sample.
inline DataSplit gen_synthetic(const DatasetSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (spec.source == DatasetSource::kMoons && spec.classes != 2) throw ConfigError("moons data has exactly 2 classes");
  if (spec.source == DatasetSource::kCifar10) throw ConfigError("gen_synthetic cannot produce cifar10");
  if (spec.train_count == 0 || spec.test_count == 0) throw ConfigError("sample counts must be positive");
  if (!(spec.noise >= 0.0)) throw ConfigError("noise must be non-negative");

  Rng rng(spec.seed);
  const double two_pi = 2.0 * std::numbers::pi;
  auto sample = [&](int label, Dataset& out) {
    double p[2];
    if (spec.source == DatasetSource::kSpiral) {
      const double t = rng.uniform(0.1, 1.0);
      const double angle = two_pi * label / static_cast<double>(spec.classes) + two_pi * spec.spiral_turns * t;
      p[0] = t * std::cos(angle);
      p[1] = t * std::sin(angle);
    } else {
      const double theta = rng.uniform(0.0, std::numbers::pi);
      p[0] = label == 0 ? std::cos(theta) : 1.0 - std::cos(theta);
      p[1] = label == 0 ? std::sin(theta) : 0.5 - std::sin(theta);
    }
    p[0] += spec.noise * rng.normal();
    p[1] += spec.noise * rng.normal();
    out.push(p, label);
  };

  DataSplit split{{2, spec.classes, {}, {}}, {2, spec.classes, {}, {}}};
  for (std::size_t i = 0; i < spec.train_count; ++i) sample(static_cast<int>(i % spec.classes), split.train);
  for (std::size_t i = 0; i < spec.test_count; ++i) sample(static_cast<int>(i % spec.classes), split.test);
  return split;
}

inline constexpr std::size_t kCifarImageBytes = 3072;
inline constexpr std::size_t kCifarRecordBytes = 1 + kCifarImageBytes;
inline constexpr std::size_t kCifarChannels = 3;
inline constexpr std::size_t kCifarClasses = 10;

/// Parses one CIFAR-10 binary batch: records of 1 label byte + 3072 channel-planar
/// pixel bytes. Pixels are scaled to [0, 1].
inline Dataset read_cifar10_batch(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open " + file.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0)
    throw FormatError(file.string() + ": size " + std::to_string(bytes.size()) + " is not a positive multiple of " +
                      std::to_string(kCifarRecordBytes));
  Dataset d{kCifarImageBytes, kCifarClasses, {}, {}};
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  d.features.resize(n * kCifarImageBytes);
  d.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9)
      throw FormatError(file.string() + ": record " + std::to_string(r) + " has label byte " + std::to_string(rec[0]));
    d.labels[r] = rec[0];
    for (std::size_t i = 0; i < kCifarImageBytes; ++i) d.features[r * kCifarImageBytes + i] = rec[1 + i] / 255.0;
  }
  return d;
}

/// Indices of a class-stratified subset of `n` samples (all when n == 0 or n >= size).
inline std::vector<std::size_t> stratified_subset(const Dataset& d, std::size_t n, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(d.classes);
  for (std::size_t i = 0; i < d.size(); ++i) by_class[static_cast<std::size_t>(d.labels[i])].push_back(i);
  std::vector<std::size_t> out;
  if (n == 0 || n >= d.size()) {
    out.resize(d.size());
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
  }
  for (std::size_t c = 0; c < d.classes; ++c) {
    auto& idx = by_class[c];
    rng.shuffle(idx.begin(), idx.end());
    const std::size_t quota = n / d.classes + (c < n % d.classes ? 1 : 0);
    idx.resize(std::min(quota, idx.size()));
    out.insert(out.end(), idx.begin(), idx.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Loads data_batch_{1..5}.bin and test_batch.bin from `dir`, draws stratified
/// subsets, and standardizes each colour channel with training-subset statistics.
inline DataSplit load_cifar10(const std::filesystem::path& dir, std::size_t train_subset, std::size_t test_subset,
                              std::uint64_t seed) {
  Dataset train_all{kCifarImageBytes, kCifarClasses, {}, {}};
  for (int b = 1; b <= 5; ++b) {
    const auto file = dir / ("data_batch_" + std::to_string(b) + ".bin");
    if (!std::filesystem::exists(file)) continue;
    auto part = read_cifar10_batch(file);
    train_all.features.insert(train_all.features.end(), part.features.begin(), part.features.end());
    train_all.labels.insert(train_all.labels.end(), part.labels.begin(), part.labels.end());
  }
  if (train_all.size() == 0) throw FormatError(dir.string() + ": no data_batch_*.bin files found");
  const auto test_all = read_cifar10_batch(dir / "test_batch.bin");

  Rng rng(seed);
  const auto tr = stratified_subset(train_all, train_subset, rng);
  const auto te = stratified_subset(test_all, test_subset, rng);
  DataSplit split{{kCifarImageBytes, kCifarClasses, {}, {}}, {kCifarImageBytes, kCifarClasses, {}, {}}};
  for (auto i : tr)
    split.train.push(std::span(train_all.features).subspan(i * kCifarImageBytes, kCifarImageBytes), train_all.labels[i]);
  for (auto i : te)
    split.test.push(std::span(test_all.features).subspan(i * kCifarImageBytes, kCifarImageBytes), test_all.labels[i]);

  const std::size_t plane = kCifarImageBytes / kCifarChannels;
  for (std::size_t ch = 0; ch < kCifarChannels; ++ch) {
    double s = 0.0, sq = 0.0;
    const double count = static_cast<double>(split.train.size() * plane);
    for (std::size_t r = 0; r < split.train.size(); ++r)
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = split.train.features[r * kCifarImageBytes + ch * plane + p];
        s += v;
        sq += v * v;
      }
    const double m = s / count;
    const double sd = std::sqrt(std::max(sq / count - m * m, 0.0));
    const double inv = sd > 0.0 ? 1.0 / sd : 1.0;
    for (auto* set : {&split.train, &split.test})
      for (std::size_t r = 0; r < set->size(); ++r)
        for (std::size_t p = 0; p < plane; ++p) {
          auto& v = set->features[r * kCifarImageBytes + ch * plane + p];
          v = (v - m) * inv;
        }
  }
  return split;
}

inline DataSplit load_dataset(const DatasetSpec& spec) {
  if (spec.source == DatasetSource::kCifar10) return load_cifar10(spec.path, spec.subset, spec.test_subset, spec.seed);
  return gen_synthetic(spec);
}

}  // namespace rskip
