#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "residual_blocks.hpp"

namespace rskip {

// Layout, all integers and doubles little-endian:
//   char[8] magic "RSKPCKPT" | u32 version | u32 kind | f64 lambda | f64 residual_scale
//   u64 depth | u64 input_dim | u64 width | u64 hidden | u64 classes
//   f64 norm_eps | f64 bn_momentum | f64 w_skip_init | u64 value_count
//   f64 values[value_count]: parameters in declaration order, then buffers
inline constexpr std::array<char, 8> kCheckpointMagic{'R', 'S', 'K', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class LeWriter {
 public:
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  template <typename U>
  void put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::vector<char> bytes_;
};

class LeReader {
 public:
  LeReader(const std::vector<char>& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  void raw(char* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(source_ + ": checkpoint truncated");
  }
  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  const std::vector<char>& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> serialize_checkpoint(const ResidualModel& model) {
  for (const auto& b : model.blocks())
    if (!b.branch().is_affine_relu()) throw ContractError("only models with built-in branches can be checkpointed");
  const auto& cfg = model.config();
  detail::LeWriter w;
  w.raw(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(cfg.construction.kind));
  w.f64(cfg.construction.lambda);
  w.f64(cfg.construction.residual_scale);
  w.u64(model.depth());
  w.u64(cfg.input_dim);
  w.u64(cfg.width);
  w.u64(cfg.hidden);
  w.u64(cfg.classes);
  w.f64(cfg.block.norm_eps);
  w.f64(cfg.block.bn_momentum);
  w.f64(cfg.block.w_skip_init);
  std::vector<double> values;
  for (const auto& p : model.parameters()) values.insert(values.end(), p.value.values().begin(), p.value.values().end());
  for (const auto& b : model.buffers()) values.insert(values.end(), b.values().begin(), b.values().end());
  w.u64(values.size());
  for (double v : values) w.f64(v);
  return w.bytes();
}

inline ResidualModel deserialize_checkpoint(const std::vector<char>& bytes, const std::string& source = "checkpoint") {
  detail::LeReader r(bytes, source);
  std::array<char, 8> magic{};
  r.raw(magic.data(), magic.size());
  if (magic != kCheckpointMagic) throw FormatError(source + ": not a checkpoint (bad magic)");
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw FormatError(source + ": unsupported checkpoint version " + std::to_string(v));
  ModelConfig cfg;
  const auto kind = r.u32();
  if (kind > static_cast<std::uint32_t>(SkipKind::kContractedFLN))
    throw FormatError(source + ": unknown construction kind " + std::to_string(kind));
  cfg.construction.kind = static_cast<SkipKind>(kind);
  cfg.construction.lambda = r.f64();
  cfg.construction.residual_scale = r.f64();
  cfg.depth = r.u64();
  cfg.input_dim = r.u64();
  cfg.width = r.u64();
  cfg.hidden = r.u64();
  cfg.classes = r.u64();
  cfg.block.norm_eps = r.f64();
  cfg.block.bn_momentum = r.f64();
  cfg.block.w_skip_init = r.f64();
  ResidualModel model = [&] {
    try {
      return build_model(cfg);
    } catch (const ConfigError& e) {
      throw FormatError(source + ": invalid header: " + e.what());
    }
  }();
  const auto count = r.u64();
  std::size_t expected = model.parameter_count();
  for (const auto& b : model.buffers()) expected += b.size();
  if (count != expected || r.remaining() != count * 8)
    throw FormatError(source + ": expected " + std::to_string(expected) + " values, header says " +
                      std::to_string(count));
  for (auto& p : model.parameters())
    for (auto& v : p.value.mutable_data()) v = r.f64();
  for (auto b : model.buffers())
    for (auto& v : b.mutable_data()) v = r.f64();
  return model;
}

inline void save_checkpoint(const ResidualModel& model, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline ResidualModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, path.string());
}

}  // namespace rskip
