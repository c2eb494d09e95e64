#ifndef XFORMER_CHECKPOINT_HPP
#define XFORMER_CHECKPOINT_HPP

// Binary checkpoints. Layout (little-endian):
//   "XFMRCKPT" | u32 version | u64 n + config JSON | u64 count |
//   count × (u32 n + name | u64 rows | u64 cols | rows·cols f64)
// Per-head calibration (m, s, calibrated) travels as the arrays
// "block{b}.calibration" with one row per head.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace xformer {

inline constexpr std::array<char, 8> kCheckpointMagic = {'X', 'F', 'M', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Tensor value;
};

namespace detail {

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw ValidationError("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<NamedArray> checkpoint_arrays(const ModelParams& p) {
  std::vector<NamedArray> out;
  for_each_array(p, [&](const std::string& name, const Tensor& t) { out.push_back({name, t}); });
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    Tensor cal(p.blocks[b].sigma.size(), 3);
    for (std::size_t h = 0; h < p.blocks[b].sigma.size(); ++h) {
      const auto& s = p.blocks[b].sigma[h];
      cal(h, 0) = s.m;
      cal(h, 1) = s.s;
      cal(h, 2) = s.calibrated ? 1.0 : 0.0;
    }
    out.push_back({"block" + std::to_string(b) + ".calibration", std::move(cal)});
  }
  return out;
}

}  // namespace detail

inline std::string serialize_checkpoint(const ModelParams& p) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = to_json(p.config).dump();
  detail::put<std::uint64_t>(out, cfg.size());
  out += cfg;
  const auto arrays = detail::checkpoint_arrays(p);
  detail::put<std::uint64_t>(out, arrays.size());
  for (const auto& a : arrays) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    detail::put<std::uint64_t>(out, a.value.rows());
    detail::put<std::uint64_t>(out, a.value.cols());
    for (double x : a.value.data()) detail::put<double>(out, x);
  }
  return out;
}

/// Parses a checkpoint. When `expected` is given, the stored arrays must
/// match the shapes that configuration implies.
inline ModelParams deserialize_checkpoint(const std::string& bytes, const std::optional<ModelConfig>& expected = {}) {
  detail::Reader r(bytes);
  if (r.get_string(kCheckpointMagic.size()) != std::string(kCheckpointMagic.begin(), kCheckpointMagic.end())) {
    throw ValidationError("not a checkpoint file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw ValidationError("checkpoint version mismatch: file has " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  const auto cfg_len = r.get<std::uint64_t>();
  nlohmann::json cfg_json;
  try {
    cfg_json = nlohmann::json::parse(r.get_string(cfg_len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  const ModelConfig stored = model_config_from_json(cfg_json);
  const ModelConfig& cfg = expected ? *expected : stored;

  ModelParams p = init_params(cfg, 0);
  auto slots = detail::checkpoint_arrays(p);
  const auto count = r.get<std::uint64_t>();
  if (count != slots.size()) {
    throw ValidationError("checkpoint shape mismatch: " + std::to_string(count) + " arrays stored, configuration expects " +
                          std::to_string(slots.size()));
  }
  for (auto& slot : slots) {
    const std::string name = r.get_string(r.get<std::uint32_t>());
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    if (name != slot.name || rows != slot.value.rows() || cols != slot.value.cols()) {
      throw ValidationError("checkpoint shape mismatch: stored " + name + " (" + std::to_string(rows) + "x" +
                            std::to_string(cols) + "), expected " + slot.name + " " + slot.value.shape_string());
    }
    for (auto& x : slot.value.data()) x = r.get<double>();
  }
  if (!r.done()) throw ValidationError("checkpoint has trailing bytes");

  std::size_t i = 0;
  for_each_array(p, [&](const std::string&, Tensor& t) { t = std::move(slots[i++].value); });
  for (auto& blk : p.blocks) {
    const Tensor& cal = slots[i++].value;
    for (std::size_t h = 0; h < blk.sigma.size(); ++h) {
      blk.sigma[h].m = cal(h, 0);
      blk.sigma[h].s = cal(h, 1);
      blk.sigma[h].calibrated = cal(h, 2) != 0.0;
    }
  }
  return p;
}

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write checkpoint: " + path);
  const std::string bytes = serialize_checkpoint(p);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("failed writing checkpoint: " + path);
}

inline ModelParams load_checkpoint(const std::string& path, const std::optional<ModelConfig>& expected = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint: " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, expected);
}

}  // namespace xformer

#endif  // XFORMER_CHECKPOINT_HPP
