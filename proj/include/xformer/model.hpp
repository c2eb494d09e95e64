#ifndef XFORMER_MODEL_HPP
#define XFORMER_MODEL_HPP

// The full encoder: species embedding, stacked self-attention blocks,
// mean pooling over unit-cell atoms, and a Linear-ReLU-Linear head.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "attention.hpp"
#include "autodiff.hpp"
#include "errors.hpp"
#include "structures.hpp"
#include "tensor.hpp"

namespace xformer {

enum class Variant { full, simplified };

inline const char* to_string(Variant v) { return v == Variant::full ? "full" : "simplified"; }
inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "simplified") return Variant::simplified;
  throw ValidationError("unknown variant: " + s + " (expected full|simplified)");
}

struct ModelConfig {
  int blocks = 4;
  AttentionConfig attention;
  int vocab = kMaxSpecies;
  int output_dim = 1;
  Variant variant = Variant::full;

  [[nodiscard]] int ffn_dim() const { return 4 * attention.d_model; }
  void validate() const {
    if (blocks < 0) throw ValidationError("blocks must be non-negative");
    if (vocab < 1 || vocab > kMaxSpecies) throw ValidationError("vocab must lie in 1..98");
    if (output_dim != 1) throw ValidationError("only scalar outputs are supported");
    attention.validate();
  }
};

struct ModelParams {
  ModelConfig config;
  Tensor embedding;  // vocab × d_model
  std::vector<BlockParams> blocks;
  Linear head_hidden;  // d_model → d_model
  Linear head_out;     // d_model → 1
};

/// Visits every array in a fixed order. `trainable` is false for nothing
/// today; calibration scalars live outside the arrays.
template <class Params, class F>
void for_each_array(Params& p, F&& f) {
  auto linear = [&](const std::string& prefix, auto& lin) {
    f(prefix + ".weight", lin.weight);
    f(prefix + ".bias", lin.bias);
  };
  f(std::string("embedding"), p.embedding);
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    auto& blk = p.blocks[b];
    const std::string pre = "block" + std::to_string(b);
    linear(pre + ".query", blk.query);
    linear(pre + ".key", blk.key);
    linear(pre + ".value", blk.value);
    linear(pre + ".output", blk.output);
    linear(pre + ".ffn_in", blk.ffn_in);
    linear(pre + ".ffn_out", blk.ffn_out);
    if (!blk.edge.empty()) f(pre + ".edge", blk.edge);
    for (std::size_t h = 0; h < blk.sigma.size(); ++h) f(pre + ".sigma" + std::to_string(h) + ".w", blk.sigma[h].w);
  }
  linear("head.hidden", p.head_hidden);
  linear("head.out", p.head_out);
}

struct ParameterCount {
  std::size_t total = 0;
  std::vector<std::size_t> per_block;
};

inline ParameterCount parameter_count(const ModelParams& p) {
  ParameterCount c;
  c.per_block.assign(p.blocks.size(), 0);
  for_each_array(p, [&](const std::string& name, const Tensor& t) {
    c.total += t.size();
    if (name.rfind("block", 0) == 0) {
      const auto dot = name.find('.');
      c.per_block[std::stoul(name.substr(5, dot - 5))] += t.size();
    }
  });
  return c;
}

namespace detail {

inline void xavier_uniform(Tensor& t, std::mt19937_64& rng, double gain = 1.0) {
  const double limit = gain * std::sqrt(6.0 / double(t.rows() + t.cols()));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& x : t.data()) x = dist(rng);
}

inline Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng, double gain) {
  Linear l{Tensor(in, out), Tensor(1, out)};
  xavier_uniform(l.weight, rng, gain);
  return l;
}

}  // namespace detail

/// Deterministic initialization. Embeddings ~ N(0, d^{-1/2}) (variance);
/// projections Xavier-uniform, with value/output/FFN weights scaled by
/// (2·blocks)^{-1/4}; biases zero; σ weights Xavier-uniform on (d_K, 1).
/// Calibration scalars are left unset (see calibrate_model).
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const auto d = static_cast<std::size_t>(cfg.attention.d_model);
  const auto dk = static_cast<std::size_t>(cfg.attention.d_k);
  ModelParams p;
  p.config = cfg;
  p.embedding = Tensor(static_cast<std::size_t>(cfg.vocab), d);
  std::normal_distribution<double> normal(0.0, std::pow(double(d), -0.25));
  for (auto& x : p.embedding.data()) x = normal(rng);

  const double depth_gain = cfg.blocks > 0 ? std::pow(2.0 * cfg.blocks, -0.25) : 1.0;
  for (int b = 0; b < cfg.blocks; ++b) {
    BlockParams blk;
    blk.query = detail::make_linear(d, d, rng, 1.0);
    blk.key = detail::make_linear(d, d, rng, 1.0);
    blk.value = detail::make_linear(d, d, rng, depth_gain);
    blk.output = detail::make_linear(d, d, rng, depth_gain);
    blk.ffn_in = detail::make_linear(d, static_cast<std::size_t>(cfg.ffn_dim()), rng, depth_gain);
    blk.ffn_out = detail::make_linear(static_cast<std::size_t>(cfg.ffn_dim()), d, rng, depth_gain);
    if (cfg.variant == Variant::full) {
      blk.edge = Tensor(static_cast<std::size_t>(cfg.attention.rbf.bins), d);
      detail::xavier_uniform(blk.edge, rng);
    }
    for (int h = 0; h < cfg.attention.heads; ++h) {
      auto sp = cfg.attention.head_mode(h) == SigmaMode::real ? SigmaParams::real_space(dk)
                                                               : SigmaParams::reciprocal_space(dk);
      detail::xavier_uniform(sp.w, rng);
      blk.sigma.push_back(std::move(sp));
    }
    p.blocks.push_back(std::move(blk));
  }
  p.head_hidden = detail::make_linear(d, d, rng, 1.0);
  p.head_out = detail::make_linear(d, 1, rng, 1.0);
  return p;
}

inline std::vector<std::size_t> species_rows(const CrystalStructure& s, const ModelConfig& cfg) {
  std::vector<std::size_t> rows;
  rows.reserve(s.size());
  for (int z : s.species()) {
    if (z < 1 || z > cfg.vocab) throw ValidationError("unknown species: atomic number " + std::to_string(z));
    rows.push_back(static_cast<std::size_t>(z - 1));
  }
  return rows;
}

/// Atom states entering block `stop` (all blocks when stop = blocks).
inline ad::Var encode_states(ParamBinder& bind, const PairGeometry& geo, const ModelParams& p, std::size_t stop) {
  auto& tape = bind.tape();
  tape.set_scope("embedding");
  auto x = ad::gather_rows(tape, bind(p.embedding), species_rows(*geo.structure, p.config));
  for (std::size_t b = 0; b < stop && b < p.blocks.size(); ++b) {
    tape.set_scope("block " + std::to_string(b));
    x = block_forward(bind, geo, x, p.blocks[b], p.config.attention);
  }
  return x;
}

/// Scalar prediction (1×1) for one structure.
inline ad::Var forward(ParamBinder& bind, const CrystalStructure& s, const ModelParams& p) {
  PairGeometry geo(s, p.config.attention);
  auto& tape = bind.tape();
  auto x = encode_states(bind, geo, p, p.blocks.size());
  tape.set_scope("output head");
  auto pooled = ad::mean_rows(tape, x);
  auto hidden = ad::relu(tape, apply_linear(bind, pooled, p.head_hidden));
  auto out = apply_linear(bind, hidden, p.head_out);
  tape.set_scope("");
  return out;
}

inline double predict(const CrystalStructure& s, const ModelParams& p) {
  ad::Tape tape;
  ParamBinder bind(tape);
  return tape.value(forward(bind, s, p))[0];
}

/// Final atom states (N × d_model) for one structure.
inline Tensor atom_states(const CrystalStructure& s, const ModelParams& p) {
  ad::Tape tape;
  ParamBinder bind(tape);
  PairGeometry geo(s, p.config.attention);
  return tape.value(encode_states(bind, geo, p, p.blocks.size()));
}

/// Sets every head's (m, s) from the batch, block by block: block b is
/// calibrated on states produced by the already-calibrated blocks < b.
inline void calibrate_model(ModelParams& p, std::span<const CrystalStructure> batch) {
  if (batch.empty()) throw ValidationError("calibrate_model: empty batch");
  std::vector<Tensor> states;
  states.reserve(batch.size());
  for (const auto& s : batch) {
    ad::Tape tape;
    ParamBinder bind(tape);
    PairGeometry geo(s, p.config.attention);
    states.push_back(tape.value(encode_states(bind, geo, p, 0)));
  }
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    auto& blk = p.blocks[b];
    std::vector<std::vector<double>> proj(blk.sigma.size());
    for (const auto& x : states) {
      auto per_head = block_sigma_projections(x, blk, p.config.attention);
      for (std::size_t h = 0; h < proj.size(); ++h) proj[h].insert(proj[h].end(), per_head[h].begin(), per_head[h].end());
    }
    for (std::size_t h = 0; h < proj.size(); ++h) blk.sigma[h] = calibrate_sigma_from_projections(blk.sigma[h], proj[h]);
    for (std::size_t i = 0; i < states.size(); ++i) {
      ad::Tape tape;
      ParamBinder bind(tape);
      PairGeometry geo(batch[i], p.config.attention);
      states[i] = tape.value(block_forward(bind, geo, tape.constant(states[i]), blk, p.config.attention));
    }
  }
}

[[nodiscard]] inline bool is_calibrated(const ModelParams& p) {
  for (const auto& blk : p.blocks) {
    for (const auto& s : blk.sigma) {
      if (!s.calibrated) return false;
    }
  }
  return true;
}

}  // namespace xformer

#endif  // XFORMER_MODEL_HPP
