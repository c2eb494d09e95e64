#ifndef XFORMER_TESTS_SUPPORT_HPP
#define XFORMER_TESTS_SUPPORT_HPP

#include <random>
#include <vector>

#include "xformer/attention.hpp"
#include "xformer/model.hpp"
#include "xformer/structures.hpp"

namespace xformer::testing {

inline Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(r, c);
  for (auto& x : t.data()) x = u(rng);
  return t;
}

/// Random triclinic cell with lengths in [lo, hi] Å, angles 70–110°, and
/// 1..max_atoms atoms with species 1..10.
inline CrystalStructure random_crystal(std::mt19937_64& rng, std::size_t max_atoms = 4, double lo = 2.0,
                                       double hi = 8.0) {
  std::uniform_real_distribution<double> len(lo, hi), ang(70.0, 110.0), unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> count(1, max_atoms);
  std::uniform_int_distribution<int> species(1, 10);
  for (;;) {
    const double a = len(rng), b = len(rng), c = len(rng);
    const double al = ang(rng), be = ang(rng), ga = ang(rng);
    Lattice lat = Lattice::cubic(1.0);
    try {
      lat = Lattice::from_parameters(a, b, c, al, be, ga);
    } catch (const ValidationError&) {
      continue;
    }
    if (lat.abs_volume() / (a * b * c) < 0.3) continue;
    const std::size_t n = count(rng);
    std::vector<Vec3> frac(n);
    std::vector<int> z(n);
    for (std::size_t i = 0; i < n; ++i) {
      frac[i] = {unit(rng), unit(rng), unit(rng)};
      z[i] = species(rng);
    }
    return CrystalStructure::from_fractional(lat, frac, z);
  }
}

inline Linear random_linear(std::size_t in, std::size_t out, std::mt19937_64& rng, double scale = 0.5) {
  return Linear{random_tensor(in, out, rng, -scale, scale), random_tensor(1, out, rng, -0.1, 0.1)};
}

/// One head acting on d_model-wide states with calibrated σ parameters.
inline HeadParams random_head(std::size_t d_model, std::size_t dk, std::mt19937_64& rng, bool with_edge,
                              SigmaMode mode = SigmaMode::real, std::size_t bins = 64) {
  HeadParams h;
  h.query = random_linear(d_model, dk, rng);
  h.key = random_linear(d_model, dk, rng);
  h.value = random_linear(d_model, dk, rng);
  h.sigma = mode == SigmaMode::real ? SigmaParams::real_space(dk) : SigmaParams::reciprocal_space(dk);
  h.sigma.w = random_tensor(dk, 1, rng);
  h.sigma.m = 0.1;
  h.sigma.s = 0.8;
  h.sigma.calibrated = true;
  if (with_edge) h.edge = random_tensor(bins, dk, rng, -0.3, 0.3);
  return h;
}

/// Model parameters whose σ calibration is fixed to (m, s) = (0, 1).
inline ModelParams calibrated_params(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = init_params(cfg, seed);
  for (auto& blk : p.blocks) {
    for (auto& sp : blk.sigma) {
      sp.m = 0.0;
      sp.s = 1.0;
      sp.calibrated = true;
    }
  }
  return p;
}

inline ModelConfig small_config(int blocks = 1, int d_model = 16, int heads = 2, bool dual = false) {
  ModelConfig cfg;
  cfg.blocks = blocks;
  cfg.attention.d_model = d_model;
  cfg.attention.heads = heads;
  cfg.attention.d_k = cfg.attention.d_v = d_model / heads;
  cfg.attention.dual_space = dual;
  return cfg;
}

}  // namespace xformer::testing

#endif  // XFORMER_TESTS_SUPPORT_HPP
