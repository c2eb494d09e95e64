#ifndef XFORMER_SYNTHETIC_HPP
#define XFORMER_SYNTHETIC_HPP

// Synthetic periodic dataset: random triclinic cells labelled with a
// per-atom double-Gaussian pair energy summed over all periodic images.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "dataset.hpp"
#include "errors.hpp"
#include "structures.hpp"

namespace xformer {

struct SyntheticSpec {
  int count = 640;
  int min_atoms = 1;
  int max_atoms = 6;
  double min_length = 2.0;
  double max_length = 8.0;
  double min_angle = 60.0;
  double max_angle = 120.0;
  /// Cells with V/(abc) below this are redrawn.
  double min_volume_ratio = 0.3;
  std::vector<int> species_pool = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  double s1 = 1.0;
  double s2 = 2.5;
  double lambda = 0.3;
  double cutoff = 20.0;
  double tolerance = 1e-8;

  void validate() const {
    if (count < 0) throw ValidationError("count must be non-negative");
    if (min_atoms < 1 || max_atoms < min_atoms) throw ValidationError("bad atom-count range");
    if (!(min_length > 0.0) || max_length < min_length) throw ValidationError("bad cell-length range");
    if (!(min_angle > 0.0) || max_angle < min_angle || max_angle >= 180.0) throw ValidationError("bad angle range");
    if (species_pool.empty()) throw ValidationError("empty species pool");
    for (int z : species_pool) {
      if (z < 1 || z > kMaxSpecies) throw ValidationError("species pool entry outside 1..98");
    }
    if (!(s1 > 0.0) || !(s2 > 0.0) || !(cutoff > 0.0)) throw ValidationError("widths and cutoff must be positive");
  }

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"count", count},           {"min_atoms", min_atoms},   {"max_atoms", max_atoms},
            {"min_length", min_length}, {"max_length", max_length}, {"min_angle", min_angle},
            {"max_angle", max_angle},   {"min_volume_ratio", min_volume_ratio},
            {"species_pool", species_pool}, {"s1", s1}, {"s2", s2}, {"lambda", lambda},
            {"cutoff", cutoff},         {"tolerance", tolerance}};
  }
};

/// c(z) = (z mod 5) − 2.
inline double species_charge(int z) { return static_cast<double>(z % 5) - 2.0; }

/// Σ_i Σ_{j(n) ≠ i, r ≤ cutoff} c_i c_j g(r) / N.
inline double pair_energy(const CrystalStructure& s, const SyntheticSpec& spec, double cutoff) {
  const auto& lat = s.lattice();
  const std::size_t n = s.size();
  double dmax = 0.0;
  for (std::size_t a = 0; a < 3; ++a) dmax += 0.5 * norm(lat.vector(a));
  int range[3];
  for (std::size_t a = 0; a < 3; ++a) range[a] = static_cast<int>(std::ceil((cutoff + dmax) / lat.plane_spacing(a)));
  const double inv1 = 1.0 / (2.0 * spec.s1 * spec.s1);
  const double inv2 = 1.0 / (2.0 * spec.s2 * spec.s2);
  const double cut2 = cutoff * cutoff;

  std::vector<Vec3> delta(n * n);
  std::vector<double> cc(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      delta[i * n + j] = centered_delta(lat, s.positions()[i], s.positions()[j]);
      cc[i * n + j] = species_charge(s.species()[i]) * species_charge(s.species()[j]);
    }
  }
  long double total = 0.0L;
  for (int n1 = -range[0]; n1 <= range[0]; ++n1) {
    for (int n2 = -range[1]; n2 <= range[1]; ++n2) {
      for (int n3 = -range[2]; n3 <= range[2]; ++n3) {
        const Vec3 t = lat.translation({n1, n2, n3});
        if (norm(t) > cutoff + 2.0 * dmax) continue;
        const bool origin = n1 == 0 && n2 == 0 && n3 == 0;
        for (std::size_t p = 0; p < n * n; ++p) {
          if (origin && p % (n + 1) == 0) continue;  // j(n) = i
          if (cc[p] == 0.0) continue;
          const double r2 = norm2(delta[p] + t);
          if (r2 > cut2) continue;
          total += cc[p] * (std::exp(-r2 * inv1) - spec.lambda * std::exp(-r2 * inv2));
        }
      }
    }
  }
  return static_cast<double>(total / static_cast<long double>(n));
}

struct OracleResult {
  double energy = 0.0;
  double doubling_change = 0.0;  // |E(2·cutoff) − E(cutoff)|
};

/// Energy at the spec cutoff, verified against twice the cutoff.
inline OracleResult synthetic_target(const CrystalStructure& s, const SyntheticSpec& spec) {
  OracleResult r;
  r.energy = pair_energy(s, spec, spec.cutoff);
  r.doubling_change = std::abs(pair_energy(s, spec, 2.0 * spec.cutoff) - r.energy);
  if (!std::isfinite(r.energy)) throw NumericalError("synthetic target is not finite");
  if (!(r.doubling_change < spec.tolerance)) {
    throw NumericalError("synthetic oracle not converged: doubling the cutoff changed E by " +
                         std::to_string(r.doubling_change));
  }
  return r;
}

/// Random triclinic cell with uniform fractional positions.
inline CrystalStructure random_structure(std::mt19937_64& rng, const SyntheticSpec& spec) {
  std::uniform_real_distribution<double> length(spec.min_length, spec.max_length);
  std::uniform_real_distribution<double> angle(spec.min_angle, spec.max_angle);
  std::uniform_int_distribution<int> atoms(spec.min_atoms, spec.max_atoms);
  std::uniform_int_distribution<std::size_t> pick(0, spec.species_pool.size() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (;;) {
    const double a = length(rng), b = length(rng), c = length(rng);
    const double al = angle(rng), be = angle(rng), ga = angle(rng);
    Lattice lat = Lattice::cubic(1.0);
    try {
      lat = Lattice::from_parameters(a, b, c, al, be, ga);
    } catch (const ValidationError&) {
      continue;
    }
    if (lat.abs_volume() / (a * b * c) < spec.min_volume_ratio) continue;
    const int n = atoms(rng);
    std::vector<Vec3> frac;
    std::vector<int> species;
    for (int i = 0; i < n; ++i) {
      frac.push_back({unit(rng), unit(rng), unit(rng)});
      species.push_back(spec.species_pool[pick(rng)]);
    }
    return CrystalStructure::from_fractional(std::move(lat), frac, std::move(species));
  }
}

struct SyntheticDataset {
  std::vector<StructureRecord> records;
  nlohmann::json manifest;
};

inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  SyntheticDataset out;
  double max_change = 0.0, sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < spec.count; ++i) {
    auto s = random_structure(rng, spec);
    const auto oracle = synthetic_target(s, spec);
    max_change = std::max(max_change, oracle.doubling_change);
    sum += oracle.energy;
    sum2 += oracle.energy * oracle.energy;
    char id[32];
    std::snprintf(id, sizeof id, "syn-%06d", i);
    out.records.push_back({id, std::move(s), oracle.energy});
  }
  const double n = std::max(1, spec.count);
  out.manifest = {{"spec", spec.to_json()},
                  {"seed", seed},
                  {"oracle", {{"max_doubling_change", max_change}, {"tolerance", spec.tolerance}}},
                  {"targets", {{"mean", sum / n}, {"std", std::sqrt(std::max(0.0, sum2 / n - (sum / n) * (sum / n)))}}}};
  return out;
}

}  // namespace xformer

#endif  // XFORMER_SYNTHETIC_HPP
