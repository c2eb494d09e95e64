#ifndef XFORMER_LATTICE_SUMS_HPP
#define XFORMER_LATTICE_SUMS_HPP

// Gaussian lattice sums over periodic images:
//   Z(δ)   = Σ_n exp(−‖δ + L n‖² / 2σ²),   α = log Z
//   β(δ)   = Σ_n w_n b(‖δ + L n‖),          w_n = exp(φ_n)/Z
// truncated to the box |n_a| ≤ R_a, plus the reciprocal-space series for α,
// the residual bound on Z − Z̃, and compensated brute-force oracles.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "encodings.hpp"
#include "errors.hpp"
#include "special_functions.hpp"
#include "structures.hpp"

namespace xformer {

inline constexpr double kDefaultCoverage = 3.5;
inline constexpr int kMinRange = 2;
/// Floor applied to α when the reciprocal series does not yield a positive sum.
inline constexpr double kAlphaFloor = -745.0;

/// Image box −R_a ≤ n_a ≤ R_a.
struct SummationRange {
  std::array<int, 3> extent{kMinRange, kMinRange, kMinRange};

  static SummationRange uniform(int r) { return {{r, r, r}}; }
  [[nodiscard]] int operator[](std::size_t a) const { return extent[a]; }
  [[nodiscard]] bool contains(int n0, int n1, int n2) const {
    return std::abs(n0) <= extent[0] && std::abs(n1) <= extent[1] && std::abs(n2) <= extent[2];
  }
  [[nodiscard]] std::size_t image_count() const {
    return std::size_t(2 * extent[0] + 1) * std::size_t(2 * extent[1] + 1) * std::size_t(2 * extent[2] + 1);
  }
  friend bool operator==(const SummationRange&, const SummationRange&) = default;
};

/// R_a = max(⌈c·σ·‖l_b × l_c‖ / |det L|⌉, 2): the box reaches at least c·σ
/// along every lattice-plane normal.
inline SummationRange adaptive_range(double sigma, const Lattice& lattice, double coverage = kDefaultCoverage) {
  if (!(sigma > 0.0)) throw ValidationError("adaptive_range: sigma must be positive");
  SummationRange r;
  for (std::size_t a = 0; a < 3; ++a) {
    const double reach = coverage * sigma * lattice.face_area(a) / lattice.abs_volume();
    r.extent[a] = std::max(static_cast<int>(std::ceil(reach)), kMinRange);
  }
  return r;
}

namespace detail {

template <class F>
void for_each_image(const Vec3& delta, const Lattice& lattice, const SummationRange& range, F&& f) {
  const Vec3& l1 = lattice.vector(0);
  const Vec3& l2 = lattice.vector(1);
  const Vec3& l3 = lattice.vector(2);
  for (int n1 = -range[0]; n1 <= range[0]; ++n1) {
    const Vec3 a = delta + double(n1) * l1;
    for (int n2 = -range[1]; n2 <= range[1]; ++n2) {
      const Vec3 b = a + double(n2) * l2;
      for (int n3 = -range[2]; n3 <= range[2]; ++n3) {
        f(b + double(n3) * l3, n1, n2, n3);
      }
    }
  }
}

/// Neumaier-compensated accumulator.
struct CompensatedSum {
  double sum = 0.0;
  double c = 0.0;
  void add(double x) {
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x)) {
      c += (sum - t) + x;
    } else {
      c += (x - t) + sum;
    }
    sum = t;
  }
  [[nodiscard]] double value() const { return sum + c; }
};

}  // namespace detail

/// Everything the attention layer needs from one (i, j) lattice sum,
/// including the moments used by the hand-derived backward rules:
///   dα/dσ   = E_w[r²] / σ³
///   dβ_k/dσ = (E_w[b_k r²] − β_k E_w[r²]) / σ³
struct PairEncoding {
  double alpha = 0.0;
  double mean_r2 = 0.0;
  std::vector<double> beta_rbf;  // E_w[b_k]
  std::vector<double> beta_r2;   // E_w[b_k r²]
};

/// Single pass over the image box; `rbf` may be null to skip β.
inline void pair_encoding(const Vec3& delta, const Lattice& lattice, double sigma, const SummationRange& range,
                          const RBFConfig* rbf, PairEncoding& out) {
  thread_local std::vector<double> r2s;
  r2s.clear();
  r2s.reserve(range.image_count());
  double min_r2 = std::numeric_limits<double>::infinity();
  detail::for_each_image(delta, lattice, range, [&](const Vec3& v, int, int, int) {
    const double r2 = norm2(v);
    r2s.push_back(r2);
    min_r2 = std::min(min_r2, r2);
  });
  const double inv2s2 = 0.5 / (sigma * sigma);
  const double phi_max = -min_r2 * inv2s2;

  const bool with_beta = rbf != nullptr;
  if (with_beta) {
    out.beta_rbf.assign(rbf->bins, 0.0);
    out.beta_r2.assign(rbf->bins, 0.0);
  }
  double z = 0.0;
  double zr2 = 0.0;
  for (double r2 : r2s) {
    const double w = std::exp(-r2 * inv2s2 - phi_max);
    z += w;
    zr2 += w * r2;
    if (with_beta && w > detail::kRbfFloor) detail::accumulate_rbf(std::sqrt(r2), w, *rbf, out.beta_rbf, out.beta_r2);
  }
  out.alpha = phi_max + std::log(z);
  out.mean_r2 = zr2 / z;
  if (with_beta) {
    const double inv = 1.0 / z;
    for (auto& x : out.beta_rbf) x *= inv;
    for (auto& x : out.beta_r2) x *= inv;
  }
}

/// α = log Σ_{n ∈ range} exp(−‖δ + L n‖² / 2σ²), log-sum-exp stabilized.
inline double gaussian_alpha(const Vec3& delta, const Lattice& lattice, double sigma, const SummationRange& range) {
  if (!(sigma > 0.0)) throw ValidationError("gaussian_alpha: sigma must be positive");
  PairEncoding e;
  pair_encoding(delta, lattice, sigma, range, nullptr, e);
  return e.alpha;
}

/// Gaussian-weighted average of b(‖δ + L n‖) over the image box.
inline std::vector<double> gaussian_beta_rbf(const Vec3& delta, const Lattice& lattice, double sigma,
                                             const SummationRange& range, const RBFConfig& rbf) {
  if (!(sigma > 0.0)) throw ValidationError("gaussian_beta_rbf: sigma must be positive");
  PairEncoding e;
  pair_encoding(delta, lattice, sigma, range, &rbf, e);
  return e.beta_rbf;
}

/// Reciprocal vectors ω_m for −M ≤ m2, m3 ≤ M and 0 ≤ m1 ≤ M, with the
/// multiplicity (1 or 2) that folds m1 < 0 onto m1 > 0.
struct ReciprocalGrid {
  std::vector<Vec3> omega;
  std::vector<double> omega2;
  std::vector<double> multiplicity;
  double volume = 0.0;

  ReciprocalGrid(const Lattice& lattice, int m_range) : volume(lattice.abs_volume()) {
    if (m_range < 1) throw ValidationError("reciprocal m_range must be >= 1");
    for (int m1 = 0; m1 <= m_range; ++m1) {
      for (int m2 = -m_range; m2 <= m_range; ++m2) {
        for (int m3 = -m_range; m3 <= m_range; ++m3) {
          const Vec3 w = double(m1) * lattice.reciprocal(0) + double(m2) * lattice.reciprocal(1) +
                         double(m3) * lattice.reciprocal(2);
          omega.push_back(w);
          omega2.push_back(norm2(w));
          multiplicity.push_back(m1 > 0 ? 2.0 : 1.0);
        }
      }
    }
  }
};

struct ReciprocalEncoding {
  double alpha = 0.0;
  double dalpha_dsigma = 0.0;
};

/// α = log[(2πσ̄²)^{3/2}/V · Σ_m exp(−σ̄²‖ω_m‖²/2) cos(ω_m·δ)].
inline ReciprocalEncoding reciprocal_encoding(const Vec3& delta, const ReciprocalGrid& grid, double sigma_bar) {
  const double s2 = sigma_bar * sigma_bar;
  double sum = 0.0;
  double dsum = 0.0;  // Σ t_m ω²
  for (std::size_t m = 0; m < grid.omega.size(); ++m) {
    const double t = grid.multiplicity[m] * std::exp(-0.5 * s2 * grid.omega2[m]) * std::cos(dot(grid.omega[m], delta));
    sum += t;
    dsum += t * grid.omega2[m];
  }
  ReciprocalEncoding out;
  if (!(sum > 0.0)) {
    out.alpha = kAlphaFloor;
    return out;
  }
  const double log_prefactor = 1.5 * std::log(2.0 * std::numbers::pi * s2) - std::log(grid.volume);
  out.alpha = std::max(log_prefactor + std::log(sum), kAlphaFloor);
  if (out.alpha > kAlphaFloor) out.dalpha_dsigma = 3.0 / sigma_bar - sigma_bar * dsum / sum;
  return out;
}

inline double reciprocal_alpha(const Vec3& delta, const Lattice& lattice, double sigma_bar, int m_range = 2) {
  if (!(sigma_bar > 0.0)) throw ValidationError("reciprocal_alpha: sigma_bar must be positive");
  return reciprocal_encoding(delta, ReciprocalGrid(lattice, m_range), sigma_bar).alpha;
}

/// Smallest cube range M such that every omitted reciprocal term satisfies
/// exp(−σ̄²‖ω‖²/2) < tolerance.
inline int reciprocal_range_for(const Lattice& lattice, double sigma_bar, double tolerance = 1e-12) {
  const double omega_cut = std::sqrt(-2.0 * std::log(tolerance)) / sigma_bar;
  int m = 1;
  for (std::size_t a = 0; a < 3; ++a) {
    // |ω·l_a| = 2π|m_a|, so |m_a| > ω_cut‖l_a‖/2π implies ‖ω‖ > ω_cut.
    m = std::max(m, static_cast<int>(std::ceil(omega_cut * norm(lattice.vector(a)) / (2.0 * std::numbers::pi))));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Residual bound

/// Inputs of the residual bound; all lengths scaled by 1/(√2σ).
struct ErrorBoundInput {
  double radius = 0.0;   // R: every omitted image lies at scaled distance ≥ R
  double rho_min = 0.0;  // shortest nonzero scaled lattice vector
};

/// Length of the shortest nonzero lattice vector (exact enumeration).
inline double shortest_lattice_vector(const Lattice& lattice) {
  double best = std::min({norm(lattice.vector(0)), norm(lattice.vector(1)), norm(lattice.vector(2))});
  SummationRange box;
  for (std::size_t a = 0; a < 3; ++a) {
    box.extent[a] = static_cast<int>(std::ceil(best / lattice.plane_spacing(a)));
  }
  detail::for_each_image(Vec3{0, 0, 0}, lattice, box, [&](const Vec3& v, int n1, int n2, int n3) {
    if (n1 != 0 || n2 != 0 || n3 != 0) best = std::min(best, norm(v));
  });
  return best;
}

inline double scaled_rho_min(const Lattice& lattice, double sigma) {
  return shortest_lattice_vector(lattice) / (std::sqrt(2.0) * sigma);
}

/// Scaled distance of the nearest image outside `range`.
inline double nearest_omitted_distance(const Vec3& delta, const Lattice& lattice, double sigma,
                                       const SummationRange& range) {
  const Vec3 f = lattice.to_fractional(delta);
  double best = std::numeric_limits<double>::infinity();
  for (int extra = 1;; ++extra) {
    SummationRange outer;
    for (std::size_t a = 0; a < 3; ++a) outer.extent[a] = range[a] + extra;
    detail::for_each_image(delta, lattice, outer, [&](const Vec3& v, int n1, int n2, int n3) {
      if (!range.contains(n1, n2, n3)) best = std::min(best, norm2(v));
    });
    // Anything beyond `outer` sits at least (R_a + extra + 1 − |f_a|)·h_a away.
    double lower = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < 3; ++a) {
      lower = std::min(lower, (outer[a] + 1 - std::abs(f[a])) * lattice.plane_spacing(a));
    }
    if (lower > 0.0 && lower * lower >= best) break;
  }
  return std::sqrt(best) / (std::sqrt(2.0) * sigma);
}

/// R = max(c/√2, R′) with R′ the scaled distance of the nearest omitted image.
inline ErrorBoundInput error_bound_input(const Vec3& delta, const Lattice& lattice, double sigma,
                                         const SummationRange& range, double coverage = kDefaultCoverage) {
  ErrorBoundInput in;
  in.radius = std::max(coverage / std::sqrt(2.0), nearest_omitted_distance(delta, lattice, sigma, range));
  in.rho_min = scaled_rho_min(lattice, sigma);
  return in;
}

/// ε ≤ (3/2)(2/ρ)³ Γ(3/2, (R − ρ/2)²); +∞ when R ≤ ρ/2.
inline double residual_bound(const ErrorBoundInput& in) {
  if (!(in.rho_min > 0.0)) throw ValidationError("residual_bound: rho_min must be positive");
  if (!(in.radius > 0.5 * in.rho_min)) return std::numeric_limits<double>::infinity();
  const double t = in.radius - 0.5 * in.rho_min;
  const double q = 2.0 / in.rho_min;
  return 1.5 * q * q * q * incomplete_gamma_3half(t * t);
}

// ---------------------------------------------------------------------------
// Oracles

struct BruteForceSum {
  double z = 0.0;
  std::vector<double> weighted_rbf;  // Σ exp(φ_n) b(r_n) / Z
};

/// Direct compensated summation over ‖n‖∞ ≤ cutoff with unstabilized
/// weights and a direct per-bin RBF evaluation.
inline BruteForceSum brute_force_infinite_sum(const Vec3& delta, const Lattice& lattice, double sigma, int cutoff,
                                              const RBFConfig* rbf = nullptr) {
  if (cutoff < 0) throw ValidationError("brute_force_infinite_sum: cutoff must be >= 0");
  const double inv2s2 = 0.5 / (sigma * sigma);
  detail::CompensatedSum z;
  std::vector<detail::CompensatedSum> acc(rbf ? rbf->bins : 0);
  detail::for_each_image(delta, lattice, SummationRange::uniform(cutoff), [&](const Vec3& v, int, int, int) {
    const double r2 = norm2(v);
    const double w = std::exp(-r2 * inv2s2);
    z.add(w);
    if (rbf) {
      const auto b = rbf_expand(std::sqrt(r2), *rbf);
      for (std::size_t k = 0; k < b.size(); ++k) acc[k].add(w * b[k]);
    }
  });
  BruteForceSum out;
  out.z = z.value();
  for (const auto& a : acc) out.weighted_rbf.push_back(a.value() / out.z);
  return out;
}

/// Σ of exp(φ_n) over images inside the cutoff box but outside `range`:
/// the brute-force estimate of Z − Z̃.
inline double brute_force_residual(const Vec3& delta, const Lattice& lattice, double sigma,
                                   const SummationRange& range, int cutoff) {
  const double inv2s2 = 0.5 / (sigma * sigma);
  detail::CompensatedSum acc;
  detail::for_each_image(delta, lattice, SummationRange::uniform(cutoff), [&](const Vec3& v, int n1, int n2, int n3) {
    if (!range.contains(n1, n2, n3)) acc.add(std::exp(-norm2(v) * inv2s2));
  });
  return acc.value();
}

}  // namespace xformer

#endif  // XFORMER_LATTICE_SUMS_HPP
