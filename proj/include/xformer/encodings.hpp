#ifndef XFORMER_ENCODINGS_HPP
#define XFORMER_ENCODINGS_HPP

#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace xformer {

/// Gaussian radial basis: K bins with centers μ_k = k·r_max/K (k = 1..K)
/// and width r_max/K.
struct RBFConfig {
  int bins = 64;
  double r_max = 14.0;

  [[nodiscard]] double width() const { return r_max / bins; }
  [[nodiscard]] double center(int k) const { return k * r_max / bins; }  // k is 1-based
  void validate() const {
    if (bins < 1) throw ValidationError("RBF bin count must be >= 1");
    if (!(r_max > 0.0)) throw ValidationError("RBF r_max must be positive");
  }
};

/// b_k(r) = exp(−(r − μ_k)² / 2(r_max/K)²), k = 1..K.
inline std::vector<double> rbf_expand(double r, const RBFConfig& cfg) {
  if (!(r >= 0.0)) throw ValidationError("rbf_expand: distance must be non-negative");
  std::vector<double> b(cfg.bins);
  const double w = cfg.width();
  for (int k = 1; k <= cfg.bins; ++k) {
    const double u = (r - cfg.center(k)) / w;
    b[k - 1] = std::exp(-0.5 * u * u);
  }
  return b;
}

namespace detail {

// Components below this are dropped by the accumulating expansion.
inline constexpr double kRbfFloor = 1e-30;

/// acc[k] += weight · b_k(r) and, when acc_r2 is non-empty,
/// acc_r2[k] += weight · r² · b_k(r). Walks outward from the nearest bin
/// using b_{k±1} = b_k·exp(±(u−k) − 1/2), so only two or three
/// exponentials are evaluated per call.
inline void accumulate_rbf(double r, double weight, const RBFConfig& cfg, std::span<double> acc,
                           std::span<double> acc_r2 = {}) {
  const int K = cfg.bins;
  const double u = r / cfg.width();  // position in bin units; center k sits at u = k
  int k0 = static_cast<int>(std::lround(u));
  if (k0 < 1) k0 = 1;
  if (k0 > K) k0 = K;
  const double r2w = r * r * weight;
  const bool with_r2 = !acc_r2.empty();
  constexpr double kInvE = 0.36787944117144233;  // e^{-1}

  const double d0 = u - k0;
  const double b0 = std::exp(-0.5 * d0 * d0);
  acc[k0 - 1] += weight * b0;
  if (with_r2) acc_r2[k0 - 1] += r2w * b0;

  double b = b0;
  double g = std::exp(d0 - 0.5);  // b_{k+1}/b_k at k = k0
  for (int k = k0 + 1; k <= K; ++k) {
    b *= g;
    if (b < kRbfFloor) break;
    g *= kInvE;
    acc[k - 1] += weight * b;
    if (with_r2) acc_r2[k - 1] += r2w * b;
  }
  b = b0;
  double h = std::exp(-d0 - 0.5);  // b_{k-1}/b_k at k = k0
  for (int k = k0 - 1; k >= 1; --k) {
    b *= h;
    if (b < kRbfFloor) break;
    h *= kInvE;
    acc[k - 1] += weight * b;
    if (with_r2) acc_r2[k - 1] += r2w * b;
  }
}

}  // namespace detail

/// Shifted ELU ρ(x; a, b) = (1−b)·ELU(a·x/(1−b)) + 1.
inline double shifted_elu(double x, double a, double b) {
  const double z = a * x / (1.0 - b);
  const double elu = z < 0.0 ? std::expm1(z) : z;
  return (1.0 - b) * elu + 1.0;
}

/// dρ/dx; equals a on the linear branch.
inline double shifted_elu_derivative(double x, double a, double b) {
  const double z = a * x / (1.0 - b);
  return z < 0.0 ? a * std::exp(z) : a;
}

enum class SigmaMode { real, reciprocal };

/// Per-head parameterization of the Gaussian tail length.
///   real:        σ⁻² = r0⁻² ρ((q·w − m)/s)   ⇒ σ < r0/√b
///   reciprocal:  σ̄²  = r0²  ρ((q·w − m)/s)   ⇒ σ̄ > r0·√b
/// w is trainable; m and s are frozen after calibration.
struct SigmaParams {
  Tensor w;  // d_K × 1
  double m = 0.0;
  double s = 1.0;
  bool calibrated = false;
  SigmaMode mode = SigmaMode::real;
  double r0 = 1.4;
  double a = 0.1;
  double b = 0.5;

  static SigmaParams real_space(std::size_t dk) { return {Tensor(dk, 1), 0.0, 1.0, false, SigmaMode::real, 1.4, 0.1, 0.5}; }
  static SigmaParams reciprocal_space(std::size_t dk) {
    return {Tensor(dk, 1), 0.0, 1.0, false, SigmaMode::reciprocal, 2.2, 0.1, 0.5};
  }

  /// Upper bound (real) or lower bound (reciprocal) on the produced length.
  [[nodiscard]] double limit() const { return mode == SigmaMode::real ? r0 / std::sqrt(b) : r0 * std::sqrt(b); }

  void validate() const {
    if (!(b > 0.0 && b < 1.0)) throw ValidationError("sigma parameter b must lie in (0,1)");
    if (!(a > 0.0)) throw ValidationError("sigma parameter a must be positive");
    if (!(s > 0.0)) throw ValidationError("sigma parameter s must be positive");
  }
};

inline double query_projection(std::span<const double> q, const SigmaParams& p) {
  if (q.size() != p.w.size()) throw ValidationError("sigma_from_query: query/w dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) acc += q[i] * p.w[i];
  return acc;
}

/// σ given the standardized projection x = (q·w − m)/s.
inline double sigma_from_projection(double x, const SigmaParams& p) {
  const double rho = shifted_elu(x, p.a, p.b);
  return p.mode == SigmaMode::real ? p.r0 / std::sqrt(rho) : p.r0 * std::sqrt(rho);
}

inline double sigma_from_query(std::span<const double> q, const SigmaParams& p) {
  if (!p.calibrated) throw ValidationError("sigma_from_query: parameters are not calibrated");
  return sigma_from_projection((query_projection(q, p) - p.m) / p.s, p);
}

inline SigmaParams calibrate_sigma_from_projections(SigmaParams p, std::span<const double> proj) {
  if (proj.empty()) throw ValidationError("calibrate_sigma: empty batch");
  const double n = static_cast<double>(proj.size());
  const double mean = std::accumulate(proj.begin(), proj.end(), 0.0) / n;
  double var = 0.0;
  for (double x : proj) var += (x - mean) * (x - mean);
  var /= n;
  double sd = std::sqrt(var);
  if (!(sd >= 1e-8)) sd = 1.0;
  p.m = mean;
  p.s = sd;
  p.calibrated = true;
  return p;
}

/// Sets m and s to the mean and population standard deviation of q·w over
/// the batch; s falls back to 1 when the spread is below 1e-8.
inline SigmaParams calibrate_sigma(SigmaParams p, std::span<const std::vector<double>> queries) {
  if (queries.empty()) throw ValidationError("calibrate_sigma: empty batch");
  std::vector<double> proj;
  proj.reserve(queries.size());
  for (const auto& q : queries) proj.push_back(query_projection(q, p));
  return calibrate_sigma_from_projections(std::move(p), proj);
}

/// β = W_Eᵀ · beta_rbf with W_E stored K × d_V.
inline std::vector<double> value_position_project(std::span<const double> beta_rbf, const Tensor& edge) {
  if (edge.rows() != beta_rbf.size()) {
    throw ValidationError("value_position_project: expected " + std::to_string(beta_rbf.size()) +
                          " rows in W_E, got " + edge.shape_string());
  }
  std::vector<double> out(edge.cols(), 0.0);
  for (std::size_t k = 0; k < edge.rows(); ++k) {
    for (std::size_t c = 0; c < edge.cols(); ++c) out[c] += beta_rbf[k] * edge(k, c);
  }
  return out;
}

}  // namespace xformer

#endif  // XFORMER_ENCODINGS_HPP
