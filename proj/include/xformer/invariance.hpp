#ifndef XFORMER_INVARIANCE_HPP
#define XFORMER_INVARIANCE_HPP

// Invariance suite: unit-cell permutation, rigid motion (including one
// reflection), and periodic re-expression of the cell.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "model.hpp"
#include "structures.hpp"
#include "tensor.hpp"

namespace xformer {

struct InvarianceTolerances {
  double permutation = 1e-12;
  double euclidean = 1e-6;
  double periodic = 1e-4;
  /// Coverage multiplier used for the periodic test.
  double periodic_coverage = 5.0;
};

struct InvarianceCase {
  double permutation = 0.0;
  double euclidean = 0.0;
  double periodic = 0.0;
};

struct InvarianceReport {
  std::vector<InvarianceCase> cases;
  InvarianceCase max;
  bool permutation_ok = true;
  bool euclidean_ok = true;
  bool periodic_ok = true;
  [[nodiscard]] bool passed() const { return permutation_ok && euclidean_ok && periodic_ok; }
};

/// Uniformly random rotation (det = +1) from a normalized Gaussian quaternion.
inline Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  double q[4];
  double n = 0.0;
  do {
    n = 0.0;
    for (double& x : q) {
      x = g(rng);
      n += x * x;
    }
  } while (n < 1e-12);
  n = std::sqrt(n);
  for (double& x : q) x /= n;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  return Mat3{Vec3{1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)},
              Vec3{2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)},
              Vec3{2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)}};
}

/// Deviation between two evaluations of the same structure: the larger of
/// the state deviation max|a−b| / max|a| and the prediction deviation
/// |y_a − y_b| / max(|y_a|, 1).
inline double output_deviation(const Tensor& states_a, double y_a, const Tensor& states_b, double y_b) {
  const double states = relative_deviation(states_b, states_a);
  const double pred = std::abs(y_a - y_b) / std::max(std::abs(y_a), 1.0);
  return std::max(states, pred);
}

namespace detail {

struct Evaluated {
  Tensor states;
  double prediction;
};

inline Evaluated evaluate_model(const CrystalStructure& s, const ModelParams& p) {
  return {atom_states(s, p), predict(s, p)};
}

}  // namespace detail

/// Runs the three invariance tests on every structure. Random draws come
/// from `seed`; the periodic test evaluates a copy of the model whose
/// coverage multiplier is tol.periodic_coverage.
inline InvarianceReport check_invariances(const ModelParams& params, std::span<const CrystalStructure> structures,
                                          std::uint64_t seed, const InvarianceTolerances& tol = {}) {
  std::mt19937_64 rng(seed);
  ModelParams wide = params;
  wide.config.attention.coverage = tol.periodic_coverage;
  InvarianceReport report;
  for (const auto& s : structures) {
    InvarianceCase c;
    const auto base = detail::evaluate_model(s, params);

    std::vector<std::size_t> perm(s.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    {
      const auto out = detail::evaluate_model(permute(s, perm), params);
      Tensor expect(out.states.rows(), out.states.cols());
      for (std::size_t k = 0; k < perm.size(); ++k) {
        for (std::size_t d = 0; d < expect.cols(); ++d) expect(k, d) = base.states(perm[k], d);
      }
      c.permutation = output_deviation(expect, base.prediction, out.states, out.prediction);
    }

    std::uniform_real_distribution<double> shift(-10.0, 10.0);
    for (int reflect = 0; reflect < 2; ++reflect) {
      Mat3 r = random_rotation(rng);
      if (reflect) {
        for (auto& row : r) row[0] = -row[0];  // R·diag(−1, 1, 1)
      }
      const Vec3 b{shift(rng), shift(rng), shift(rng)};
      const auto out = detail::evaluate_model(rigid_transform(s, r, b), params);
      c.euclidean = std::max(c.euclidean, output_deviation(base.states, base.prediction, out.states, out.prediction));
    }

    {
      std::uniform_int_distribution<int> kd(1, 2);
      TranslationIndex k{1, 1, 1};
      while (k == TranslationIndex{1, 1, 1}) k = {kd(rng), kd(rng), kd(rng)};
      std::uniform_real_distribution<double> pshift(-5.0, 5.0);
      const Vec3 p{pshift(rng), pshift(rng), pshift(rng)};
      const auto ref = detail::evaluate_model(s, wide);
      const auto out = detail::evaluate_model(unit_cell_slice(s, k, p), wide);
      const std::size_t copies = static_cast<std::size_t>(k[0] * k[1] * k[2]);
      Tensor expect(out.states.rows(), out.states.cols());
      for (std::size_t t = 0; t < expect.rows(); ++t) {
        for (std::size_t d = 0; d < expect.cols(); ++d) expect(t, d) = ref.states(t / copies, d);
      }
      c.periodic = output_deviation(expect, ref.prediction, out.states, out.prediction);
    }

    report.max.permutation = std::max(report.max.permutation, c.permutation);
    report.max.euclidean = std::max(report.max.euclidean, c.euclidean);
    report.max.periodic = std::max(report.max.periodic, c.periodic);
    report.cases.push_back(c);
  }
  report.permutation_ok = report.max.permutation <= tol.permutation;
  report.euclidean_ok = report.max.euclidean <= tol.euclidean;
  report.periodic_ok = report.max.periodic <= tol.periodic;
  return report;
}

}  // namespace xformer

#endif  // XFORMER_INVARIANCE_HPP
