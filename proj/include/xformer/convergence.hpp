#ifndef XFORMER_CONVERGENCE_HPP
#define XFORMER_CONVERGENCE_HPP

// Lattice-sum convergence table: for each (σ, c) and atom pair, the
// adaptive range, the truncated sum Z̃ = exp(α), the residual bound and
// the brute-force residual against a large fixed box.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "lattice_sums.hpp"
#include "structures.hpp"

namespace xformer {

struct ConvergenceRow {
  double sigma = 0.0;
  double coverage = 0.0;
  std::size_t i = 0;
  std::size_t j = 0;
  SummationRange range;
  double exp_alpha = 0.0;
  double bound = 0.0;
  double residual = 0.0;
};

inline std::vector<ConvergenceRow> convergence_table(const CrystalStructure& s, const std::vector<double>& sigmas,
                                                     const std::vector<double>& coverages, int cutoff = 12) {
  std::vector<ConvergenceRow> rows;
  const auto& lat = s.lattice();
  for (double sigma : sigmas) {
    if (!(sigma > 0.0)) throw ValidationError("sigma must be positive");
    for (double c : coverages) {
      if (!(c > 0.0)) throw ValidationError("coverage multiplier must be positive");
      const auto range = adaptive_range(sigma, lat, c);
      for (std::size_t i = 0; i < s.size(); ++i) {
        for (std::size_t j = 0; j < s.size(); ++j) {
          const Vec3 d = centered_delta(lat, s.positions()[i], s.positions()[j]);
          ConvergenceRow r;
          r.sigma = sigma;
          r.coverage = c;
          r.i = i;
          r.j = j;
          r.range = range;
          r.exp_alpha = std::exp(gaussian_alpha(d, lat, sigma, range));
          r.bound = residual_bound(error_bound_input(d, lat, sigma, range, c));
          r.residual = brute_force_residual(d, lat, sigma, range, cutoff);
          rows.push_back(r);
        }
      }
    }
  }
  return rows;
}

/// Shortest text that reads back to the same double.
inline std::string format_double(double x) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline void write_convergence_csv(std::ostream& out, const std::vector<ConvergenceRow>& rows) {
  out << "sigma,c,i,j,R1,R2,R3,exp_alpha,bound,residual\n";
  for (const auto& r : rows) {
    out << format_double(r.sigma) << ',' << format_double(r.coverage) << ',' << r.i << ',' << r.j << ',' << r.range[0] << ','
        << r.range[1] << ',' << r.range[2] << ',' << format_double(r.exp_alpha) << ',' << format_double(r.bound) << ','
        << format_double(r.residual) << '\n';
  }
}

}  // namespace xformer

#endif  // XFORMER_CONVERGENCE_HPP
