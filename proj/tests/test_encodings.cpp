#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "xformer/encodings.hpp"

namespace xformer {
namespace {

SigmaParams unit_w(SigmaMode mode, std::size_t dk) {
  auto p = mode == SigmaMode::real ? SigmaParams::real_space(dk) : SigmaParams::reciprocal_space(dk);
  p.w[0] = 1.0;
  p.calibrated = true;
  return p;
}

TEST(RbfExpandTest, CentersAndOffsets) {
  RBFConfig cfg;
  const auto at_center = rbf_expand(cfg.center(10), cfg);
  EXPECT_DOUBLE_EQ(at_center[9], 1.0);
  const auto offset = rbf_expand(cfg.center(10) + cfg.width(), cfg);
  EXPECT_NEAR(offset[9], std::exp(-0.5), 1e-15);
  const auto zero = rbf_expand(0.0, cfg);
  EXPECT_NEAR(zero[0], 0.6065306597, 1e-10);
  // Far bins underflow to zero in double precision.
  for (double b : zero) {
    EXPECT_GE(b, 0.0);
    EXPECT_LE(b, 1.0);
  }
  for (int k = 0; k < 30; ++k) EXPECT_GT(zero[k], 0.0);
  EXPECT_THROW(rbf_expand(-0.1, cfg), ValidationError);
}

TEST(RbfExpandTest, CentersIncreaseAndSlopeIsBounded) {
  RBFConfig cfg;
  for (int k = 2; k <= cfg.bins; ++k) EXPECT_GT(cfg.center(k), cfg.center(k - 1));
  // |db/dr| ≤ 1/(width·√e) for a unit-height Gaussian of this width.
  const double lip = 1.0 / (cfg.width() * std::exp(0.5));
  const double h = 1e-3;
  auto prev = rbf_expand(0.0, cfg);
  for (double r = h; r < 16.0; r += h) {
    const auto cur = rbf_expand(r, cfg);
    for (int k = 0; k < cfg.bins; ++k) EXPECT_LE(std::abs(cur[k] - prev[k]), lip * h * (1 + 1e-9));
    prev = cur;
  }
}

TEST(RbfAccumulateTest, RecurrenceMatchesDirectExpansion) {
  RBFConfig cfg;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 20.0);
  for (int t = 0; t < 200; ++t) {
    const double r = u(rng);
    std::vector<double> acc(cfg.bins, 0.0), acc_r2(cfg.bins, 0.0);
    detail::accumulate_rbf(r, 0.75, cfg, acc, acc_r2);
    const auto b = rbf_expand(r, cfg);
    for (int k = 0; k < cfg.bins; ++k) {
      const double tol = std::max(1e-13 * b[k], 1e-30);
      EXPECT_NEAR(acc[k], 0.75 * b[k], tol);
      EXPECT_NEAR(acc_r2[k], 0.75 * r * r * b[k], tol * (1 + r * r));
    }
  }
}

TEST(ShiftedEluTest, Examples) {
  EXPECT_EQ(shifted_elu(0.0, 0.1, 0.5), 1.0);
  EXPECT_NEAR(shifted_elu(1.0, 0.1, 0.5), 1.1, 1e-15);
  EXPECT_NEAR(shifted_elu(-1e4, 0.1, 0.5), 0.5, 1e-15);
  for (double x = -50.0; x < 50.0; x += 0.37) EXPECT_GT(shifted_elu(x, 0.1, 0.5), 0.5);
  EXPECT_EQ(shifted_elu_derivative(2.0, 0.1, 0.5), 0.1);
}

TEST(SigmaFromQueryTest, DesignPointsAndLimits) {
  auto real = unit_w(SigmaMode::real, 4);
  auto recip = unit_w(SigmaMode::reciprocal, 4);
  real.m = recip.m = 0.3;
  const std::vector<double> at_mean{0.3, 0.0, 0.0, 0.0};
  EXPECT_DOUBLE_EQ(sigma_from_query(at_mean, real), 1.4);
  EXPECT_DOUBLE_EQ(sigma_from_query(at_mean, recip), 2.2);
  const std::vector<double> far{-1e6, 0.0, 0.0, 0.0};
  EXPECT_NEAR(sigma_from_query(far, real), 1.4 / std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(sigma_from_query(far, real), 1.9799, 1e-4);
  EXPECT_NEAR(sigma_from_query(far, recip), 2.2 * std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(sigma_from_query(far, recip), 1.5556, 1e-4);
  auto raw = SigmaParams::real_space(4);
  EXPECT_THROW(sigma_from_query(at_mean, raw), ValidationError);
}

TEST(SigmaFromQueryTest, StrictBoundsOnRandomQueries) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> scale(-12.0, 12.0);
  auto real = unit_w(SigmaMode::real, 1);
  auto recip = unit_w(SigmaMode::reciprocal, 1);
  for (int t = 0; t < 200000; ++t) {
    const std::vector<double> q{g(rng) * std::pow(10.0, scale(rng))};
    EXPECT_LT(sigma_from_query(q, real), 1.98);
    EXPECT_GT(sigma_from_query(q, recip), 1.5556);
  }
}

TEST(SigmaFromQueryTest, DerivativeMatchesFiniteDifferences) {
  for (auto mode : {SigmaMode::real, SigmaMode::reciprocal}) {
    auto p = unit_w(mode, 1);
    for (double x : {-30.0, -3.0, -0.5, 0.5, 2.0, 25.0}) {
      const double h = 1e-6;
      const double fd = (sigma_from_projection(x + h, p) - sigma_from_projection(x - h, p)) / (2 * h);
      const double rho = shifted_elu(x, p.a, p.b);
      const double drho = shifted_elu_derivative(x, p.a, p.b);
      const double analytic = mode == SigmaMode::real ? -0.5 * p.r0 * std::pow(rho, -1.5) * drho
                                                      : 0.5 * p.r0 * drho / std::sqrt(rho);
      EXPECT_NEAR(fd, analytic, 1e-6 * std::abs(analytic) + 1e-12) << "x=" << x;
    }
  }
}

TEST(CalibrateSigmaTest, StatisticsAndFallback) {
  auto p = SigmaParams::real_space(2);
  p.w[0] = 1.0;
  const std::vector<std::vector<double>> same{{0.4, 9.0}, {0.4, -3.0}};
  auto c = calibrate_sigma(p, same);
  EXPECT_EQ(c.m, 0.4);
  EXPECT_EQ(c.s, 1.0);
  EXPECT_TRUE(c.calibrated);

  const std::vector<std::vector<double>> two{{0.0, 0.0}, {2.0, 0.0}};
  c = calibrate_sigma(p, two);
  EXPECT_EQ(c.m, 1.0);
  EXPECT_EQ(c.s, 1.0);

  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(3.0, 2.0);
  std::vector<std::vector<double>> batch;
  for (int i = 0; i < 64; ++i) batch.push_back({g(rng), g(rng)});
  c = calibrate_sigma(p, batch);
  double mean = 0.0;
  for (const auto& q : batch) mean += (query_projection(q, c) - c.m) / c.s;
  EXPECT_NEAR(mean / 64.0, 0.0, 1e-12);

  EXPECT_THROW(calibrate_sigma(p, std::vector<std::vector<double>>{}), ValidationError);
}

TEST(ValuePositionProjectTest, ZeroIdentityAndLinearity) {
  const std::vector<double> x{0.1, 0.7, 0.3, 0.9};
  const std::vector<double> y{0.5, 0.2, 0.8, 0.05};
  Tensor zero(4, 3);
  for (double v : value_position_project(x, zero)) EXPECT_EQ(v, 0.0);
  Tensor eye(4, 3);
  for (std::size_t k = 0; k < 3; ++k) eye(k, k) = 1.0;
  const auto copied = value_position_project(x, eye);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(copied[k], x[k]);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor w(4, 3);
  for (auto& v : w.data()) v = u(rng);
  std::vector<double> xy(4);
  for (std::size_t k = 0; k < 4; ++k) xy[k] = x[k] + y[k];
  const auto a = value_position_project(xy, w);
  const auto b = value_position_project(x, w);
  const auto c = value_position_project(y, w);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(a[k], b[k] + c[k], 1e-12);
  EXPECT_THROW(value_position_project(x, Tensor(3, 3)), ValidationError);
}

}  // namespace
}  // namespace xformer
