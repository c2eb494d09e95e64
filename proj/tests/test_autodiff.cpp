#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "xformer/attention.hpp"
#include "xformer/autodiff.hpp"

namespace xformer {
namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(r, c);
  for (auto& x : t.data()) x = u(rng);
  return t;
}

// Builds loss = f(tape, leaf) and checks ∂loss/∂leaf against central differences.
template <class Build>
ad::GradCheckReport check_leaf(Tensor& leaf, Build build, ad::GradCheckOptions opt = {}) {
  ad::Tape tape;
  auto v = tape.parameter(leaf);
  auto loss = build(tape, v);
  tape.backward(loss);
  const Tensor g = tape.gradient(v);
  auto f = [&] {
    ad::Tape t;
    auto out = build(t, t.parameter(leaf));
    return ad::Evaluation{t.value(out)[0], t.kink_signature()};
  };
  return ad::grad_check(f, leaf.data(), g.data(), opt);
}

TEST(BackwardTest, LinearMapGradientIsOuterProduct) {
  ad::Tape tape;
  Tensor w{{1.0, 2.0, 3.0}, {4.0, 5.0, 6.0}};
  Tensor x{{0.5}, {-1.0}, {2.0}};
  auto wv = tape.parameter(w);
  auto loss = ad::sum(tape, ad::matmul(tape, wv, tape.constant(x)));
  tape.backward(loss);
  const Tensor g = tape.gradient(wv);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(g(i, j), x[j]);
  }
}

TEST(BackwardTest, DeadReluHasZeroGradient) {
  ad::Tape tape;
  Tensor x{{-0.5, -2.0}};
  auto xv = tape.parameter(x);
  tape.backward(ad::sum(tape, ad::relu(tape, xv)));
  const Tensor g = tape.gradient(xv);
  for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(BackwardTest, UnreachableLeafGetsZeros) {
  ad::Tape tape;
  Tensor a{{1.0}}, b{{2.0, 3.0}};
  auto av = tape.parameter(a);
  auto bv = tape.parameter(b);
  tape.backward(ad::sum(tape, ad::exp(tape, av)));
  EXPECT_EQ(tape.gradient(bv), Tensor(1, 2));
}

TEST(BackwardTest, NonScalarLossRejected) {
  ad::Tape tape;
  Tensor a{{1.0, 2.0}};
  auto av = tape.parameter(a);
  EXPECT_THROW(tape.backward(ad::exp(tape, av)), ValidationError);
}

TEST(BackwardTest, NanReportsOriginatingPrimitive) {
  ad::Tape tape;
  Tensor a{{-1.0}};
  tape.set_scope("block 3");
  try {
    ad::log(tape, tape.parameter(a));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("'log'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("block 3"), std::string::npos) << msg;
  }
}

TEST(GradCheckTest, QuadraticAgreesToMachinePrecision) {
  Tensor x{{0.3, -1.2, 2.5}};
  auto rep = check_leaf(x, [](ad::Tape& t, ad::Var v) { return ad::sum(t, ad::pow(t, v, 2.0)); });
  EXPECT_TRUE(rep.passed());
  EXPECT_EQ(rep.checked, 3u);
  EXPECT_LT(rep.max_abs_error, 1e-9);
}

TEST(GradCheckTest, WrongGradientFails) {
  std::vector<double> x{0.3, -1.2, 2.5};
  const std::vector<double> wrong{0.6, -2.4, 5.0 + 1e-2};  // last entry off
  auto f = [&] { return ad::Evaluation{x[0] * x[0] + x[1] * x[1] + x[2] * x[2], {}}; };
  auto rep = ad::grad_check(f, std::span<double>(x), wrong);
  EXPECT_FALSE(rep.passed());
  EXPECT_EQ(rep.failures, 1u);
  EXPECT_EQ(rep.worst_index, 2u);
}

TEST(GradCheckTest, KinkCrossingIsExcluded) {
  Tensor x{{3e-5, 0.5}};
  auto rep = check_leaf(x, [](ad::Tape& t, ad::Var v) { return ad::sum(t, ad::abs(t, v)); });
  EXPECT_EQ(rep.excluded, 0u);
  Tensor y{{4e-6, 0.5}};
  rep = check_leaf(y, [](ad::Tape& t, ad::Var v) { return ad::sum(t, ad::abs(t, v)); }, {1e-5, 1e-4, 1e-7});
  EXPECT_EQ(rep.excluded, 1u);
  EXPECT_TRUE(rep.passed());
}

// Σ (y · M) for a fixed random M, so every output entry carries a distinct weight.
ad::Var weighted_total(ad::Tape& t, ad::Var y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return ad::sum(t, ad::matmul(t, y, t.constant(random_tensor(t.value(y).cols(), 2, rng))));
}

TEST(PrimitiveGradientTest, ElementwiseOps) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor(3, 4, rng, 0.2, 2.0);
  Tensor signed_x = random_tensor(3, 4, rng, -2.0, 2.0);
  using Op = ad::Var (*)(ad::Tape&, ad::Var);
  const std::vector<std::pair<const char*, Op>> positive{
      {"exp", [](ad::Tape& t, ad::Var v) { return ad::exp(t, v); }},
      {"log", [](ad::Tape& t, ad::Var v) { return ad::log(t, v); }},
      {"sqrt", [](ad::Tape& t, ad::Var v) { return ad::sqrt(t, v); }},
      {"reciprocal", [](ad::Tape& t, ad::Var v) { return ad::reciprocal(t, v); }},
      {"pow", [](ad::Tape& t, ad::Var v) { return ad::pow(t, v, -1.5); }},
  };
  for (auto [name, op] : positive) {
    auto rep = check_leaf(x, [op](ad::Tape& t, ad::Var v) { return weighted_total(t, op(t, v)); });
    EXPECT_TRUE(rep.passed()) << name << " max rel " << rep.max_rel_error;
  }
  const std::vector<std::pair<const char*, Op>> kinked{
      {"affine", [](ad::Tape& t, ad::Var v) { return ad::affine(t, v, -2.0, 0.3); }},
      {"relu", [](ad::Tape& t, ad::Var v) { return ad::relu(t, v); }},
      {"elu", [](ad::Tape& t, ad::Var v) { return ad::elu(t, v); }},
      {"shifted_elu", [](ad::Tape& t, ad::Var v) { return ad::shifted_elu(t, v, 0.1, 0.5); }},
      {"abs", [](ad::Tape& t, ad::Var v) { return ad::abs(t, v); }},
      {"softmax_rows", [](ad::Tape& t, ad::Var v) { return ad::softmax_rows(t, v); }},
      {"mean_rows", [](ad::Tape& t, ad::Var v) { return ad::mean_rows(t, v); }},
      {"slice_cols", [](ad::Tape& t, ad::Var v) { return ad::slice_cols(t, v, 1, 3); }},
      {"concat_cols", [](ad::Tape& t, ad::Var v) { return ad::concat_cols(t, {ad::exp(t, v), v}); }},
  };
  for (auto [name, op] : kinked) {
    auto rep = check_leaf(signed_x, [op](ad::Tape& t, ad::Var v) { return weighted_total(t, op(t, v)); });
    EXPECT_TRUE(rep.passed()) << name << " max rel " << rep.max_rel_error;
  }
}

TEST(PrimitiveGradientTest, BinaryAndStructuralOps) {
  std::mt19937_64 rng(2);
  Tensor a = random_tensor(3, 4, rng);
  const Tensor b = random_tensor(4, 5, rng);
  const Tensor c = random_tensor(2, 4, rng);
  const Tensor bias = random_tensor(1, 4, rng);
  const Tensor pairs = random_tensor(9, 2, rng);
  const Tensor weights = random_tensor(3, 3, rng);

  auto check = [&](const char* name, auto build) {
    auto rep = check_leaf(a, build);
    EXPECT_TRUE(rep.passed()) << name << " max rel " << rep.max_rel_error;
  };
  check("matmul lhs", [&](ad::Tape& t, ad::Var v) { return weighted_total(t, ad::matmul(t, v, t.constant(b))); });
  check("matmul rhs", [&](ad::Tape& t, ad::Var v) {
    return weighted_total(t, ad::matmul(t, t.constant(random_tensor(2, 3, rng = std::mt19937_64(5))), v));
  });
  check("matmul_nt", [&](ad::Tape& t, ad::Var v) { return weighted_total(t, ad::matmul_nt(t, v, t.constant(c))); });
  check("matmul_nt self", [&](ad::Tape& t, ad::Var v) { return weighted_total(t, ad::matmul_nt(t, v, v)); });
  check("add", [&](ad::Tape& t, ad::Var v) { return weighted_total(t, ad::add(t, v, ad::exp(t, v))); });
  check("add_bias rows", [&](ad::Tape& t, ad::Var v) { return weighted_total(t, ad::add_bias(t, v, t.constant(bias))); });
  check("add_bias bias", [&](ad::Tape& t, ad::Var v) {
    return weighted_total(t, ad::add_bias(t, t.constant(b), ad::slice_cols(t, ad::gather_rows(t, ad::concat_cols(t, {v, v}), {1}), 0, 5)));
  });
  check("gather_rows", [&](ad::Tape& t, ad::Var v) { return weighted_total(t, ad::gather_rows(t, v, {2, 0, 2, 1})); });
  check("pair_weighted_sum values", [&](ad::Tape& t, ad::Var v) {
    auto p = ad::concat_cols(t, {ad::gather_rows(t, v, {0, 1, 2, 0, 1, 2, 0, 1, 2}), t.constant(pairs)});
    return weighted_total(t, ad::pair_weighted_sum(t, t.constant(weights), p));
  });
  check("pair_weighted_sum weights", [&](ad::Tape& t, ad::Var v) {
    auto w = ad::slice_cols(t, v, 0, 3);
    return weighted_total(t, ad::pair_weighted_sum(t, w, t.constant(pairs)));
  });
}

TEST(LinearityTest, GradientOfCombinationIsCombinationOfGradients) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor(2, 3, rng, 0.1, 1.0);
  auto f = [](ad::Tape& t, ad::Var v) { return weighted_total(t, ad::softmax_rows(t, v), 7); };
  auto g = [](ad::Tape& t, ad::Var v) { return weighted_total(t, ad::log(t, v), 8); };
  auto grad_of = [&](auto build) {
    ad::Tape t;
    auto v = t.parameter(x);
    t.backward(build(t, v));
    return t.gradient(v);
  };
  const double a = 0.7, b = -2.3;
  const Tensor combined = grad_of([&](ad::Tape& t, ad::Var v) {
    return ad::add(t, ad::scale(t, f(t, v), a), ad::scale(t, g(t, v), b));
  });
  const Tensor gf = grad_of(f), gg = grad_of(g);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(combined[i], a * gf[i] + b * gg[i], 1e-12);
}

TEST(DeterminismTest, IdenticalTapesGiveIdenticalGradients) {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor(4, 4, rng);
  auto run = [&] {
    ad::Tape t;
    auto v = t.parameter(x);
    t.backward(weighted_total(t, ad::softmax_rows(t, ad::matmul_nt(t, v, v))));
    return t.gradient(v);
  };
  EXPECT_TRUE(run() == run());
}

// Closed forms for a single pair: with w_n the normalized Gaussian weights,
// dα/dσ = Σ w_n r_n² / σ³ and ∇_δ α = −Σ w_n (δ + L n) / σ².
struct PairOracle {
  double dalpha_dsigma = 0.0;
  Vec3 grad_delta{0, 0, 0};
};

PairOracle pair_oracle(const Vec3& delta, const Lattice& lat, double sigma, const SummationRange& range) {
  std::vector<double> r2;
  std::vector<Vec3> v;
  for (int n1 = -range[0]; n1 <= range[0]; ++n1) {
    for (int n2 = -range[1]; n2 <= range[1]; ++n2) {
      for (int n3 = -range[2]; n3 <= range[2]; ++n3) {
        const Vec3 d = delta + lat.translation({n1, n2, n3});
        v.push_back(d);
        r2.push_back(norm2(d));
      }
    }
  }
  double z = 0.0;
  for (double x : r2) z += std::exp(-x / (2 * sigma * sigma));
  PairOracle o;
  for (std::size_t k = 0; k < r2.size(); ++k) {
    const double w = std::exp(-r2[k] / (2 * sigma * sigma)) / z;
    o.dalpha_dsigma += w * r2[k] / (sigma * sigma * sigma);
    o.grad_delta = o.grad_delta + (-w / (sigma * sigma)) * v[k];
  }
  return o;
}

TEST(LatticeSumGradientTest, AlphaDerivativesMatchClosedForms) {
  const Lattice lat = Lattice::from_parameters(2.8, 3.1, 3.7, 80, 100, 95);
  const Vec3 delta{0.4, -0.9, 1.3};
  const auto range = SummationRange::uniform(4);
  for (double sigma : {0.8, 1.4, 1.9}) {
    const auto oracle = pair_oracle(delta, lat, sigma, range);
    const double h = 1e-6;
    const double fd_sigma =
        (gaussian_alpha(delta, lat, sigma + h, range) - gaussian_alpha(delta, lat, sigma - h, range)) / (2 * h);
    EXPECT_NEAR(fd_sigma, oracle.dalpha_dsigma, 1e-8 * std::abs(oracle.dalpha_dsigma) + 1e-9);
    for (std::size_t a = 0; a < 3; ++a) {
      Vec3 up = delta, down = delta;
      up[a] += h;
      down[a] -= h;
      const double fd = (gaussian_alpha(up, lat, sigma, range) - gaussian_alpha(down, lat, sigma, range)) / (2 * h);
      EXPECT_NEAR(fd, oracle.grad_delta[a], 1e-8);
    }
  }
}

TEST(LatticeSumGradientTest, EncodingNodesMatchFiniteDifferences) {
  const auto s = CrystalStructure::from_fractional(Lattice::from_parameters(2.6, 3.3, 4.1, 75, 98, 108),
                                                   {{0.1, 0.2, 0.3}, {0.7, 0.45, 0.9}, {0.3, 0.8, 0.6}}, {6, 8, 14});
  AttentionConfig cfg;
  cfg.dual_space = true;
  cfg.fixed_range = 3;
  PairGeometry geo(s, cfg);
  std::mt19937_64 rng(12);
  Tensor sigma = random_tensor(3, 1, rng, 1.0, 1.9);
  const Tensor wa = random_tensor(3, 3, rng);
  const Tensor wb = random_tensor(cfg.rbf.bins, 1, rng);
  auto real = check_leaf(sigma, [&](ad::Tape& t, ad::Var v) {
    auto enc = periodic_encodings(t, v, geo, cfg, true);
    auto la = ad::sum(t, ad::matmul(t, enc.alpha, t.constant(wa)));
    auto lb = ad::sum(t, ad::matmul(t, enc.beta, t.constant(wb)));
    return ad::add(t, la, lb);
  });
  EXPECT_TRUE(real.passed()) << real.max_rel_error;
  EXPECT_EQ(real.checked, 3u);

  Tensor sigma_bar = random_tensor(3, 1, rng, 1.6, 2.4);
  auto recip = check_leaf(sigma_bar, [&](ad::Tape& t, ad::Var v) {
    return ad::sum(t, ad::matmul(t, reciprocal_encodings(t, v, geo), t.constant(wa)));
  });
  EXPECT_TRUE(recip.passed()) << recip.max_rel_error;
}

}  // namespace
}  // namespace xformer
