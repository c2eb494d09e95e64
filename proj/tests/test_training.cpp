#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "support.hpp"
#include "xformer/checkpoint.hpp"
#include "xformer/training.hpp"

namespace xformer {
namespace {

using testing::calibrated_params;
using testing::random_crystal;
using testing::small_config;

std::vector<StructureRecord> random_records(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<StructureRecord> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({"r" + std::to_string(i), random_crystal(rng, 3), g(rng)});
  return out;
}

std::vector<Sample> samples_of(const std::vector<StructureRecord>& recs) {
  std::vector<Sample> out;
  for (const auto& r : recs) out.push_back({&r.structure, *r.target});
  return out;
}

TEST(ScheduleTest, ExampleValuesAndMonotone) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(lr_at(0, cfg), 5e-4);
  EXPECT_NEAR(lr_at(4000, cfg), 5e-4 / std::sqrt(2.0), 1e-18);
  EXPECT_NEAR(lr_at(4000, cfg), 3.5355e-4, 1e-8);
  EXPECT_NEAR(lr_at(12000, cfg), 2.5e-4, 1e-18);
  for (std::int64_t t = 0; t < 20000; t += 7) EXPECT_LT(lr_at(t + 1, cfg), lr_at(t, cfg));
  EXPECT_THROW(lr_at(-1, cfg), ValidationError);
}

TEST(TrainConfigTest, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.swa_window = cfg.epochs + 1;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = TrainConfig{};
  cfg.lr = 0.0;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(ClipTest, NormTenScaledByTenth) {
  Gradients g{Tensor{{6.0, 0.0}}, Tensor{{0.0}, {8.0}}};
  EXPECT_DOUBLE_EQ(global_norm(g), 10.0);
  EXPECT_DOUBLE_EQ(clip_gradients(g, 1.0), 10.0);
  EXPECT_DOUBLE_EQ(g[0][0], 0.6);
  EXPECT_DOUBLE_EQ(g[1][1], 0.8);
  Gradients small{Tensor{{0.3, 0.4}}};
  clip_gradients(small, 1.0);
  EXPECT_EQ(small[0][0], 0.3);
}

TEST(TrainStepTest, ZeroGradientBatchOnlyDecays) {
  std::mt19937_64 rng(1);
  auto p = calibrated_params(small_config(1, 8, 2), 2);
  const auto s = random_crystal(rng, 3);
  const std::vector<Sample> batch{{&s, predict(s, p)}};
  const auto before = p;
  TrainConfig cfg;
  cfg.weight_decay = 0.01;
  auto st = make_adam_state(p);
  const double lr = 1e-3;
  const auto r = train_step(p, batch, st, lr, cfg);
  EXPECT_EQ(r.mae, 0.0);
  EXPECT_EQ(r.grad_norm, 0.0);
  const auto a = parameter_arrays(before);
  const auto b = parameter_arrays(p);
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k]->size(); ++i) EXPECT_EQ((*b[k])[i], (*a[k])[i] * (1.0 - lr * 0.01));
  }
}

TEST(TrainStepTest, AdamFirstStepMovesBySignTimesLr) {
  // With bias correction the first update is lr·g/(|g| + ε') ≈ lr·sign(g).
  auto p = calibrated_params(small_config(0, 8, 2), 3);
  const auto s = CrystalStructure::from_fractional(Lattice::cubic(3.0), {{0, 0, 0}}, {2});
  const std::vector<Sample> batch{{&s, predict(s, p) + 5.0}};
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.clip_norm = 1e9;
  const auto grads = batch_gradient(p, batch).grads;
  const auto before = p;
  auto st = make_adam_state(p);
  train_step(p, batch, st, 1e-3, cfg);
  const auto a = parameter_arrays(before);
  const auto b = parameter_arrays(p);
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k]->size(); ++i) {
      const double g = grads[k][i];
      const double expected = g == 0.0 ? 0.0 : -1e-3 * g / (std::abs(g) + 1e-8);
      EXPECT_NEAR((*b[k])[i] - (*a[k])[i], expected, 1e-15);
    }
  }
}

TEST(TrainStepTest, TenStepsAreBitIdentical) {
  const auto recs = random_records(6, 4);
  const auto batch = samples_of(recs);
  auto run = [&] {
    auto p = calibrated_params(small_config(1, 8, 2), 5);
    auto st = make_adam_state(p);
    TrainConfig cfg;
    for (int t = 0; t < 10; ++t) train_step(p, batch, st, lr_at(t, cfg), cfg);
    return serialize_checkpoint(p);
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainStepTest, ThreadedGradientMatchesSerial) {
  const auto recs = random_records(7, 6);
  const auto batch = samples_of(recs);
  const auto p = calibrated_params(small_config(1, 8, 2), 7);
  const auto serial = batch_gradient(p, batch, 1);
  const auto threaded = batch_gradient(p, batch, 3);
  EXPECT_NEAR(serial.mae, threaded.mae, 1e-15);
  for (std::size_t a = 0; a < serial.grads.size(); ++a) {
    EXPECT_LE(max_abs_diff(serial.grads[a], threaded.grads[a]), 1e-14 * (1.0 + max_abs(serial.grads[a])));
  }
  EXPECT_EQ(serialize_checkpoint(p), serialize_checkpoint(p));
  EXPECT_TRUE(batch_gradient(p, batch, 3).grads == threaded.grads);
}

TEST(TrainStepTest, LinearProbeLossDecreases) {
  const auto recs = random_records(4, 8);
  const auto batch = samples_of(recs);
  auto p = calibrated_params(small_config(0, 8, 2), 9);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.clip_norm = 1e300;
  cfg.lr = 1e-2;
  auto st = make_adam_state(p);
  const double first = batch_gradient(p, batch).mae;
  for (int t = 0; t < 50; ++t) train_step(p, batch, st, cfg.lr, cfg);
  EXPECT_LT(batch_gradient(p, batch).mae, 0.5 * first);
}

TEST(TrainStepTest, NonFiniteLossAborts) {
  std::mt19937_64 rng(10);
  auto p = calibrated_params(small_config(0, 8, 2), 1);
  const auto s = random_crystal(rng);
  const std::vector<Sample> batch{{&s, std::nan("")}};
  auto st = make_adam_state(p);
  EXPECT_THROW(train_step(p, batch, st, 1e-3, TrainConfig{}), NumericalError);
}

TEST(SwaTest, SingleCheckpointIsIdentity) {
  const auto p = calibrated_params(small_config(1, 8, 2), 11);
  const std::vector<ModelParams> one{p};
  EXPECT_EQ(serialize_checkpoint(swa_average(one)), serialize_checkpoint(p));
}

TEST(SwaTest, OppositeCheckpointsCancel) {
  auto p = calibrated_params(small_config(1, 8, 2), 12);
  auto neg = p;
  for (Tensor* t : parameter_arrays(neg)) *t *= -1.0;
  neg.blocks[0].sigma[0].m = 42.0;
  const std::vector<ModelParams> pair{p, neg};
  const auto avg = swa_average(pair);
  for (const Tensor* t : parameter_arrays(avg)) {
    for (double x : t->data()) EXPECT_EQ(x, 0.0);
  }
  EXPECT_EQ(avg.blocks[0].sigma[0].m, p.blocks[0].sigma[0].m);
}

TEST(SwaTest, MatchesHighPrecisionMean) {
  std::vector<ModelParams> snaps;
  for (std::uint64_t s = 0; s < 7; ++s) snaps.push_back(calibrated_params(small_config(1, 8, 2), 100 + s));
  const auto avg = swa_average(snaps);
  const auto out = parameter_arrays(avg);
  for (std::size_t a = 0; a < out.size(); ++a) {
    for (std::size_t i = 0; i < out[a]->size(); ++i) {
      // Pairwise sum in long double, independent of the accumulator's order.
      long double lo = 0.0L, hi = 0.0L;
      for (std::size_t k = 0; k < 3; ++k) lo += (*parameter_arrays(snaps[k])[a])[i];
      for (std::size_t k = 3; k < snaps.size(); ++k) hi += (*parameter_arrays(snaps[k])[a])[i];
      const double oracle = static_cast<double>((lo + hi) / 7.0L);
      EXPECT_NEAR((*out[a])[i], oracle, 1e-15 * std::max(1.0, std::abs(oracle)));
    }
  }
  EXPECT_THROW(swa_average(std::vector<ModelParams>{}), ValidationError);
  snaps.push_back(calibrated_params(small_config(2, 8, 2), 1));
  EXPECT_THROW(swa_average(snaps), ValidationError);
}

TEST(EvaluateTest, PerfectAndConstantPredictors) {
  auto recs = random_records(5, 13);
  const auto p = calibrated_params(small_config(1, 8, 2), 14);
  auto exact = recs;
  for (auto& r : exact) r.target = predict(r.structure, p);
  const auto perfect = evaluate(p, exact);
  EXPECT_EQ(perfect.mae, 0.0);
  EXPECT_EQ(perfect.predictions.size(), 5u);

  // Every prediction equals the output bias when the hidden layer is dead.
  auto flat = p;
  flat.head_out.weight.fill(0.0);
  flat.head_out.bias[0] = 0.25;
  double mad = 0.0;
  for (const auto& r : recs) mad += std::abs(*r.target - 0.25);
  EXPECT_NEAR(evaluate(flat, recs).mae, mad / 5.0, 1e-15);

  double mean = 0.0;
  for (const auto& r : recs) mean += *r.target;
  mean /= 5.0;
  double dev = 0.0;
  for (const auto& r : recs) dev += std::abs(*r.target - mean);
  EXPECT_NEAR(constant_predictor_mae(recs, recs), dev / 5.0, 1e-15);
}

TEST(TrainLoopTest, SwaWindowAndFrozenRate) {
  const auto recs = random_records(5, 15);
  auto p = init_params(small_config(1, 8, 2), 16);
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.swa_window = 3;
  cfg.batch_size = 2;
  TrainOptions opts;
  opts.keep_window_snapshots = true;
  int seen = 0;
  opts.on_epoch = [&](const EpochLog&) { ++seen; };
  const auto res = train(p, recs, recs, cfg, opts);
  EXPECT_EQ(seen, 6);
  EXPECT_EQ(res.steps, 18);
  ASSERT_EQ(res.window.size(), 3u);
  EXPECT_TRUE(is_calibrated(res.final_params));
  EXPECT_EQ(serialize_checkpoint(res.window.back()), serialize_checkpoint(res.final_params));
  // Epochs 4..6 run at lr_at(9), the rate reached when the window opens.
  EXPECT_EQ(res.history[2].lr, lr_at(8, cfg));
  for (int e = 3; e < 6; ++e) EXPECT_EQ(res.history[e].lr, lr_at(9, cfg));
  const auto avg = swa_average(res.window);
  for (std::size_t a = 0; a < parameter_arrays(avg).size(); ++a) {
    EXPECT_LE(max_abs_diff(*parameter_arrays(avg)[a], *parameter_arrays(res.swa_params)[a]), 1e-15);
  }
  for (const auto& log : res.history) EXPECT_TRUE(log.val_mae.has_value());
}

}  // namespace
}  // namespace xformer
