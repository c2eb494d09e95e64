#ifndef XFORMER_TRAINING_HPP
#define XFORMER_TRAINING_HPP

// MAE regression training: AdamW with global-norm clipping, inverse-sqrt
// learning-rate decay, and stochastic weight averaging over the final
// epochs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "autodiff.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace xformer {

struct TrainConfig {
  int batch_size = 128;
  int epochs = 500;
  double lr = 5e-4;
  double schedule_constant = 4000.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-8;
  double weight_decay = 1e-5;
  double clip_norm = 1.0;
  int swa_window = 50;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const {
    if (batch_size < 1 || epochs < 1) throw ValidationError("batch_size and epochs must be positive");
    if (!(lr > 0.0) || !(schedule_constant > 0.0)) throw ValidationError("lr and schedule_constant must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("Adam betas must lie in [0,1)");
    if (!(epsilon > 0.0)) throw ValidationError("epsilon must be positive");
    if (weight_decay < 0.0) throw ValidationError("weight_decay must be non-negative");
    if (!(clip_norm > 0.0)) throw ValidationError("clip_norm must be positive");
    if (swa_window < 1 || swa_window > epochs) throw ValidationError("swa_window must lie in 1..epochs");
    if (threads < 1) throw ValidationError("threads must be >= 1");
  }
};

/// lr0 · √(C / (C + t)).
inline double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw ValidationError("lr_at: step must be non-negative");
  return cfg.lr * std::sqrt(cfg.schedule_constant / (cfg.schedule_constant + static_cast<double>(step)));
}

/// Arrays of a ModelParams in for_each_array order.
inline std::vector<Tensor*> parameter_arrays(ModelParams& p) {
  std::vector<Tensor*> out;
  for_each_array(p, [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}
inline std::vector<const Tensor*> parameter_arrays(const ModelParams& p) {
  std::vector<const Tensor*> out;
  for_each_array(p, [&](const std::string&, const Tensor& t) { out.push_back(&t); });
  return out;
}

using Gradients = std::vector<Tensor>;

inline Gradients zero_gradients(const ModelParams& p) {
  Gradients g;
  for (const Tensor* t : parameter_arrays(p)) g.emplace_back(t->rows(), t->cols());
  return g;
}

struct Sample {
  const CrystalStructure* structure;
  double target;
};

namespace detail {

/// Accumulates d/dθ of weight·|f(s) − target| into `grads`; returns |f(s) − target|.
inline double accumulate_sample_gradient(const ModelParams& p, const Sample& sample, double weight, Gradients& grads) {
  ad::Tape tape;
  ParamBinder bind(tape);
  auto pred = forward(bind, *sample.structure, p);
  auto err = ad::abs(tape, ad::affine(tape, pred, 1.0, -sample.target));
  auto loss = ad::scale(tape, err, weight);
  tape.backward(loss);
  const auto arrays = parameter_arrays(p);
  for (std::size_t a = 0; a < arrays.size(); ++a) {
    if (auto v = bind.find(*arrays[a]); v && tape.has_grad(*v)) grads[a] += tape.grad(*v);
  }
  return tape.value(err)[0];
}

}  // namespace detail

struct BatchGradient {
  double mae = 0.0;
  Gradients grads;
};

/// Mean absolute error over the batch and its gradient. With threads > 1
/// the batch is split into contiguous chunks whose partial sums are added
/// in chunk order, so results depend only on the thread count.
inline BatchGradient batch_gradient(const ModelParams& p, std::span<const Sample> batch, int threads = 1) {
  if (batch.empty()) throw ValidationError("batch_gradient: empty batch");
  const double weight = 1.0 / static_cast<double>(batch.size());
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), batch.size());
  std::vector<Gradients> partial(workers, zero_gradients(p));
  std::vector<double> abs_err(batch.size(), 0.0);
  auto run = [&](std::size_t w) {
    const std::size_t begin = batch.size() * w / workers;
    const std::size_t end = batch.size() * (w + 1) / workers;
    for (std::size_t i = begin; i < end; ++i) abs_err[i] = detail::accumulate_sample_gradient(p, batch[i], weight, partial[w]);
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
  }
  BatchGradient out{0.0, std::move(partial[0])};
  for (std::size_t w = 1; w < workers; ++w) {
    for (std::size_t a = 0; a < out.grads.size(); ++a) out.grads[a] += partial[w][a];
  }
  for (double e : abs_err) out.mae += e;
  out.mae *= weight;
  return out;
}

inline double global_norm(const Gradients& g) {
  double s = 0.0;
  for (const auto& t : g) {
    for (double x : t.data()) s += x * x;
  }
  return std::sqrt(s);
}

/// Rescales g so its global L2 norm is at most max_norm; returns the norm
/// before clipping.
inline double clip_gradients(Gradients& g, double max_norm) {
  const double n = global_norm(g);
  if (n > max_norm) {
    const double s = max_norm / n;
    for (auto& t : g) t *= s;
  }
  return n;
}

struct AdamState {
  Gradients first;
  Gradients second;
  std::int64_t step = 0;
};

inline AdamState make_adam_state(const ModelParams& p) { return {zero_gradients(p), zero_gradients(p), 0}; }

/// Decoupled weight decay θ ← θ(1 − lr·λ), then the Adam step.
inline void adamw_update(ModelParams& p, const Gradients& g, AdamState& st, double lr, const TrainConfig& cfg) {
  const auto arrays = parameter_arrays(p);
  if (g.size() != arrays.size() || st.first.size() != arrays.size()) throw ValidationError("adamw_update: gradient layout mismatch");
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t a = 0; a < arrays.size(); ++a) {
    auto& theta = arrays[a]->data();
    auto& m = st.first[a].data();
    auto& v = st.second[a].data();
    const auto& ga = g[a].data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      theta[i] *= decay;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * ga[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * ga[i] * ga[i];
      theta[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
    }
  }
}

struct StepResult {
  double mae = 0.0;
  double grad_norm = 0.0;  // before clipping
};

/// One optimizer step on a batch at learning rate `lr`.
inline StepResult train_step(ModelParams& p, std::span<const Sample> batch, AdamState& st, double lr,
                             const TrainConfig& cfg) {
  auto bg = batch_gradient(p, batch, cfg.threads);
  if (!std::isfinite(bg.mae)) throw NumericalError("non-finite training loss at step " + std::to_string(st.step));
  StepResult r;
  r.mae = bg.mae;
  r.grad_norm = clip_gradients(bg.grads, cfg.clip_norm);
  adamw_update(p, bg.grads, st, lr, cfg);
  return r;
}

// ---------------------------------------------------------------------------
// Weight averaging

/// Running mean of parameter snapshots, accumulated in long double.
/// Calibration scalars are copied from the first snapshot.
class SwaAccumulator {
 public:
  void add(const ModelParams& p) {
    const auto arrays = parameter_arrays(p);
    if (count_ == 0) {
      reference_ = p;
      sums_.clear();
      for (const Tensor* t : arrays) sums_.emplace_back(t->data().begin(), t->data().end());
    } else {
      if (arrays.size() != sums_.size()) throw ValidationError("swa: inconsistent parameter layout");
      for (std::size_t a = 0; a < arrays.size(); ++a) {
        if (arrays[a]->size() != sums_[a].size()) throw ValidationError("swa: inconsistent array shapes");
        for (std::size_t i = 0; i < sums_[a].size(); ++i) sums_[a][i] += arrays[a]->data()[i];
      }
    }
    ++count_;
  }
  [[nodiscard]] std::size_t count() const { return count_; }
  [[nodiscard]] ModelParams mean() const {
    if (count_ == 0) throw ValidationError("swa: no snapshots");
    ModelParams out = *reference_;
    const auto arrays = parameter_arrays(out);
    const long double n = static_cast<long double>(count_);
    for (std::size_t a = 0; a < arrays.size(); ++a) {
      for (std::size_t i = 0; i < sums_[a].size(); ++i) arrays[a]->data()[i] = static_cast<double>(sums_[a][i] / n);
    }
    return out;
  }

 private:
  std::optional<ModelParams> reference_;
  std::vector<std::vector<long double>> sums_;
  std::size_t count_ = 0;
};

/// Arithmetic mean of every parameter array; (m, s) copied from the first.
inline ModelParams swa_average(std::span<const ModelParams> checkpoints) {
  if (checkpoints.empty()) throw ValidationError("swa_average: need at least one checkpoint");
  SwaAccumulator acc;
  for (const auto& c : checkpoints) acc.add(c);
  return acc.mean();
}

// ---------------------------------------------------------------------------
// Evaluation and the training loop

struct EvalResult {
  double mae = 0.0;
  std::vector<double> predictions;
};

inline EvalResult evaluate(const ModelParams& p, std::span<const StructureRecord> records) {
  EvalResult r;
  std::size_t counted = 0;
  for (const auto& rec : records) {
    const double y = predict(rec.structure, p);
    r.predictions.push_back(y);
    if (rec.target) {
      r.mae += std::abs(y - *rec.target);
      ++counted;
    }
  }
  if (counted > 0) r.mae /= static_cast<double>(counted);
  return r;
}

/// MAE of predicting the training-target mean for every record.
inline double constant_predictor_mae(std::span<const StructureRecord> train, std::span<const StructureRecord> test) {
  double mean = 0.0;
  std::size_t n = 0;
  for (const auto& r : train) {
    if (r.target) {
      mean += *r.target;
      ++n;
    }
  }
  if (n == 0) throw ValidationError("constant_predictor_mae: no training targets");
  mean /= static_cast<double>(n);
  double mae = 0.0;
  std::size_t m = 0;
  for (const auto& r : test) {
    if (r.target) {
      mae += std::abs(*r.target - mean);
      ++m;
    }
  }
  return m ? mae / static_cast<double>(m) : 0.0;
}

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_mae = 0.0;
  std::optional<double> val_mae;
  double wall_seconds = 0.0;
};

struct TrainOptions {
  bool keep_window_snapshots = false;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  ModelParams final_params;
  ModelParams swa_params;
  std::vector<EpochLog> history;
  std::vector<ModelParams> window;  // filled when keep_window_snapshots
  std::int64_t steps = 0;
};

/// Trains from `init`. σ calibration happens on the first batch when the
/// parameters are not yet calibrated. The last `swa_window` epochs run at
/// the learning rate reached when the window opens, and their epoch-end
/// weights are averaged.
inline TrainResult train(ModelParams init, std::span<const StructureRecord> train_set,
                         std::span<const StructureRecord> val_set, const TrainConfig& cfg,
                         const TrainOptions& opts = {}) {
  cfg.validate();
  std::vector<Sample> samples;
  for (const auto& r : train_set) {
    if (!r.target) throw ValidationError("training record without target: " + r.id);
    samples.push_back({&r.structure, *r.target});
  }
  if (samples.empty()) throw ValidationError("empty training set");

  TrainResult result{std::move(init), ModelParams{}, {}, {}, 0};
  ModelParams& p = result.final_params;
  AdamState adam = make_adam_state(p);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  SwaAccumulator swa;
  const int swa_start = cfg.epochs - cfg.swa_window;
  double fixed_lr = 0.0;
  std::int64_t t = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    if (epoch == swa_start) fixed_lr = lr_at(t, cfg);
    double err_sum = 0.0;
    double lr = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Sample> batch;
      for (std::size_t i = begin; i < end; ++i) batch.push_back(samples[order[i]]);
      if (!is_calibrated(p)) {
        std::vector<CrystalStructure> structs;
        for (const auto& s : batch) structs.push_back(*s.structure);
        calibrate_model(p, structs);
      }
      lr = epoch >= swa_start ? fixed_lr : lr_at(t, cfg);
      const auto step = train_step(p, batch, adam, lr, cfg);
      err_sum += step.mae * static_cast<double>(batch.size());
      ++t;
    }
    if (epoch >= swa_start) {
      swa.add(p);
      if (opts.keep_window_snapshots) result.window.push_back(p);
    }
    EpochLog log;
    log.epoch = epoch + 1;
    log.lr = lr;
    log.train_mae = err_sum / static_cast<double>(samples.size());
    if (!val_set.empty()) log.val_mae = evaluate(p, val_set).mae;
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(log);
    if (opts.on_epoch) opts.on_epoch(log);
  }
  result.swa_params = swa.mean();
  result.steps = t;
  return result;
}

}  // namespace xformer

#endif  // XFORMER_TRAINING_HPP
