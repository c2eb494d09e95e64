#ifndef XFORMER_ATTENTION_HPP
#define XFORMER_ATTENTION_HPP

// Pseudo-finite periodic attention. Each unit-cell atom i attends to every
// image of every atom j; the image sums collapse into per-pair encodings
//   α_ij = log Σ_n exp(φ_ij(n)),   β_ij = W_Eᵀ E_w[b(r_ij(n))]
// so that
//   y_i = Σ_j softmax_j(q_i·k_j/√d_K + α_ij) (v_j + β_ij).
// Image sums for pair (i, j) are taken around the nearest periodic copy of
// j, which makes the truncated sums independent of how atoms are wrapped
// into the cell.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "autodiff.hpp"
#include "encodings.hpp"
#include "errors.hpp"
#include "lattice_sums.hpp"
#include "structures.hpp"
#include "tensor.hpp"

namespace xformer {

struct AttentionConfig {
  int d_model = 128;
  int heads = 8;
  int d_k = 16;
  int d_v = 16;
  double coverage = kDefaultCoverage;
  bool dual_space = false;
  int reciprocal_range = 2;
  RBFConfig rbf;
  /// When set, every pair uses the box |n_a| ≤ fixed_range instead of the
  /// adaptive one (matched truncation for oracle comparisons).
  std::optional<int> fixed_range;
  /// Negative control for invariance tests: adds q_i[0:3]·p_j (raw
  /// Cartesian coordinates) to the logits. Never enable for real models.
  bool cartesian_bias_control = false;

  /// Heads [0, real_heads) use real-space sums, the rest reciprocal space.
  [[nodiscard]] int real_heads() const { return dual_space ? (heads + 1) / 2 : heads; }
  [[nodiscard]] SigmaMode head_mode(int h) const { return h < real_heads() ? SigmaMode::real : SigmaMode::reciprocal; }

  void validate() const {
    if (heads < 1 || d_model < 1 || d_k < 1 || d_v < 1) throw ValidationError("attention dims must be positive");
    if (heads * d_v != d_model) throw ValidationError("heads * d_v must equal d_model");
    if (d_k != d_v) throw ValidationError("d_k must equal d_v");
    if (!(coverage > 0.0)) throw ValidationError("coverage multiplier must be positive");
    if (reciprocal_range < 1) throw ValidationError("reciprocal range must be >= 1");
    if (fixed_range && *fixed_range < 0) throw ValidationError("fixed range must be >= 0");
    rbf.validate();
  }
};

/// Per-structure geometry shared by all heads and blocks.
struct PairGeometry {
  const CrystalStructure* structure = nullptr;
  std::vector<Vec3> delta;  // N×N, centered p_j − p_i
  std::optional<ReciprocalGrid> grid;

  PairGeometry(const CrystalStructure& s, const AttentionConfig& cfg) : structure(&s) {
    const std::size_t n = s.size();
    delta.resize(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        delta[i * n + j] = centered_delta(s.lattice(), s.positions()[i], s.positions()[j]);
      }
    }
    if (cfg.dual_space) grid.emplace(s.lattice(), cfg.reciprocal_range);
  }
  [[nodiscard]] std::size_t size() const { return structure->size(); }
  [[nodiscard]] const Lattice& lattice() const { return structure->lattice(); }
};

struct EncodingVars {
  ad::Var alpha;  // N×N
  ad::Var beta;   // N²×K, invalid when not requested
};

/// Real-space α (and optionally the RBF part of β) for every pair as one
/// composite tape node per output; backward uses the closed-form σ
/// derivatives and treats the truncation boxes as constants.
inline EncodingVars periodic_encodings(ad::Tape& tape, ad::Var sigma, const PairGeometry& geo,
                                       const AttentionConfig& cfg, bool with_beta) {
  const Tensor& sig = tape.value(sigma);
  const std::size_t n = geo.size();
  if (sig.rows() != n || sig.cols() != 1) throw ValidationError("periodic_encodings: sigma must be N x 1");
  const std::size_t K = static_cast<std::size_t>(cfg.rbf.bins);

  struct Saved {
    std::vector<double> mean_r2;  // N×N
    Tensor beta_r2;               // N²×K
  };
  auto saved = std::make_shared<Saved>();
  saved->mean_r2.resize(n * n);
  Tensor alpha(n, n);
  Tensor beta;
  if (with_beta) {
    beta = Tensor(n * n, K);
    saved->beta_r2 = Tensor(n * n, K);
  }
  PairEncoding enc;
  auto& signature = tape.kink_signature();
  for (std::size_t i = 0; i < n; ++i) {
    const double s = sig[i];
    const SummationRange range =
        cfg.fixed_range ? SummationRange::uniform(*cfg.fixed_range) : adaptive_range(s, geo.lattice(), cfg.coverage);
    for (int r : range.extent) signature.push_back(static_cast<signed char>(std::min(r, 127)));
    for (std::size_t j = 0; j < n; ++j) {
      pair_encoding(geo.delta[i * n + j], geo.lattice(), s, range, with_beta ? &cfg.rbf : nullptr, enc);
      alpha(i, j) = enc.alpha;
      saved->mean_r2[i * n + j] = enc.mean_r2;
      if (with_beta) {
        std::copy(enc.beta_rbf.begin(), enc.beta_rbf.end(), beta.row_span(i * n + j).begin());
        std::copy(enc.beta_r2.begin(), enc.beta_r2.end(), saved->beta_r2.row_span(i * n + j).begin());
      }
    }
  }

  EncodingVars out;
  out.alpha = tape.record(std::move(alpha), "periodic_alpha", {sigma}, [sigma, n, saved](ad::Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& sv = tp.value(sigma);
    Tensor& gs = tp.grad(sigma);
    for (std::size_t i = 0; i < n; ++i) {
      const double inv3 = 1.0 / (sv[i] * sv[i] * sv[i]);
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += g(i, j) * saved->mean_r2[i * n + j];
      gs[i] += acc * inv3;
    }
  });
  if (with_beta) {
    out.beta = tape.record(std::move(beta), "periodic_beta_rbf", {sigma},
                           [sigma, n, K, saved](ad::Tape& tp, std::size_t self) {
                             const Tensor& g = tp.grad(self);
                             const Tensor& b = tp.value(ad::Var{self});
                             const Tensor& sv = tp.value(sigma);
                             Tensor& gs = tp.grad(sigma);
                             for (std::size_t i = 0; i < n; ++i) {
                               const double inv3 = 1.0 / (sv[i] * sv[i] * sv[i]);
                               double acc = 0.0;
                               for (std::size_t j = 0; j < n; ++j) {
                                 const std::size_t row = i * n + j;
                                 const double mr2 = saved->mean_r2[row];
                                 for (std::size_t k = 0; k < K; ++k) {
                                   acc += g(row, k) * (saved->beta_r2(row, k) - b(row, k) * mr2);
                                 }
                               }
                               gs[i] += acc * inv3;
                             }
                           });
  }
  return out;
}

/// Reciprocal-space α for every pair, one composite node.
inline ad::Var reciprocal_encodings(ad::Tape& tape, ad::Var sigma_bar, const PairGeometry& geo) {
  if (!geo.grid) throw ValidationError("reciprocal_encodings: geometry built without a reciprocal grid");
  const Tensor& sig = tape.value(sigma_bar);
  const std::size_t n = geo.size();
  Tensor alpha(n, n);
  auto deriv = std::make_shared<std::vector<double>>(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto e = reciprocal_encoding(geo.delta[i * n + j], *geo.grid, sig[i]);
      alpha(i, j) = e.alpha;
      (*deriv)[i * n + j] = e.dalpha_dsigma;
    }
  }
  return tape.record(std::move(alpha), "reciprocal_alpha", {sigma_bar},
                     [sigma_bar, n, deriv](ad::Tape& tp, std::size_t self) {
                       const Tensor& g = tp.grad(self);
                       Tensor& gs = tp.grad(sigma_bar);
                       for (std::size_t i = 0; i < n; ++i) {
                         double acc = 0.0;
                         for (std::size_t j = 0; j < n; ++j) acc += g(i, j) * (*deriv)[i * n + j];
                         gs[i] += acc;
                       }
                     });
}

/// σ_i (or σ̄_i) for every query row of q (N×d_K) as a tape expression.
inline ad::Var sigma_expression(ad::Tape& tape, ad::Var q, ad::Var w, const SigmaParams& p) {
  if (!p.calibrated) throw ValidationError("sigma parameters are not calibrated");
  auto proj = ad::matmul(tape, q, w);
  auto x = ad::affine(tape, proj, 1.0 / p.s, -p.m / p.s);
  auto rho = ad::shifted_elu(tape, x, p.a, p.b);
  if (p.mode == SigmaMode::real) return ad::scale(tape, ad::pow(tape, rho, -0.5), p.r0);
  return ad::scale(tape, ad::pow(tape, rho, 0.5), p.r0);
}

/// One attention head on already-projected q (N×d_K), k (N×d_K), v (N×d_V).
/// `edge` is the head's K×d_V slice of W_E, or invalid for the no-ψ variant.
inline ad::Var attention_head(ad::Tape& tape, const PairGeometry& geo, ad::Var q, ad::Var k, ad::Var v,
                              const SigmaParams& sigma, ad::Var sigma_w, ad::Var edge, const AttentionConfig& cfg) {
  const double dk = static_cast<double>(tape.value(q).cols());
  auto logits = ad::scale(tape, ad::matmul_nt(tape, q, k), 1.0 / std::sqrt(dk));
  auto sig = sigma_expression(tape, q, sigma_w, sigma);
  ad::Var beta;
  if (sigma.mode == SigmaMode::real) {
    auto enc = periodic_encodings(tape, sig, geo, cfg, edge.valid());
    logits = ad::add(tape, logits, enc.alpha);
    beta = enc.beta;
  } else {
    logits = ad::add(tape, logits, reciprocal_encodings(tape, sig, geo));
  }
  if (cfg.cartesian_bias_control) {
    const auto& pos = geo.structure->positions();
    Tensor p(pos.size(), 3);
    for (std::size_t j = 0; j < pos.size(); ++j) {
      for (std::size_t a = 0; a < 3; ++a) p(j, a) = pos[j][a];
    }
    const std::size_t width = std::min<std::size_t>(3, tape.value(q).cols());
    auto qs = ad::slice_cols(tape, q, 0, width);
    auto ps = ad::slice_cols(tape, tape.constant(std::move(p)), 0, width);
    logits = ad::add(tape, logits, ad::matmul_nt(tape, qs, ps));
  }
  auto weights = ad::softmax_rows(tape, logits);
  auto y = ad::matmul(tape, weights, v);
  if (beta.valid()) {
    auto projected = ad::matmul(tape, beta, edge);
    y = ad::add(tape, y, ad::pair_weighted_sum(tape, weights, projected));
  }
  return y;
}

// ---------------------------------------------------------------------------
// Parameters

struct Linear {
  Tensor weight;  // in × out
  Tensor bias;    // 1 × out
};

/// Binds parameter tensors to tape leaves, one leaf per tensor.
class ParamBinder {
 public:
  explicit ParamBinder(ad::Tape& tape) : tape_(tape) {}
  ad::Var operator()(const Tensor& t) {
    auto it = bound_.find(&t);
    if (it != bound_.end()) return it->second;
    auto v = tape_.parameter(t);
    bound_.emplace(&t, v);
    return v;
  }
  [[nodiscard]] std::optional<ad::Var> find(const Tensor& t) const {
    auto it = bound_.find(&t);
    if (it == bound_.end()) return std::nullopt;
    return it->second;
  }
  ad::Tape& tape() { return tape_; }

 private:
  ad::Tape& tape_;
  std::unordered_map<const Tensor*, ad::Var> bound_;
};

inline ad::Var apply_linear(ParamBinder& bind, ad::Var x, const Linear& lin) {
  auto& t = bind.tape();
  return ad::add_bias(t, ad::matmul(t, x, bind(lin.weight)), bind(lin.bias));
}

/// Parameters of a single head acting on d_model-wide states.
struct HeadParams {
  Linear query, key, value;  // d_model → d_K / d_V
  SigmaParams sigma;
  Tensor edge;  // K × d_V, empty for the no-ψ variant
};

inline ad::Var head_forward(ParamBinder& bind, const PairGeometry& geo, ad::Var x, const HeadParams& p,
                            const AttentionConfig& cfg) {
  auto q = apply_linear(bind, x, p.query);
  auto k = apply_linear(bind, x, p.key);
  auto v = apply_linear(bind, x, p.value);
  ad::Var edge;
  if (!p.edge.empty()) edge = bind(p.edge);
  return attention_head(bind.tape(), geo, q, k, v, p.sigma, bind(p.sigma.w), edge, cfg);
}

/// One head of pseudo-finite periodic attention evaluated on plain values.
inline Tensor pseudo_finite_attention(const Tensor& x, const CrystalStructure& s, const HeadParams& p,
                                      const AttentionConfig& cfg) {
  if (x.rows() != s.size()) throw ValidationError("pseudo_finite_attention: state rows must equal atom count");
  if (!x.all_finite()) throw NumericalError("pseudo_finite_attention: non-finite input states");
  ad::Tape tape;
  ParamBinder bind(tape);
  PairGeometry geo(s, cfg);
  auto y = head_forward(bind, geo, tape.constant(x), p, cfg);
  return tape.value(y);
}

/// Literal evaluation of infinitely connected attention: a softmax over
/// every (j, n) with ‖n‖∞ ≤ cutoff around the nearest copy of j, values
/// v_j + W_Eᵀ b(r). Test oracle; no lattice-sum shortcuts.
inline Tensor attention_oracle(const Tensor& x, const CrystalStructure& s, const HeadParams& p, int cutoff,
                               const AttentionConfig& cfg) {
  if (x.rows() != s.size()) throw ValidationError("attention_oracle: state rows must equal atom count");
  if (!x.all_finite()) throw NumericalError("attention_oracle: non-finite input states");
  if (p.sigma.mode != SigmaMode::real) throw ValidationError("attention_oracle: real-space heads only");
  auto project = [&](const Linear& lin) {
    Tensor out(x.rows(), lin.weight.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t c = 0; c < out.cols(); ++c) {
        double acc = lin.bias[c];
        for (std::size_t r = 0; r < x.cols(); ++r) acc += x(i, r) * lin.weight(r, c);
        out(i, c) = acc;
      }
    }
    return out;
  };
  const Tensor q = project(p.query), k = project(p.key), v = project(p.value);
  const std::size_t n = s.size(), dk = q.cols(), dv = v.cols();
  const bool with_edge = !p.edge.empty();
  Tensor y(n, dv);
  const SummationRange box = SummationRange::uniform(cutoff);
  for (std::size_t i = 0; i < n; ++i) {
    const double sigma = sigma_from_query(q.row_span(i), p.sigma);
    struct Term {
      double logit;
      std::size_t j;
      double r;
    };
    std::vector<Term> terms;
    for (std::size_t j = 0; j < n; ++j) {
      double qk = 0.0;
      for (std::size_t c = 0; c < dk; ++c) qk += q(i, c) * k(j, c);
      qk /= std::sqrt(double(dk));
      if (cfg.cartesian_bias_control) {
        for (std::size_t c = 0; c < std::min<std::size_t>(3, dk); ++c) qk += q(i, c) * s.positions()[j][c];
      }
      const Vec3 d = centered_delta(s.lattice(), s.positions()[i], s.positions()[j]);
      detail::for_each_image(d, s.lattice(), box, [&](const Vec3& img, int, int, int) {
        const double r2 = norm2(img);
        terms.push_back({qk - r2 / (2.0 * sigma * sigma), j, std::sqrt(r2)});
      });
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (const auto& t : terms) mx = std::max(mx, t.logit);
    detail::CompensatedSum z;
    std::vector<detail::CompensatedSum> acc(dv);
    for (const auto& t : terms) {
      const double w = std::exp(t.logit - mx);
      z.add(w);
      std::vector<double> val(v.row_span(t.j).begin(), v.row_span(t.j).end());
      if (with_edge) {
        const auto b = rbf_expand(t.r, cfg.rbf);
        const auto psi = value_position_project(b, p.edge);
        for (std::size_t c = 0; c < dv; ++c) val[c] += psi[c];
      }
      for (std::size_t c = 0; c < dv; ++c) acc[c].add(w * val[c]);
    }
    for (std::size_t c = 0; c < dv; ++c) y(i, c) = acc[c].value() / z.value();
  }
  return y;
}

// ---------------------------------------------------------------------------
// Self-attention block

struct BlockParams {
  Linear query, key, value, output;  // d_model → d_model
  Linear ffn_in, ffn_out;            // d_model → 4·d_model → d_model
  Tensor edge;                       // K × d_model, empty for the simplified variant
  std::vector<SigmaParams> sigma;    // one per head
};

/// X ← X + MHA(X); X ← X + FFN(X). No normalization.
inline ad::Var block_forward(ParamBinder& bind, const PairGeometry& geo, ad::Var x, const BlockParams& p,
                             const AttentionConfig& cfg) {
  auto& t = bind.tape();
  const auto dk = static_cast<std::size_t>(cfg.d_k);
  const auto dv = static_cast<std::size_t>(cfg.d_v);
  auto Q = apply_linear(bind, x, p.query);
  auto K = apply_linear(bind, x, p.key);
  auto V = apply_linear(bind, x, p.value);
  ad::Var edge_all;
  if (!p.edge.empty()) edge_all = bind(p.edge);
  std::vector<ad::Var> heads;
  heads.reserve(cfg.heads);
  for (int h = 0; h < cfg.heads; ++h) {
    const auto hh = static_cast<std::size_t>(h);
    auto q = ad::slice_cols(t, Q, hh * dk, (hh + 1) * dk);
    auto k = ad::slice_cols(t, K, hh * dk, (hh + 1) * dk);
    auto v = ad::slice_cols(t, V, hh * dv, (hh + 1) * dv);
    const auto& sp = p.sigma.at(hh);
    ad::Var edge;
    if (edge_all.valid() && sp.mode == SigmaMode::real) edge = ad::slice_cols(t, edge_all, hh * dv, (hh + 1) * dv);
    heads.push_back(attention_head(t, geo, q, k, v, sp, bind(sp.w), edge, cfg));
  }
  auto attn = apply_linear(bind, ad::concat_cols(t, heads), p.output);
  auto x1 = ad::add(t, x, attn);
  auto hidden = ad::relu(t, apply_linear(bind, x1, p.ffn_in));
  return ad::add(t, x1, apply_linear(bind, hidden, p.ffn_out));
}

/// q_i·w per head for the states x (N × d_model), used for calibration.
inline std::vector<std::vector<double>> block_sigma_projections(const Tensor& x, const BlockParams& p,
                                                                const AttentionConfig& cfg) {
  std::vector<std::vector<double>> out(cfg.heads);
  const auto dk = static_cast<std::size_t>(cfg.d_k);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::vector<double> q(p.query.weight.cols());
    for (std::size_t c = 0; c < q.size(); ++c) {
      double acc = p.query.bias[c];
      for (std::size_t r = 0; r < x.cols(); ++r) acc += x(i, r) * p.query.weight(r, c);
      q[c] = acc;
    }
    for (std::size_t h = 0; h < out.size(); ++h) {
      out[h].push_back(query_projection(std::span<const double>(q).subspan(h * dk, dk), p.sigma[h]));
    }
  }
  return out;
}

}  // namespace xformer

#endif  // XFORMER_ATTENTION_HPP
