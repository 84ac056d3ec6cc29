// Perturbation generators for l-infinity adversarial training.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "colab/models.hpp"
#include "colab/random.hpp"
#include "colab/tensor.hpp"

namespace colab {

enum class Method { fgsm, rs_fgsm, r_plus_fgsm, n_fgsm, pgd, zero_grad, multi_grad, rand_alpha, noise_only };
enum class NoiseDist { uniform, gaussian_matched, bernoulli_sign, none };

inline constexpr std::string_view kMethodNames[] = {"fgsm",      "rs_fgsm",   "r_plus_fgsm",
                                                    "n_fgsm",    "pgd",       "zero_grad",
                                                    "multi_grad", "rand_alpha", "noise_only"};
inline constexpr std::string_view kNoiseNames[] = {"uniform", "gaussian_matched", "bernoulli_sign", "none"};

inline std::string_view name_of(Method m) { return kMethodNames[static_cast<int>(m)]; }
inline std::string_view name_of(NoiseDist d) { return kNoiseNames[static_cast<int>(d)]; }

inline std::optional<Method> parse_method(std::string_view s) {
  for (int i = 0; i < 9; ++i)
    if (kMethodNames[i] == s) return static_cast<Method>(i);
  return std::nullopt;
}

inline std::optional<NoiseDist> parse_noise(std::string_view s) {
  for (int i = 0; i < 4; ++i)
    if (kNoiseNames[i] == s) return static_cast<NoiseDist>(i);
  return std::nullopt;
}

/// True for methods whose perturbation is projected onto the eps-ball.
inline bool uses_eps_ball(Method m) {
  switch (m) {
    case Method::rs_fgsm:
    case Method::r_plus_fgsm:
    case Method::pgd:
    case Method::zero_grad:
    case Method::multi_grad:
    case Method::rand_alpha:
      return true;
    default:
      return false;
  }
}

struct AttackSpec {
  Method method = Method::fgsm;
  double epsilon = 0.0;
  double alpha = 0.0;
  double noise_bound = 0.0;  // half-width b of the noise
  NoiseDist noise_dist = NoiseDist::none;
  bool project_eps_ball = false;
  std::optional<ValueRange> clamp;
  int steps = 1;
  int restarts = 1;
  double quantile_q = 0.0;
  int grad_points = 3;
  std::uint64_t seed = 0;
  bool zero_init = false;         // pgd: start from delta = 0
  bool per_coordinate_t = false;  // rand_alpha: one t per coordinate

  friend bool operator==(const AttackSpec&, const AttackSpec&) = default;

  static AttackSpec fgsm(double eps) {
    AttackSpec s;
    s.method = Method::fgsm;
    s.epsilon = eps;
    s.alpha = eps;
    return s;
  }

  static AttackSpec rs_fgsm(double eps, std::optional<double> alpha = {}) {
    AttackSpec s;
    s.method = Method::rs_fgsm;
    s.epsilon = eps;
    s.alpha = alpha.value_or(1.25 * eps);
    s.noise_bound = eps;
    s.noise_dist = NoiseDist::uniform;
    s.project_eps_ball = true;
    return s;
  }

  static AttackSpec r_plus_fgsm(double eps, double alpha) {
    AttackSpec s;
    s.method = Method::r_plus_fgsm;
    s.epsilon = eps;
    s.alpha = alpha;
    s.noise_bound = eps - alpha;
    s.noise_dist = NoiseDist::bernoulli_sign;
    s.project_eps_ball = true;
    return s;
  }

  static AttackSpec n_fgsm(double eps, std::optional<double> alpha = {}, std::optional<double> bound = {}) {
    AttackSpec s;
    s.method = Method::n_fgsm;
    s.epsilon = eps;
    s.alpha = alpha.value_or(eps);
    s.noise_bound = bound.value_or(2.0 * eps);
    s.noise_dist = NoiseDist::uniform;
    return s;
  }

  static AttackSpec pgd(double eps, std::optional<double> alpha = {}, int steps = 50, int restarts = 10) {
    AttackSpec s;
    s.method = Method::pgd;
    s.epsilon = eps;
    s.alpha = alpha.value_or(0.25 * eps);
    s.noise_bound = eps;
    s.noise_dist = NoiseDist::uniform;
    s.project_eps_ball = true;
    s.steps = steps;
    s.restarts = restarts;
    return s;
  }

  static AttackSpec zero_grad(double eps, double alpha, double q) {
    AttackSpec s = rs_fgsm(eps, alpha);
    s.method = Method::zero_grad;
    s.quantile_q = q;
    return s;
  }

  static AttackSpec multi_grad(double eps, double alpha, int points = 3) {
    AttackSpec s = rs_fgsm(eps, alpha);
    s.method = Method::multi_grad;
    s.grad_points = points;
    return s;
  }

  static AttackSpec rand_alpha(double eps, std::optional<double> alpha = {}) {
    AttackSpec s = rs_fgsm(eps, alpha);
    s.method = Method::rand_alpha;
    return s;
  }

  static AttackSpec noise_only(double eps, double bound) {
    AttackSpec s;
    s.method = Method::noise_only;
    s.epsilon = eps;
    s.noise_bound = bound;
    s.noise_dist = NoiseDist::uniform;
    return s;
  }

  /// Every violated constraint, each naming the field at fault.
  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    auto finite_nonneg = [&](double v, const char* field) {
      if (!std::isfinite(v) || v < 0.0) out.push_back(std::string(field) + " must be a finite value >= 0");
    };
    finite_nonneg(epsilon, "epsilon");
    finite_nonneg(alpha, "alpha");
    finite_nonneg(noise_bound, "noise_bound");
    if (steps < 1) out.push_back("steps must be >= 1");
    if (restarts < 1) out.push_back("restarts must be >= 1");
    if (!(quantile_q >= 0.0 && quantile_q <= 1.0)) out.push_back("quantile_q must lie in [0, 1]");
    if (grad_points < 1) out.push_back("grad_points must be >= 1");
    if (clamp && !(clamp->lo < clamp->hi)) out.push_back("clamp_data_range must satisfy lo < hi");

    const std::string m(name_of(method));
    if (uses_eps_ball(method) && !project_eps_ball) {
      out.push_back("project_eps_ball: " + m + " preset requires projection onto the eps-ball");
    }
    if (!uses_eps_ball(method) && project_eps_ball) {
      out.push_back("project_eps_ball: " + m + " preset does not project");
    }
    if (method == Method::fgsm && noise_dist != NoiseDist::none) {
      out.push_back("noise_dist: fgsm preset draws no noise");
    }
    if (method == Method::r_plus_fgsm && alpha > epsilon) out.push_back("alpha: r_plus_fgsm requires alpha <= epsilon");
    if (method == Method::noise_only && alpha != 0.0) out.push_back("alpha: noise_only requires alpha = 0");
    return out;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid attack spec:";
    for (const auto& s : p) msg += " " + s + ";";
    throw ContractError(msg);
  }
};

struct PerturbationBatch {
  Tensor delta;               // shaped like the inputs
  Tensor adversarial_inputs;  // inputs + delta, unclamped
  Tensor training_inputs;     // adversarial_inputs after the data-range clamp, if any
  Tensor noise_part;          // the eta that was drawn
  PassCounter passes;
  std::vector<bool> fooled;   // pgd only: misclassified by any restart
};

// ---------------------------------------------------------------------------
// Elementwise helpers

/// Projection onto the l-infinity ball of radius eps.
inline double project(double v, double eps) { return std::min(std::max(v, -eps), eps); }

inline Tensor project(const Tensor& t, double eps) {
  Tensor out = t;
  for (double& v : out.data()) v = project(v, eps);
  return out;
}

inline Tensor clamp_range(const Tensor& t, const ValueRange& r) {
  Tensor out = t;
  for (double& v : out.data()) v = std::min(std::max(v, r.lo), r.hi);
  return out;
}

inline Tensor plus(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("plus: shape mismatch");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline Tensor sign_of(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.data()) v = sign(v);
  return out;
}

/// Per-sample stream purposes.
namespace stream {
inline constexpr std::uint64_t noise = 1;
inline constexpr std::uint64_t restart = 2;
inline constexpr std::uint64_t point = 3;
inline constexpr std::uint64_t scale = 4;
}  // namespace stream

/// Noise of the given law and half-width, one counter stream per sample row.
inline Tensor sample_noise(NoiseDist dist, double bound, const Shape& shape, std::uint64_t seed,
                           std::uint64_t purpose = stream::noise, std::uint64_t sub = 0) {
  Tensor out(shape);
  if (dist == NoiseDist::none) return out;
  const std::uint64_t key = derive_seed({seed, purpose, sub});
  const double sd = bound / std::sqrt(3.0);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    CounterRng rng(key, i);
    for (double& v : out.row(i)) {
      switch (dist) {
        case NoiseDist::uniform:
          v = rng.uniform(-bound, bound);
          break;
        case NoiseDist::gaussian_matched:
          v = sd * rng.normal();
          break;
        case NoiseDist::bernoulli_sign:
          v = bound * sign(rng.normal());
          break;
        case NoiseDist::none:
          break;
      }
    }
  }
  return out;
}

namespace detail {

inline Tensor maybe_clamp(const Tensor& t, const std::optional<ValueRange>& r) {
  return r ? clamp_range(t, *r) : t;
}

inline PerturbationBatch finish(const Batch& batch, Tensor delta, Tensor eta, PassCounter passes,
                                const std::optional<ValueRange>& clamp) {
  PerturbationBatch out;
  out.adversarial_inputs = plus(batch.inputs, delta);
  out.training_inputs = maybe_clamp(out.adversarial_inputs, clamp);
  out.delta = std::move(delta);
  out.noise_part = std::move(eta);
  out.passes = passes;
  return out;
}

/// Input gradient at clamp(x + eta).
inline Tensor gradient_at(const Model& model, const Batch& batch, const Tensor& eta,
                          const std::optional<ValueRange>& clamp, PassCounter& passes) {
  return input_gradient(model, maybe_clamp(plus(batch.inputs, eta), clamp), batch.labels, &passes);
}

/// numpy-style linear-interpolation quantile of a sorted sequence.
inline double sorted_quantile(std::span<const double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace detail

/// Per-sample threshold: the q-quantile of |g|.
inline double abs_quantile(std::span<const double> g, double q) {
  std::vector<double> a(g.size());
  std::transform(g.begin(), g.end(), a.begin(), [](double v) { return std::abs(v); });
  std::sort(a.begin(), a.end());
  return detail::sorted_quantile(a, q);
}

/// Zeroes the coordinates of each row whose magnitude is below that row's
/// q-quantile. q = 1 zeroes the whole row.
inline Tensor zero_small_coordinates(const Tensor& g, double q) {
  Tensor out = g;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    if (q >= 1.0) {
      std::fill(r.begin(), r.end(), 0.0);
      continue;
    }
    const double thr = abs_quantile(r, q);
    for (double& v : r)
      if (std::abs(v) < thr) v = 0.0;
  }
  return out;
}

/// Per coordinate: the common sign when every row set agrees, else 0.
inline Tensor unanimous_sign(std::span<const Tensor> grads) {
  if (grads.empty()) throw ContractError("unanimous_sign needs at least one gradient");
  Tensor out = sign_of(grads[0]);
  for (std::size_t p = 1; p < grads.size(); ++p) {
    if (grads[p].shape() != out.shape()) throw ShapeError("unanimous_sign: shape mismatch");
    for (std::size_t i = 0; i < out.size(); ++i)
      if (sign(grads[p][i]) != out[i]) out[i] = 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// The general single-step family: delta = psi(eta + alpha * sign(grad at x + eta)).

/// The same construction for a caller-supplied eta.
inline PerturbationBatch general_single_step(const Model& model, const Batch& batch, const AttackSpec& spec,
                                             Tensor eta) {
  if (eta.shape() != batch.inputs.shape()) throw ShapeError("eta must be shaped like the inputs");
  PassCounter passes;
  Tensor delta = eta;
  if (spec.method != Method::noise_only) {
    const Tensor g = detail::gradient_at(model, batch, eta, spec.clamp, passes);
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = eta[i] + spec.alpha * sign(g[i]);
  }
  if (spec.project_eps_ball) delta = project(delta, spec.epsilon);
  return detail::finish(batch, std::move(delta), std::move(eta), passes, spec.clamp);
}

inline PerturbationBatch general_single_step(const Model& model, const Batch& batch, const AttackSpec& spec) {
  return general_single_step(model, batch, spec,
                             sample_noise(spec.noise_dist, spec.noise_bound, batch.inputs.shape(), spec.seed));
}

inline PerturbationBatch fgsm(const Model& model, const Batch& batch, double eps,
                              std::optional<ValueRange> clamp = {}) {
  PassCounter passes;
  const Tensor g = input_gradient(model, batch, &passes);
  Tensor delta(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) delta[i] = eps * sign(g[i]);
  return detail::finish(batch, std::move(delta), Tensor(g.shape()), passes, clamp);
}

inline PerturbationBatch rs_fgsm(const Model& model, const Batch& batch, double eps, double alpha,
                                 std::uint64_t seed, std::optional<ValueRange> clamp = {}) {
  Tensor eta = sample_noise(NoiseDist::uniform, eps, batch.inputs.shape(), seed);
  PassCounter passes;
  const Tensor g = detail::gradient_at(model, batch, eta, clamp, passes);
  Tensor delta(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) delta[i] = project(eta[i] + alpha * sign(g[i]), eps);
  return detail::finish(batch, std::move(delta), std::move(eta), passes, clamp);
}

inline PerturbationBatch r_plus_fgsm(const Model& model, const Batch& batch, double eps, double alpha,
                                     std::uint64_t seed, std::optional<ValueRange> clamp = {}) {
  Tensor eta = sample_noise(NoiseDist::bernoulli_sign, eps - alpha, batch.inputs.shape(), seed);
  PassCounter passes;
  const Tensor g = detail::gradient_at(model, batch, eta, clamp, passes);
  Tensor delta(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) delta[i] = project(eta[i] + alpha * sign(g[i]), eps);
  return detail::finish(batch, std::move(delta), std::move(eta), passes, clamp);
}

/// Noise-augmented FGSM: no projection and no clipping around x.
inline PerturbationBatch n_fgsm(const Model& model, const Batch& batch, double eps, double alpha, double bound,
                                std::uint64_t seed, std::optional<ValueRange> clamp = {}) {
  AttackSpec spec = AttackSpec::n_fgsm(eps, alpha, bound);
  spec.seed = seed;
  spec.clamp = clamp;
  spec.validate();
  return general_single_step(model, batch, spec);
}

inline PerturbationBatch zero_grad_attack(const Model& model, const Batch& batch, const AttackSpec& spec) {
  Tensor eta = sample_noise(spec.noise_dist, spec.noise_bound, batch.inputs.shape(), spec.seed);
  PassCounter passes;
  const Tensor g = zero_small_coordinates(detail::gradient_at(model, batch, eta, spec.clamp, passes), spec.quantile_q);
  Tensor delta(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) delta[i] = project(eta[i] + spec.alpha * sign(g[i]), spec.epsilon);
  return detail::finish(batch, std::move(delta), std::move(eta), passes, spec.clamp);
}

inline PerturbationBatch multi_grad_attack(const Model& model, const Batch& batch, const AttackSpec& spec) {
  PassCounter passes;
  std::vector<Tensor> grads;
  for (int p = 0; p < spec.grad_points; ++p) {
    const Tensor eta = sample_noise(spec.noise_dist, spec.noise_bound, batch.inputs.shape(), spec.seed,
                                    stream::point, static_cast<std::uint64_t>(p));
    grads.push_back(detail::gradient_at(model, batch, eta, spec.clamp, passes));
  }
  Tensor delta = unanimous_sign(grads);
  for (double& v : delta.data()) v = project(spec.alpha * v, spec.epsilon);
  return detail::finish(batch, std::move(delta), Tensor(batch.inputs.shape()), passes, spec.clamp);
}

/// Scales of a rand_alpha draw: one per sample, or one per coordinate.
inline Tensor rand_alpha_scales(const AttackSpec& spec, const Shape& shape) {
  Tensor t(shape);
  const std::uint64_t key = derive_seed({spec.seed, stream::scale, 0});
  for (std::size_t i = 0; i < t.rows(); ++i) {
    CounterRng rng(key, i);
    auto r = t.row(i);
    if (spec.per_coordinate_t) {
      for (double& v : r) v = rng.uniform01();
    } else {
      std::fill(r.begin(), r.end(), rng.uniform01());
    }
  }
  return t;
}

/// delta = t * delta_rs_fgsm for the given scales.
inline PerturbationBatch rand_alpha_attack(const Model& model, const Batch& batch, const AttackSpec& spec,
                                           const Tensor& scales) {
  PerturbationBatch rs = rs_fgsm(model, batch, spec.epsilon, spec.alpha, spec.seed, spec.clamp);
  Tensor delta = rs.delta;
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] *= scales[i];
  return detail::finish(batch, std::move(delta), std::move(rs.noise_part), rs.passes, spec.clamp);
}

inline PerturbationBatch rand_alpha_attack(const Model& model, const Batch& batch, const AttackSpec& spec) {
  return rand_alpha_attack(model, batch, spec, rand_alpha_scales(spec, batch.inputs.shape()));
}

/// Projected gradient ascent with random restarts. Per sample the restart with
/// the highest final loss is kept; `fooled` marks samples any restart
/// misclassified. Each restart costs `steps` F/B plus one forward pass to
/// score its end point.
inline PerturbationBatch pgd(const Model& model, const Batch& batch, const AttackSpec& spec) {
  const std::size_t n = batch.inputs.rows();
  const std::size_t d = batch.inputs.row_size();
  PassCounter passes;
  Tensor best(batch.inputs.shape());
  std::vector<double> best_loss(n, -std::numeric_limits<double>::infinity());
  std::vector<bool> fooled(n, false);
  Tensor first_eta;

  for (int r = 0; r < spec.restarts; ++r) {
    Tensor delta = spec.zero_init ? Tensor(batch.inputs.shape())
                                  : sample_noise(NoiseDist::uniform, spec.epsilon, batch.inputs.shape(), spec.seed,
                                                 stream::restart, static_cast<std::uint64_t>(r));
    if (r == 0) first_eta = delta;
    auto keep_in_range = [&] {
      if (!spec.clamp) return;
      for (std::size_t i = 0; i < delta.size(); ++i) {
        const double x = batch.inputs[i];
        delta[i] = std::min(std::max(x + delta[i], spec.clamp->lo), spec.clamp->hi) - x;
      }
    };
    keep_in_range();
    for (int s = 0; s < spec.steps; ++s) {
      const Tensor g = input_gradient(model, plus(batch.inputs, delta), batch.labels, &passes);
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = project(delta[i] + spec.alpha * sign(g[i]), spec.epsilon);
      keep_in_range();
    }
    const Scores sc = score(model, plus(batch.inputs, delta), batch.labels, &passes);
    for (std::size_t i = 0; i < n; ++i) {
      if (sc.predictions[i] != batch.labels[i]) fooled[i] = true;
      if (sc.losses[i] > best_loss[i]) {
        best_loss[i] = sc.losses[i];
        std::copy_n(delta.row(i).begin(), d, best.row(i).begin());
      }
    }
  }
  PerturbationBatch out = detail::finish(batch, std::move(best), std::move(first_eta), passes, spec.clamp);
  out.fooled = std::move(fooled);
  return out;
}

inline PerturbationBatch noise_only(const Batch& batch, const AttackSpec& spec) {
  Tensor eta = sample_noise(spec.noise_dist, spec.noise_bound, batch.inputs.shape(), spec.seed);
  Tensor delta = spec.project_eps_ball ? project(eta, spec.epsilon) : eta;
  return detail::finish(batch, std::move(delta), std::move(eta), PassCounter{}, spec.clamp);
}

/// Single-step methods through the general constructor, baselines through
/// their own rules.
inline PerturbationBatch single_step_attack(const Model& model, const Batch& batch, const AttackSpec& spec) {
  spec.validate();
  check_inputs(model, batch.inputs, batch.labels.size());
  switch (spec.method) {
    case Method::fgsm:
    case Method::rs_fgsm:
    case Method::r_plus_fgsm:
    case Method::n_fgsm:
    case Method::noise_only:
      return general_single_step(model, batch, spec);
    case Method::zero_grad:
      return zero_grad_attack(model, batch, spec);
    case Method::multi_grad:
      return multi_grad_attack(model, batch, spec);
    case Method::rand_alpha:
      return rand_alpha_attack(model, batch, spec);
    case Method::pgd:
      break;
  }
  throw ContractError("single_step_attack: " + std::string(name_of(spec.method)) + " is not a single-step method");
}

inline PerturbationBatch attack(const Model& model, const Batch& batch, const AttackSpec& spec) {
  if (spec.method == Method::pgd) {
    spec.validate();
    check_inputs(model, batch.inputs, batch.labels.size());
    return pgd(model, batch, spec);
  }
  return single_step_attack(model, batch, spec);
}

// ---------------------------------------------------------------------------
// Evaluation

struct AccuracyReport {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  PassCounter passes;
};

inline Batch slice(const Tensor& inputs, std::span<const int> labels, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return Batch{gather_rows(inputs, idx), std::vector<int>(labels.begin() + begin, labels.begin() + end)};
}

inline AccuracyReport clean_accuracy(const Model& model, const Tensor& inputs, std::span<const int> labels,
                                     std::size_t chunk = 128) {
  AccuracyReport rep;
  rep.total = labels.size();
  for (std::size_t b = 0; b < rep.total; b += chunk) {
    const Batch part = slice(inputs, labels, b, std::min(rep.total, b + chunk));
    const auto pred = argmax_rows(logits(model, part.inputs, &rep.passes));
    for (std::size_t i = 0; i < pred.size(); ++i) rep.correct += pred[i] == part.labels[i];
  }
  rep.accuracy = rep.total ? static_cast<double>(rep.correct) / static_cast<double>(rep.total) : 0.0;
  return rep;
}

/// Accuracy under `spec`. For pgd a sample is robust only if no restart fooled
/// it; otherwise the prediction at the (clamped) adversarial input decides.
/// Chunk b is attacked with seed derive_seed({spec.seed, b}).
inline AccuracyReport robust_accuracy(const Model& model, const Tensor& inputs, std::span<const int> labels,
                                      const AttackSpec& spec, std::size_t chunk = 128) {
  AccuracyReport rep;
  rep.total = labels.size();
  for (std::size_t b = 0; b < rep.total; b += chunk) {
    const Batch part = slice(inputs, labels, b, std::min(rep.total, b + chunk));
    AttackSpec s = spec;
    s.seed = derive_seed({spec.seed, b});
    const PerturbationBatch pb = attack(model, part, s);
    rep.passes += pb.passes;
    if (spec.method == Method::pgd) {
      for (bool f : pb.fooled) rep.correct += !f;
    } else {
      const auto pred = argmax_rows(logits(model, pb.training_inputs, &rep.passes));
      for (std::size_t i = 0; i < pred.size(); ++i) rep.correct += pred[i] == part.labels[i];
    }
  }
  rep.accuracy = rep.total ? static_cast<double>(rep.correct) / static_cast<double>(rep.total) : 0.0;
  return rep;
}

}  // namespace colab
