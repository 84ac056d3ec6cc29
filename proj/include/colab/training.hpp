// Adversarial training loops, schedules, GradAlign, Free-AT and CO monitoring.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "colab/attacks.hpp"
#include "colab/data.hpp"
#include "colab/models.hpp"

namespace colab {

enum class Schedule { cyclic_fast, long_piecewise };

struct TrainConfig {
  int epochs = 10;
  std::size_t batch_size = 128;
  Schedule schedule = Schedule::cyclic_fast;
  double lr_max = 0.2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  AttackSpec attack = AttackSpec::n_fgsm(0.3);
  double grad_align_lambda = 0.0;
  int free_at_replays = 1;
  AttackSpec eval_attack = AttackSpec::pgd(0.3, {}, 40, 1);
  std::uint64_t seed = 0;
  double co_drop = 0.30;
  double co_floor = 0.01;

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (epochs < 1) out.push_back("epochs must be >= 1");
    if (batch_size < 1) out.push_back("batch_size must be >= 1");
    if (!(lr_max >= 0.0) || !std::isfinite(lr_max)) out.push_back("lr_max must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) out.push_back("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) out.push_back("weight_decay must be >= 0");
    if (!(grad_align_lambda >= 0.0)) out.push_back("grad_align_lambda must be >= 0");
    if (free_at_replays < 1) out.push_back("free_at_replays must be >= 1");
    if (free_at_replays > 1 && attack.method != Method::fgsm) {
      out.push_back("free_at_replays: Free-AT replays require the fgsm attack, got " +
                    std::string(name_of(attack.method)));
    }
    for (const auto& p : attack.problems()) out.push_back("attack." + p);
    for (const auto& p : eval_attack.problems()) out.push_back("eval_attack." + p);
    return out;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid train config:";
    for (const auto& s : p) msg += " " + s + ";";
    throw ContractError(msg);
  }
};

struct MetricsRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double clean_acc = 0.0;
  double attack_train_acc = 0.0;  // probe accuracy under FGSM at the training eps
  double pgd_eval_acc = 0.0;      // probe accuracy under the eval attack
  double mean_input_grad_norm = 0.0;
  std::uint64_t forward_passes = 0;  // cumulative training passes
  std::uint64_t backward_passes = 0;
  bool co_flag = false;
};

inline constexpr const char* kMetricsHeader =
    "epoch,train_loss,clean_acc,attack_train_acc,pgd_eval_acc,mean_input_grad_norm,forward_passes,backward_passes,"
    "co_flag";

inline void write_metrics_row(std::ostream& out, const MetricsRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%llu,%llu,%d\n", r.epoch, r.train_loss,
                r.clean_acc, r.attack_train_acc, r.pgd_eval_acc, r.mean_input_grad_norm,
                static_cast<unsigned long long>(r.forward_passes), static_cast<unsigned long long>(r.backward_passes),
                r.co_flag ? 1 : 0);
  out << buf;
}

// ---------------------------------------------------------------------------
// Schedules and optimizer

/// Triangular one-cycle: 0 -> lr_max over the first half, back to 0 over the second.
inline double cyclic_lr(std::size_t iter, std::size_t total, double lr_max) {
  if (total == 0 || iter >= total) throw ContractError("cyclic_lr: need 0 <= iter < total");
  const double half = static_cast<double>(total) / 2.0;
  const double t = static_cast<double>(iter);
  return t <= half ? lr_max * t / half : lr_max * (static_cast<double>(total) - t) / half;
}

/// lr_max, dropped by 10x at 50% and again at 75% of training.
inline double piecewise_lr(std::size_t iter, std::size_t total, double lr_max) {
  if (total == 0 || iter >= total) throw ContractError("piecewise_lr: need 0 <= iter < total");
  if (2 * iter < total) return lr_max;
  if (4 * iter < 3 * total) return lr_max * 0.1;
  return lr_max * 0.01;
}

inline double learning_rate(Schedule s, std::size_t iter, std::size_t total, double lr_max) {
  return s == Schedule::cyclic_fast ? cyclic_lr(iter, total, lr_max) : piecewise_lr(iter, total, lr_max);
}

/// SGD with heavy-ball momentum and L2 weight decay: v = mu v + g + wd theta; theta -= lr v.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
    if (velocity_.empty()) {
      for (const Tensor& p : params) velocity_.emplace_back(p.shape());
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = params[k];
      Tensor& v = velocity_[k];
      const Tensor& g = grads[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = momentum_ * v[i] + (g[i] + weight_decay_ * p[i]);
        p[i] -= lr * v[i];
      }
    }
  }

 private:
  double momentum_, weight_decay_;
  std::vector<Tensor> velocity_;
};

// ---------------------------------------------------------------------------
// GradAlign

struct GradAlignTerm {
  Var value;            // scalar on the graph
  std::size_t skipped;  // samples with a near-zero gradient, treated as aligned
};

inline constexpr double kGradAlignMinNorm = 1e-12;

/// Mean over the batch of 1 - cos(grad at x, grad at x + eta), eta ~ U[-eps, eps]^d.
/// Both gradients stay on the tape, so the result can be differentiated with
/// respect to `params`. Counts 2 F/B to build the gradients and 2 F/B to
/// differentiate through them.
inline GradAlignTerm grad_align_term(Graph& g, const Model& model, std::span<const Var> params, const Batch& batch,
                                     const Tensor& eta, PassCounter* passes = nullptr) {
  check_inputs(model, batch.inputs, batch.labels.size());
  if (eta.shape() != batch.inputs.shape()) throw ShapeError("grad_align_term: eta must be shaped like the inputs");
  const std::size_t n = batch.inputs.rows(), d = batch.inputs.row_size();
  const Labels labels = share_labels(batch.labels);
  Var x1 = g.input(batch.inputs);
  Var x2 = g.input(plus(batch.inputs, eta));
  const Var w1[] = {x1};
  const Var w2[] = {x2};
  Var g1 = reshape(g.gradients(loss_sum(model, params, x1, labels), w1)[0], Shape{n, d});
  Var g2 = reshape(g.gradients(loss_sum(model, params, x2, labels), w2)[0], Shape{n, d});
  Var s1 = row_sum(g1 * g1);
  Var s2 = row_sum(g2 * g2);

  Tensor keep(Shape{n}), pad(Shape{n});
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool ok = std::sqrt(s1.value()[i]) >= kGradAlignMinNorm && std::sqrt(s2.value()[i]) >= kGradAlignMinNorm;
    keep[i] = ok ? 1.0 : 0.0;
    pad[i] = ok ? 0.0 : 1.0;  // keeps the square root away from zero for skipped samples
    skipped += !ok;
  }
  Var k = g.input(keep);
  Var denom = sqrt(s1 * s2 + g.input(pad));
  Var cos = row_sum(g1 * g2) / denom;
  Var term = (1.0 / static_cast<double>(n)) * sum(k - k * cos);
  if (passes) *passes += PassCounter{4, 4};
  return {term, skipped};
}

inline Tensor grad_align_noise(const Batch& batch, double eps, std::uint64_t seed) {
  return sample_noise(NoiseDist::uniform, eps, batch.inputs.shape(), seed);
}

/// Value of the term and its gradient with respect to every parameter tensor.
inline std::pair<double, std::vector<Tensor>> grad_align_value_and_grad(const Model& model, const Batch& batch,
                                                                        double eps, std::uint64_t seed) {
  Graph g;
  const auto params = bind(g, model);
  const GradAlignTerm t = grad_align_term(g, model, params, batch, grad_align_noise(batch, eps, seed));
  const double v = t.value.value().item();
  return {v, g.backward(t.value, params)};
}

// ---------------------------------------------------------------------------
// CO monitoring

/// First epoch index where probe PGD accuracy is below `floor` while the
/// single-step accuracy exceeds it by at least `drop`.
inline std::optional<std::size_t> co_epoch(std::span<const MetricsRecord> history, double drop = 0.30,
                                           double floor = 0.01) {
  for (std::size_t i = 0; i < history.size(); ++i) {
    const MetricsRecord& r = history[i];
    if (r.pgd_eval_acc < floor && r.attack_train_acc - r.pgd_eval_acc >= drop) return i;
  }
  return std::nullopt;
}

inline bool co_monitor(std::span<const MetricsRecord> history, double drop = 0.30, double floor = 0.01) {
  if (history.empty()) throw ContractError("co_monitor: empty history");
  return co_epoch(history, drop, floor).has_value();
}

// ---------------------------------------------------------------------------
// Training

struct ProbeMetrics {
  double clean_acc = 0.0;
  double attack_acc = 0.0;
  double pgd_acc = 0.0;
  double mean_grad_norm = 0.0;
};

/// Clean, FGSM and eval-attack accuracy plus the mean clean input-gradient
/// l2 norm on a fixed probe set.
inline ProbeMetrics evaluate_probe(const Model& model, const Dataset& probe, const TrainConfig& cfg,
                                   std::uint64_t seed, std::size_t chunk = 128) {
  ProbeMetrics m;
  m.clean_acc = clean_accuracy(model, probe.inputs, probe.labels, chunk).accuracy;
  AttackSpec single = AttackSpec::fgsm(cfg.attack.epsilon);
  single.clamp = cfg.attack.clamp;
  m.attack_acc = robust_accuracy(model, probe.inputs, probe.labels, single, chunk).accuracy;
  AttackSpec eval = cfg.eval_attack;
  eval.seed = derive_seed({seed, 0xe7a1});
  m.pgd_acc = robust_accuracy(model, probe.inputs, probe.labels, eval, chunk).accuracy;
  double norm_sum = 0.0;
  for (std::size_t b = 0; b < probe.size(); b += chunk) {
    const Batch part = slice(probe.inputs, probe.labels, b, std::min(probe.size(), b + chunk));
    const Tensor grad = input_gradient(model, part);
    for (std::size_t i = 0; i < grad.rows(); ++i) norm_sum += l2_norm(grad.row(i));
  }
  m.mean_grad_norm = norm_sum / static_cast<double>(probe.size());
  return m;
}

struct TrainResult {
  Model model;
  std::vector<MetricsRecord> metrics;
  Model best;               // parameters with the highest probe eval accuracy
  std::size_t best_epoch = 0;  // index into metrics
  PassCounter passes;
};

using EpochHook = std::function<void(const MetricsRecord&, const Model&)>;
using DeltaHook = std::function<void(const Tensor&)>;  // Free-AT perturbation after each replay

namespace detail {

inline void close_epoch(TrainResult& res, const Model& model, const Dataset& probe, const TrainConfig& cfg, int epoch,
                        double loss_sum, std::size_t loss_count, const EpochHook& hook) {
  const ProbeMetrics pm = evaluate_probe(model, probe, cfg, derive_seed({cfg.seed, 0x9e0b, std::uint64_t(epoch)}));
  MetricsRecord r;
  r.epoch = epoch + 1;
  r.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
  r.clean_acc = pm.clean_acc;
  r.attack_train_acc = pm.attack_acc;
  r.pgd_eval_acc = pm.pgd_acc;
  r.mean_input_grad_norm = pm.mean_grad_norm;
  r.forward_passes = res.passes.forward;
  r.backward_passes = res.passes.backward;
  res.metrics.push_back(r);
  res.metrics.back().co_flag = co_monitor(res.metrics, cfg.co_drop, cfg.co_floor);
  if (res.metrics.size() == 1 || r.pgd_eval_acc > res.metrics[res.best_epoch].pgd_eval_acc) {
    res.best = model;
    res.best_epoch = res.metrics.size() - 1;
  }
  if (hook) hook(res.metrics.back(), model);
}

}  // namespace detail

/// One parameter update on the perturbed batch. Returns the mean adversarial
/// cross-entropy before the step.
inline double train_step(Model& model, Sgd& opt, const Batch& batch, const TrainConfig& cfg, double lr,
                         std::uint64_t step_seed, PassCounter& passes) {
  AttackSpec spec = cfg.attack;
  spec.seed = step_seed;
  const PerturbationBatch pb = attack(model, batch, spec);
  passes += pb.passes;

  Graph g;
  const auto params = bind(g, model);
  Var x = g.input(pb.training_inputs);
  Var ce = mean(cross_entropy_rows(forward(model, params, x), share_labels(batch.labels)));
  Var objective = ce;
  if (cfg.grad_align_lambda > 0.0) {
    const Tensor eta = grad_align_noise(batch, cfg.attack.epsilon, derive_seed({step_seed, 0x6a}));
    objective = ce + cfg.grad_align_lambda * grad_align_term(g, model, params, batch, eta, &passes).value;
  }
  const double value = ce.value().item();
  opt.step(model.params(), g.backward(objective, params), lr);
  passes += PassCounter{1, 1};
  return value;
}

/// Adversarial training with per-epoch probe metrics and a best checkpoint.
inline TrainResult adv_train(Model model, const Dataset& train, const Dataset& probe, const TrainConfig& cfg,
                             const EpochHook& hook = {}) {
  cfg.validate();
  if (cfg.free_at_replays > 1) throw ContractError("adv_train: use free_at_train for free_at_replays > 1");
  check_inputs(model, train.inputs, train.labels.size());
  check_inputs(model, probe.inputs, probe.labels.size());
  const std::size_t size = std::min(cfg.batch_size, train.size());
  const std::size_t per_epoch = (train.size() + size - 1) / size;
  const std::size_t total = per_epoch * static_cast<std::size_t>(cfg.epochs);
  TrainResult res;
  Sgd opt(cfg.momentum, cfg.weight_decay);
  std::size_t iter = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto groups = batch_indices(train.size(), size, true, derive_seed({cfg.seed, 0xba7c, std::uint64_t(e)}));
    double loss_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < groups.size(); ++k, ++iter) {
      const Batch batch = make_batch(train, groups[k]);
      const double lr = learning_rate(cfg.schedule, iter, total, cfg.lr_max);
      const double l = train_step(model, opt, batch, cfg, lr, derive_seed({cfg.seed, std::uint64_t(e), k}), res.passes);
      loss_sum += l * static_cast<double>(groups[k].size());
      count += groups[k].size();
    }
    detail::close_epoch(res, model, probe, cfg, e, loss_sum, count, hook);
  }
  res.model = std::move(model);
  return res;
}

/// Epochs giving Free-AT the same relative budget as 96 vs 30 epochs of FGSM
/// training, counting each replay of a minibatch as one epoch-equivalent.
inline int free_at_epochs(int fgsm_epochs, int replays) {
  const double scaled = static_cast<double>(fgsm_epochs) * 96.0 / 30.0 / static_cast<double>(replays);
  return std::max(1, static_cast<int>(std::lround(scaled)));
}

/// Free adversarial training: each minibatch is replayed m times; one F/B per
/// replay yields the parameter gradient (applied) and the input gradient (used
/// for a step of size eps on the persistent perturbation, then projected).
inline TrainResult free_at_train(Model model, const Dataset& train, const Dataset& probe, const TrainConfig& cfg,
                                 const EpochHook& hook = {}, const DeltaHook& on_delta = {}) {
  cfg.validate();
  if (cfg.attack.method != Method::fgsm) throw ContractError("free_at_train requires the fgsm attack");
  check_inputs(model, train.inputs, train.labels.size());
  check_inputs(model, probe.inputs, probe.labels.size());
  const std::size_t m = static_cast<std::size_t>(cfg.free_at_replays);
  const double eps = cfg.attack.epsilon;
  const std::size_t size = std::min(cfg.batch_size, train.size());
  const std::size_t per_epoch = (train.size() + size - 1) / size;
  const std::size_t total = per_epoch * m * static_cast<std::size_t>(cfg.epochs);
  Shape dshape = train.sample_shape();
  dshape.insert(dshape.begin(), size);
  Tensor delta(dshape);  // persists across minibatches; partial batches use its leading rows
  TrainResult res;
  Sgd opt(cfg.momentum, cfg.weight_decay);
  std::size_t iter = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto groups = batch_indices(train.size(), size, true, derive_seed({cfg.seed, 0xba7c, std::uint64_t(e)}));
    double loss_sum = 0.0;
    std::size_t count = 0;
    for (const auto& idx : groups) {
      const Batch batch = make_batch(train, idx);
      const std::size_t n = idx.size(), d = batch.inputs.row_size();
      for (std::size_t r = 0; r < m; ++r, ++iter) {
        Tensor xin = batch.inputs;
        for (std::size_t i = 0; i < n * d; ++i) xin[i] += delta[i];
        if (cfg.attack.clamp) xin = clamp_range(xin, *cfg.attack.clamp);
        Graph g;
        const auto params = bind(g, model);
        Var x = g.input(xin);
        Var ce = mean(cross_entropy_rows(forward(model, params, x), share_labels(batch.labels)));
        std::vector<Var> wrt(params.begin(), params.end());
        wrt.push_back(x);
        auto grads = g.backward(ce, wrt);
        res.passes += PassCounter{1, 1};
        const Tensor gx = std::move(grads.back());
        grads.pop_back();
        loss_sum += ce.value().item() * static_cast<double>(n);
        count += n;
        opt.step(model.params(), grads, learning_rate(cfg.schedule, iter, total, cfg.lr_max));
        for (std::size_t i = 0; i < n * d; ++i) delta[i] = project(delta[i] + eps * sign(gx[i]), eps);
        if (on_delta) on_delta(delta);
      }
    }
    detail::close_epoch(res, model, probe, cfg, e, loss_sum, count, hook);
  }
  res.model = std::move(model);
  return res;
}

/// Dispatches on free_at_replays.
inline TrainResult train(Model model, const Dataset& data, const Dataset& probe, const TrainConfig& cfg,
                         const EpochHook& hook = {}) {
  return cfg.free_at_replays > 1 ? free_at_train(std::move(model), data, probe, cfg, hook)
                                 : adv_train(std::move(model), data, probe, cfg, hook);
}

}  // namespace colab
