// Experiment configuration (JSON), validation, and the runner that writes
// per-seed tables, an aggregate table and a summary object.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "colab/analysis.hpp"
#include "colab/attacks.hpp"
#include "colab/data.hpp"
#include "colab/models.hpp"
#include "colab/training.hpp"

#ifndef COLAB_VERSION
#define COLAB_VERSION "0.0.0"
#endif

namespace colab {

using json = nlohmann::json;

/// Malformed config: wrong types, unknown keys, unparsable text.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A config or data file that cannot be read.
class MissingFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ExperimentKind { train, norm_study, step_size_study, rank_study, loss_surface, eps_sweep, alpha_k_sweep };

inline constexpr std::string_view kKindNames[] = {"train",        "norm_study", "step_size_study", "rank_study",
                                                  "loss_surface", "eps_sweep",  "alpha_k_sweep"};

inline std::string_view name_of(ExperimentKind k) { return kKindNames[static_cast<int>(k)]; }

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Schema pieces

/// An attack whose epsilon may come from the surrounding experiment.
/// alpha and noise_bound may be absolute or given as multiples of epsilon.
struct AttackTemplate {
  Method method = Method::fgsm;
  std::optional<double> epsilon, alpha, alpha_over_eps, noise_bound, noise_over_eps, quantile_q;
  std::optional<NoiseDist> noise_dist;
  std::optional<bool> project_eps_ball, zero_init, per_coordinate_t;
  std::optional<std::optional<ValueRange>> clamp;
  std::optional<int> steps, restarts, grad_points;

  AttackSpec resolve(std::optional<double> default_eps = {}) const {
    const double eps = epsilon ? *epsilon : default_eps.value_or(0.0);
    const double a = alpha ? *alpha : alpha_over_eps ? *alpha_over_eps * eps : NAN;
    AttackSpec s;
    switch (method) {
      case Method::fgsm: s = AttackSpec::fgsm(eps); break;
      case Method::rs_fgsm: s = AttackSpec::rs_fgsm(eps); break;
      case Method::r_plus_fgsm: s = AttackSpec::r_plus_fgsm(eps, std::isnan(a) ? 0.5 * eps : a); break;
      case Method::n_fgsm: s = AttackSpec::n_fgsm(eps); break;
      case Method::pgd: s = AttackSpec::pgd(eps); break;
      case Method::zero_grad: s = AttackSpec::zero_grad(eps, 1.25 * eps, 0.0); break;
      case Method::multi_grad: s = AttackSpec::multi_grad(eps, 1.25 * eps); break;
      case Method::rand_alpha: s = AttackSpec::rand_alpha(eps); break;
      case Method::noise_only: s = AttackSpec::noise_only(eps, 2.0 * eps); break;
    }
    if (!std::isnan(a)) s.alpha = a;
    if (noise_bound) s.noise_bound = *noise_bound;
    if (noise_over_eps) s.noise_bound = *noise_over_eps * eps;
    if (noise_dist) s.noise_dist = *noise_dist;
    if (project_eps_ball) s.project_eps_ball = *project_eps_ball;
    if (clamp) s.clamp = *clamp;
    if (steps) s.steps = *steps;
    if (restarts) s.restarts = *restarts;
    if (quantile_q) s.quantile_q = *quantile_q;
    if (grad_points) s.grad_points = *grad_points;
    if (zero_init) s.zero_init = *zero_init;
    if (per_coordinate_t) s.per_coordinate_t = *per_coordinate_t;
    return s;
  }
};

struct DatasetSpec {
  std::string source = "two_moons";  // or "idx"
  std::size_t n_train = 512;
  std::size_t n_probe = 512;
  double noise_sd = 0.1;
  std::string train_images, train_labels, probe_images, probe_labels;
};

struct ModelSpec {
  std::string kind;  // desk_cnn, mlp, linear; empty picks by data shape
  std::vector<std::size_t> hidden{64, 64};
};

struct TrainBlock {
  TrainConfig config;
  AttackTemplate attack, eval_attack;
  std::optional<AttackTemplate> final_eval_attack;  // default: PGD-50-10 at the training eps
};

struct NormBlock {
  std::size_t d = 3072;
  std::vector<double> epsilons{8.0 / 255.0};
  std::size_t samples = 100000;
};

struct SweepBlock {
  std::vector<double> epsilons;
  std::vector<double> alpha_multipliers, noise_multipliers;
};

struct RankBlock {
  std::size_t examples = 8;
  std::vector<std::pair<int, int>> intervals;  // inclusive epoch ranges, 1-based
  double fraction = 0.9;
  bool normalize = false;
};

struct SurfaceBlock {
  std::size_t resolution = 21;
  std::optional<double> eps;  // default: the training eps
  std::size_t examples = 1;
  SurfaceLoss loss = SurfaceLoss::cross_entropy;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::train;
  DatasetSpec dataset;
  ModelSpec model;
  std::optional<TrainBlock> train;
  std::vector<AttackTemplate> attacks;
  std::vector<std::uint64_t> seeds;
  std::string output_dir = "out";
  NormBlock norm;
  SweepBlock sweep;
  RankBlock rank;
  SurfaceBlock surface;
  json source;  // parsed document, used for the config hash
  std::filesystem::path base_dir;

  /// Hash of the parsed document without output_dir, so relocating output keeps it.
  std::uint64_t hash() const {
    json j = source;
    j.erase("output_dir");
    return fnv1a64(j.dump());
  }
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw SchemaError(where_ + ": expected an object");
  }

  bool has(const char* key) {
    seen_.push_back(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }
  bool present(const char* key) {
    seen_.push_back(key);
    return j_.contains(key);
  }
  const json& at(const char* key) const { return j_.at(key); }
  std::string path(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

  double number(const char* key) {
    const json& v = at(key);
    if (!v.is_number()) throw SchemaError(path(key) + ": expected a number");
    return v.get<double>();
  }
  long long integer(const char* key) {
    const json& v = at(key);
    if (!v.is_number_integer()) throw SchemaError(path(key) + ": expected an integer");
    return v.get<long long>();
  }
  std::size_t count(const char* key) {
    const long long v = integer(key);
    if (v < 0) throw SchemaError(path(key) + ": expected a non-negative integer");
    return static_cast<std::size_t>(v);
  }
  bool boolean(const char* key) {
    const json& v = at(key);
    if (!v.is_boolean()) throw SchemaError(path(key) + ": expected true or false");
    return v.get<bool>();
  }
  std::string text(const char* key) {
    const json& v = at(key);
    if (!v.is_string()) throw SchemaError(path(key) + ": expected a string");
    return v.get<std::string>();
  }
  std::vector<double> numbers(const char* key) {
    const json& v = at(key);
    if (!v.is_array()) throw SchemaError(path(key) + ": expected an array of numbers");
    std::vector<double> out;
    for (const json& e : v) {
      if (!e.is_number()) throw SchemaError(path(key) + ": expected an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  /// Rejects keys that were never asked for.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) {
        throw SchemaError(path(it.key().c_str()) + ": unknown key");
      }
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::vector<std::string> seen_;
};

}  // namespace detail

inline AttackTemplate parse_attack(const json& j, const std::string& where) {
  detail::Reader r(j, where);
  AttackTemplate t;
  if (!r.has("method")) throw SchemaError(where + ".method: required");
  const std::string m = r.text("method");
  const auto method = parse_method(m);
  if (!method) throw SchemaError(where + ".method: unknown method '" + m + "'");
  t.method = *method;
  if (r.has("epsilon")) t.epsilon = r.number("epsilon");
  if (r.has("alpha")) t.alpha = r.number("alpha");
  if (r.has("alpha_over_eps")) t.alpha_over_eps = r.number("alpha_over_eps");
  if (r.has("noise_bound")) t.noise_bound = r.number("noise_bound");
  if (r.has("noise_over_eps")) t.noise_over_eps = r.number("noise_over_eps");
  if (r.has("noise_dist")) {
    const std::string d = r.text("noise_dist");
    t.noise_dist = parse_noise(d);
    if (!t.noise_dist) throw SchemaError(where + ".noise_dist: unknown distribution '" + d + "'");
  }
  if (r.has("project_eps_ball")) t.project_eps_ball = r.boolean("project_eps_ball");
  if (r.present("clamp_data_range")) {
    const json& c = j.at("clamp_data_range");
    if (c.is_null()) {
      t.clamp = std::optional<ValueRange>{};
    } else if (c.is_array() && c.size() == 2 && c[0].is_number() && c[1].is_number()) {
      t.clamp = std::optional<ValueRange>(ValueRange{c[0].get<double>(), c[1].get<double>()});
    } else {
      throw SchemaError(where + ".clamp_data_range: expected [lo, hi] or null");
    }
  }
  if (r.has("steps")) t.steps = static_cast<int>(r.integer("steps"));
  if (r.has("restarts")) t.restarts = static_cast<int>(r.integer("restarts"));
  if (r.has("quantile_q")) t.quantile_q = r.number("quantile_q");
  if (r.has("grad_points")) t.grad_points = static_cast<int>(r.integer("grad_points"));
  if (r.has("zero_init")) t.zero_init = r.boolean("zero_init");
  if (r.has("per_coordinate_t")) t.per_coordinate_t = r.boolean("per_coordinate_t");
  if (t.alpha && t.alpha_over_eps) throw SchemaError(where + ": give alpha or alpha_over_eps, not both");
  if (t.noise_bound && t.noise_over_eps) throw SchemaError(where + ": give noise_bound or noise_over_eps, not both");
  r.finish();
  return t;
}

inline TrainBlock parse_train(const json& j) {
  detail::Reader r(j, "train");
  TrainBlock b;
  TrainConfig& c = b.config;
  if (r.has("epochs")) c.epochs = static_cast<int>(r.integer("epochs"));
  if (r.has("batch_size")) c.batch_size = r.count("batch_size");
  if (r.has("schedule")) {
    const std::string s = r.text("schedule");
    if (s == "cyclic_fast") {
      c.schedule = Schedule::cyclic_fast;
    } else if (s == "long_piecewise") {
      c.schedule = Schedule::long_piecewise;
    } else {
      throw SchemaError("train.schedule: unknown schedule '" + s + "'");
    }
  }
  if (r.has("lr_max")) c.lr_max = r.number("lr_max");
  if (r.has("momentum")) c.momentum = r.number("momentum");
  if (r.has("weight_decay")) c.weight_decay = r.number("weight_decay");
  if (r.has("grad_align_lambda")) c.grad_align_lambda = r.number("grad_align_lambda");
  if (r.has("free_at_replays")) c.free_at_replays = static_cast<int>(r.integer("free_at_replays"));
  if (r.has("co_drop")) c.co_drop = r.number("co_drop");
  if (r.has("co_floor")) c.co_floor = r.number("co_floor");
  if (!r.has("attack")) throw SchemaError("train.attack: required");
  b.attack = parse_attack(r.at("attack"), "train.attack");
  if (r.has("eval_attack")) {
    b.eval_attack = parse_attack(r.at("eval_attack"), "train.eval_attack");
  } else {
    b.eval_attack.method = Method::pgd;
    b.eval_attack.steps = 40;
    b.eval_attack.restarts = 1;
  }
  if (r.has("final_eval_attack")) b.final_eval_attack = parse_attack(r.at("final_eval_attack"), "train.final_eval_attack");
  r.finish();
  return b;
}

/// Train config with the attacks resolved at `eps` (or their own epsilon).
inline TrainConfig resolve_train(const TrainBlock& b, std::optional<double> eps = {}) {
  TrainConfig c = b.config;
  c.attack = b.attack.resolve(eps);
  c.eval_attack = b.eval_attack.resolve(c.attack.epsilon);
  return c;
}

inline AttackSpec resolve_final_attack(const TrainBlock& b, double eps) {
  if (b.final_eval_attack) return b.final_eval_attack->resolve(eps);
  AttackSpec s = AttackSpec::pgd(eps, {}, 50, 10);
  s.clamp = b.eval_attack.resolve(eps).clamp;
  return s;
}

inline ExperimentConfig parse_config(const json& j, const std::filesystem::path& base_dir = {}) {
  detail::Reader r(j, "");
  ExperimentConfig cfg;
  cfg.source = j;
  cfg.base_dir = base_dir;
  if (!r.has("kind")) throw SchemaError("kind: required");
  const std::string kind = r.text("kind");
  bool found = false;
  for (int k = 0; k < 7; ++k) {
    if (kKindNames[k] == kind) {
      cfg.kind = static_cast<ExperimentKind>(k);
      found = true;
    }
  }
  if (!found) throw SchemaError("kind: unknown experiment kind '" + kind + "'");

  if (r.has("seeds")) {
    const json& s = r.at("seeds");
    if (!s.is_array()) throw SchemaError("seeds: expected an array of non-negative integers");
    for (const json& e : s) {
      if (!e.is_number_unsigned()) throw SchemaError("seeds: expected an array of non-negative integers");
      cfg.seeds.push_back(e.get<std::uint64_t>());
    }
  }
  if (r.has("output_dir")) cfg.output_dir = r.text("output_dir");

  if (r.has("dataset")) {
    detail::Reader d(r.at("dataset"), "dataset");
    DatasetSpec& ds = cfg.dataset;
    if (d.has("source")) ds.source = d.text("source");
    if (d.has("n_train")) ds.n_train = d.count("n_train");
    if (d.has("n_probe")) ds.n_probe = d.count("n_probe");
    if (d.has("noise_sd")) ds.noise_sd = d.number("noise_sd");
    if (d.has("train_images")) ds.train_images = d.text("train_images");
    if (d.has("train_labels")) ds.train_labels = d.text("train_labels");
    if (d.has("probe_images")) ds.probe_images = d.text("probe_images");
    if (d.has("probe_labels")) ds.probe_labels = d.text("probe_labels");
    d.finish();
  }
  if (r.has("model")) {
    const json& m = r.at("model");
    if (m.is_string()) {
      cfg.model.kind = m.get<std::string>();
    } else {
      detail::Reader mr(m, "model");
      if (mr.has("kind")) cfg.model.kind = mr.text("kind");
      if (mr.has("hidden")) {
        cfg.model.hidden.clear();
        for (double h : mr.numbers("hidden")) {
          if (h < 1 || h != std::floor(h)) throw SchemaError("model.hidden: expected positive integers");
          cfg.model.hidden.push_back(static_cast<std::size_t>(h));
        }
      }
      mr.finish();
    }
  }
  if (r.has("train")) {
    cfg.train = parse_train(r.at("train"));
    // Image data keeps training and evaluation inputs in [0, 1] unless the config says otherwise.
    if (cfg.dataset.source == "idx") {
      TrainBlock& t = *cfg.train;
      for (AttackTemplate* a : {&t.attack, &t.eval_attack}) {
        if (!a->clamp) a->clamp = std::optional<ValueRange>(ValueRange{0.0, 1.0});
      }
      if (t.final_eval_attack && !t.final_eval_attack->clamp) {
        t.final_eval_attack->clamp = std::optional<ValueRange>(ValueRange{0.0, 1.0});
      }
    }
  }
  if (r.has("attacks")) {
    const json& a = r.at("attacks");
    if (!a.is_array()) throw SchemaError("attacks: expected an array of attack objects");
    for (std::size_t i = 0; i < a.size(); ++i) cfg.attacks.push_back(parse_attack(a[i], "attacks[" + std::to_string(i) + "]"));
  }
  if (r.has("norm")) {
    detail::Reader n(r.at("norm"), "norm");
    if (n.has("d")) cfg.norm.d = n.count("d");
    if (n.has("epsilons")) cfg.norm.epsilons = n.numbers("epsilons");
    if (n.has("samples")) cfg.norm.samples = n.count("samples");
    n.finish();
  }
  if (r.has("sweep")) {
    detail::Reader s(r.at("sweep"), "sweep");
    if (s.has("epsilons")) cfg.sweep.epsilons = s.numbers("epsilons");
    if (s.has("alpha_multipliers")) cfg.sweep.alpha_multipliers = s.numbers("alpha_multipliers");
    if (s.has("noise_multipliers")) cfg.sweep.noise_multipliers = s.numbers("noise_multipliers");
    s.finish();
  }
  if (r.has("rank")) {
    detail::Reader k(r.at("rank"), "rank");
    if (k.has("examples")) cfg.rank.examples = k.count("examples");
    if (k.has("fraction")) cfg.rank.fraction = k.number("fraction");
    if (k.has("normalize")) cfg.rank.normalize = k.boolean("normalize");
    if (k.has("intervals")) {
      const json& iv = k.at("intervals");
      if (!iv.is_array()) throw SchemaError("rank.intervals: expected [[first, last], ...]");
      for (const json& p : iv) {
        if (!p.is_array() || p.size() != 2 || !p[0].is_number_integer() || !p[1].is_number_integer()) {
          throw SchemaError("rank.intervals: expected [[first, last], ...]");
        }
        cfg.rank.intervals.emplace_back(p[0].get<int>(), p[1].get<int>());
      }
    }
    k.finish();
  }
  if (r.has("surface")) {
    detail::Reader s(r.at("surface"), "surface");
    if (s.has("resolution")) cfg.surface.resolution = s.count("resolution");
    if (s.has("eps")) cfg.surface.eps = s.number("eps");
    if (s.has("examples")) cfg.surface.examples = s.count("examples");
    if (s.has("loss")) {
      const std::string l = s.text("loss");
      if (l == "cross_entropy") {
        cfg.surface.loss = SurfaceLoss::cross_entropy;
      } else if (l == "margin") {
        cfg.surface.loss = SurfaceLoss::margin;
      } else {
        throw SchemaError("surface.loss: expected cross_entropy or margin");
      }
    }
    s.finish();
  }
  r.finish();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw SchemaError(path.string() + ": not valid JSON: " + e.what());
  }
  return parse_config(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Validation

inline bool needs_data(ExperimentKind k) { return k != ExperimentKind::norm_study; }

inline bool needs_training(ExperimentKind k) {
  return k == ExperimentKind::train || k == ExperimentKind::rank_study || k == ExperimentKind::eps_sweep ||
         k == ExperimentKind::alpha_k_sweep;
}

/// Every problem with the config; empty means runnable. No side effects.
inline std::vector<std::string> validate_config(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  auto add_all = [&](const std::string& prefix, const std::vector<std::string>& ps) {
    for (const auto& p : ps) out.push_back(prefix + p);
  };
  if (cfg.seeds.empty()) out.push_back("seeds: at least one seed is required");
  if (cfg.output_dir.empty()) out.push_back("output_dir: must not be empty");

  if (needs_data(cfg.kind)) {
    const DatasetSpec& d = cfg.dataset;
    if (d.source == "two_moons") {
      if (d.n_train < 2 || d.n_train % 2) out.push_back("dataset.n_train: two_moons needs an even count >= 2");
      if (d.n_probe < 2 || d.n_probe % 2) out.push_back("dataset.n_probe: two_moons needs an even count >= 2");
      if (!(d.noise_sd >= 0.0)) out.push_back("dataset.noise_sd: must be >= 0");
    } else if (d.source == "idx") {
      for (auto [v, name] : {std::pair{&d.train_images, "train_images"}, {&d.train_labels, "train_labels"},
                             {&d.probe_images, "probe_images"}, {&d.probe_labels, "probe_labels"}}) {
        if (v->empty()) out.push_back(std::string("dataset.") + name + ": required for idx data");
      }
      if (d.n_train < 1) out.push_back("dataset.n_train: must be >= 1");
      if (d.n_probe < 1) out.push_back("dataset.n_probe: must be >= 1");
    } else {
      out.push_back("dataset.source: expected two_moons or idx, got '" + d.source + "'");
    }
    const std::string& mk = cfg.model.kind;
    if (!mk.empty() && mk != "desk_cnn" && mk != "mlp" && mk != "linear") {
      out.push_back("model.kind: expected desk_cnn, mlp or linear, got '" + mk + "'");
    }
  }

  if (needs_training(cfg.kind) && !cfg.train) out.push_back("train: required for " + std::string(name_of(cfg.kind)));
  if (cfg.train) {
    std::optional<double> eps;
    if (cfg.kind == ExperimentKind::eps_sweep && !cfg.sweep.epsilons.empty()) eps = cfg.sweep.epsilons.front();
    const TrainConfig tc = resolve_train(*cfg.train, eps);
    for (const auto& p : tc.problems()) out.push_back("train." + p);
    add_all("train.final_eval_attack.", resolve_final_attack(*cfg.train, tc.attack.epsilon).problems());
    if (!cfg.train->attack.epsilon && cfg.kind != ExperimentKind::eps_sweep) {
      out.push_back("train.attack.epsilon: required");
    }
  }

  switch (cfg.kind) {
    case ExperimentKind::norm_study: {
      if (cfg.norm.d < 1) out.push_back("norm.d: must be >= 1");
      if (cfg.norm.samples < 1) out.push_back("norm.samples: must be >= 1");
      if (cfg.norm.epsilons.empty()) out.push_back("norm.epsilons: at least one value is required");
      for (double e : cfg.norm.epsilons) {
        if (!(e > 0.0)) out.push_back("norm.epsilons: values must be > 0");
      }
      for (std::size_t i = 0; i < cfg.attacks.size(); ++i) {
        const std::string where = "attacks[" + std::to_string(i) + "].";
        const Method m = cfg.attacks[i].method;
        if (m != Method::fgsm && m != Method::rs_fgsm && m != Method::n_fgsm && m != Method::r_plus_fgsm &&
            m != Method::noise_only) {
          out.push_back(where + "method: norm_study supports single-step methods without model-dependent steps");
        }
        for (double e : cfg.norm.epsilons) add_all(where, cfg.attacks[i].resolve(e).problems());
      }
      break;
    }
    case ExperimentKind::step_size_study:
    case ExperimentKind::eps_sweep: {
      if (cfg.attacks.empty()) out.push_back("attacks: at least one attack is required");
      const double e0 = cfg.sweep.epsilons.empty() ? 0.1 : cfg.sweep.epsilons.front();
      for (std::size_t i = 0; i < cfg.attacks.size(); ++i) {
        add_all("attacks[" + std::to_string(i) + "].", cfg.attacks[i].resolve(e0).problems());
        if (cfg.kind == ExperimentKind::step_size_study && !cfg.attacks[i].epsilon) {
          out.push_back("attacks[" + std::to_string(i) + "].epsilon: required for step_size_study");
        }
        if (cfg.kind == ExperimentKind::step_size_study && cfg.attacks[i].method == Method::pgd) {
          out.push_back("attacks[" + std::to_string(i) + "].method: step_size_study needs a single-step method");
        }
      }
      if (cfg.kind == ExperimentKind::eps_sweep) {
        if (cfg.sweep.epsilons.empty()) out.push_back("sweep.epsilons: at least one value is required");
        for (double e : cfg.sweep.epsilons) {
          if (!(e > 0.0)) out.push_back("sweep.epsilons: values must be > 0");
        }
      }
      break;
    }
    case ExperimentKind::alpha_k_sweep:
      if (cfg.sweep.alpha_multipliers.empty()) out.push_back("sweep.alpha_multipliers: at least one value is required");
      if (cfg.sweep.noise_multipliers.empty()) out.push_back("sweep.noise_multipliers: at least one value is required");
      for (double v : cfg.sweep.alpha_multipliers) {
        if (!(v >= 0.0)) out.push_back("sweep.alpha_multipliers: values must be >= 0");
      }
      for (double v : cfg.sweep.noise_multipliers) {
        if (!(v >= 0.0)) out.push_back("sweep.noise_multipliers: values must be >= 0");
      }
      if (cfg.train && cfg.train->attack.method != Method::n_fgsm) {
        out.push_back("train.attack.method: alpha_k_sweep varies n_fgsm's alpha and noise bound");
      }
      break;
    case ExperimentKind::rank_study:
      if (cfg.rank.examples < 1) out.push_back("rank.examples: must be >= 1");
      if (cfg.rank.examples > cfg.dataset.n_probe) out.push_back("rank.examples: exceeds dataset.n_probe");
      if (!(cfg.rank.fraction > 0.0 && cfg.rank.fraction <= 1.0)) out.push_back("rank.fraction: must lie in (0, 1]");
      if (cfg.rank.intervals.empty()) out.push_back("rank.intervals: at least one interval is required");
      for (auto [a, b] : cfg.rank.intervals) {
        const int epochs = cfg.train ? cfg.train->config.epochs : 0;
        if (a < 1 || b < a + 1 || b > epochs) {
          out.push_back("rank.intervals: [" + std::to_string(a) + ", " + std::to_string(b) +
                        "] must satisfy 1 <= first < last <= train.epochs");
        }
      }
      break;
    case ExperimentKind::loss_surface:
      if (cfg.surface.resolution < 2) out.push_back("surface.resolution: must be >= 2");
      if (cfg.surface.examples < 1) out.push_back("surface.examples: must be >= 1");
      if (cfg.surface.examples > cfg.dataset.n_probe) out.push_back("surface.examples: exceeds dataset.n_probe");
      if (!cfg.surface.eps && !cfg.train) out.push_back("surface.eps: required without a train block");
      if (cfg.surface.eps && !(*cfg.surface.eps > 0.0)) out.push_back("surface.eps: must be > 0");
      break;
    case ExperimentKind::train:
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tables

/// Rows with string keys and numeric values, written as CSV with %.17g.
struct Table {
  std::vector<std::string> key_columns, value_columns;
  std::vector<std::vector<std::string>> keys;
  std::vector<std::vector<double>> values;

  void add(std::vector<std::string> k, std::vector<double> v) {
    keys.push_back(std::move(k));
    values.push_back(std::move(v));
  }
};

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_table(std::ostream& out, const Table& t) {
  bool first = true;
  for (const auto& c : t.key_columns) out << (std::exchange(first, false) ? "" : ",") << c;
  for (const auto& c : t.value_columns) out << (std::exchange(first, false) ? "" : ",") << c;
  out << '\n';
  for (std::size_t r = 0; r < t.keys.size(); ++r) {
    first = true;
    for (const auto& k : t.keys[r]) out << (std::exchange(first, false) ? "" : ",") << k;
    for (double v : t.values[r]) out << (std::exchange(first, false) ? "" : ",") << format_number(v);
    out << '\n';
  }
}

/// Mean and sample standard deviation (0 for one seed) of every value column
/// across tables with identical keys.
inline Table aggregate(const std::vector<Table>& per_seed) {
  if (per_seed.empty()) throw ContractError("aggregate: no tables");
  const Table& t0 = per_seed.front();
  Table out;
  out.key_columns = t0.key_columns;
  for (const auto& c : t0.value_columns) {
    out.value_columns.push_back(c + "_mean");
    out.value_columns.push_back(c + "_std");
  }
  const double n = static_cast<double>(per_seed.size());
  for (std::size_t r = 0; r < t0.keys.size(); ++r) {
    std::vector<double> v;
    for (std::size_t c = 0; c < t0.value_columns.size(); ++c) {
      double s = 0.0;
      for (const Table& t : per_seed) {
        if (t.keys.size() != t0.keys.size() || t.keys[r] != t0.keys[r]) {
          throw ContractError("aggregate: per-seed tables have different rows");
        }
        s += t.values[r][c];
      }
      const double mean = s / n;
      double ss = 0.0;
      for (const Table& t : per_seed) ss += (t.values[r][c] - mean) * (t.values[r][c] - mean);
      v.push_back(mean);
      v.push_back(per_seed.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0);
    }
    out.add(t0.keys[r], std::move(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Running

struct RunOutput {
  std::vector<std::filesystem::path> files;
  Table aggregate;
};

namespace detail {

inline std::string resolve_path(const ExperimentConfig& cfg, const std::string& p) {
  const std::filesystem::path path(p);
  return (path.is_absolute() || cfg.base_dir.empty() ? path : cfg.base_dir / path).string();
}

inline std::pair<Dataset, Dataset> load_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  const DatasetSpec& d = cfg.dataset;
  if (d.source == "two_moons") {
    return {synth_two_moons(d.n_train, d.noise_sd, derive_seed({seed, 1})),
            synth_two_moons(d.n_probe, d.noise_sd, derive_seed({seed, 2}))};
  }
  auto load = [&](const std::string& images, const std::string& labels, std::size_t limit) {
    const std::string ip = resolve_path(cfg, images), lp = resolve_path(cfg, labels);
    for (const auto& p : {ip, lp}) {
      if (!std::filesystem::exists(p)) throw MissingFileError("data file not found: " + p);
    }
    Dataset ds = load_idx(ip, lp, limit);
    if (ds.size() < limit) {
      throw ContractError("dataset: " + ip + " holds " + std::to_string(ds.size()) + " samples, " +
                          std::to_string(limit) + " requested");
    }
    return ds;
  };
  return {load(d.train_images, d.train_labels, d.n_train), load(d.probe_images, d.probe_labels, d.n_probe)};
}

inline Model make_model(const ExperimentConfig& cfg, const Dataset& train, std::uint64_t seed) {
  const Shape s = train.sample_shape();
  const std::size_t classes = std::max<std::size_t>(2, train.num_classes());
  std::string kind = cfg.model.kind;
  if (kind.empty()) kind = s.size() == 3 ? "desk_cnn" : "mlp";
  Architecture a;
  if (kind == "desk_cnn") {
    if (s.size() != 3) throw ShapeError("model desk_cnn needs image data [H, W, C], got " + to_string(s));
    a = arch::desk_cnn(s[0], s[1], s[2], classes);
  } else {
    a = kind == "linear" ? arch::linear(numel(s), classes) : arch::mlp(numel(s), cfg.model.hidden, classes);
    if (s.size() != 1) throw ShapeError("model " + kind + " needs flat data [d], got " + to_string(s));
  }
  return build_model(a, derive_seed({seed, 3}));
}

inline TrainConfig seeded(TrainConfig c, std::uint64_t seed) {
  c.seed = derive_seed({seed, 4});
  return c;
}

inline Table metrics_table(const std::vector<MetricsRecord>& ms) {
  Table t;
  t.key_columns = {"epoch"};
  t.value_columns = {"train_loss",           "clean_acc",      "attack_train_acc", "pgd_eval_acc",
                     "mean_input_grad_norm", "forward_passes", "backward_passes",  "co_flag"};
  for (const MetricsRecord& m : ms) {
    t.add({std::to_string(m.epoch)},
          {m.train_loss, m.clean_acc, m.attack_train_acc, m.pgd_eval_acc, m.mean_input_grad_norm,
           static_cast<double>(m.forward_passes), static_cast<double>(m.backward_passes), m.co_flag ? 1.0 : 0.0});
  }
  return t;
}

/// Final and best-checkpoint accuracy under the full evaluation attack.
inline std::vector<double> final_scores(const TrainResult& r, const Dataset& probe, AttackSpec final_attack,
                                        std::uint64_t seed) {
  final_attack.seed = derive_seed({seed, 5});
  std::vector<double> v;
  for (const Model* m : {&r.model, &r.best}) {
    v.push_back(clean_accuracy(*m, probe.inputs, probe.labels).accuracy);
    v.push_back(robust_accuracy(*m, probe.inputs, probe.labels, final_attack).accuracy);
  }
  bool co = false;
  for (const MetricsRecord& m : r.metrics) co = co || m.co_flag;
  v.push_back(co ? 1.0 : 0.0);
  return v;
}

inline const std::vector<std::string> kFinalColumns = {"final_clean_acc", "final_robust_acc", "best_clean_acc",
                                                       "best_robust_acc", "co_flag"};

inline Table run_norm(const ExperimentConfig& cfg, std::uint64_t seed) {
  std::vector<AttackTemplate> attacks = cfg.attacks;
  if (attacks.empty()) {
    for (Method m : {Method::fgsm, Method::rs_fgsm, Method::n_fgsm}) {
      AttackTemplate t;
      t.method = m;
      attacks.push_back(t);
    }
  }
  Table t;
  t.key_columns = {"method", "eps"};
  t.value_columns = {"d", "alpha", "noise_bound", "mc_mean", "mc_std_error", "closed_form", "rel_err"};
  const std::size_t d = cfg.norm.d;
  const Tensor signs = sample_noise(NoiseDist::bernoulli_sign, 1.0, {1, d}, derive_seed({seed, 6}));
  for (const AttackTemplate& a : attacks) {
    for (double eps : cfg.norm.epsilons) {
      const AttackSpec s = a.resolve(eps);
      const MonteCarloEstimate mc = mc_sq_norm(s, signs, cfg.norm.samples, derive_seed({seed, 7}));
      double closed = NAN;
      if (s.method == Method::fgsm || s.method == Method::rs_fgsm || s.method == Method::n_fgsm) {
        closed = expected_sq_norm(s.method, {d, s.epsilon, s.alpha, s.noise_bound});
      }
      t.add({std::string(name_of(s.method)), format_number(eps)},
            {static_cast<double>(d), s.alpha, s.noise_bound, mc.mean, mc.std_error, closed,
             std::abs(mc.mean - closed) / closed});
    }
  }
  return t;
}

inline Table run_step_size(const ExperimentConfig& cfg, std::uint64_t seed, const Model& model, const Dataset& probe) {
  Table t;
  t.key_columns = {"method", "eps"};
  t.value_columns = {"alpha", "noise_bound", "mean_effective_step", "mean_nominal_step", "ratio"};
  const Batch batch{probe.inputs, probe.labels};
  const double root_d = std::sqrt(static_cast<double>(probe.inputs.row_size()));
  for (std::size_t i = 0; i < cfg.attacks.size(); ++i) {
    AttackSpec s = cfg.attacks[i].resolve();
    s.seed = derive_seed({seed, 8, i});
    const PerturbationBatch pb = attack(model, batch, s);
    const Tensor random_part = s.project_eps_ball ? project(pb.noise_part, s.epsilon) : pb.noise_part;
    const auto steps = effective_step_size(pb.delta, random_part, probe.inputs);
    double eff = 0.0, nominal = 0.0;
    for (std::size_t r = 0; r < steps.size(); ++r) {
      eff += steps[r];
      nominal += s.alpha * root_d / l2_norm(probe.inputs.row(r));
    }
    eff /= static_cast<double>(steps.size());
    nominal /= static_cast<double>(steps.size());
    t.add({std::string(name_of(s.method)), format_number(s.epsilon)},
          {s.alpha, s.noise_bound, eff, nominal, nominal > 0.0 ? eff / nominal : NAN});
  }
  return t;
}

}  // namespace detail

/// Runs every seed, writing `<kind>_seed<S>.csv` (plus `metrics_seed<S>.csv`
/// for kinds that train once), `<kind>_aggregate.csv` and `summary.json`.
inline RunOutput run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  const auto problems = validate_config(cfg);
  if (!problems.empty()) {
    std::string msg = "invalid config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ContractError(msg);
  }
  namespace fs = std::filesystem;
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(cfg.hash()));
  const std::string kind(name_of(cfg.kind));
  auto provenance = [&](const std::string& seed) {
    return "# colab=" + std::string(COLAB_VERSION) + " config_hash=" + hash + " seed=" + seed + " kind=" + kind;
  };
  RunOutput out;
  auto emit = [&](const fs::path& name, const std::string& seed, auto&& body) {
    const fs::path p = dir / name;
    std::ofstream f(p);
    if (!f) throw MissingFileError("cannot write " + p.string());
    f << provenance(seed) << '\n';
    body(f);
    out.files.push_back(p);
  };
  auto note = [&](const std::string& s) {
    if (log) *log << s << std::endl;
  };

  std::vector<Table> tables;
  std::vector<Tensor> surfaces;
  for (std::uint64_t seed : cfg.seeds) {
    const std::string ss = std::to_string(seed);
    note(kind + ": seed " + ss);
    Table t;
    if (cfg.kind == ExperimentKind::norm_study) {
      t = detail::run_norm(cfg, seed);
    } else {
      const auto [train_set, probe] = detail::load_data(cfg, seed);
      const Model init = detail::make_model(cfg, train_set, seed);
      auto train_once = [&](const TrainConfig& tc) {
        return train(init, train_set, probe, detail::seeded(tc, seed), [&](const MetricsRecord& m, const Model&) {
          char buf[160];
          std::snprintf(buf, sizeof buf, "  epoch %d loss %.4f clean %.3f single %.3f pgd %.3f%s", m.epoch,
                        m.train_loss, m.clean_acc, m.attack_train_acc, m.pgd_eval_acc, m.co_flag ? " CO" : "");
          note(buf);
        });
      };
      switch (cfg.kind) {
        case ExperimentKind::train: {
          const TrainConfig tc = resolve_train(*cfg.train);
          const TrainResult r = train_once(tc);
          t = detail::metrics_table(r.metrics);
          Table fin;
          fin.key_columns = {"eval_attack"};
          fin.value_columns = detail::kFinalColumns;
          const AttackSpec fa = resolve_final_attack(*cfg.train, tc.attack.epsilon);
          fin.add({std::string(name_of(fa.method))}, detail::final_scores(r, probe, fa, seed));
          emit("final_seed" + ss + ".csv", ss, [&](std::ostream& f) { write_table(f, fin); });
          break;
        }
        case ExperimentKind::step_size_study: {
          Model m = init;
          if (cfg.train) m = train_once(resolve_train(*cfg.train)).model;
          t = detail::run_step_size(cfg, seed, m, probe);
          break;
        }
        case ExperimentKind::rank_study: {
          const TrainConfig tc = resolve_train(*cfg.train);
          const std::size_t ex = cfg.rank.examples;
          std::vector<std::size_t> idx(ex);
          for (std::size_t i = 0; i < ex; ++i) idx[i] = i;
          const Batch fixed = make_batch(probe, idx);
          std::vector<Tensor> history;  // one [examples, d] delta per epoch
          AttackSpec probe_attack = tc.attack;
          probe_attack.seed = derive_seed({seed, 9});
          const TrainResult r = train(init, train_set, probe, detail::seeded(tc, seed),
                                      [&](const MetricsRecord&, const Model& m) {
                                        history.push_back(attack(m, fixed, probe_attack).delta);
                                      });
          t.key_columns = {"interval"};
          t.value_columns = {"mean_rank", "min_rank", "max_rank"};
          const std::size_t d = fixed.inputs.row_size();
          for (auto [a, b] : cfg.rank.intervals) {
            std::vector<double> ranks;
            for (std::size_t e = 0; e < ex; ++e) {
              PerturbationHistory h;
              h.label = "Ep " + std::to_string(a) + "-" + std::to_string(b);
              h.matrix = Tensor(Shape{static_cast<std::size_t>(b - a + 1), d});
              for (int ep = a; ep <= b; ++ep) {
                const auto src = history[static_cast<std::size_t>(ep - 1)].row(e);
                std::copy(src.begin(), src.end(), h.matrix.row(static_cast<std::size_t>(ep - a)).begin());
              }
              ranks.push_back(static_cast<double>(effective_rank(h, cfg.rank.fraction, cfg.rank.normalize)));
            }
            double s = 0.0;
            for (double v : ranks) s += v;
            t.add({"Ep " + std::to_string(a) + "-" + std::to_string(b)},
                  {s / static_cast<double>(ranks.size()), *std::min_element(ranks.begin(), ranks.end()),
                   *std::max_element(ranks.begin(), ranks.end())});
          }
          emit("metrics_seed" + ss + ".csv", ss, [&](std::ostream& f) { write_table(f, detail::metrics_table(r.metrics)); });
          break;
        }
        case ExperimentKind::loss_surface: {
          Model m = init;
          std::optional<double> train_eps;
          if (cfg.train) {
            const TrainConfig tc = resolve_train(*cfg.train);
            train_eps = tc.attack.epsilon;
            m = train_once(tc).model;
          }
          const double eps = cfg.surface.eps ? *cfg.surface.eps : *train_eps;
          std::vector<std::size_t> idx(cfg.surface.examples);
          for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
          const Tensor grid =
              loss_surface_grid(m, make_batch(probe, idx), cfg.surface.resolution, eps, derive_seed({seed, 10}),
                                cfg.surface.loss);
          surfaces.push_back(grid);
          emit("loss_surface_seed" + ss + ".csv", ss, [&](std::ostream& f) {
            write_matrix_csv(f, grid, surface_header(cfg.surface.resolution, seed, eps));
          });
          t.key_columns = {"t1_index", "t2_index"};
          t.value_columns = {"loss"};
          const std::size_t n = cfg.surface.resolution;
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) t.add({std::to_string(i), std::to_string(j)}, {grid[i * n + j]});
          }
          break;
        }
        case ExperimentKind::eps_sweep:
        case ExperimentKind::alpha_k_sweep: {
          t.key_columns = cfg.kind == ExperimentKind::eps_sweep ? std::vector<std::string>{"method", "eps"}
                                                                 : std::vector<std::string>{"alpha_over_eps", "noise_over_eps"};
          t.value_columns = detail::kFinalColumns;
          auto one = [&](const TrainConfig& tc, std::vector<std::string> keys) {
            note("  run " + keys[0] + " " + keys[1]);
            const TrainResult r = train_once(tc);
            t.add(std::move(keys),
                  detail::final_scores(r, probe, resolve_final_attack(*cfg.train, tc.attack.epsilon), seed));
          };
          if (cfg.kind == ExperimentKind::eps_sweep) {
            for (const AttackTemplate& a : cfg.attacks) {
              for (double eps : cfg.sweep.epsilons) {
                TrainBlock b = *cfg.train;
                b.attack = a;
                b.attack.epsilon = eps;
                one(resolve_train(b, eps), {std::string(name_of(a.method)), format_number(eps)});
              }
            }
          } else {
            for (double am : cfg.sweep.alpha_multipliers) {
              for (double km : cfg.sweep.noise_multipliers) {
                TrainBlock b = *cfg.train;
                b.attack.alpha.reset();
                b.attack.noise_bound.reset();
                b.attack.alpha_over_eps = am;
                b.attack.noise_over_eps = km;
                one(resolve_train(b), {format_number(am), format_number(km)});
              }
            }
          }
          break;
        }
        case ExperimentKind::norm_study:
          break;
      }
    }
    if (cfg.kind != ExperimentKind::loss_surface) {
      emit(kind + "_seed" + ss + ".csv", ss, [&](std::ostream& f) { write_table(f, t); });
    }
    tables.push_back(std::move(t));
  }

  out.aggregate = aggregate(tables);
  emit(kind + "_aggregate.csv", "all", [&](std::ostream& f) { write_table(f, out.aggregate); });

  nlohmann::ordered_json summary;
  summary["provenance"] = {{"colab", COLAB_VERSION}, {"config_hash", hash}, {"kind", kind}};
  summary["seeds"] = cfg.seeds;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  const Table& agg = out.aggregate;
  for (std::size_t r = 0; r < agg.keys.size(); ++r) {
    nlohmann::ordered_json row;
    for (std::size_t k = 0; k < agg.key_columns.size(); ++k) row[agg.key_columns[k]] = agg.keys[r][k];
    for (std::size_t c = 0; c < agg.value_columns.size(); ++c) {
      const double v = agg.values[r][c];
      if (std::isfinite(v)) {
        row[agg.value_columns[c]] = v;
      } else {
        row[agg.value_columns[c]] = nullptr;
      }
    }
    rows.push_back(std::move(row));
  }
  summary["aggregate"] = std::move(rows);
  const fs::path sp = dir / "summary.json";
  std::ofstream sf(sp);
  if (!sf) throw MissingFileError("cannot write " + sp.string());
  sf << summary.dump(2) << '\n';
  out.files.push_back(sp);
  return out;
}

}  // namespace colab
