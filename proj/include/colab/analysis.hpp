// Perturbation-norm formulas, Monte Carlo checks, effective step size and
// rank, gradient alignment, and loss-surface grids.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "colab/attacks.hpp"
#include "colab/models.hpp"
#include "colab/tensor.hpp"

namespace colab {

// ---------------------------------------------------------------------------
// Expected squared l2 norm of the perturbation

struct NormFormulaInput {
  std::size_t d = 1;
  double eps = 0.0;
  double alpha = 0.0;
  double noise_bound = 0.0;
};

/// E||delta||^2 for fgsm, rs_fgsm and n_fgsm. Other methods are rejected.
inline double expected_sq_norm(Method method, const NormFormulaInput& in) {
  for (double v : {in.eps, in.alpha, in.noise_bound}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ContractError("expected_sq_norm: eps, alpha and noise_bound must be finite and >= 0");
  }
  if (in.d < 1) throw ContractError("expected_sq_norm: d must be >= 1");
  const double d = static_cast<double>(in.d);
  const double e = in.eps, a = in.alpha, b = in.noise_bound;
  switch (method) {
    case Method::fgsm:
      return d * e * e;
    case Method::n_fgsm:
      return d * (b * b / 3.0 + a * a);
    case Method::rs_fgsm:
      if (e == 0.0) throw ContractError("expected_sq_norm: rs_fgsm divides by eps, which is 0");
      if (a > 2.0 * e) throw ContractError("expected_sq_norm: rs_fgsm formula needs alpha <= 2 eps");
      return d * (-a * a * a / (6.0 * e) + a * a / 2.0 + e * e / 3.0);
    default:
      throw ContractError("expected_sq_norm: no closed form for " + std::string(name_of(method)));
  }
}

struct MonteCarloEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t samples = 0;
};

namespace detail {

inline MonteCarloEstimate summarize(const std::vector<double>& v) {
  MonteCarloEstimate out;
  out.samples = v.size();
  const double n = static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += x;
  out.mean = s / n;
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.std_error = std::sqrt(ss / (n - 1.0) / n);
  }
  return out;
}

}  // namespace detail

/// Sample mean and standard error of ||delta||^2 for a fixed sign field:
/// delta = psi(eta + alpha * s) with eta drawn from spec.noise_dist. Draw k uses noise
/// sub-stream k, so the estimate is reproducible for a given seed.
inline MonteCarloEstimate mc_sq_norm(const AttackSpec& spec, const Tensor& sign_field, std::size_t samples,
                                     std::uint64_t seed) {
  if (samples < 1) throw ContractError("mc_sq_norm: samples must be >= 1");
  for (double s : sign_field.data()) {
    if (s != 1.0 && s != -1.0) throw ContractError("mc_sq_norm: sign_field entries must be +1 or -1");
  }
  const Shape shape{1, sign_field.size()};
  std::vector<double> norms(samples);
  for (std::size_t k = 0; k < samples; ++k) {
    const Tensor eta = sample_noise(spec.noise_dist, spec.noise_bound, shape, seed, stream::noise, k);
    double acc = 0.0;
    for (std::size_t i = 0; i < eta.size(); ++i) {
      double v = eta[i] + spec.alpha * sign_field[i];
      if (spec.project_eps_ball) v = project(v, spec.epsilon);
      acc += v * v;
    }
    norms[k] = acc;
  }
  return detail::summarize(norms);
}

/// The same statistic with live model gradients: each draw runs the attack on
/// the batch and contributes the per-sample ||delta||^2 values.
inline MonteCarloEstimate mc_sq_norm_live(const Model& model, const Batch& batch, AttackSpec spec,
                                          std::size_t samples, std::uint64_t seed) {
  if (samples < 1) throw ContractError("mc_sq_norm_live: samples must be >= 1");
  std::vector<double> norms;
  for (std::size_t k = 0; k < samples; ++k) {
    spec.seed = derive_seed({seed, k});
    const PerturbationBatch pb = attack(model, batch, spec);
    for (std::size_t i = 0; i < pb.delta.rows(); ++i) {
      double acc = 0.0;
      for (double v : pb.delta.row(i)) acc += v * v;
      norms.push_back(acc);
    }
  }
  return detail::summarize(norms);
}

// ---------------------------------------------------------------------------
// Effective step size

/// Per sample ||delta_full - delta_random|| / ||x||.
inline std::vector<double> effective_step_size(const Tensor& delta_full, const Tensor& delta_random, const Tensor& x) {
  if (delta_full.shape() != x.shape() || delta_random.shape() != x.shape()) {
    throw ShapeError("effective_step_size: shapes differ: " + to_string(delta_full.shape()) + ", " +
                     to_string(delta_random.shape()) + ", " + to_string(x.shape()));
  }
  std::vector<double> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double xn = l2_norm(x.row(i));
    if (!(xn > 0.0)) throw ContractError("effective_step_size: sample " + std::to_string(i) + " has zero norm");
    const auto f = delta_full.row(i), r = delta_random.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < f.size(); ++j) acc += (f[j] - r[j]) * (f[j] - r[j]);
    out[i] = std::sqrt(acc) / xn;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Effective rank

struct PerturbationHistory {
  Tensor matrix;  // [epochs, coordinates]
  std::string label;
};

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// descending with index tie-break.
inline std::vector<double> symmetric_eigenvalues(Tensor a) {
  const std::size_t n = a.dim(0);
  if (a.shape() != Shape{n, n}) throw ShapeError("symmetric_eigenvalues: need a square matrix");
  auto at = [&](std::size_t i, std::size_t j) -> double& { return a[i * n + j]; };
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        total += at(i, j) * at(i, j);
        if (i != j) off += at(i, j) * at(i, j);
      }
    }
    if (off <= 1e-30 * total || off == 0.0) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (apq == 0.0) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return at(i, i) > at(j, j); });
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = at(order[i], order[i]);
  return out;
}

/// Smallest r whose leading eigenvalues reach `fraction` of the total, given
/// descending eigenvalues of the Gram matrix (the squared singular values).
/// The comparison allows 1e-12 relative slack so that ties in exact
/// arithmetic are not lost to rounding.
inline std::size_t rank_from_spectrum(std::span<const double> eigenvalues, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractError("effective_rank: variance_fraction must lie in (0, 1]");
  double total = 0.0;
  for (double v : eigenvalues) total += std::max(v, 0.0);
  if (total == 0.0) return 0;
  double acc = 0.0;
  for (std::size_t r = 0; r < eigenvalues.size(); ++r) {
    acc += std::max(eigenvalues[r], 0.0);
    if (acc >= fraction * total * (1.0 - 1e-12)) return r + 1;
  }
  return eigenvalues.size();
}

/// Gram matrix of the rows, optionally after scaling each nonzero row to unit length.
inline Tensor row_gram(const Tensor& m, bool normalize_rows = false) {
  if (m.shape().size() != 2) throw ShapeError("row_gram: need a matrix, got " + to_string(m.shape()));
  const std::size_t r = m.dim(0), c = m.dim(1);
  std::vector<double> scale(r, 1.0);
  if (normalize_rows) {
    for (std::size_t i = 0; i < r; ++i) {
      const double n = l2_norm(m.row(i));
      if (n > 0.0) scale[i] = 1.0 / n;
    }
  }
  Tensor g(Shape{r, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < c; ++k) acc += m[i * c + k] * m[j * c + k];
      g[i * r + j] = g[j * r + i] = acc * scale[i] * scale[j];
    }
  }
  return g;
}

/// Number of singular vectors needed to explain `variance_fraction` of the
/// squared Frobenius norm. An all-zero matrix has rank 0.
inline std::size_t effective_rank(const Tensor& matrix, double variance_fraction = 0.9, bool normalize_rows = false) {
  if (matrix.shape().size() != 2 || matrix.dim(0) < 2) {
    throw ShapeError("effective_rank: need a matrix with at least 2 rows, got " + to_string(matrix.shape()));
  }
  return rank_from_spectrum(symmetric_eigenvalues(row_gram(matrix, normalize_rows)), variance_fraction);
}

inline std::size_t effective_rank(const PerturbationHistory& h, double variance_fraction = 0.9,
                                  bool normalize_rows = false) {
  return effective_rank(h.matrix, variance_fraction, normalize_rows);
}

// ---------------------------------------------------------------------------
// Gradient alignment

struct AlignmentStat {
  double mean_cosine = 1.0;
  std::size_t counted = 0;
  std::size_t skipped = 0;  // pairs where either gradient norm is below kAlignMinNorm
};

inline constexpr double kAlignMinNorm = 1e-12;

/// cos(a, b) = a.b / sqrt(|a|^2 |b|^2), clipped to [-1, 1].
inline double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

/// Mean over draws and samples of cos(grad at x, grad at x + eta), eta ~ U[-eps, eps]^d.
/// Draw k uses noise sub-stream k of `seed`.
inline AlignmentStat grad_alignment_stat(const Model& model, const Batch& batch, double eps, std::size_t samples,
                                         std::uint64_t seed) {
  if (samples < 1) throw ContractError("grad_alignment_stat: samples must be >= 1");
  if (!(eps >= 0.0)) throw ContractError("grad_alignment_stat: eps must be >= 0");
  const Tensor g0 = input_gradient(model, batch);
  AlignmentStat out;
  double total = 0.0;
  for (std::size_t k = 0; k < samples; ++k) {
    const Tensor eta = sample_noise(NoiseDist::uniform, eps, batch.inputs.shape(), seed, stream::noise, k);
    const Tensor g1 = input_gradient(model, plus(batch.inputs, eta), batch.labels);
    for (std::size_t i = 0; i < g0.rows(); ++i) {
      if (l2_norm(g0.row(i)) < kAlignMinNorm || l2_norm(g1.row(i)) < kAlignMinNorm) {
        ++out.skipped;
        continue;
      }
      total += cosine(g0.row(i), g1.row(i));
      ++out.counted;
    }
  }
  if (out.counted) out.mean_cosine = total / static_cast<double>(out.counted);
  return out;
}

// ---------------------------------------------------------------------------
// Loss surface

enum class SurfaceLoss {
  cross_entropy,
  margin,  // max_{j != y} z_j - z_y
};

/// Mean loss at x + t1 * delta_fgsm + t2 * delta_random over an n x n grid,
/// t1 (rows) and t2 (columns) evenly spaced in [0, 1]. delta_fgsm is the
/// FGSM perturbation at eps, delta_random = eps * sign(N(0, I)) from `seed`.
inline Tensor loss_surface_grid(const Model& model, const Batch& batch, std::size_t n, double eps, std::uint64_t seed,
                                SurfaceLoss kind = SurfaceLoss::cross_entropy) {
  if (n < 2) throw ContractError("loss_surface_grid: resolution must be >= 2");
  check_inputs(model, batch.inputs, batch.labels.size());
  const Tensor d1 = fgsm(model, batch, eps).delta;
  const Tensor d2 = sample_noise(NoiseDist::bernoulli_sign, eps, batch.inputs.shape(), seed);
  const std::size_t size = batch.inputs.size(), rows = batch.inputs.rows();
  Tensor grid(Shape{n, n});
  Tensor point(batch.inputs.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double t1 = static_cast<double>(i) / static_cast<double>(n - 1);
    for (std::size_t j = 0; j < n; ++j) {
      const double t2 = static_cast<double>(j) / static_cast<double>(n - 1);
      for (std::size_t k = 0; k < size; ++k) point[k] = batch.inputs[k] + t1 * d1[k] + t2 * d2[k];
      double s = 0.0;
      if (kind == SurfaceLoss::cross_entropy) {
        for (double l : per_sample_loss(model, point, batch.labels)) s += l;
      } else {
        const Tensor z = logits(model, point);
        const std::size_t c = z.dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
          const auto y = static_cast<std::size_t>(batch.labels[r]);
          double best = -INFINITY;
          for (std::size_t q = 0; q < c; ++q) {
            if (q != y) best = std::max(best, z[r * c + q]);
          }
          s += best - z[r * c + y];
        }
      }
      grid[i * n + j] = (1.0 / static_cast<double>(rows)) * s;
    }
  }
  return grid;
}

/// A one-line header, then one comma-separated row per matrix row.
inline void write_matrix_csv(std::ostream& out, const Tensor& m, const std::string& header) {
  if (m.shape().size() != 2) throw ShapeError("write_matrix_csv: need a matrix, got " + to_string(m.shape()));
  out << header << '\n';
  char buf[32];
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    for (std::size_t j = 0; j < m.dim(1); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", m[i * m.dim(1) + j]);
      out << (j ? "," : "") << buf;
    }
    out << '\n';
  }
}

inline std::string surface_header(std::size_t n, std::uint64_t seed, double eps) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "t1_steps=%zu,t2_steps=%zu,seed=%llu,eps=%.17g", n, n,
                static_cast<unsigned long long>(seed), eps);
  return buf;
}

}  // namespace colab
