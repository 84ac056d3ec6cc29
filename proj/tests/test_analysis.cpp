#include <gtest/gtest.h>

#include <cfloat>
#include <cmath>
#include <sstream>

#include "colab/analysis.hpp"
#include "eigen_oracle.hpp"
#include "test_support.hpp"

using namespace colab;
using testing_support::eigen_rank;
using testing_support::linear_model;
using testing_support::plane_fit_residual;
using testing_support::to_eigen;
using testing_support::random_batch;
using testing_support::random_linear_model;
using testing_support::random_tensor;
using testing_support::structured_matrix;

namespace {

/// Rows 0..r-1 are scaled unit vectors e_i; optional per-row scale.
Tensor orthogonal_rows(std::size_t r, std::size_t c, std::vector<double> scale = {}) {
  Tensor t(Shape{r, c});
  for (std::size_t i = 0; i < r; ++i) t[i * c + i] = scale.empty() ? 3.0 : scale[i];
  return t;
}

Model rising_model(std::size_t d) {
  Tensor W(Shape{d, 2});
  for (std::size_t i = 0; i < d; ++i) W[i * 2 + 1] = 1.0;
  return linear_model(W, Tensor(Shape{2}));
}

/// Two hidden ReLUs: h0 = relu(x0 - c), h1 = relu(x1 + 10); logit1 - logit0 = h0 + h1.
/// Input gradient directions: (0, 1) where x0 < c and (1, 1) where x0 > c.
Model kinked_model(double c) {
  Tensor W1(Shape{2, 2}, {1, 0, 0, 1});
  Tensor b1(Shape{2}, {-c, 10});
  Tensor W2(Shape{2, 2}, {0, 1, 0, 1});
  return Model(arch::mlp(2, {2}, 2), {W1, b1, W2, Tensor(Shape{2})});
}

}  // namespace

// ---------------------------------------------------------------------------
// Closed-form norms

TEST(NormFormula, TheoremConstants) {
  for (std::size_t d : {1u, 3u, 784u, 3072u}) {
    for (double eps : {8.0 / 255.0, 0.1, 0.3, 2.0}) {
      const double base = static_cast<double>(d) * eps * eps;
      const double n = expected_sq_norm(Method::n_fgsm, {d, eps, eps, 2 * eps});
      const double f = expected_sq_norm(Method::fgsm, {d, eps, 0, 0});
      const double r = expected_sq_norm(Method::rs_fgsm, {d, eps, 1.25 * eps, eps});
      EXPECT_NEAR(n, 7.0 / 3.0 * base, 4 * DBL_EPSILON * n);
      EXPECT_EQ(f, base);
      EXPECT_NEAR(r, 101.0 / 128.0 * base, 4 * DBL_EPSILON * r);
    }
  }
}

TEST(NormFormula, ZeroNoiseZeroStep) { EXPECT_EQ(expected_sq_norm(Method::n_fgsm, {10, 0.3, 0, 0}), 0.0); }

TEST(NormFormula, RsFgsmSpecialPoints) {
  // alpha = 0: uniform noise alone, eps^2 / 3 per coordinate.
  EXPECT_DOUBLE_EQ(expected_sq_norm(Method::rs_fgsm, {1, 0.6, 0, 0}), 0.12);
  // alpha = 2 eps: every coordinate saturates.
  EXPECT_DOUBLE_EQ(expected_sq_norm(Method::rs_fgsm, {5, 0.5, 1.0, 0}), 5 * 0.25);
}

TEST(NormFormula, Errors) {
  EXPECT_THROW(expected_sq_norm(Method::rs_fgsm, {4, 0.0, 0.0, 0.0}), ContractError);
  EXPECT_THROW(expected_sq_norm(Method::rs_fgsm, {4, 0.1, 0.3, 0.0}), ContractError);
  EXPECT_THROW(expected_sq_norm(Method::pgd, {4, 0.1, 0.1, 0.0}), ContractError);
  EXPECT_THROW(expected_sq_norm(Method::fgsm, {4, -0.1, 0.1, 0.0}), ContractError);
  EXPECT_THROW(expected_sq_norm(Method::fgsm, {0, 0.1, 0.1, 0.0}), ContractError);
}

TEST(NormFormula, StrictOrderingOverRandomPairs) {
  CounterRng rng(404, 0);
  for (int k = 0; k < 20; ++k) {
    const std::size_t d = 1 + rng.below(5000);
    const double eps = rng.uniform(1e-3, 1.0);
    const double n = expected_sq_norm(Method::n_fgsm, {d, eps, eps, 2 * eps});
    const double f = expected_sq_norm(Method::fgsm, {d, eps, eps, 0});
    const double r = expected_sq_norm(Method::rs_fgsm, {d, eps, 1.25 * eps, eps});
    EXPECT_GT(n, f);
    EXPECT_GT(f, r);
  }
}

// ---------------------------------------------------------------------------
// Monte Carlo

TEST(MonteCarlo, BracketsClosedForms) {
  const std::size_t d = 256;
  const double eps = 8.0 / 255.0;
  const Tensor signs = sample_noise(NoiseDist::bernoulli_sign, 1.0, {1, d}, 12);
  const std::pair<AttackSpec, Method> cases[] = {{AttackSpec::n_fgsm(eps), Method::n_fgsm},
                                                 {AttackSpec::rs_fgsm(eps), Method::rs_fgsm}};
  for (const auto& [spec, method] : cases) {
    const MonteCarloEstimate mc = mc_sq_norm(spec, signs, 20000, 13);
    const double truth = expected_sq_norm(method, {d, eps, spec.alpha, spec.noise_bound});
    EXPECT_LT(std::abs(mc.mean - truth), 4 * mc.std_error) << name_of(method);
    EXPECT_LT(std::abs(mc.mean - truth) / truth, 0.01) << name_of(method);
    EXPECT_GT(mc.std_error, 0.0);
  }
}

TEST(MonteCarlo, FgsmIsExactWithZeroVariance) {
  const std::size_t d = 100;
  const double eps = 0.25;
  const Tensor signs = sample_noise(NoiseDist::bernoulli_sign, 1.0, {1, d}, 1);
  const MonteCarloEstimate mc = mc_sq_norm(AttackSpec::fgsm(eps), signs, 50, 2);
  EXPECT_EQ(mc.mean, static_cast<double>(d) * eps * eps);
  EXPECT_EQ(mc.std_error, 0.0);
}

TEST(MonteCarlo, IndependentOfSignField) {
  const double eps = 0.1;
  const std::size_t d = 64;
  Tensor plus_ones(Shape{1, d});
  for (double& v : plus_ones.data()) v = 1.0;
  const Tensor mixed = sample_noise(NoiseDist::bernoulli_sign, 1.0, {1, d}, 3);
  const double a = mc_sq_norm(AttackSpec::n_fgsm(eps), plus_ones, 4000, 4).mean;
  const double b = mc_sq_norm(AttackSpec::n_fgsm(eps), mixed, 4000, 4).mean;
  // Same noise draws; uniform noise is symmetric, so only the sampling error differs.
  const double truth = expected_sq_norm(Method::n_fgsm, {d, eps, eps, 2 * eps});
  EXPECT_LT(std::abs(a - truth) / truth, 0.02);
  EXPECT_LT(std::abs(b - truth) / truth, 0.02);
}

TEST(MonteCarlo, RejectsBadInputs) {
  Tensor bad(Shape{1, 3}, {1, 0.5, -1});
  EXPECT_THROW(mc_sq_norm(AttackSpec::fgsm(0.1), bad, 10, 0), ContractError);
  Tensor ok(Shape{1, 2}, {1, -1});
  EXPECT_THROW(mc_sq_norm(AttackSpec::fgsm(0.1), ok, 0, 0), ContractError);
}

TEST(MonteCarlo, LiveModeMatchesFormulaForNFgsm) {
  // Live gradients change only the sign field, which the expectation ignores.
  const Model m = build_model(arch::mlp(16, {8}, 3), 5);
  const Batch b = random_batch(m, 8, 6);
  const double eps = 0.05;
  const MonteCarloEstimate mc = mc_sq_norm_live(m, b, AttackSpec::n_fgsm(eps), 200, 7);
  const double truth = expected_sq_norm(Method::n_fgsm, {16, eps, eps, 2 * eps});
  EXPECT_LT(std::abs(mc.mean - truth), 4 * mc.std_error);
}

// ---------------------------------------------------------------------------
// Effective step size

TEST(EffectiveStep, IdentityGivesFullSignVector) {
  const std::size_t d = 9;
  const Model m = build_model(arch::mlp(d, {5}, 3), 8);
  const Batch b = random_batch(m, 4, 9);
  AttackSpec spec = AttackSpec::n_fgsm(0.1, 0.07, 0.2);
  spec.seed = 10;
  const PerturbationBatch full = attack(m, b, spec);
  const std::vector<double> ratio = effective_step_size(full.delta, full.noise_part, b.inputs);
  for (std::size_t i = 0; i < ratio.size(); ++i) {
    const double expect = 0.07 * std::sqrt(static_cast<double>(d)) / l2_norm(b.inputs.row(i));
    EXPECT_NEAR(ratio[i], expect, 4 * DBL_EPSILON * expect);
  }
}

TEST(EffectiveStep, ProjectionWithSaturatingNoiseShrinksStep) {
  const std::size_t d = 6;
  const double eps = 0.1, alpha = 1.25 * eps;
  const Model m = rising_model(d);
  Batch b{random_tensor({3, d}, 11, 0.2, 0.8), {0, 0, 0}};
  AttackSpec spec = AttackSpec::rs_fgsm(eps, alpha);
  Tensor eta(b.inputs.shape());
  for (double& v : eta.data()) v = eps;
  const PerturbationBatch full = general_single_step(m, b, spec, eta);
  const Tensor random_only = project(eta, eps);
  const std::vector<double> ratio = effective_step_size(full.delta, random_only, b.inputs);
  for (std::size_t i = 0; i < ratio.size(); ++i) {
    EXPECT_LT(ratio[i], alpha * std::sqrt(static_cast<double>(d)) / l2_norm(b.inputs.row(i)));
    EXPECT_EQ(ratio[i], 0.0);
  }
}

TEST(EffectiveStep, EqualPerturbationsGiveZero) {
  const Tensor x = random_tensor({2, 4}, 1), delta = random_tensor({2, 4}, 2);
  for (double r : effective_step_size(delta, delta, x)) EXPECT_EQ(r, 0.0);
}

TEST(EffectiveStep, Errors) {
  const Tensor x = random_tensor({2, 4}, 1);
  EXPECT_THROW(effective_step_size(x, random_tensor({2, 3}, 2), x), ShapeError);
  Tensor zero(Shape{2, 4});
  EXPECT_THROW(effective_step_size(x, x, zero), ContractError);
}

// ---------------------------------------------------------------------------
// Effective rank

TEST(EffectiveRank, IdenticalRowsGiveOne) {
  Tensor t(Shape{5, 20});
  const Tensor row = random_tensor({1, 20}, 3);
  for (std::size_t i = 0; i < 5; ++i) std::copy(row.data().begin(), row.data().end(), t.row(i).begin());
  EXPECT_EQ(effective_rank(t), 1u);
}

TEST(EffectiveRank, OrthogonalEqualNormRows) {
  for (std::size_t n : {2u, 5u, 7u, 10u}) {
    EXPECT_EQ(effective_rank(orthogonal_rows(n, 12), 0.9),
              static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(n))))
        << n;
  }
  EXPECT_EQ(effective_rank(orthogonal_rows(4, 4), 1.0), 4u);
}

TEST(EffectiveRank, AllZeroIsRankZero) { EXPECT_EQ(effective_rank(Tensor(Shape{3, 7})), 0u); }

TEST(EffectiveRank, MatchesEigenOracle) {
  CounterRng rng(77, 0);
  for (std::uint64_t k = 0; k < 50; ++k) {
    const std::size_t r = 2 + rng.below(9), c = 10 + rng.below(120), low = 1 + rng.below(r);
    const double fraction = rng.uniform(0.5, 1.0);
    const Tensor t = k % 2 ? structured_matrix(r, c, low, 100 + k) : random_tensor({r, c}, 100 + k);
    EXPECT_EQ(effective_rank(t, fraction), eigen_rank(t, fraction)) << "case " << k;
  }
}

TEST(EffectiveRank, EigenvaluesAgreeWithEigen) {
  const Tensor t = structured_matrix(7, 100, 3, 9);
  const std::vector<double> ours = symmetric_eigenvalues(row_gram(t));
  const Eigen::MatrixXd a = to_eigen(t);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(a * a.transpose(), Eigen::EigenvaluesOnly);
  const Eigen::VectorXd ref = solver.eigenvalues().reverse();
  for (std::size_t i = 0; i < ours.size(); ++i) EXPECT_NEAR(ours[i], ref(i), 1e-10 * ref(0));
}

TEST(EffectiveRank, InvariantToPermutationAndScale) {
  for (std::uint64_t k = 0; k < 10; ++k) {
    const Tensor t = structured_matrix(6, 40, 2 + k % 3, 500 + k);
    const std::size_t base = effective_rank(t);
    Tensor perm(t.shape()), scaled = t;
    const std::size_t order[] = {3, 0, 5, 1, 4, 2};
    for (std::size_t i = 0; i < 6; ++i) std::copy(t.row(order[i]).begin(), t.row(order[i]).end(), perm.row(i).begin());
    for (double& v : scaled.data()) v *= -7.5;
    EXPECT_EQ(effective_rank(perm), base);
    EXPECT_EQ(effective_rank(scaled), base);
  }
}

TEST(EffectiveRank, NormalizationFlag) {
  // One dominant row hides the others unless rows are scaled to unit length.
  const Tensor t = orthogonal_rows(5, 8, {100, 1, 1, 1, 1});
  EXPECT_EQ(effective_rank(t, 0.9), 1u);
  EXPECT_EQ(effective_rank(t, 0.9, true), 5u);
}

TEST(EffectiveRank, Errors) {
  EXPECT_THROW(effective_rank(random_tensor({1, 5}, 1)), ShapeError);
  EXPECT_THROW(effective_rank(random_tensor({3, 5}, 1), 0.0), ContractError);
  EXPECT_THROW(effective_rank(random_tensor({3, 5}, 1), 1.5), ContractError);
  PerturbationHistory h{orthogonal_rows(3, 3), "Ep 2-8"};
  EXPECT_EQ(effective_rank(h), 3u);
}

// ---------------------------------------------------------------------------
// Gradient alignment

TEST(Alignment, ZeroRadiusIsExactlyOne) {
  const Model m = build_model(arch::mlp(5, {7}, 3), 14);
  const AlignmentStat s = grad_alignment_stat(m, random_batch(m, 6, 15), 0.0, 3, 16);
  EXPECT_EQ(s.mean_cosine, 1.0);
  EXPECT_EQ(s.counted, 18u);
}

TEST(Alignment, LinearTwoClassModelIsOne) {
  const Model m = random_linear_model(8, 2, 17);
  const AlignmentStat s = grad_alignment_stat(m, random_batch(m, 10, 18), 0.5, 5, 19);
  EXPECT_NEAR(s.mean_cosine, 1.0, 1e-15);
}

TEST(Alignment, TwoRegionKinkOracle) {
  const double c = 0.5, eps = 0.2;
  const Model m = kinked_model(c);
  // x0 sits just below the kink; x1 is anywhere.
  Batch b{Tensor(Shape{4, 2}, {0.45, 0.1, 0.48, 0.9, 0.40, 0.5, 0.35, 0.3}), {0, 1, 0, 1}};
  const std::size_t samples = 64;
  const std::uint64_t seed = 20;
  const AlignmentStat s = grad_alignment_stat(m, b, eps, samples, seed);
  // Hand oracle: cos = 1 when x0 + eta0 stays below c, 1/sqrt(2) once it crosses.
  double expect = 0.0;
  for (std::size_t k = 0; k < samples; ++k) {
    const Tensor eta = sample_noise(NoiseDist::uniform, eps, b.inputs.shape(), seed, stream::noise, k);
    for (std::size_t i = 0; i < 4; ++i) expect += b.inputs[2 * i] + eta[2 * i] > c ? 1.0 / std::sqrt(2.0) : 1.0;
  }
  expect /= static_cast<double>(4 * samples);
  EXPECT_LT(s.mean_cosine, 1.0);
  EXPECT_NEAR(s.mean_cosine, expect, 1e-12);
}

TEST(Alignment, StaysInRangeAndCountsSkips) {
  const Model m = build_model(arch::mlp(6, {12}, 4), 21);
  const AlignmentStat s = grad_alignment_stat(m, random_batch(m, 8, 22), 1.0, 4, 23);
  EXPECT_GE(s.mean_cosine, -1.0);
  EXPECT_LE(s.mean_cosine, 1.0);
  EXPECT_EQ(s.counted + s.skipped, 32u);

  Model dead = m;
  for (Tensor& p : dead.params()) std::fill(p.data().begin(), p.data().end(), 0.0);
  const AlignmentStat z = grad_alignment_stat(dead, random_batch(m, 8, 22), 1.0, 2, 23);
  EXPECT_EQ(z.skipped, 16u);
  EXPECT_EQ(z.counted, 0u);
  EXPECT_EQ(z.mean_cosine, 1.0);
}

// ---------------------------------------------------------------------------
// Loss surface

TEST(LossSurface, OriginIsCleanLoss) {
  const Model m = build_model(arch::mlp(5, {6}, 3), 24);
  const Batch b = random_batch(m, 7, 25);
  const Tensor grid = loss_surface_grid(m, b, 5, 0.1, 26);
  EXPECT_EQ(grid[0], loss(m, b));
  EXPECT_EQ(grid.shape(), (Shape{5, 5}));
  // Moving along the FGSM direction raises the loss at first order.
  EXPECT_GT(grid[5], grid[0]);
}

TEST(LossSurface, LinearModelMarginIsPlanar) {
  const Model m = random_linear_model(10, 2, 27);
  const Batch b = random_batch(m, 6, 28);
  const std::size_t n = 9;
  const Tensor grid = loss_surface_grid(m, b, n, 0.3, 29, SurfaceLoss::margin);
  const auto [residual, coef] = plane_fit_residual(grid);
  EXPECT_LT(residual, 1e-9);
  EXPECT_GT(coef(1), 0.0);  // FGSM raises the margin loss
}

TEST(LossSurface, CrossEntropyIsCurvedEvenForLinearModel) {
  const Model m = random_linear_model(10, 2, 27);
  const Batch b = random_batch(m, 6, 28);
  const Tensor grid = loss_surface_grid(m, b, 3, 2.0, 29);
  EXPECT_GT(std::abs(grid[0] - 2 * grid[3] + grid[6]), 1e-6);
}

TEST(LossSurface, DeterministicAndValidated) {
  const Model m = build_model(arch::mlp(4, {5}, 3), 30);
  const Batch b = random_batch(m, 3, 31);
  EXPECT_EQ(loss_surface_grid(m, b, 4, 0.2, 32), loss_surface_grid(m, b, 4, 0.2, 32));
  EXPECT_FALSE(loss_surface_grid(m, b, 4, 0.2, 32) == loss_surface_grid(m, b, 4, 0.2, 33));
  EXPECT_THROW(loss_surface_grid(m, b, 1, 0.2, 32), ContractError);
}

TEST(LossSurface, CsvLayout) {
  std::ostringstream out;
  write_matrix_csv(out, Tensor(Shape{2, 2}, {0.5, 1, -2, 0.25}), surface_header(2, 7, 0.5));
  EXPECT_EQ(out.str(), "t1_steps=2,t2_steps=2,seed=7,eps=0.5\n0.5,1\n-2,0.25\n");
}
