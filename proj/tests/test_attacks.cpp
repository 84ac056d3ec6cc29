#include <gtest/gtest.h>

#include <cmath>

#include "colab/attacks.hpp"
#include "test_support.hpp"

using namespace colab;
using testing_support::linear_model;
using testing_support::random_batch;
using testing_support::random_linear_model;
using testing_support::random_tensor;

namespace {

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

/// Two-class model whose input gradient is positive in every coordinate for label 0.
Model rising_model(std::size_t d) {
  Tensor W(Shape{d, 2});
  for (std::size_t i = 0; i < d; ++i) W[i * 2 + 1] = 1.0;
  return linear_model(W, Tensor(Shape{2}));
}

double max_row_linf(const Tensor& t) {
  double m = 0.0;
  for (std::size_t i = 0; i < t.rows(); ++i) m = std::max(m, linf_norm(t.row(i)));
  return m;
}

std::vector<AttackSpec> eps_ball_specs(double eps) {
  AttackSpec pgd = AttackSpec::pgd(eps, eps / 2, 3, 2);
  return {AttackSpec::rs_fgsm(eps),          AttackSpec::r_plus_fgsm(eps, 0.6 * eps),
          pgd,                               AttackSpec::zero_grad(eps, 1.25 * eps, 0.3),
          AttackSpec::multi_grad(eps, eps),  AttackSpec::rand_alpha(eps)};
}

}  // namespace

TEST(AttackSpec, PresetsAreValid) {
  for (const AttackSpec& s : eps_ball_specs(0.1)) EXPECT_TRUE(s.problems().empty()) << name_of(s.method);
  EXPECT_TRUE(AttackSpec::fgsm(0.1).problems().empty());
  EXPECT_TRUE(AttackSpec::n_fgsm(0.1).problems().empty());
  EXPECT_TRUE(AttackSpec::noise_only(0.1, 0.2).problems().empty());
}

TEST(AttackSpec, Defaults) {
  const AttackSpec n = AttackSpec::n_fgsm(0.3);
  EXPECT_EQ(n.alpha, 0.3);
  EXPECT_EQ(n.noise_bound, 0.6);
  EXPECT_FALSE(n.project_eps_ball);
  EXPECT_EQ(AttackSpec::rs_fgsm(0.4).alpha, 0.5);
  EXPECT_EQ(AttackSpec::pgd(0.4).alpha, 0.1);
  EXPECT_EQ(AttackSpec::pgd(0.4).steps, 50);
  EXPECT_EQ(AttackSpec::pgd(0.4).restarts, 10);
}

TEST(AttackSpec, ProblemsNameTheField) {
  AttackSpec s = AttackSpec::fgsm(-0.1);
  ASSERT_FALSE(s.problems().empty());
  EXPECT_NE(s.problems()[0].find("epsilon"), std::string::npos);
  EXPECT_THROW(s.validate(), ContractError);

  AttackSpec rs = AttackSpec::rs_fgsm(0.1);
  rs.project_eps_ball = false;
  ASSERT_EQ(rs.problems().size(), 1u);
  EXPECT_NE(rs.problems()[0].find("project_eps_ball"), std::string::npos);

  AttackSpec p = AttackSpec::pgd(0.1);
  p.restarts = 0;
  ASSERT_EQ(p.problems().size(), 1u);
  EXPECT_NE(p.problems()[0].find("restarts"), std::string::npos);

  AttackSpec z = AttackSpec::zero_grad(0.1, 0.1, 1.5);
  EXPECT_FALSE(z.problems().empty());
  EXPECT_FALSE(AttackSpec::r_plus_fgsm(0.1, 0.2).problems().empty());
}

TEST(AttackSpec, NameRoundTrip) {
  for (int i = 0; i < 9; ++i) EXPECT_EQ(parse_method(name_of(static_cast<Method>(i))), static_cast<Method>(i));
  for (int i = 0; i < 4; ++i)
    EXPECT_EQ(parse_noise(name_of(static_cast<NoiseDist>(i))), static_cast<NoiseDist>(i));
  EXPECT_FALSE(parse_method("bim").has_value());
}

TEST(Noise, PerSampleStreamsIndependentOfBatchSize) {
  const Tensor a = sample_noise(NoiseDist::uniform, 0.5, Shape{3, 4}, 9);
  const Tensor b = sample_noise(NoiseDist::uniform, 0.5, Shape{8, 4}, 9);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Noise, LawsHaveTheirMoments) {
  const double b = 0.6;
  const Tensor u = sample_noise(NoiseDist::uniform, b, Shape{200, 500}, 1);
  const Tensor g = sample_noise(NoiseDist::gaussian_matched, b, Shape{200, 500}, 1);
  const Tensor s = sample_noise(NoiseDist::bernoulli_sign, b, Shape{200, 500}, 1);
  auto var = [](const Tensor& t) {
    double m = 0.0, q = 0.0;
    for (double v : t.data()) m += v;
    m /= static_cast<double>(t.size());
    for (double v : t.data()) q += (v - m) * (v - m);
    return q / static_cast<double>(t.size() - 1);
  };
  EXPECT_NEAR(var(u), b * b / 3, 0.01 * b * b / 3);
  EXPECT_NEAR(var(g), b * b / 3, 0.01 * b * b / 3);
  EXPECT_LE(linf_norm(u.data()), b);
  for (double v : s.data()) EXPECT_EQ(std::abs(v), b);
  EXPECT_EQ(linf_norm(sample_noise(NoiseDist::none, b, Shape{3, 3}, 1).data()), 0.0);
}

TEST(Fgsm, LinearSoftmaxClosedForm) {
  const Model m = random_linear_model(7, 3, 4);
  const Batch b = random_batch(m, 5, 5);
  const double eps = 0.2;
  const PerturbationBatch pb = fgsm(m, b, eps);
  const Tensor g = input_gradient(m, b);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(pb.delta[i], eps * sign(g[i]));
  EXPECT_EQ(pb.passes, (PassCounter{1, 1}));
}

TEST(Fgsm, SolvesLinearInnerProblemExactly) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const std::size_t d = 10;
    const Model m = random_linear_model(d, 2, 40 + seed);
    const Batch b = random_batch(m, 3, 50 + seed);
    const double eps = 0.25;
    const auto adv = per_sample_loss(m, fgsm(m, b, eps).adversarial_inputs, b.labels);
    for (std::size_t i = 0; i < 3; ++i) {
      double best = -1.0;
      for (std::uint32_t mask = 0; mask < (1u << d); ++mask) {
        Tensor x = gather_rows(b.inputs, std::vector<std::size_t>{i});
        for (std::size_t t = 0; t < d; ++t) x[t] += (mask >> t & 1u) ? eps : -eps;
        best = std::max(best, per_sample_loss(m, x, std::vector<int>{b.labels[i]})[0]);
      }
      EXPECT_NEAR(adv[i], best, 1e-9);
    }
  }
}

TEST(Fgsm, ZeroGradientGivesZeroDelta) {
  Model m = random_linear_model(4, 3, 1);
  m.params()[0] = Tensor(Shape{4, 3});
  const PerturbationBatch pb = single_step_attack(m, random_batch(m, 3, 2), AttackSpec::fgsm(0.3));
  EXPECT_EQ(linf_norm(pb.delta.data()), 0.0);
}

TEST(PresetRecovery, GeneralConstructorMatchesDedicatedPaths) {
  const Model m = build_model(arch::mlp(6, {8}, 3), 3);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Batch b = random_batch(m, 4, 100 + seed);
    const double eps = 0.05 + 0.01 * static_cast<double>(seed % 7);

    AttackSpec f = AttackSpec::fgsm(eps);
    EXPECT_TRUE(same_bits(general_single_step(m, b, f).delta, fgsm(m, b, eps).delta));

    AttackSpec rs = AttackSpec::rs_fgsm(eps);
    rs.seed = seed;
    EXPECT_TRUE(same_bits(general_single_step(m, b, rs).delta, rs_fgsm(m, b, eps, 1.25 * eps, seed).delta));

    AttackSpec rp = AttackSpec::r_plus_fgsm(eps, 0.5 * eps);
    rp.seed = seed;
    EXPECT_TRUE(same_bits(general_single_step(m, b, rp).delta, r_plus_fgsm(m, b, eps, 0.5 * eps, seed).delta));
  }
}

TEST(RsFgsm, SaturatingNoiseIsAbsorbedByProjection) {
  const std::size_t d = 5;
  const Model m = rising_model(d);
  const Batch b{Tensor(Shape{1, d}, 0.5), {0}};
  const double eps = 0.1;
  const PerturbationBatch pb = general_single_step(m, b, AttackSpec::rs_fgsm(eps), Tensor(Shape{1, d}, eps));
  for (double v : pb.delta.data()) EXPECT_EQ(v, eps);
}

TEST(NFgsm, ZeroNoiseReducesToFgsm) {
  const Model m = build_model(arch::mlp(6, {8}, 3), 8);
  const Batch b = random_batch(m, 6, 9);
  EXPECT_TRUE(same_bits(n_fgsm(m, b, 0.1, 0.1, 0.0, 3).delta, fgsm(m, b, 0.1).delta));
}

TEST(NFgsm, ZeroStepReturnsNoise) {
  const Model m = build_model(arch::mlp(6, {8}, 3), 8);
  const Batch b = random_batch(m, 6, 9);
  const PerturbationBatch pb = n_fgsm(m, b, 0.1, 0.0, 0.2, 3);
  EXPECT_TRUE(same_bits(pb.delta, pb.noise_part));
  EXPECT_GT(linf_norm(pb.delta.data()), 0.1);
}

TEST(NFgsm, NoProjectionAndBoundAttained) {
  const Model m = build_model(arch::mlp(6, {8}, 3), 8);
  const double eps = 0.1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const PerturbationBatch pb = n_fgsm(m, random_batch(m, 50, seed), eps, eps, 2 * eps, seed);
    EXPECT_LE(max_row_linf(pb.delta), 3 * eps + 1e-12);
  }
  const std::size_t d = 4;
  const Model up = rising_model(d);
  const Batch b{Tensor(Shape{1, d}, 0.5), {0}};
  const PerturbationBatch w = general_single_step(up, b, AttackSpec::n_fgsm(eps), Tensor(Shape{1, d}, 2 * eps));
  EXPECT_EQ(linf_norm(w.delta.data()), 2 * eps + eps);
}

TEST(NFgsm, ClampAppliesToTrainingInputsOnly) {
  const Model m = build_model(arch::mlp(6, {8}, 3), 8);
  const Batch b = random_batch(m, 10, 9);
  const PerturbationBatch pb = n_fgsm(m, b, 0.3, 0.3, 0.6, 1, ValueRange{0.0, 1.0});
  EXPECT_TRUE(same_bits(pb.adversarial_inputs, plus(b.inputs, pb.delta)));
  EXPECT_GT(linf_norm(pb.adversarial_inputs.data()), 1.0);
  for (double v : pb.training_inputs.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Pgd, OneStepFromZeroIsFgsm) {
  const Model m = build_model(arch::mlp(6, {8}, 3), 8);
  const Batch b = random_batch(m, 6, 9);
  AttackSpec s = AttackSpec::pgd(0.1, 0.1, 1, 1);
  s.zero_init = true;
  EXPECT_TRUE(same_bits(pgd(m, b, s).delta, fgsm(m, b, 0.1).delta));
}

TEST(Pgd, LinearModelMatchesFgsmLoss) {
  const Model m = random_linear_model(8, 2, 12);
  const Batch b = random_batch(m, 6, 13);
  const double eps = 0.2;
  const auto f = per_sample_loss(m, fgsm(m, b, eps).adversarial_inputs, b.labels);
  AttackSpec s = AttackSpec::pgd(eps, eps / 4, 50, 1);
  s.seed = 5;
  const auto p = per_sample_loss(m, pgd(m, b, s).adversarial_inputs, b.labels);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(p[i], f[i], 1e-9);
}

TEST(Pgd, KeepsBestRestartAndCountsAnyFooled) {
  const Model m = build_model(arch::mlp(4, {16}, 3), 2);
  const Batch b = random_batch(m, 20, 3);
  AttackSpec s = AttackSpec::pgd(0.3, 0.1, 4, 3);
  s.seed = 7;
  const PerturbationBatch all = pgd(m, b, s);
  EXPECT_EQ(all.passes, (PassCounter{3 * 5, 3 * 4}));
  std::vector<double> best(20, -1.0);
  std::vector<bool> fooled(20, false);
  for (int r = 0; r < 3; ++r) {
    Tensor init = sample_noise(NoiseDist::uniform, s.epsilon, b.inputs.shape(), s.seed, stream::restart,
                               static_cast<std::uint64_t>(r));
    Tensor delta = init;
    for (int k = 0; k < s.steps; ++k) {
      const Tensor g = input_gradient(m, plus(b.inputs, delta), b.labels);
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = project(delta[i] + s.alpha * sign(g[i]), s.epsilon);
    }
    const Scores sc = score(m, plus(b.inputs, delta), b.labels);
    for (std::size_t i = 0; i < 20; ++i) {
      best[i] = std::max(best[i], sc.losses[i]);
      fooled[i] = fooled[i] || sc.predictions[i] != b.labels[i];
    }
  }
  const auto kept = per_sample_loss(m, all.adversarial_inputs, b.labels);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(kept[i], best[i]);
    EXPECT_EQ(all.fooled[i], fooled[i]);
  }
}

TEST(Pgd, ClampKeepsIteratesInRange) {
  const Model m = build_model(arch::mlp(4, {16}, 3), 2);
  const Batch b = random_batch(m, 20, 3);
  AttackSpec s = AttackSpec::pgd(0.3, 0.1, 5, 2);
  s.clamp = ValueRange{0.0, 1.0};
  const PerturbationBatch pb = pgd(m, b, s);
  for (double v : pb.adversarial_inputs.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_LE(max_row_linf(pb.delta), 0.3 + 1e-12);
}

TEST(ZeroGrad, QuantileExample) {
  const Tensor g(Shape{1, 4}, std::vector<double>{3.0, -1.0, 0.5, -2.0});
  EXPECT_DOUBLE_EQ(abs_quantile(g.row(0), 0.5), 1.5);
  const Tensor z = sign_of(zero_small_coordinates(g, 0.5));
  EXPECT_EQ(z.storage(), (std::vector<double>{1.0, 0.0, 0.0, -1.0}));
}

TEST(ZeroGrad, QuantileMatchesExhaustiveSort) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Tensor g = random_tensor({1, 9}, seed);
    const double q = static_cast<double>(seed % 10) / 10.0;
    std::vector<double> a;
    for (double v : g.data()) a.push_back(std::abs(v));
    std::sort(a.begin(), a.end());
    const double pos = q * 8.0;
    const auto lo = static_cast<std::size_t>(pos);
    const double expect = lo + 1 < a.size() ? a[lo] + (pos - lo) * (a[lo + 1] - a[lo]) : a[lo];
    EXPECT_DOUBLE_EQ(abs_quantile(g.row(0), q), expect);
  }
}

TEST(ZeroGrad, EndpointsRecoverRsFgsmAndNoise) {
  const Model m = build_model(arch::mlp(6, {8}, 3), 8);
  const Batch b = random_batch(m, 6, 9);
  const double eps = 0.1;
  AttackSpec z0 = AttackSpec::zero_grad(eps, 1.25 * eps, 0.0);
  z0.seed = 4;
  EXPECT_TRUE(same_bits(zero_grad_attack(m, b, z0).delta, rs_fgsm(m, b, eps, 1.25 * eps, 4).delta));
  AttackSpec z1 = z0;
  z1.quantile_q = 1.0;
  const PerturbationBatch pb = zero_grad_attack(m, b, z1);
  EXPECT_TRUE(same_bits(pb.delta, project(pb.noise_part, eps)));
}

TEST(MultiGrad, TruthTable) {
  const Tensor a(Shape{1, 4}, std::vector<double>{1.0, 2.0, -1.0, 0.0});
  const Tensor b(Shape{1, 4}, std::vector<double>{3.0, -2.0, -4.0, 0.0});
  const Tensor c(Shape{1, 4}, std::vector<double>{0.5, 1.0, -1.0, 1.0});
  const Tensor grads[] = {a, b, c};
  EXPECT_EQ(unanimous_sign(grads).storage(), (std::vector<double>{1.0, 0.0, -1.0, 0.0}));
}

TEST(MultiGrad, OnePointIsFgsmDirectionAtThatPoint) {
  const Model m = build_model(arch::mlp(6, {8}, 3), 8);
  const Batch b = random_batch(m, 6, 9);
  AttackSpec s = AttackSpec::multi_grad(0.1, 0.1, 1);
  s.seed = 3;
  const PerturbationBatch pb = multi_grad_attack(m, b, s);
  const Tensor eta = sample_noise(NoiseDist::uniform, 0.1, b.inputs.shape(), 3, stream::point, 0);
  const Tensor g = input_gradient(m, plus(b.inputs, eta), b.labels);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(pb.delta[i], 0.1 * sign(g[i]));
  EXPECT_EQ(pb.passes, (PassCounter{1, 1}));
}

TEST(MultiGrad, IdenticalGradientsGiveFullStep) {
  const Model m = rising_model(5);
  const Batch b{Tensor(Shape{2, 5}, 0.5), {0, 0}};
  AttackSpec s = AttackSpec::multi_grad(0.2, 0.2, 3);
  const PerturbationBatch pb = multi_grad_attack(m, b, s);
  for (double v : pb.delta.data()) EXPECT_EQ(v, 0.2);
  EXPECT_EQ(pb.passes, (PassCounter{3, 3}));
}

TEST(RandAlpha, ForcedScales) {
  const Model m = build_model(arch::mlp(6, {8}, 3), 8);
  const Batch b = random_batch(m, 6, 9);
  AttackSpec s = AttackSpec::rand_alpha(0.1);
  s.seed = 2;
  const PerturbationBatch one = rand_alpha_attack(m, b, s, Tensor(b.inputs.shape(), 1.0));
  EXPECT_TRUE(same_bits(one.delta, rs_fgsm(m, b, 0.1, 0.125, 2).delta));
  const PerturbationBatch zero = rand_alpha_attack(m, b, s, Tensor(b.inputs.shape(), 0.0));
  EXPECT_EQ(linf_norm(zero.delta.data()), 0.0);
}

TEST(RandAlpha, ScalarPerSample) {
  AttackSpec s = AttackSpec::rand_alpha(0.1);
  const Tensor t = rand_alpha_scales(s, Shape{4, 6});
  for (std::size_t i = 0; i < 4; ++i)
    for (double v : t.row(i)) EXPECT_EQ(v, t.row(i)[0]);
  s.per_coordinate_t = true;
  const Tensor u = rand_alpha_scales(s, Shape{4, 6});
  EXPECT_NE(u[0], u[1]);
}

TEST(EpsBall, AllBallMethodsStayInsideOverTenThousandDraws) {
  const Model m = build_model(arch::mlp(5, {8}, 3), 6);
  const double eps = 0.15;
  for (AttackSpec spec : eps_ball_specs(eps)) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      spec.seed = seed;
      worst = std::max(worst, max_row_linf(attack(m, random_batch(m, 100, seed), spec).delta));
    }
    EXPECT_LE(worst, eps + 1e-12) << name_of(spec.method);
    EXPECT_GT(worst, 0.0) << name_of(spec.method);
  }
}

TEST(Determinism, SameInputsSameBits) {
  const Model m = build_model(arch::mlp(5, {8}, 3), 6);
  const Batch b = random_batch(m, 10, 1);
  std::vector<AttackSpec> specs = eps_ball_specs(0.1);
  specs.push_back(AttackSpec::n_fgsm(0.1));
  specs.push_back(AttackSpec::fgsm(0.1));
  for (AttackSpec s : specs) {
    s.seed = 42;
    const PerturbationBatch a = attack(m, b, s), c = attack(m, b, s);
    EXPECT_TRUE(same_bits(a.delta, c.delta)) << name_of(s.method);
    EXPECT_TRUE(same_bits(a.noise_part, c.noise_part)) << name_of(s.method);
  }
}

TEST(PassAccounting, SingleStepMethodsUseOneGradient) {
  const Model m = build_model(arch::mlp(5, {8}, 3), 6);
  const Batch b = random_batch(m, 10, 1);
  for (const AttackSpec& s : {AttackSpec::fgsm(0.1), AttackSpec::rs_fgsm(0.1), AttackSpec::n_fgsm(0.1),
                              AttackSpec::zero_grad(0.1, 0.1, 0.5), AttackSpec::rand_alpha(0.1),
                              AttackSpec::r_plus_fgsm(0.1, 0.05)}) {
    EXPECT_EQ(attack(m, b, s).passes, (PassCounter{1, 1})) << name_of(s.method);
  }
  EXPECT_EQ(attack(m, b, AttackSpec::multi_grad(0.1, 0.1, 3)).passes, (PassCounter{3, 3}));
  EXPECT_EQ(attack(m, b, AttackSpec::noise_only(0.1, 0.2)).passes, (PassCounter{0, 0}));
}

TEST(SingleStep, RejectsPgd) {
  const Model m = build_model(arch::mlp(5, {8}, 3), 6);
  EXPECT_THROW(single_step_attack(m, random_batch(m, 2, 1), AttackSpec::pgd(0.1)), ContractError);
}

TEST(Evaluation, CleanAndRobustAccuracy) {
  const Model m = random_linear_model(4, 2, 3);
  const Batch b = random_batch(m, 50, 4);
  const auto pred = argmax_rows(logits(m, b.inputs));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < 50; ++i) correct += pred[i] == b.labels[i];
  const AccuracyReport clean = clean_accuracy(m, b.inputs, b.labels, 16);
  EXPECT_EQ(clean.correct, correct);
  EXPECT_EQ(clean.passes.forward, 4u);
  const AccuracyReport rob = robust_accuracy(m, b.inputs, b.labels, AttackSpec::fgsm(0.5), 16);
  EXPECT_LE(rob.correct, clean.correct);
  const AccuracyReport none = robust_accuracy(m, b.inputs, b.labels, AttackSpec::fgsm(0.0), 16);
  EXPECT_EQ(none.correct, clean.correct);
}
