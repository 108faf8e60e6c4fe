#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "spm/gradcheck.hpp"
#include "spm/ssm.hpp"
#include "test_util.hpp"

using namespace spm;
using spm::testing::random_tensor;
using spm::testing::readout;

namespace {

ScanInputs random_lti(std::size_t l, std::size_t d, std::size_t n, std::mt19937_64& rng) {
  const Tensor delta = random_tensor({d}, rng, 0.01, 0.5);
  Tensor a = random_tensor({d, n}, rng, 0.1, 2.0);
  for (double& v : a.storage()) v = -v;
  return time_invariant_inputs(l, delta, a, random_tensor({n}, rng), random_tensor({n}, rng), random_tensor({d}, rng));
}

}  // namespace

TEST(Zoh, ScalarClosedForm) {
  const auto z = discretize_zoh(-1.0, 1.0, std::log(2.0));
  EXPECT_NEAR(z.a_bar, 0.5, 1e-15);
  EXPECT_NEAR(z.b_bar, 0.5, 1e-15);
}

TEST(Zoh, SmallStepAndZeroA) {
  const auto small = discretize_zoh(-2.0, 3.0, 1e-10);
  EXPECT_NEAR(small.a_bar, 1.0, 1e-9);
  EXPECT_NEAR(small.b_bar, 3e-10, 1e-18);
  const auto zero = discretize_zoh(0.0, 3.0, 0.25);
  EXPECT_EQ(zero.a_bar, 1.0);
  EXPECT_EQ(zero.b_bar, 0.75);
  EXPECT_EQ(discretize_zoh(-1.0, 2.0, 0.3, false).b_bar, 0.6);
  EXPECT_THROW(discretize_zoh(-1.0, 1.0, 0.0), DomainError);
  EXPECT_THROW(discretize_zoh(-1.0, 1.0, -0.1), DomainError);
}

TEST(Recurrence, ThreeStepHandUnroll) {
  // A_bar = 0.5 and B_bar = 0.5 (A = -1, B = 1, delta = ln 2); C varies per step.
  ScanInputs in;
  in.delta = Tensor({3, 1}, std::log(2.0));
  in.A = Tensor({1, 1}, -1.0);
  in.B = Tensor({3, 1}, 1.0);
  in.C = Tensor({3, 1}, std::vector<double>{1.0, 2.0, 0.5});
  in.D_skip = Tensor({1}, 0.1);
  const Tensor u({3, 1}, std::vector<double>{1.0, 2.0, 3.0});
  // h = 0.5, 1.25, 2.125 ; y = C h + 0.1 u
  const Tensor y = ssm_reference(in, u);
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 2.7, 1e-15);
  EXPECT_NEAR(y[2], 1.3625, 1e-15);
}

TEST(Recurrence, MemorylessAndZeroInput) {
  std::mt19937_64 rng(1);
  const std::size_t l = 6, d = 2, n = 3;
  DiscreteOperators ops{Tensor({l, d, n}, 0.0), random_tensor({l, d, n}, rng)};
  const Tensor c = random_tensor({l, n}, rng), dskip = random_tensor({d}, rng), u = random_tensor({l, d}, rng);
  const Tensor y = ssm_recurrence(ops, c, dskip, u);
  for (std::size_t t = 0; t < l; ++t)
    for (std::size_t ch = 0; ch < d; ++ch) {
      double expect = dskip[ch] * u.at(t, ch);
      for (std::size_t s = 0; s < n; ++s) expect += c.at(t, s) * ops.B_bar_u.at(t, ch, s);
      EXPECT_NEAR(y.at(t, ch), expect, 1e-15);
    }
  const ScanInputs in = random_lti(10, 2, 3, rng);
  const Tensor silent = ssm_reference(in, Tensor({10, 2}));
  for (double v : silent.values()) EXPECT_EQ(v, 0.0);
}

TEST(Recurrence, ReportsNonFiniteStep) {
  DiscreteOperators ops{Tensor({3, 1, 1}, 1e308), Tensor({3, 1, 1}, 1e308)};
  try {
    ssm_recurrence(ops, Tensor({3, 1}, 1.0), Tensor({1}), Tensor({3, 1}, 1.0));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(ConvForm, SingleTapAndMemoryless) {
  std::mt19937_64 rng(2);
  const ScanInputs in = random_lti(1, 2, 3, rng);
  const Tensor u = random_tensor({1, 2}, rng);
  const Tensor y = ssm_conv_form(in, u);
  for (std::size_t c = 0; c < 2; ++c) {
    double k0 = 0.0;
    for (std::size_t s = 0; s < 3; ++s) k0 += in.C[s] * discretize_zoh(in.A.at(c, s), in.B[s], in.delta[c]).b_bar;
    EXPECT_NEAR(y[c], (k0 + in.D_skip[c]) * u[c], 1e-15);
  }
}

TEST(ConvForm, RejectsTimeVaryingParameters) {
  std::mt19937_64 rng(3);
  ScanInputs in = random_lti(5, 2, 2, rng);
  in.B.at(3, 1) += 0.1;
  EXPECT_THROW(ssm_conv_form(in, random_tensor({5, 2}, rng)), ContractError);
}

TEST(Equivalence, RecurrenceConvParallel) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const ScanInputs in = random_lti(64 + 13 * trial, 1 + trial % 8, 1 + trial % 16, rng);
    const Tensor u = random_tensor({in.length(), in.channels()}, rng);
    const Tensor rec = ssm_reference(in, u);
    EXPECT_LT(max_abs_diff(rec, ssm_conv_form(in, u)), 1e-10);
    EXPECT_LT(max_abs_diff(rec, ssm_parallel(in, u)), 1e-10);
  }
}

TEST(ParallelScan, TrivialCases) {
  const Tensor one = parallel_scan(Tensor({1, 2}, 0.3), Tensor({1, 2}, std::vector<double>{4.0, -1.0}));
  EXPECT_EQ(one, Tensor({1, 2}, std::vector<double>{4.0, -1.0}));

  std::mt19937_64 rng(5);
  const Tensor b = random_tensor({37, 3}, rng);
  const Tensor h = parallel_scan(Tensor({37, 3}, 1.0), b);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t t = 0; t < 37; ++t) {
      s += b.at(t, c);
      EXPECT_NEAR(h.at(t, c), s, 1e-13);
    }
  }
}

TEST(ParallelScan, MatchesSequentialLoop) {
  std::mt19937_64 rng(6);
  const std::size_t l = 1000, k = 4;
  const Tensor a = random_tensor({l, k}, rng, 0.5, 1.0), b = random_tensor({l, k}, rng);
  const Tensor h = parallel_scan(a, b);
  for (std::size_t c = 0; c < k; ++c) {
    double s = 0.0;
    for (std::size_t t = 0; t < l; ++t) {
      s = a.at(t, c) * s + b.at(t, c);
      EXPECT_LE(std::abs(h.at(t, c) - s), 1e-12 * std::max(1.0, std::abs(s)));
    }
  }
}

TEST(ParallelScan, StateDecaysUnderZeroInput) {
  std::mt19937_64 rng(7);
  Tensor a({50, 4}), b({50, 4});
  for (std::size_t c = 0; c < 4; ++c) {
    const double alog = std::log(static_cast<double>(c + 1));
    for (std::size_t t = 0; t < 50; ++t) {
      a.at(t, c) = discretize_zoh(-std::exp(alog), 1.0, 0.05 + 0.01 * t).a_bar;
      ASSERT_LT(std::abs(a.at(t, c)), 1.0);
    }
    b.at(0, c) = 1.0 + c;
  }
  const Tensor h = parallel_scan(a, b);
  for (std::size_t t = 1; t < 50; ++t)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_LE(std::abs(h.at(t, c)), std::abs(h.at(t - 1, c)));
}

class SelectiveScanTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{8};
  ParamStore store;
  SSMParams params;
  void SetUp() override {
    std::mt19937_64 init(21);
    ParamFactory f(store, init, "ssm");
    params = SSMParams::make(f, 3, 4);
  }
};

TEST_F(SelectiveScanTest, ZeroInputGivesZeroOutput) {
  const Tensor y = selective_scan(params, constant(Tensor({9, 3}))).value();
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST_F(SelectiveScanTest, FrozenProjectionsReduceToConvForm) {
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t l = 40;
    const Tensor delta = random_tensor({3}, rng, 0.05, 0.6);
    Tensor bias({3});
    for (std::size_t c = 0; c < 3; ++c) bias[c] = delta[c] + std::log(-std::expm1(-delta[c]));
    params.dt_weight.mutable_value().fill(0.0);
    params.dt_bias.mutable_value() = bias;
    params.B_weight.mutable_value().fill(0.0);
    params.C_weight.mutable_value().fill(0.0);
    params.B_bias.mutable_value() = random_tensor({4}, rng);
    params.C_bias.mutable_value() = random_tensor({4}, rng);
    params.A_log.mutable_value() = random_tensor({3, 4}, rng, -1.0, 1.0);
    params.D_skip.mutable_value() = random_tensor({3}, rng);
    const Tensor u = random_tensor({l, 3}, rng);

    Tensor eff_delta({3}), a({3, 4});
    for (std::size_t c = 0; c < 3; ++c) eff_delta[c] = detail::stable_softplus(bias[c]);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(params.A_log.value()[i]);
    const ScanInputs in = time_invariant_inputs(l, eff_delta, a, params.B_bias.value(), params.C_bias.value(), params.D_skip.value());
    EXPECT_LT(max_abs_diff(selective_scan(params, constant(u)).value(), ssm_conv_form(in, u)), 1e-10);
  }
}

TEST_F(SelectiveScanTest, Causality) {
  const Tensor u = random_tensor({30, 3}, rng);
  const Tensor y = selective_scan(params, constant(u)).value();
  for (std::size_t t : {0u, 11u, 28u}) {
    Tensor probe = u;
    for (std::size_t r = t + 1; r < 30; ++r)
      for (std::size_t c = 0; c < 3; ++c) probe.at(r, c) += 0.7;
    const Tensor y2 = selective_scan(params, constant(probe)).value();
    for (std::size_t r = 0; r <= t; ++r)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y.at(r, c), y2.at(r, c));
  }
}

TEST_F(SelectiveScanTest, SegmentsAreIndependentScans) {
  const Tensor u = random_tensor({24, 3}, rng);
  const Tensor joint = selective_scan(params, constant(u), {true, true, 8}).value();
  for (std::size_t s = 0; s < 3; ++s) {
    Tensor part({8, 3});
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 3; ++c) part.at(r, c) = u.at(8 * s + r, c);
    const Tensor alone = selective_scan(params, constant(part)).value();
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(joint.at(8 * s + r, c), alone.at(r, c));
  }
  EXPECT_THROW(selective_scan(params, constant(u), {true, true, 7}), DimensionError);
}

TEST_F(SelectiveScanTest, MatchesSequentialReference) {
  // Selective (time-varying) inputs evaluated by the plain recurrence.
  const Tensor u = random_tensor({17, 3}, rng);
  const Tensor y = selective_scan(params, constant(u)).value();
  NoGradGuard guard;
  ScanInputs in;
  in.delta = softplus(linear(constant(u), params.dt_weight, params.dt_bias)).value();
  in.B = linear(constant(u), params.B_weight, params.B_bias).value();
  in.C = linear(constant(u), params.C_weight, params.C_bias).value();
  in.A = scale(exp(params.A_log), -1.0).value();
  in.D_skip = params.D_skip.value();
  EXPECT_LT(max_abs_diff(y, ssm_reference(in, u)), 1e-12);
}

TEST_F(SelectiveScanTest, GradientCheckAllParameters) {
  Var u = store.add("u", random_tensor({12, 3}, rng));
  for (bool exact : {true, false})
    for (std::size_t seg : {0u, 4u}) {
      const auto r = check_gradients([&] { return readout(selective_scan(params, u, {exact, true, seg})); }, store);
      for (const auto& t : r.tensors) EXPECT_LT(t.max_rel_error, 1e-6) << t.name << " exact=" << exact << " seg=" << seg;
    }
}

TEST(SelectiveScanCore, GradientCheckRawInputs) {
  std::mt19937_64 rng(9);
  ParamStore store;
  const std::size_t l = 10, d = 2, n = 3;
  Var u = store.add("u", random_tensor({l, d}, rng));
  Var delta = store.add("delta", random_tensor({l, d}, rng, 0.05, 1.0));
  Tensor a = random_tensor({d, n}, rng, 0.2, 2.0);
  for (double& v : a.storage()) v = -v;
  Var A = store.add("A", a);
  Var B = store.add("B", random_tensor({l, n}, rng));
  Var C = store.add("C", random_tensor({l, n}, rng));
  Var D = store.add("D", random_tensor({d}, rng));
  const auto r = check_gradients([&] { return readout(selective_scan_core(u, delta, A, B, C, D, {true, 5})); }, store);
  for (const auto& t : r.tensors) EXPECT_LT(t.max_rel_error, 1e-6) << t.name;
}

TEST(SelectiveScanCore, NearZeroAGradient) {
  // Exercises the series branches of the ZOH derivatives.
  ParamStore store;
  std::mt19937_64 rng(10);
  Var u = store.add("u", random_tensor({6, 1}, rng));
  Var delta = store.add("delta", Tensor({6, 1}, 0.3));
  Var A = store.add("A", Tensor({1, 2}, std::vector<double>{-1e-9, -2e-4}));
  Var B = store.add("B", random_tensor({6, 2}, rng));
  Var C = store.add("C", random_tensor({6, 2}, rng));
  const auto r = check_gradients([&] { return readout(selective_scan_core(u, delta, A, B, C, Var{})); }, store);
  for (const auto& t : r.tensors) EXPECT_LT(t.max_rel_error, 1e-6) << t.name;
}
