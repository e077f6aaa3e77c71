#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "attrloc/adam.hpp"
#include "attrloc/alm.hpp"
#include "attrloc/gradcheck.hpp"
#include "attrloc/loss.hpp"

using namespace attrloc;

namespace {

Tensor64 random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor64 t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

double sigm(double v) { return 1 / (1 + std::exp(-v)); }

}  // namespace

TEST(ChannelGate, ZeroGateKeepsInput) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({2, 3, 4, 4}, rng);
  auto y = apply_channel_gate(x, Tensor64({2, 3}, 0.0));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(ChannelGate, UnitGateDoublesInput) {
  std::mt19937_64 rng(2);
  auto x = random_tensor({2, 3, 4, 4}, rng);
  auto y = apply_channel_gate(x, Tensor64({2, 3}, 1.0));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], 2 * x[i]);
}

TEST(ChannelGate, MatchesLoopOracle) {
  Rng rng(3);
  ChannelGate<double> gate(32, 16, rng);
  std::mt19937_64 r(3);
  auto x = random_tensor({2, 32, 3, 2}, r);
  auto y = channel_reweight(x, gate);
  const std::size_t c = 32, hid = 2, hw = 6;
  for (std::size_t n = 0; n < 2; ++n) {
    std::vector<double> pooled(c, 0.0), hidden(hid), g(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t k = 0; k < hw; ++k) pooled[ch] += x[(n * c + ch) * hw + k];
      pooled[ch] /= hw;
    }
    for (std::size_t j = 0; j < hid; ++j) {
      double a = gate.squeeze.bias[j];
      for (std::size_t ch = 0; ch < c; ++ch) a += pooled[ch] * gate.squeeze.weight[ch * hid + j];
      hidden[j] = std::max(a, 0.0);
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      double a = gate.excite.bias[ch];
      for (std::size_t j = 0; j < hid; ++j) a += hidden[j] * gate.excite.weight[j * c + ch];
      g[ch] = sigm(a);
    }
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < hw; ++k) {
        const std::size_t i = (n * c + ch) * hw + k;
        EXPECT_NEAR(y[i], x[i] * g[ch] + x[i], 1e-5);
      }
  }
}

TEST(ChannelGate, NonNegativeInputNeverShrinks) {
  Rng rng(4);
  ChannelGate<double> gate(16, 4, rng);
  std::mt19937_64 r(4);
  auto x = random_tensor({3, 16, 2, 2}, r, 0, 2);
  auto y = channel_reweight(x, gate);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_GE(y[i], x[i]);
}

TEST(ChannelGate, ChannelMismatchRejected) {
  Rng rng(5);
  ChannelGate<float> gate(16, 16, rng);
  EXPECT_THROW(channel_reweight(Tensor({1, 8, 2, 2}), gate), DimensionError);
}

TEST(ChannelGate, ReductionMustDivideChannels) {
  Rng rng(6);
  EXPECT_THROW(ChannelGate<float>(24, 16, rng), ContractError);
  EXPECT_THROW(alm_param_count(24, 16), ContractError);
}

TEST(Transform, ZeroHeadGivesHalfBox) {
  Linear<double> head;
  head.weight = Tensor64({8, 4});
  head.bias = Tensor64({4});
  std::mt19937_64 r(7);
  auto est = estimate_transform(random_tensor({2, 8, 3, 3}, r), head);
  for (std::size_t n = 0; n < 2; ++n) {
    EXPECT_DOUBLE_EQ(est.theta[4 * n], 0.5);
    EXPECT_DOUBLE_EQ(est.theta[4 * n + 1], 0.5);
    EXPECT_DOUBLE_EQ(est.theta[4 * n + 2], 0.0);
    EXPECT_DOUBLE_EQ(est.theta[4 * n + 3], 0.0);
  }
}

TEST(Transform, BiasOnlyHead) {
  Linear<double> head;
  head.weight = Tensor64({8, 4});
  head.bias = Tensor64({4}, std::vector<double>{3, 3, 0, 0});
  std::mt19937_64 r(8);
  auto est = estimate_transform(random_tensor({1, 8, 3, 3}, r), head);
  EXPECT_NEAR(est.theta[0], 0.9526, 1e-4);
  EXPECT_NEAR(est.theta[1], 0.9526, 1e-4);
  EXPECT_DOUBLE_EQ(est.theta[2], 0.0);
  EXPECT_DOUBLE_EQ(est.theta[3], 0.0);
}

TEST(Transform, SpatialPermutationInvariant) {
  Rng rng(9);
  Linear<double> head(6, 4, rng);
  std::mt19937_64 r(9);
  auto x = random_tensor({1, 6, 3, 4}, r);
  Tensor64 shuffled = x.clone();
  std::vector<std::size_t> perm(12);
  for (std::size_t i = 0; i < 12; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), r);
  for (std::size_t c = 0; c < 6; ++c)
    for (std::size_t k = 0; k < 12; ++k) shuffled[c * 12 + k] = x[c * 12 + perm[k]];
  auto a = estimate_transform(x, head).theta, b = estimate_transform(shuffled, head).theta;
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(AlmUnit, InitialBoxIsCenteredAndLarge) {
  Rng rng(10);
  AlmUnit<double> u(0, 1, 16, 16, true, rng);
  std::mt19937_64 r(10);
  auto out = alm_forward(random_tensor({1, 16, 4, 2}, r), u);
  EXPECT_NEAR(out.transform.theta[0], 0.8808, 1e-4);
  EXPECT_NEAR(out.transform.theta[1], 0.8808, 1e-4);
  EXPECT_DOUBLE_EQ(out.transform.theta[2], 0.0);
  EXPECT_DOUBLE_EQ(out.transform.theta[3], 0.0);
}

TEST(AlmForward, ConstantMapReadsClassifierOnGatedValues) {
  Rng rng(11);
  AlmUnit<double> u(0, 1, 16, 16, true, rng);
  Tensor64 x({1, 16, 4, 4});
  for (std::size_t c = 0; c < 16; ++c)
    for (std::size_t k = 0; k < 16; ++k) x[c * 16 + k] = 0.1 * double(c) - 0.5;
  auto y = channel_reweight(x, u.gate);
  double expect = u.classifier.bias[0];
  for (std::size_t c = 0; c < 16; ++c) expect += y[c * 16] * u.classifier.weight[c];
  // boxes that stay inside the map, so no sample touches the zero padding
  for (auto [sx, tx] : {std::pair{0.9, 0.0}, {0.3, 0.0}, {0.3, -0.5}, {0.5, 0.4}}) {
    u.loc.bias[0] = std::log(sx / (1 - sx));
    u.loc.bias[2] = std::atanh(tx);
    auto out = alm_forward(x, u);
    EXPECT_NEAR(out.logit[0], expect, 1e-10) << sx << " " << tx;
  }
}

TEST(AlmForward, DuplicateRowsGiveIdenticalLogits) {
  Rng rng(12);
  AlmUnit<double> u(0, 1, 16, 16, true, rng);
  std::mt19937_64 r(12);
  auto one = random_tensor({1, 16, 4, 2}, r);
  Tensor64 two({2, 16, 4, 2});
  for (std::size_t i = 0; i < one.numel(); ++i) two[i] = two[one.numel() + i] = one[i];
  auto out = alm_forward(two, u);
  EXPECT_EQ(out.logit[0], out.logit[1]);
}

TEST(AlmForward, BatchPermutationEquivariant) {
  Rng rng(13);
  AlmUnit<double> u(0, 1, 16, 16, true, rng);
  std::mt19937_64 r(13);
  auto x = random_tensor({3, 16, 4, 2}, r);
  const std::size_t per = 16 * 8;
  Tensor64 rev({3, 16, 4, 2});
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t k = 0; k < per; ++k) rev[n * per + k] = x[(2 - n) * per + k];
  auto a = alm_forward(x, u).logit, b = alm_forward(rev, u).logit;
  for (std::size_t n = 0; n < 3; ++n) EXPECT_NEAR(a[n], b[2 - n], 1e-12);
}

TEST(AlmForward, RawTransformGradientMatchesFiniteDifferences) {
  Rng rng(14);
  AlmUnit<double> u(0, 1, 16, 16, true, rng);
  std::mt19937_64 r(14);
  auto x = random_tensor({2, 16, 4, 4}, r);
  // drive the raw parameters directly, bypassing the loc head
  auto fn = [&](std::vector<Tensor64>& in) {
    auto y = channel_reweight(x, u.gate);
    auto theta = constrain_params(in[0]);
    auto region = grid_sample(y, affine_grid(theta, 4, 4));
    return u.classifier(flatten(global_avg_pool(region)));
  };
  Tensor64 raw({2, 4}, std::vector<double>{0.3, -0.4, 0.21, -0.13, 1.1, 0.7, -0.37, 0.44});
  auto rep = grad_check<double>("alm_raw", fn, {raw});
  EXPECT_TRUE(rep.passed) << rep.worst;
}

TEST(AlmForward, GradientReachesEverySubpart) {
  Rng rng(15);
  AlmUnit<double> u(0, 1, 16, 16, true, rng);
  std::mt19937_64 r(15);
  auto x = random_tensor({2, 16, 4, 2}, r);
  Tape64 tape;
  TapeScope<double> scope(tape);
  tape.backward(sum(alm_forward(x, u).logit));
  NamedTensors<double> params;
  u.collect(params, "u");
  for (const auto& [name, p] : params) {
    ASSERT_TRUE(p.has_grad()) << name;
    double norm = 0;
    for (double g : p.grad()) norm += std::abs(g);
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(AlmForward, FrozenFeaturesClassifierFitsSeparableTask) {
  Rng rng(16);
  AlmUnit<double> u(0, 1, 16, 16, true, rng);
  std::mt19937_64 r(16);
  const std::size_t n = 32;
  auto x = random_tensor({n, 16, 4, 2}, r);
  // label by the sign of a fixed linear readout of the frozen features
  Tensor64 probe({16, 1});
  for (auto& v : probe.data()) v = std::uniform_real_distribution<double>(-1, 1)(r);
  Linear<double> teacher;
  teacher.weight = probe;
  teacher.bias = Tensor64({1});
  LabelMatrix labels(n, std::vector<int>(1));
  {
    auto y = channel_reweight(x, u.gate);
    auto region = grid_sample(y, affine_grid(estimate_transform(y, u.loc).theta, 4, 2));
    auto t = teacher(flatten(global_avg_pool(region)));
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += t[i] / n;
    for (std::size_t i = 0; i < n; ++i) labels[i][0] = t[i] > mean;
  }
  AttributePriors priors{{0.5}, {1.0}};
  for (auto p : {u.gate.squeeze.weight, u.gate.squeeze.bias, u.gate.excite.weight, u.gate.excite.bias, u.loc.weight,
                 u.loc.bias})
    p.set_requires_grad(false);
  std::vector<Tensor64> params{u.classifier.weight, u.classifier.bias};
  AdamState<double> adam(AdamConfig{0.05, 0.9, 0.999, 1e-8, 0.0});
  adam.init(params);
  for (int step = 0; step < 2000; ++step) {
    Tape64 tape;
    TapeScope<double> scope(tape);
    for (auto& p : params) p.zero_grad();
    tape.backward(weighted_bce(alm_forward(x, u).logit, labels, priors));
    adam_step(params, adam);
  }
  auto logits = alm_forward(x, u).logit;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) correct += (logits[i] > 0) == (labels[i][0] == 1);
  EXPECT_EQ(correct, n);
}

TEST(ParamCount, KnownWidths) {
  EXPECT_EQ(alm_param_count(512, 16).core, 34816u);
  EXPECT_EQ(alm_param_count(512, 16).gate_weights, 32768u);
  EXPECT_EQ(alm_param_count(512, 16).loc_weights, 2048u);
  EXPECT_EQ(alm_param_count(16, 16).core, 96u);
}

TEST(ParamCount, WalkingMatchesFormula) {
  Rng rng(17);
  for (std::size_t c : {16u, 32u, 48u, 64u}) {
    AlmUnit<float> u(0, 1, c, 16, true, rng);
    auto walked = walk_param_count(u), formula = alm_param_count(c, 16);
    EXPECT_EQ(walked.core, formula.core);
    EXPECT_EQ(walked.core, c * c / 8 + 4 * c);
    EXPECT_EQ(walked.biases, formula.biases);
    EXPECT_EQ(walked.classifier, formula.classifier);
    EXPECT_EQ(walked.total, formula.total);
  }
}
