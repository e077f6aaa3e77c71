#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "attrloc/loss.hpp"
#include "attrloc/metrics.hpp"
#include "attrloc/network.hpp"

using namespace attrloc;

namespace {

// set-based example metrics, written independently of the library
struct SetMetrics {
  double acc = 0, prec = 0, rec = 0;
};

SetMetrics brute_force(const ScoreMatrix& s, const LabelMatrix& y) {
  SetMetrics out;
  for (std::size_t i = 0; i < y.size(); ++i) {
    std::set<std::size_t> truth, pred, inter, uni;
    for (std::size_t j = 0; j < y[i].size(); ++j) {
      if (y[i][j] == 1) truth.insert(j);
      if (s[i][j] >= 0.5) pred.insert(j);
    }
    std::set_intersection(truth.begin(), truth.end(), pred.begin(), pred.end(), std::inserter(inter, inter.begin()));
    std::set_union(truth.begin(), truth.end(), pred.begin(), pred.end(), std::inserter(uni, uni.begin()));
    const bool both_empty = truth.empty() && pred.empty();
    out.acc += uni.empty() ? 1.0 : double(inter.size()) / double(uni.size());
    out.prec += pred.empty() ? (both_empty ? 1.0 : 0.0) : double(inter.size()) / double(pred.size());
    out.rec += truth.empty() ? (both_empty ? 1.0 : 0.0) : double(inter.size()) / double(truth.size());
  }
  const double n = double(y.size());
  return {out.acc / n, out.prec / n, out.rec / n};
}

AttributePriors unit_priors(std::size_t m) { return {std::vector<double>(m, 0.0), std::vector<double>(m, 1.0)}; }

}  // namespace

TEST(Priors, AllPositiveColumn) {
  auto p = compute_priors({{1}, {1}, {1}});
  EXPECT_DOUBLE_EQ(p.positive_ratio[0], 1.0);
  EXPECT_NEAR(p.weights[0], 0.3679, 1e-4);
}

TEST(Priors, AllNegativeColumn) {
  auto p = compute_priors({{0}, {0}});
  EXPECT_DOUBLE_EQ(p.weights[0], 1.0);
}

TEST(Priors, ThreeOfTen) {
  LabelMatrix y(10, {0});
  y[1][0] = y[4][0] = y[8][0] = 1;
  auto p = compute_priors(y);
  EXPECT_DOUBLE_EQ(p.positive_ratio[0], 0.3);
  EXPECT_NEAR(p.weights[0], 0.7408, 1e-4);
}

TEST(Priors, EmptyRejected) {
  EXPECT_THROW(compute_priors({}), ContractError);
}

TEST(WeightedBce, ZeroLogitPositive) {
  auto l = weighted_bce(Tensor64({1, 1}, 0.0), {{1}}, unit_priors(1));
  EXPECT_NEAR(l.item(), 0.693147, 1e-6);
}

TEST(WeightedBce, ConfidentCorrectApproachesZero) {
  EXPECT_NEAR(weighted_bce(Tensor64({1, 1}, 50.0), {{1}}, unit_priors(1)).item(), 0.0, 1e-20);
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_EQ(weighted_bce(Tensor64({1, 1}, inf), {{1}}, unit_priors(1)).item(), 0.0);
  EXPECT_EQ(weighted_bce(Tensor64({1, 1}, -inf), {{0}}, unit_priors(1)).item(), 0.0);
}

TEST(WeightedBce, MatchesDirectFormula) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-4, 4);
  std::bernoulli_distribution b(0.4);
  const std::size_t n = 16, m = 5;
  Tensor64 z({n, m});
  LabelMatrix y(n, std::vector<int>(m));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      z[i * m + j] = u(rng);
      y[i][j] = b(rng);
    }
  auto priors = compute_priors(y);
  double expect = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < m; ++j) {
      const double s = 1 / (1 + std::exp(-z[i * m + j]));
      row += priors.weights[j] * (y[i][j] * std::log(s) + (1 - y[i][j]) * std::log(1 - s));
    }
    expect += -row / m;
  }
  expect /= n;
  EXPECT_NEAR(weighted_bce(z, y, priors).item(), expect, 1e-6);
}

TEST(WeightedBce, UnitWeightsGivePlainBce) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-3, 3);
  Tensor64 z({4, 3});
  LabelMatrix y(4, std::vector<int>(3));
  double plain = 0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      z[i * 3 + j] = u(rng);
      y[i][j] = (i + j) % 2;
      const double s = 1 / (1 + std::exp(-z[i * 3 + j]));
      plain -= y[i][j] ? std::log(s) : std::log(1 - s);
    }
  EXPECT_NEAR(weighted_bce(z, y, unit_priors(3)).item(), plain / 12, 1e-7);
}

TEST(WeightedBce, PositiveOnlyModeLeavesNegativesUnweighted) {
  AttributePriors p{{0.5}, {0.25}};
  Tensor64 z({2, 1}, std::vector<double>{0.3, -0.8});
  LabelMatrix y{{1}, {0}};
  const double sp = std::log1p(std::exp(-0.3)), sn = std::log1p(std::exp(-0.8));
  EXPECT_NEAR(weighted_bce(z, y, p, BceWeighting::both_terms).item(), 0.25 * (sp + sn) / 2, 1e-12);
  EXPECT_NEAR(weighted_bce(z, y, p, BceWeighting::positive_only).item(), (0.25 * sp + sn) / 2, 1e-12);
}

TEST(WeightedBce, NonNegative) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-10, 10);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor64 z({3, 2});
    for (auto& v : z.data()) v = u(rng);
    EXPECT_GE(weighted_bce(z, {{0, 1}, {1, 1}, {0, 0}}, unit_priors(2)).item(), 0.0);
  }
}

TEST(WeightedBce, NonBinaryLabelsRejected) {
  EXPECT_THROW(weighted_bce(Tensor64({1, 1}), {{2}}, unit_priors(1)), ContractError);
  EXPECT_THROW(weighted_bce(Tensor64({2, 1}), {{1}}, unit_priors(1)), DimensionError);
}

TEST(TotalLoss, SumsBranches) {
  std::vector<Tensor64> ls(4, Tensor64::scalar(0.37));
  EXPECT_NEAR(total_loss(ls).item(), 4 * 0.37, 1e-15);
  EXPECT_DOUBLE_EQ(total_loss(std::vector<Tensor64>{Tensor64::scalar(0.5)}).item(), 0.5);
  EXPECT_THROW(total_loss(std::vector<Tensor64>{}), ContractError);
}

TEST(TotalLoss, GradientReachesFinestLevelAlm) {
  ModelConfig cfg;
  cfg.attributes = {"a", "b"};
  cfg.stem_width = 4;
  cfg.stage_widths = {8, 16, 16};
  cfg.convs_per_stage = 1;
  Model<float> model(cfg, 3);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0, 1);
  Tensor images({4, 3, 64, 32});
  for (auto& v : images.data()) v = u(rng);
  LabelMatrix y{{1, 0}, {0, 1}, {1, 1}, {0, 0}};
  auto priors = compute_priors(y);
  Tape tape;
  TapeScope<float> scope(tape);
  auto fwd = model.forward(images, Mode::train);
  std::vector<Tensor> losses;
  for (const auto& l : fwd.branch_logits()) losses.push_back(weighted_bce(l, y, priors));
  tape.backward(total_loss(losses));
  for (const auto& unit : model.alms[0])
    for (const auto& p : {unit.loc.weight, unit.classifier.weight, unit.gate.squeeze.weight}) {
      ASSERT_TRUE(p.has_grad());
      double norm = 0;
      for (float g : p.grad()) norm += std::abs(g);
      EXPECT_GT(norm, 0.0);
    }
}

TEST(MeanAccuracy, PerfectPredictions) {
  LabelMatrix y{{1, 0}, {0, 1}, {1, 1}};
  ScoreMatrix s{{0.9, 0.1}, {0.2, 0.8}, {0.7, 0.6}};
  EXPECT_DOUBLE_EQ(label_based_mA(s, y).first, 1.0);
}

TEST(MeanAccuracy, HandEnumeratedExample) {
  LabelMatrix y{{1, 0}, {0, 1}};
  ScoreMatrix s{{1, 0}, {1, 1}};
  auto [ma, rates] = label_based_mA(s, y);
  EXPECT_DOUBLE_EQ(ma, 0.75);
  EXPECT_EQ(rates[0].tp, 1u);
  EXPECT_EQ(rates[0].tn, 0u);
  EXPECT_EQ(rates[1].tp, 1u);
  EXPECT_EQ(rates[1].tn, 1u);
}

TEST(MeanAccuracy, ComplementScoresZero) {
  LabelMatrix y{{1, 0, 1}, {0, 1, 0}};
  ScoreMatrix s{{0, 1, 0}, {1, 0, 1}};
  EXPECT_DOUBLE_EQ(label_based_mA(s, y).first, 0.0);
}

TEST(MeanAccuracy, UndefinedAttributeNamed) {
  LabelMatrix y{{1, 1}, {0, 1}};
  ScoreMatrix s{{1, 1}, {0, 1}};
  try {
    label_based_mA(s, y, 0.5, {"hat", "boots"});
    FAIL() << "expected an error";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("boots"), std::string::npos);
  }
}

TEST(MeanAccuracy, DependsOnlyOnThresholdedDecision) {
  LabelMatrix y{{1, 0}, {0, 1}, {1, 0}};
  ScoreMatrix a{{0.51, 0.2}, {0.4, 0.99}, {0.3, 0.7}};
  ScoreMatrix b{{0.99, 0.01}, {0.01, 0.5}, {0.49, 0.5001}};
  EXPECT_DOUBLE_EQ(label_based_mA(a, y).first, label_based_mA(b, y).first);
}

TEST(InstanceMetrics, SetExample) {
  // Y = {1,3}, prediction = {1} over attributes 0..3
  auto r = instance_metrics({{0, 1, 0, 0}}, {{0, 1, 0, 1}});
  EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
  EXPECT_DOUBLE_EQ(r.precision, 1.0);
  EXPECT_DOUBLE_EQ(r.recall, 0.5);
  EXPECT_NEAR(r.f1, 0.6667, 1e-4);
}

TEST(InstanceMetrics, ExactPredictionsScoreOne) {
  LabelMatrix y{{1, 0, 1}, {0, 0, 0}, {0, 1, 1}};
  ScoreMatrix s{{1, 0, 1}, {0, 0, 0}, {0, 1, 1}};
  auto r = instance_metrics(s, y);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  EXPECT_DOUBLE_EQ(r.precision, 1.0);
  EXPECT_DOUBLE_EQ(r.recall, 1.0);
  EXPECT_DOUBLE_EQ(r.f1, 1.0);
}

TEST(InstanceMetrics, EmptySetConventions) {
  // both empty counts as perfect; predicting nothing for a non-empty truth gives 0 precision
  auto a = instance_metrics({{0, 0}}, {{0, 0}});
  EXPECT_DOUBLE_EQ(a.precision, 1.0);
  EXPECT_DOUBLE_EQ(a.recall, 1.0);
  auto b = instance_metrics({{0, 0}}, {{1, 0}});
  EXPECT_DOUBLE_EQ(b.precision, 0.0);
  EXPECT_DOUBLE_EQ(b.recall, 0.0);
  EXPECT_DOUBLE_EQ(b.accuracy, 0.0);
}

TEST(InstanceMetrics, RandomMatricesMatchSetOracle) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> nd(1, 64), md(1, 16);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = nd(rng), m = md(rng);
    LabelMatrix y(n, std::vector<int>(m));
    ScoreMatrix s(n, std::vector<double>(m));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        y[i][j] = u(rng) < 0.4;
        s[i][j] = u(rng);
      }
    auto r = instance_metrics(s, y);
    auto o = brute_force(s, y);
    ASSERT_NEAR(r.accuracy, o.acc, 1e-12);
    ASSERT_NEAR(r.precision, o.prec, 1e-12);
    ASSERT_NEAR(r.recall, o.rec, 1e-12);
    const double f1 = o.prec + o.rec > 0 ? 2 * o.prec * o.rec / (o.prec + o.rec) : 0.0;
    ASSERT_NEAR(r.f1, f1, 1e-12);
    EXPECT_GE(r.f1, std::min(r.precision, r.recall) - 1e-15);
    EXPECT_LE(r.f1, std::max(r.precision, r.recall) + 1e-15);
  }
}

TEST(MetricsReport, CountsAreConsistent) {
  LabelMatrix y{{1, 0}, {0, 1}, {1, 0}, {0, 0}};
  ScoreMatrix s{{0.8, 0.3}, {0.6, 0.2}, {0.1, 0.4}, {0.2, 0.9}};
  auto r = evaluate_metrics(s, y, 0.5, {"x", "y"});
  EXPECT_EQ(r.examples, 4u);
  EXPECT_EQ(r.attributes, 2u);
  for (const auto& a : r.per_attribute) {
    EXPECT_LE(a.tp, a.p);
    EXPECT_LE(a.tn, a.n);
    EXPECT_EQ(a.p + a.n, 4u);
  }
  auto j = to_json(r);
  for (const char* key : {"mA", "accuracy", "precision", "recall", "f1", "per_attribute"}) EXPECT_TRUE(j.contains(key));
  EXPECT_EQ(j["per_attribute"][1]["name"], "y");
}

TEST(BoxIou, KnownOverlaps) {
  ImageBox a{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(box_iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(box_iou(a, {2, 2, 3, 3}), 0.0);
  EXPECT_NEAR(box_iou(a, {0.5, 0, 1.5, 1}), 1.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(box_iou({1, 1, 1, 1}, {1, 1, 1, 1}), 0.0);
}
