#include "sesom/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "sesom/rng.hpp"

namespace sesom {
namespace {

TEST(Metrics, PerfectPredictionsScoreOneEverywhere) {
  const std::vector<int> gold = {0, 1, 1, 0, 1};
  EXPECT_DOUBLE_EQ(compute_metrics(gold, gold, "accuracy"), 1.0);
  EXPECT_DOUBLE_EQ(compute_metrics(gold, gold, "f1_binary"), 1.0);
  EXPECT_DOUBLE_EQ(compute_metrics(gold, gold, "f1_macro"), 1.0);
}

TEST(Metrics, ConstantPredictorOnBalancedLabels) {
  std::vector<int> gold, pred;
  for (int i = 0; i < 10; ++i) {
    gold.push_back(i % 2);
    pred.push_back(1);
  }
  EXPECT_DOUBLE_EQ(accuracy(pred, gold), 0.5);
  EXPECT_DOUBLE_EQ(f1_binary(pred, gold), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(f1_macro(pred, gold), (0.0 + 2.0 / 3.0) / 2.0);
}

TEST(Metrics, TwentySampleConfusionMatrixOracle) {
  const std::vector<int> gold = {1, 1, 1, 1, 1, 1, 0, 0, 0, 0,
                                 0, 0, 0, 0, 1, 1, 0, 0, 1, 0};
  const std::vector<int> pred = {1, 1, 1, 0, 0, 1, 1, 0, 0, 0,
                                 0, 1, 0, 0, 1, 0, 0, 0, 1, 1};
  // tp=6 fp=3 fn=3 tn=8, worked out by hand from the vectors above.
  EXPECT_DOUBLE_EQ(accuracy(pred, gold), 14.0 / 20.0);
  EXPECT_DOUBLE_EQ(f1_binary(pred, gold), 12.0 / 18.0);
  EXPECT_DOUBLE_EQ(f1_macro(pred, gold), (16.0 / 22.0 + 12.0 / 18.0) / 2.0);
}

TEST(Metrics, MacroCoversEveryObservedClass) {
  const std::vector<int> gold = {0, 1, 2, 2};
  const std::vector<int> pred = {0, 2, 2, 2};
  // class 0: f1=1; class 1: never predicted, f1=0; class 2: tp=2 fp=1 fn=0.
  EXPECT_DOUBLE_EQ(f1_macro(pred, gold), (1.0 + 0.0 + 0.8) / 3.0);
}

TEST(Metrics, InputValidation) {
  EXPECT_THROW(accuracy({}, {}), ConfigError);
  EXPECT_THROW(accuracy({1}, {1, 0}), DimensionError);
  EXPECT_THROW(compute_metrics({1}, {1}, "auc"), ConfigError);
}

TEST(Metrics, MomentsOracle) {
  const Vec v = {1.0, 2.0, 3.0, 4.0};
  EXPECT_DOUBLE_EQ(mean(v), 2.5);
  EXPECT_DOUBLE_EQ(sample_std(v), std::sqrt(5.0 / 3.0));
  EXPECT_DOUBLE_EQ(std_error(v), std::sqrt(5.0 / 3.0) / 2.0);
  EXPECT_DOUBLE_EQ(sample_std({7.0}), 0.0);
  EXPECT_THROW(mean({}), ConfigError);
}

TEST(Pearson, PerfectLinearCases) {
  const Vec a = {1.0, 2.0, 4.0, 8.0};
  Vec b;
  for (double x : a) b.push_back(2.0 * x + 3.0);
  EXPECT_DOUBLE_EQ(pearson(a, b), 1.0);
  Vec c;
  for (double x : a) c.push_back(-x);
  EXPECT_DOUBLE_EQ(pearson(a, c), -1.0);
}

TEST(Pearson, SixPointCaseMatchesDirectFormula) {
  Rng rng(2718);
  Vec a, b;
  for (int i = 0; i < 6; ++i) {
    a.push_back(rng.next_gaussian());
    b.push_back(rng.next_gaussian());
  }
  // Independent raw-moment evaluation of the same coefficient.
  double sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
  const double n = 6.0;
  for (int i = 0; i < 6; ++i) {
    sa += a[i];
    sb += b[i];
    sab += a[i] * b[i];
    saa += a[i] * a[i];
    sbb += b[i] * b[i];
  }
  const double expected = (sab - sa * sb / n) /
                          std::sqrt((saa - sa * sa / n) * (sbb - sb * sb / n));
  EXPECT_NEAR(pearson(a, b), expected, 1e-12);
}

TEST(Pearson, DegenerateAndShapeErrors) {
  EXPECT_THROW(pearson({1.0, 1.0, 1.0}, {1.0, 2.0, 3.0}), DegenerateInputError);
  EXPECT_THROW(pearson({1.0, 2.0, 3.0}, {5.0, 5.0, 5.0}), DegenerateInputError);
  EXPECT_THROW(pearson({1.0}, {1.0}), DimensionError);
  EXPECT_THROW(pearson({1.0, 2.0}, {1.0}), DimensionError);
}

}  // namespace
}  // namespace sesom
