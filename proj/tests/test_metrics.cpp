#include <cmath>

#include <gtest/gtest.h>

#include "ccmcd/metrics.hpp"
#include "ccmcd/random.hpp"

namespace ccmcd {
namespace {

double brute_force_u(const std::vector<double>& a, const std::vector<double>& b) {
  double u = 0.0;
  for (double x : a) {
    for (double y : b) u += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
  }
  return u;
}

std::vector<double> random_sample(Rng& rng) {
  std::vector<double> v(1 + uniform_index(rng, 50));
  for (auto& x : v) x = static_cast<double>(1 + uniform_index(rng, 12));  // small range forces ties
  return v;
}

TEST(RunLengths, Examples) {
  const auto a = run_lengths({3, 7, 9}, 5);
  EXPECT_EQ(a.nominal, std::vector<double>({3}));
  EXPECT_EQ(a.nonnominal, std::vector<double>({4, 2}));
  const auto b = run_lengths({}, 5);
  EXPECT_TRUE(b.nominal.empty());
  EXPECT_TRUE(b.nonnominal.empty());
  const auto c = run_lengths({4}, 10);
  EXPECT_EQ(c.nominal, std::vector<double>({4}));
  EXPECT_TRUE(c.nonnominal.empty());
  EXPECT_THROW(run_lengths({3, 3}, 5), ConfigError);
}

TEST(RunLengths, BoundaryWindow) {
  // tau = 2000, n = 5: window 400 covers graphs 1995..1999, window 401 the first changed ones.
  EXPECT_EQ(boundary_window(2000, 5), 401u);
  EXPECT_EQ(boundary_window(2003, 5), 401u);
  EXPECT_EQ(boundary_window(4, 5), 1u);
}

TEST(MannWhitney, Examples) {
  EXPECT_EQ(mann_whitney_u({5}, {5}), 0.5);
  EXPECT_EQ(mann_whitney_u({2, 3}, {1, 2}), 3.5);
  EXPECT_EQ(mann_whitney_u({10, 11, 12}, {1, 2}), 6.0);
  EXPECT_EQ(auc_rl({{2, 3}, {1, 2}}), 0.875);
  EXPECT_EQ(auc_rl({{10, 11, 12}, {1, 2}}), 1.0);
  EXPECT_THROW(mann_whitney_u({}, {1}), UndefinedMetricError);
  EXPECT_THROW(auc_rl({{1, 2}, {}}), UndefinedMetricError);
  EXPECT_THROW(average_run_length({}), UndefinedMetricError);
}

TEST(MannWhitney, MatchesBruteForceOracle) {
  Rng rng(2024);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_sample(rng);
    const auto b = random_sample(rng);
    EXPECT_EQ(mann_whitney_u(a, b), brute_force_u(a, b)) << "sample " << i;
    const double ab = auc_rl({a, b});
    const double ba = auc_rl({b, a});
    EXPECT_EQ(ab + ba, 1.0);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
  }
}

TEST(MannWhitney, InvariantUnderMonotoneTransforms) {
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    auto a = random_sample(rng);
    auto b = random_sample(rng);
    const double base = auc_rl({a, b});
    for (auto* v : {&a, &b}) {
      for (auto& x : *v) x = std::log(x) * 3.0 + std::pow(x, 3.0);
    }
    EXPECT_EQ(auc_rl({a, b}), base);
  }
}

TEST(MannWhitney, ExchangeableSamplesGiveOneHalf) {
  Rng rng(9);
  std::vector<double> pool(2000);
  for (auto& x : pool) x = static_cast<double>(1 + uniform_index(rng, 200));
  std::vector<double> a(pool.begin(), pool.begin() + 1000), b(pool.begin() + 1000, pool.end());
  EXPECT_NEAR(auc_rl({a, b}), 0.5, 0.05);
}

}  // namespace
}  // namespace ccmcd
