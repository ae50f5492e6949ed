#include <gtest/gtest.h>

#include <cmath>

#include "prp/oracle.hpp"

namespace prp {
namespace {

TEST(BprReduction, RandomPairsWithinTolerance) {
  const auto r = check_bpr_reduction(1000, 5);
  EXPECT_TRUE(r.passed) << r.counterexample.dump();
  EXPECT_LT(r.max_deviation, 1e-9);
  EXPECT_GE(r.instances, 2000u);
  EXPECT_TRUE(r.counterexample.is_null());
}

TEST(BprReduction, FixedInstances) {
  const double a[] = {1.0, 0.2};
  EXPECT_NEAR(ranking_loss(a).loss, 0.371101, 1e-6);
  EXPECT_NEAR(bpr_loss(1.0, 0.2).loss, 0.371101, 1e-6);
  const double b[] = {0.3, 0.3};
  EXPECT_DOUBLE_EQ(ranking_loss(b).loss, std::log(2.0));
  EXPECT_DOUBLE_EQ(bpr_loss(0.3, 0.3).loss, std::log(2.0));
}

TEST(BprReduction, InjectedFailureCarriesCounterexample) {
  const auto r = check_bpr_reduction(10, 9, 1e-6);
  EXPECT_FALSE(r.passed);
  ASSERT_FALSE(r.counterexample.is_null());
  EXPECT_EQ(r.counterexample["kind"], "k=2");
  EXPECT_TRUE(r.counterexample.contains("s_pos"));
  EXPECT_EQ(r.seed, 9u);
}

TEST(BprReduction, DeterministicInSeed) {
  EXPECT_EQ(to_json(check_bpr_reduction(100, 3)).dump(), to_json(check_bpr_reduction(100, 3)).dump());
}

TEST(Softmax, RandomVectors) {
  const auto r = check_softmax_identity(1000, 10, 6);
  EXPECT_TRUE(r.passed) << r.counterexample.dump();
  EXPECT_LT(r.max_deviation, 1e-9);
  EXPECT_EQ(r.details["bound_violations"], 0);
  EXPECT_GE(r.details["min_bound_slack"].get<double>(), 0.0);
}

TEST(Softmax, OneTwoThree) {
  // v at s = 3: softplus(LSE(1, 2) - 3) and -log softmax both equal log(1 + e^-1 + e^-2).
  const double want = std::log(1.0 + std::exp(-1.0) + std::exp(-2.0));
  EXPECT_NEAR(want, 0.407606, 1e-6);
  const double lse12 = std::log(std::exp(1.0) + std::exp(2.0));
  EXPECT_NEAR(softplus(lse12 - 3.0), want, 1e-15);
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  EXPECT_NEAR(lse - 3.0, want, 1e-15);
  // The successor-only term is the smaller one.
  EXPECT_LE(softplus(2.0 - 3.0), want);
}

TEST(Softmax, ZeroPair) {
  EXPECT_DOUBLE_EQ(softplus(0.0 - 0.0), std::log(2.0));
  EXPECT_THROW(check_softmax_identity(1, 1, 1), UsageError);
}

TEST(NdcgMaximizers, SixTwoTwo) {
  const auto r = check_ndcg_maximizers(6, 2, 2);
  EXPECT_TRUE(r.passed) << r.details.dump();
  EXPECT_EQ(r.details["maximizer_count"], 48);
  EXPECT_EQ(r.details["closed_form_count"], 48);
  EXPECT_TRUE(r.details["ideal_is_maximizer"].get<bool>());
  EXPECT_TRUE(r.details["rotated_is_maximizer"].get<bool>());
  EXPECT_TRUE(r.details["rotated_distinct"].get<bool>());
  EXPECT_EQ(r.instances, 720u);
}

TEST(NdcgMaximizers, AllPositive) {
  const auto r = check_ndcg_maximizers(3, 3, 3);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.details["maximizer_count"], 6);
}

TEST(NdcgMaximizers, FewerPositivesThanK) {
  // With |P| < K the maximizers hold the positives in the leading |P| slots.
  const auto r = check_ndcg_maximizers(7, 2, 4);
  EXPECT_TRUE(r.passed) << r.details.dump();
  EXPECT_EQ(r.details["maximizer_count"], 2 * 120);
  EXPECT_FALSE(r.details["rotation_applies"].get<bool>());
}

TEST(NdcgMaximizers, ClosedFormSweep) {
  for (std::size_t n = 1; n <= 7; ++n) {
    for (std::size_t K = 1; K <= n; ++K) {
      const auto r = check_ndcg_maximizers(n, K, K);
      EXPECT_TRUE(r.passed) << n << " " << K;
      EXPECT_EQ(r.details["maximizer_count"].get<std::size_t>(), factorial(K) * factorial(n - K));
    }
  }
}

TEST(NdcgMaximizers, Limits) {
  EXPECT_THROW(check_ndcg_maximizers(9, 2, 2), UsageError);
  EXPECT_THROW(check_ndcg_maximizers(5, 3, 2), UsageError);
  EXPECT_THROW(check_ndcg_maximizers(5, 0, 2), UsageError);
}

TEST(Complexity, ReportShape) {
  const auto store = synthetic_store(60, 120, 12, 4);
  TrainConfig base;
  base.batch_size = 64;
  base.embedding_dim = 16;
  ComplexityOptions opts;
  opts.steps = 3;
  opts.warmup = 1;
  opts.ks = {2, 5};
  const auto r = check_complexity(base, store, opts);
  EXPECT_TRUE(r.advisory);
  EXPECT_EQ(r.instances, 2u);
  EXPECT_EQ(r.details["rows"].size(), 2u);
  EXPECT_GT(r.details["k2_no_ranker_ratio"].get<double>(), 0.0);
}

TEST(RunAll, NonTimingChecksPass) {
  VerifyOptions opts;
  opts.skip_timing = true;
  const auto reports = run_all_checks(opts);
  EXPECT_EQ(reports.size(), 5u);
  for (const auto& r : reports) EXPECT_TRUE(r.passed) << r.name;
}

}  // namespace
}  // namespace prp
