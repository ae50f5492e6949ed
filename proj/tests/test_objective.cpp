#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "prp/objective.hpp"
#include "support.hpp"

namespace prp {
namespace {

// Random init plus nonzero biases, so relu kinks and bias paths are exercised.
std::unique_ptr<PrpModel> random_model(const InteractionStore& s, std::size_t d, std::uint64_t seed) {
  auto m = std::make_unique<PrpModel>(s.n_users(), s.n_items(), d);
  Rng rng(seed);
  m->init(rng);
  for (auto* mlp : {&m->ranker(), &m->noise_mu(), &m->noise_logvar()}) {
    for (double& v : mlp->b1().values) v = rng.uniform(-0.2, 0.2);
    for (double& v : mlp->b2().values) v = rng.uniform(-0.2, 0.2);
  }
  // Embeddings large enough that the ranker and noise paths are not negligible.
  for (auto* t : {&m->user_emb(), &m->item_emb()}) {
    for (double& v : t->values) v *= 4.0;
  }
  return m;
}

TEST(Objective, FullBatchGradientMatchesFiniteDifferences) {
  const auto s = test::random_store(30, 60, 10, 1);
  auto m = random_model(s, 8, 2);
  ObjectiveOptions opts;
  opts.thetas = {0.0, 0.3, 1.0};
  opts.beta = 0.7;
  FiniteDiffOptions fd;
  fd.min_coordinates = 400;
  const auto res = test::check_batch_gradient(*m, s, opts, 16, 4, 3, fd);
  EXPECT_TRUE(res.report.passed) << res.report.worst.tensor << "[" << res.report.worst.index << "] "
                                 << res.report.worst.analytic << " vs " << res.report.worst.numeric;
  for (const char* name : {"user_emb", "item_emb", "ranker.w1", "ranker.w2", "noise_mu.w1", "noise_logvar.w2"}) {
    EXPECT_TRUE(res.report.per_tensor.count(name)) << name;
  }
}

TEST(Objective, GradientAcrossModesAndAblations) {
  const auto s = test::random_store(20, 40, 9, 4);
  for (int variant = 0; variant < 5; ++variant) {
    auto m = random_model(s, 6, 10 + variant);
    ObjectiveOptions opts;
    opts.thetas = {0.0, 0.2, 0.9};
    if (variant == 1) opts.mode = LossMode::kBpr;
    if (variant == 2) opts.use_ranker = false;
    if (variant == 3) opts.use_confidence = false;
    if (variant == 4) opts.confidence_on_lp = false;
    const std::size_t k = opts.mode == LossMode::kBpr ? 2 : 3;
    const auto res = test::check_batch_gradient(*m, s, opts, 12, k, 20 + variant);
    EXPECT_TRUE(res.report.passed) << "variant " << variant << ": " << res.report.worst.tensor << " "
                                   << res.report.max_rel_err;
  }
}

TEST(Objective, NoConfidenceMatchesUnitAlphasExactly) {
  const auto s = test::random_store(20, 50, 8, 5);
  auto m = random_model(s, 8, 6);
  ObjectiveOptions weighted;
  ObjectiveOptions plain;
  plain.use_confidence = false;
  Rng rng(7);
  Rng order = rng.fork(1), noise = rng.fork(2);
  const auto plan = plan_step(*m, sample_batch(s, 32, 4, rng), weighted, order, noise);
  const auto a = evaluate_objective(*m, plan, plain, nullptr, false);
  FrozenAlphas ones;
  ones.main.assign(32 * 3, 1.0);
  ones.noise.assign(32 * 2, 1.0);
  const auto b = evaluate_objective(*m, plan, weighted, &ones, false);
  EXPECT_EQ(a.main_loss, b.main_loss);
  EXPECT_EQ(a.noise_loss, b.noise_loss);
  EXPECT_EQ(a.total, b.total);
  for (double x : a.main_profile.alphas) EXPECT_EQ(x, 1.0);
}

TEST(Objective, MainAlphasComeFromThisBatch) {
  const auto s = test::random_store(20, 50, 8, 8);
  auto m = random_model(s, 8, 9);
  ObjectiveOptions opts;
  Rng rng(10);
  Rng order = rng.fork(1), noise = rng.fork(2);
  const auto plan = plan_step(*m, sample_batch(s, 40, 5, rng), opts, order, noise);
  const auto out = evaluate_objective(*m, plan, opts, nullptr, false);
  std::vector<double> gates;
  for (std::size_t b = 0; b < plan.batch.size(); ++b) {
    const auto pi = plan.ranking(b);
    for (std::size_t v = 0; v + 1 < 5; ++v) {
      gates.push_back(sigmoid(score(*m, plan.batch.pairs[b].user, pi[v + 1]) - score(*m, plan.batch.pairs[b].user, pi[v])));
    }
  }
  const auto want = confidence_weights(gates);
  ASSERT_EQ(out.main_profile.alphas.size(), want.alphas.size());
  for (std::size_t n = 0; n < gates.size(); ++n) EXPECT_NEAR(out.main_profile.alphas[n], want.alphas[n], 0.0);
  EXPECT_EQ(out.main_profile.counts, want.counts);
}

TEST(Objective, BetaZeroLeavesMainTerm) {
  const auto s = test::random_store(10, 30, 6, 11);
  auto m = random_model(s, 6, 12);
  ObjectiveOptions opts;
  opts.beta = 0.0;
  Rng rng(13);
  Rng order = rng.fork(1), noise = rng.fork(2);
  const auto plan = plan_step(*m, sample_batch(s, 8, 3, rng), opts, order, noise);
  const auto out = evaluate_objective(*m, plan, opts, nullptr, true);
  EXPECT_EQ(out.total, out.main_loss);
  EXPECT_GT(out.noise_loss, 0.0);
  for (const char* name : {"ranker.w1", "noise_mu.w1", "noise_logvar.w1"}) {
    for (double g : m->params().at(name).grad) EXPECT_EQ(g, 0.0);
  }
}

TEST(Objective, BprModeGradientIsAnalyticBpr) {
  const auto s = test::random_store(10, 30, 6, 14);
  auto m = random_model(s, 5, 15);
  ObjectiveOptions opts;
  opts.mode = LossMode::kBpr;
  Rng rng(16);
  Rng order = rng.fork(1), noise = rng.fork(2);
  const auto plan = plan_step(*m, sample_batch(s, 6, 2, rng), opts, order, noise);
  EXPECT_EQ(plan.eta.size(), 0);
  m->params().zero_grad();
  const auto out = evaluate_objective(*m, plan, opts, nullptr, true);

  Mat gu = Mat::Zero(static_cast<Eigen::Index>(s.n_users()), 5), gi = Mat::Zero(static_cast<Eigen::Index>(s.n_items()), 5);
  double loss = 0;
  const auto ue = m->user_emb().value_mat(), ie = m->item_emb().value_mat();
  for (std::size_t b = 0; b < 6; ++b) {
    const Index u = plan.batch.pairs[b].user, p = plan.batch.candidates[2 * b], n = plan.batch.candidates[2 * b + 1];
    const double x = ue.row(u).dot(ie.row(p) - ie.row(n));
    loss += std::log1p(std::exp(-x)) / 6.0;
    const double c = -1.0 / (1.0 + std::exp(x)) / 6.0;
    gu.row(u) += c * (ie.row(p) - ie.row(n));
    gi.row(p) += c * ue.row(u);
    gi.row(n) -= c * ue.row(u);
  }
  EXPECT_NEAR(out.total, loss, 1e-14);
  EXPECT_LT((m->user_emb().grad_mat() - gu).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((m->item_emb().grad_mat() - gi).cwiseAbs().maxCoeff(), 1e-14);
  for (const char* name : {"ranker.w1", "noise_mu.w1"}) {
    for (double g : m->params().at(name).grad) EXPECT_EQ(g, 0.0);
  }
}

TEST(Objective, PinnedPositiveLeadsEveryRanking) {
  const auto s = test::random_store(20, 50, 8, 17);
  auto m = random_model(s, 8, 18);
  for (bool use_ranker : {true, false}) {
    ObjectiveOptions opts;
    opts.use_ranker = use_ranker;
    Rng rng(19);
    Rng order = rng.fork(1), noise = rng.fork(2);
    const auto plan = plan_step(*m, sample_batch(s, 50, 6, rng), opts, order, noise);
    for (std::size_t b = 0; b < plan.batch.size(); ++b) {
      const auto pi = plan.ranking(b);
      EXPECT_EQ(pi[0], plan.batch.pairs[b].item);
      std::vector<Index> a(pi.begin(), pi.end());
      const auto m_set = plan.batch.candidate_set(b);
      std::vector<Index> c(m_set.begin(), m_set.end());
      std::sort(a.begin(), a.end());
      std::sort(c.begin(), c.end());
      EXPECT_EQ(a, c);
    }
  }
}

TEST(Objective, RankerOrderSortsNegativesByRankerScore) {
  const auto s = test::random_store(20, 50, 8, 20);
  auto m = random_model(s, 8, 21);
  ObjectiveOptions opts;
  Rng rng(22);
  Rng order = rng.fork(1), noise = rng.fork(2);
  const auto plan = plan_step(*m, sample_batch(s, 30, 5, rng), opts, order, noise);
  for (std::size_t b = 0; b < plan.batch.size(); ++b) {
    const auto pi = plan.ranking(b);
    const auto r = ranker_scores(*m, plan.batch.pairs[b].user, pi);
    for (std::size_t v = 1; v + 1 < 5; ++v) EXPECT_GE(r[v], r[v + 1]);
  }
}

TEST(Objective, FrozenAlphaCountMismatch) {
  const auto s = test::random_store(10, 30, 6, 23);
  auto m = random_model(s, 4, 24);
  ObjectiveOptions opts;
  Rng rng(25);
  Rng order = rng.fork(1), noise = rng.fork(2);
  const auto plan = plan_step(*m, sample_batch(s, 4, 3, rng), opts, order, noise);
  FrozenAlphas bad;
  bad.main.assign(3, 1.0);
  EXPECT_THROW(evaluate_objective(*m, plan, opts, &bad, false), UsageError);
}

}  // namespace
}  // namespace prp
