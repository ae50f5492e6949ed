#include <gtest/gtest.h>

#include <cmath>

#include "prp/tensor.hpp"

namespace prp {
namespace {

// Plain-loop reference for y = W2 act(W1 x + b1) + b2.
Mat reference_mlp(const Mat& x, const ParameterTensor& w1, const ParameterTensor& b1, const ParameterTensor& w2,
                  const ParameterTensor& b2, bool relu) {
  const std::size_t hid = w1.rows(), in = w1.cols(), out = w2.rows();
  Mat y(x.rows(), static_cast<Eigen::Index>(out));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    std::vector<double> h(hid);
    for (std::size_t j = 0; j < hid; ++j) {
      double z = b1.values[j];
      for (std::size_t c = 0; c < in; ++c) z += w1.values[j * in + c] * x(r, static_cast<Eigen::Index>(c));
      h[j] = relu ? std::max(z, 0.0) : z;
    }
    for (std::size_t o = 0; o < out; ++o) {
      double v = b2.values[o];
      for (std::size_t j = 0; j < hid; ++j) v += w2.values[o * hid + j] * h[j];
      y(r, static_cast<Eigen::Index>(o)) = v;
    }
  }
  return y;
}

Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1, 1);
  return m;
}

void randomize(ParameterStore& ps, Rng& rng) {
  for (auto& t : ps.tensors()) {
    for (double& v : t.values) v = rng.uniform(-1, 1);
    ++t.version;
  }
}

TEST(Xavier, Bounds) {
  EXPECT_DOUBLE_EQ(xavier_bound(3, 3), 1.0);
  EXPECT_NEAR(xavier_bound(64, 64), 0.21650635094610965, 1e-15);
  ParameterTensor t("w", {3, 3});
  Rng rng(1);
  xavier_init(t, 3, 3, rng);
  for (double v : t.values) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Xavier, VarianceMatchesUniformMoment) {
  ParameterTensor t("w", {100000});
  Rng rng(2);
  xavier_init(t, 64, 64, rng);
  double mean = 0, var = 0;
  for (double v : t.values) mean += v;
  mean /= static_cast<double>(t.numel());
  for (double v : t.values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(t.numel() - 1);
  const double b = xavier_bound(64, 64);
  EXPECT_NEAR(var / (b * b / 3.0), 1.0, 0.05);
}

TEST(Xavier, ZeroFanRejected) {
  ParameterTensor t("w", {2});
  Rng rng(1);
  EXPECT_THROW(xavier_init(t, 0, 3, rng), UsageError);
}

TEST(Mlp, ZeroWeightsGiveZeroOutput) {
  ParameterStore ps;
  Mlp net(ps, "m", 3, 4, 2);
  Rng rng(1);
  const Mat y = net.forward(random_mat(5, 3, rng));
  EXPECT_TRUE(y.isZero(0.0));
}

TEST(Mlp, IdentityNetPassesInputThrough) {
  ParameterStore ps;
  Mlp net(ps, "m", 1, 1, 1, Activation::kIdentity);
  net.w1().values[0] = 1.0;
  net.w2().values[0] = 1.0;
  Mat x(3, 1);
  x << -2.5, 0.0, 7.25;
  EXPECT_EQ(net.forward(x), x);
}

TEST(Mlp, MatchesLoopOracle) {
  ParameterStore ps;
  Mlp net(ps, "m", 4, 8, 2);
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    randomize(ps, rng);
    const Mat x = random_mat(6, 4, rng);
    const Mat want = reference_mlp(x, net.w1(), net.b1(), net.w2(), net.b2(), true);
    EXPECT_LT((net.forward(x) - want).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Mlp, WidthMismatch) {
  ParameterStore ps;
  Mlp net(ps, "m", 4, 8, 2);
  EXPECT_THROW(net.forward(Mat::Zero(2, 3)), UsageError);
}

TEST(Mlp, ZeroOutputGradAccumulatesNothing) {
  ParameterStore ps;
  Mlp net(ps, "m", 3, 5, 2);
  Rng rng(4);
  randomize(ps, rng);
  Mlp::Tape tape;
  net.forward(random_mat(4, 3, rng), &tape);
  const Mat dx = net.backward(tape, Mat::Zero(4, 2));
  EXPECT_TRUE(dx.isZero(0.0));
  for (const auto& t : ps.tensors()) {
    for (double g : t.grad) EXPECT_EQ(g, 0.0);
  }
}

TEST(Mlp, LinearBackwardClosedForm) {
  ParameterStore ps;
  Mlp net(ps, "m", 3, 5, 2, Activation::kIdentity);
  Rng rng(5);
  randomize(ps, rng);
  Mlp::Tape tape;
  const Mat x = random_mat(4, 3, rng);
  net.forward(x, &tape);
  const Mat dy = random_mat(4, 2, rng);
  const Mat dx = net.backward(tape, dy);
  // Row form of W1^T W2^T g.
  const Mat want = dy * net.w2().value_mat() * net.w1().value_mat();
  EXPECT_LT((dx - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Mlp, BackwardMatchesFiniteDifferences) {
  ParameterStore ps;
  Mlp net(ps, "m", 4, 6, 3);
  Rng rng(6);
  randomize(ps, rng);
  const Mat x = random_mat(5, 4, rng);
  const Mat dy = random_mat(5, 3, rng);
  const auto loss = [&](bool grad) {
    Mlp::Tape tape;
    const Mat y = net.forward(x, grad ? &tape : nullptr);
    if (grad) net.backward(tape, dy);
    return (y.array() * dy.array()).sum();
  };
  FiniteDiffOptions opts;
  opts.tol = 1e-6;
  opts.min_coordinates = ps.total_size();
  const auto rep = finite_diff_check(loss, ps, opts);
  EXPECT_TRUE(rep.passed) << rep.worst.tensor << "[" << rep.worst.index << "] rel " << rep.max_rel_err;
  EXPECT_EQ(rep.per_tensor.size(), 4u);
}

TEST(Mlp, InputGradientMatchesFiniteDifferences) {
  ParameterStore ps;
  Mlp net(ps, "m", 3, 7, 2);
  Rng rng(7);
  randomize(ps, rng);
  Mat x = random_mat(2, 3, rng);
  const Mat dy = random_mat(2, 2, rng);
  Mlp::Tape tape;
  net.forward(x, &tape);
  const Mat dx = net.backward(tape, dy);
  const double h = 1e-6;
  for (Eigen::Index n = 0; n < x.size(); ++n) {
    const double orig = x.data()[n];
    x.data()[n] = orig + h;
    const double up = (net.forward(x).array() * dy.array()).sum();
    x.data()[n] = orig - h;
    const double down = (net.forward(x).array() * dy.array()).sum();
    x.data()[n] = orig;
    EXPECT_NEAR(dx.data()[n], (up - down) / (2 * h), 1e-7);
  }
}

TEST(Mlp, BackwardIsAdditive) {
  ParameterStore a_ps, b_ps;
  Mlp a(a_ps, "m", 3, 4, 2), b(b_ps, "m", 3, 4, 2);
  Rng rng(8);
  randomize(a_ps, rng);
  for (std::size_t n = 0; n < a_ps.tensors().size(); ++n) b_ps.tensors()[n].values = a_ps.tensors()[n].values;
  const Mat x = random_mat(3, 3, rng);
  const Mat g = random_mat(3, 2, rng);
  Mlp::Tape ta, tb;
  a.forward(x, &ta);
  b.forward(x, &tb);
  a.backward(ta, g);
  a.backward(ta, g);
  b.backward(tb, 2.0 * g);
  for (std::size_t n = 0; n < a_ps.tensors().size(); ++n) {
    const auto& ga = a_ps.tensors()[n].grad;
    const auto& gb = b_ps.tensors()[n].grad;
    for (std::size_t j = 0; j < ga.size(); ++j) EXPECT_NEAR(ga[j], gb[j], 1e-14);
  }
}

TEST(Mlp, StaleTapeRejected) {
  ParameterStore ps;
  Mlp net(ps, "m", 2, 2, 1);
  Mlp::Tape tape;
  net.forward(Mat::Ones(1, 2), &tape);
  ps.tensors()[0].grad[0] = 1.0;
  adam_step(ps, {});
  EXPECT_THROW(net.backward(tape, Mat::Ones(1, 1)), UsageError);
}

TEST(Adam, ZeroGradNoL2LeavesParams) {
  ParameterStore ps;
  auto& t = ps.add("x", {3});
  t.values = {1.0, -2.0, 3.0};
  adam_step(ps, {});
  EXPECT_EQ(t.values, (Buffer{1.0, -2.0, 3.0}));
}

TEST(Adam, FirstStepMovesByLr) {
  ParameterStore ps;
  auto& t = ps.add("x", {1});
  t.values[0] = 0.5;
  t.grad[0] = 1.0;
  adam_step(ps, {});
  EXPECT_NEAR(t.values[0], 0.5 - 0.001, 1e-10);
  EXPECT_EQ(t.grad[0], 0.0);
  EXPECT_EQ(t.step_count, 1u);
}

TEST(Adam, CoupledL2PullsTowardZero) {
  ParameterStore ps;
  auto& t = ps.add("x", {1});
  t.values[0] = 1.0;
  AdamConfig cfg;
  cfg.l2 = 1e-4;
  adam_step(ps, cfg);
  // g' = 1e-4; m_hat / (sqrt(v_hat) + eps) = 1e-4 / (1e-4 + 1e-8)
  EXPECT_NEAR(t.values[0], 1.0 - 0.001 * 1e-4 / (1e-4 + 1e-8), 1e-15);
}

TEST(Adam, Deterministic) {
  const auto run = [] {
    ParameterStore ps;
    auto& t = ps.add("x", {4});
    Rng rng(3);
    for (int s = 0; s < 5; ++s) {
      for (double& g : t.grad) g = rng.uniform(-1, 1);
      adam_step(ps, {0.01, 0.9, 0.999, 1e-8, 1e-3});
    }
    return t.values;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, NonFiniteGradientAbortsAndNamesTensor) {
  ParameterStore ps;
  auto& a = ps.add("alpha", {2});
  auto& b = ps.add("beta", {2});
  a.grad[0] = 1.0;
  b.grad[1] = NAN;
  try {
    adam_step(ps, {});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("'beta'"), std::string::npos);
  }
  EXPECT_EQ(a.values[0], 0.0);
  EXPECT_EQ(a.step_count, 0u);
}

TEST(FiniteDiff, QuadraticIsExact) {
  ParameterStore ps;
  auto& t = ps.add("x", {300});
  Rng rng(9);
  for (double& v : t.values) v = rng.uniform(-2, 2);
  const auto loss = [&](bool grad) {
    double l = 0;
    for (std::size_t n = 0; n < t.numel(); ++n) {
      l += 0.5 * t.values[n] * t.values[n];
      if (grad) t.grad[n] += t.values[n];
    }
    return l;
  };
  FiniteDiffOptions opts;
  // Central differences are exact on a quadratic; only rounding remains.
  opts.h = 1e-3;
  opts.tol = 1e-8;
  const auto rep = finite_diff_check(loss, ps, opts);
  EXPECT_GE(rep.entries.size(), 200u);
  EXPECT_LT(rep.max_rel_err, 1e-8);
  EXPECT_TRUE(rep.passed);
}

TEST(FiniteDiff, DetectsWrongGradient) {
  ParameterStore ps;
  auto& t = ps.add("x", {10});
  for (double& v : t.values) v = 1.0;
  const auto loss = [&](bool grad) {
    double l = 0;
    for (std::size_t n = 0; n < t.numel(); ++n) {
      l += t.values[n] * t.values[n];
      if (grad) t.grad[n] += t.values[n];  // missing factor 2
    }
    return l;
  };
  EXPECT_FALSE(finite_diff_check(loss, ps).passed);
}

TEST(FiniteDiff, ZeroStepRejected) {
  ParameterStore ps;
  ps.add("x", {1});
  FiniteDiffOptions opts;
  opts.h = 0.0;
  EXPECT_THROW(finite_diff_check([](bool) { return 0.0; }, ps, opts), UsageError);
}

}  // namespace
}  // namespace prp
