#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "prp/error.hpp"
#include "prp/scorer.hpp"

namespace prp {

// ln(1 + e^x) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct BprLoss {
  double loss = 0;
  double grad_pos = 0;
  double grad_neg = 0;
};

// -ln sigma(s_p - s_n)
inline BprLoss bpr_loss(double s_pos, double s_neg) {
  const double w = sigmoid(s_neg - s_pos);
  return {softplus(s_neg - s_pos), -w, w};
}

struct RankingLoss {
  double loss = 0;
  // dL/ds(pi(v)) for v = 1..k, in ranking order.
  std::vector<double> grads;
  // delta_v = s(pi(v+1)) - s(pi(v)) and its term softplus(delta_v), v = 1..k-1.
  std::vector<double> gaps;
  std::vector<double> terms;
  // g_v = sigma(delta_v): the derivative of term v with respect to its gap.
  std::vector<double> gate;
};

// Sum over consecutive pairs of softplus(s(pi(v+1)) - s(pi(v))); scores best-first.
inline RankingLoss ranking_loss(std::span<const double> ordered) {
  if (ordered.size() < 2) throw UsageError("ranking_loss needs k >= 2 scores");
  const std::size_t k = ordered.size();
  RankingLoss r;
  r.grads.assign(k, 0.0);
  for (std::size_t v = 0; v + 1 < k; ++v) {
    const double gap = ordered[v + 1] - ordered[v];
    const double term = softplus(gap);
    const double g = sigmoid(gap);
    r.gaps.push_back(gap);
    r.terms.push_back(term);
    r.gate.push_back(g);
    r.loss += term;
    r.grads[v] -= g;
    r.grads[v + 1] += g;
  }
  return r;
}

inline constexpr std::size_t kDefaultBins = 10;

// Gradient-density weights: the pool is histogrammed into `bins` equal-width
// intervals over [0, max g] and each gradient is weighted by its bin's share.
struct ConfidenceProfile {
  std::vector<double> gradients;
  double max_gradient = 0;
  std::vector<std::size_t> bin_of;
  std::vector<std::size_t> counts;
  std::vector<double> alphas;

  double mean_alpha() const {
    double s = 0;
    for (double a : alphas) s += a;
    return alphas.empty() ? 0.0 : s / static_cast<double>(alphas.size());
  }
};

inline ConfidenceProfile confidence_weights(std::span<const double> pool, std::size_t bins = kDefaultBins) {
  if (pool.empty()) throw UsageError("confidence_weights: empty gradient pool");
  if (bins == 0) throw UsageError("confidence_weights: bins must be >= 1");
  ConfidenceProfile p;
  p.gradients.assign(pool.begin(), pool.end());
  p.counts.assign(bins, 0);
  for (double g : pool) {
    if (!(g >= 0.0 && g <= 1.0)) throw UsageError("confidence_weights: gradient outside [0, 1]");
    p.max_gradient = std::max(p.max_gradient, g);
  }
  if (p.max_gradient == 0.0) {
    p.bin_of.assign(pool.size(), 0);
    p.counts[0] = pool.size();
    p.alphas.assign(pool.size(), 1.0);
    return p;
  }
  p.bin_of.reserve(pool.size());
  for (double g : pool) {
    const auto raw = static_cast<std::size_t>(std::floor(g / p.max_gradient * static_cast<double>(bins)));
    const std::size_t b = std::min(raw, bins - 1);
    p.bin_of.push_back(b);
    ++p.counts[b];
  }
  const double total = static_cast<double>(pool.size());
  p.alphas.reserve(pool.size());
  for (std::size_t b : p.bin_of) p.alphas.push_back(static_cast<double>(p.counts[b]) / total);
  return p;
}

inline ConfidenceProfile uniform_confidence(std::size_t n, std::size_t bins = kDefaultBins) {
  ConfidenceProfile p;
  p.counts.assign(bins, 0);
  p.alphas.assign(n, 1.0);
  p.bin_of.assign(n, 0);
  return p;
}

struct WeightedLoss {
  double loss = 0;
  std::vector<double> grads;
};

// sum_v alpha_v softplus(delta_v); alpha is held constant (no gradient through binning).
inline WeightedLoss weighted_ranking_loss(std::span<const double> ordered, std::span<const double> alphas) {
  if (ordered.size() < 2) throw UsageError("weighted_ranking_loss needs k >= 2 scores");
  if (alphas.size() != ordered.size() - 1) {
    throw UsageError("weighted_ranking_loss: expected " + std::to_string(ordered.size() - 1) + " weights, got " +
                     std::to_string(alphas.size()));
  }
  WeightedLoss w;
  w.grads.assign(ordered.size(), 0.0);
  for (std::size_t v = 0; v + 1 < ordered.size(); ++v) {
    const double gap = ordered[v + 1] - ordered[v];
    w.loss += alphas[v] * softplus(gap);
    const double g = alphas[v] * sigmoid(gap);
    w.grads[v] -= g;
    w.grads[v + 1] += g;
  }
  return w;
}

struct NoiseSupervision {
  double loss = 0;
  // Ranker scores of (e_p^1, e_p^2, e_p^3).
  std::array<double, 3> scores{};
  std::vector<double> gate;
  std::vector<double> alphas;
};

// L_p for one user: the ranker scores the three perturbed copies and the
// ranking loss is applied in their ground-truth order. `alphas` defaults to the
// triple's own two-gradient pool. With `grad_scale` > 0, gradients are
// accumulated into the ranker, both noise nets, e_u and e_p.
inline NoiseSupervision noise_supervision_loss(PrpModel& model, const NoisyTriple& triple,
                                               std::optional<std::array<double, 2>> alphas = std::nullopt,
                                               double grad_scale = 0.0) {
  const auto d = static_cast<Eigen::Index>(model.dim());
  Mat items(3, d);
  for (Eigen::Index m = 0; m < 3; ++m) {
    items.row(m) = Eigen::Map<const Eigen::RowVectorXd>(triple.embeddings[static_cast<std::size_t>(m)].data(), d);
  }
  const Index users[] = {triple.user, triple.user, triple.user};
  Mlp::Tape tape;
  const Mat r = model.ranker().forward(ranker_input(model, users, items), &tape);

  NoiseSupervision out;
  for (std::size_t m = 0; m < 3; ++m) out.scores[m] = r(static_cast<Eigen::Index>(m), 0);
  const auto plain = ranking_loss(out.scores);
  out.gate = plain.gate;
  if (alphas) out.alphas.assign(alphas->begin(), alphas->end());
  else out.alphas = confidence_weights(plain.gate).alphas;
  const auto weighted = weighted_ranking_loss(out.scores, out.alphas);
  out.loss = weighted.loss;

  if (grad_scale > 0.0) {
    Mat dy(3, 1);
    for (Eigen::Index m = 0; m < 3; ++m) dy(m, 0) = grad_scale * weighted.grads[static_cast<std::size_t>(m)];
    const Mat dx = model.ranker().backward(tape, dy);
    auto ue_grad = model.user_emb().grad_mat();
    auto ie_grad = model.item_emb().grad_mat();
    Mat d_eps = Mat::Zero(1, d);
    for (Eigen::Index m = 0; m < 3; ++m) {
      ue_grad.row(triple.user) += dx.row(m).head(d);
      ie_grad.row(triple.positive) += dx.row(m).tail(d);
      d_eps += triple.thetas[static_cast<std::size_t>(m)] * dx.row(m).tail(d);
    }
    ue_grad.row(triple.user) += noise_backward(model, triple.noise, d_eps);
  }
  return out;
}

struct TotalLoss {
  double main = 0;
  double noise = 0;
  double beta = 0;
  double total = 0;
};

// L = L_rank^alpha + beta * L_p
inline TotalLoss total_loss(double main_term, double noise_term, double beta) {
  if (!(beta >= 0.0)) throw UsageError("beta must be >= 0");
  return {main_term, noise_term, beta, main_term + beta * noise_term};
}

}  // namespace prp
