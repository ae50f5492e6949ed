#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prp/datastore.hpp"
#include "prp/loss.hpp"
#include "prp/scorer.hpp"

namespace prp {

enum class LossMode { kPrp, kBpr };

struct ObjectiveOptions {
  LossMode mode = LossMode::kPrp;
  double beta = 0.3;
  Thetas thetas{0.0, 0.01, 0.1};
  std::size_t bins = kDefaultBins;
  bool use_ranker = true;
  bool use_lp = true;
  bool use_confidence = true;
  bool confidence_on_lp = true;
  bool pin_positive = true;
};

// Everything a step samples before the loss is evaluated. Freezing a plan (and
// the alphas) makes the objective a deterministic function of the parameters.
struct StepPlan {
  Batch batch;
  // Row-major B x k: pi per pair, best first.
  std::vector<Index> rankings;
  // B x d standard-normal draws for the reparameterized noise; empty without L_p.
  Mat eta;

  std::span<const Index> ranking(std::size_t b) const { return {rankings.data() + b * batch.k, batch.k}; }
};

struct FrozenAlphas {
  std::vector<double> main;
  std::vector<double> noise;
};

struct BatchOutputs {
  // Per-pair means over the batch.
  double main_loss = 0;
  double noise_loss = 0;
  double total = 0;
  ConfidenceProfile main_profile;
  std::optional<ConfidenceProfile> noise_profile;
};

// Pseudo-ranks every candidate set and draws the noise. The ranker runs
// forward only: argsort blocks gradient flow into it from the main loss.
inline StepPlan plan_step(const PrpModel& model, Batch batch, const ObjectiveOptions& opts, Rng& order_rng,
                          Rng& noise_rng) {
  StepPlan plan;
  const std::size_t k = batch.k;
  const std::size_t n = batch.size();
  plan.rankings.resize(n * k);

  if (opts.mode == LossMode::kBpr) {
    plan.rankings = batch.candidates;
  } else if (!opts.use_ranker) {
    // Random order behind the pinned positive.
    plan.rankings = batch.candidates;
    for (std::size_t b = 0; b < n; ++b) {
      order_rng.shuffle(std::span<Index>(plan.rankings.data() + b * k + 1, k - 1));
    }
  } else {
    std::vector<Index> users(n * k);
    for (std::size_t b = 0; b < n; ++b) std::fill_n(users.begin() + static_cast<std::ptrdiff_t>(b * k), k, batch.pairs[b].user);
    const Mat y = model.ranker().forward(ranker_input(model, users, gather_items(model, batch.candidates)));
    for (std::size_t b = 0; b < n; ++b) {
      const auto pr = pseudo_rank(std::span<const double>(y.data() + b * k, k), batch.candidate_set(b), opts.pin_positive);
      std::copy(pr.items.begin(), pr.items.end(), plan.rankings.begin() + static_cast<std::ptrdiff_t>(b * k));
    }
  }
  if (opts.mode == LossMode::kPrp && opts.use_lp) plan.eta = draw_eta(n, model.dim(), noise_rng);
  plan.batch = std::move(batch);
  return plan;
}

namespace detail {

inline ConfidenceProfile make_profile(std::span<const double> pool, bool weighted, std::size_t bins,
                                      const std::vector<double>* frozen) {
  if (frozen) {
    if (frozen->size() != pool.size()) throw UsageError("frozen alpha count does not match the gradient pool");
    auto p = uniform_confidence(pool.size(), bins);
    p.gradients.assign(pool.begin(), pool.end());
    p.alphas = *frozen;
    return p;
  }
  if (!weighted) {
    auto p = uniform_confidence(pool.size(), bins);
    p.gradients.assign(pool.begin(), pool.end());
    return p;
  }
  return confidence_weights(pool, bins);
}

}  // namespace detail

// Batch objective L = mean_b [L_rank^alpha(u, pi) + beta * L_p]. With
// `accumulate`, dL/dtheta is added into the model's gradient buffers.
inline BatchOutputs evaluate_objective(PrpModel& model, const StepPlan& plan, const ObjectiveOptions& opts,
                                       const FrozenAlphas* frozen = nullptr, bool accumulate = true) {
  const std::size_t k = plan.batch.k;
  const std::size_t n = plan.batch.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  const auto d = static_cast<Eigen::Index>(model.dim());
  auto ue = model.user_emb().value_mat();
  auto ie = model.item_emb().value_mat();
  auto ue_grad = model.user_emb().grad_mat();
  auto ie_grad = model.item_emb().grad_mat();
  BatchOutputs out;

  // Main term: dot-product scores along each pseudo-ranking.
  std::vector<double> scores(n * k);
  std::vector<double> gates(n * (k - 1));
  for (std::size_t b = 0; b < n; ++b) {
    const Index u = plan.batch.pairs[b].user;
    const auto pi = plan.ranking(b);
    for (std::size_t v = 0; v < k; ++v) scores[b * k + v] = ue.row(u).dot(ie.row(pi[v]));
    for (std::size_t v = 0; v + 1 < k; ++v) gates[b * (k - 1) + v] = sigmoid(scores[b * k + v + 1] - scores[b * k + v]);
  }
  const bool weighted = opts.mode == LossMode::kPrp && opts.use_confidence;
  out.main_profile = detail::make_profile(gates, weighted, opts.bins, frozen ? &frozen->main : nullptr);

  std::vector<double> score_grads(k);
  for (std::size_t b = 0; b < n; ++b) {
    const std::span<const double> s(scores.data() + b * k, k);
    if (opts.mode == LossMode::kBpr) {
      const auto r = bpr_loss(s[0], s[1]);
      out.main_loss += r.loss;
      score_grads[0] = r.grad_pos;
      score_grads[1] = r.grad_neg;
    } else {
      const auto r = weighted_ranking_loss(s, std::span<const double>(out.main_profile.alphas).subspan(b * (k - 1), k - 1));
      out.main_loss += r.loss;
      std::copy(r.grads.begin(), r.grads.end(), score_grads.begin());
    }
    if (!accumulate) continue;
    const Index u = plan.batch.pairs[b].user;
    const auto pi = plan.ranking(b);
    for (std::size_t v = 0; v < k; ++v) {
      const double g = score_grads[v] * inv_n;
      if (g == 0.0) continue;
      ue_grad.row(u) += g * ie.row(pi[v]);
      ie_grad.row(pi[v]) += g * ue.row(u);
    }
  }
  out.main_loss *= inv_n;

  // Noise supervision: ranker scores on the perturbed copies, ground-truth order.
  if (opts.mode == LossMode::kPrp && opts.use_lp) {
    check_thetas(opts.thetas);
    std::vector<Index> users(n);
    for (std::size_t b = 0; b < n; ++b) users[b] = plan.batch.pairs[b].user;
    NoiseSample ns = noise_with_eta(model, users, plan.eta);

    Mat perturbed(static_cast<Eigen::Index>(3 * n), d);
    std::vector<Index> row_users(3 * n);
    for (std::size_t b = 0; b < n; ++b) {
      const auto e_p = ie.row(plan.batch.pairs[b].item);
      for (std::size_t m = 0; m < 3; ++m) {
        const auto row = static_cast<Eigen::Index>(3 * b + m);
        perturbed.row(row) = e_p;
        if (opts.thetas[m] != 0.0) perturbed.row(row) += opts.thetas[m] * ns.epsilon.row(static_cast<Eigen::Index>(b));
        row_users[3 * b + m] = users[b];
      }
    }
    Mlp::Tape tape;
    const Mat r = model.ranker().forward(ranker_input(model, row_users, perturbed), accumulate ? &tape : nullptr);

    std::vector<double> lp_gates(2 * n);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t v = 0; v < 2; ++v) lp_gates[2 * b + v] = sigmoid(r(3 * b + v + 1, 0) - r(3 * b + v, 0));
    }
    out.noise_profile = detail::make_profile(lp_gates, opts.use_confidence && opts.confidence_on_lp, opts.bins,
                                             frozen ? &frozen->noise : nullptr);

    Mat dy(static_cast<Eigen::Index>(3 * n), 1);
    for (std::size_t b = 0; b < n; ++b) {
      const double rs[3] = {r(3 * b, 0), r(3 * b + 1, 0), r(3 * b + 2, 0)};
      const auto w =
          weighted_ranking_loss(rs, std::span<const double>(out.noise_profile->alphas).subspan(2 * b, 2));
      out.noise_loss += w.loss;
      for (std::size_t m = 0; m < 3; ++m) dy(static_cast<Eigen::Index>(3 * b + m), 0) = opts.beta * inv_n * w.grads[m];
    }
    out.noise_loss *= inv_n;

    if (accumulate && opts.beta != 0.0) {
      const Mat dx = model.ranker().backward(tape, dy);
      Mat d_eps = Mat::Zero(static_cast<Eigen::Index>(n), d);
      for (std::size_t b = 0; b < n; ++b) {
        const Index u = users[b];
        const Index p = plan.batch.pairs[b].item;
        for (std::size_t m = 0; m < 3; ++m) {
          const auto row = static_cast<Eigen::Index>(3 * b + m);
          ue_grad.row(u) += dx.row(row).head(d);
          ie_grad.row(p) += dx.row(row).tail(d);
          if (opts.thetas[m] != 0.0) d_eps.row(static_cast<Eigen::Index>(b)) += opts.thetas[m] * dx.row(row).tail(d);
        }
      }
      const Mat d_user = noise_backward(model, ns, d_eps);
      for (std::size_t b = 0; b < n; ++b) ue_grad.row(users[b]) += d_user.row(static_cast<Eigen::Index>(b));
    }
  }

  out.total = total_loss(out.main_loss, out.noise_loss, opts.mode == LossMode::kPrp ? opts.beta : 0.0).total;
  return out;
}

inline FrozenAlphas freeze_alphas(const BatchOutputs& outputs) {
  FrozenAlphas f;
  f.main = outputs.main_profile.alphas;
  if (outputs.noise_profile) f.noise = outputs.noise_profile->alphas;
  return f;
}

}  // namespace prp
