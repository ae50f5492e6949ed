#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "prp/datastore.hpp"
#include "prp/error.hpp"
#include "prp/random.hpp"
#include "prp/tensor.hpp"

namespace prp {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

// Matrix-factorization backbone plus the pseudo-ranker and the user-conditioned
// noise generator. All three read the same embedding tables.
//
// Tensor names: user_emb, item_emb, ranker.*, noise_mu.*, noise_logvar.*
class PrpModel {
 public:
  PrpModel(std::size_t n_users, std::size_t n_items, std::size_t dim)
      : dim_(dim),
        user_emb_(&params_.add("user_emb", {n_users, dim})),
        item_emb_(&params_.add("item_emb", {n_items, dim})),
        ranker_(params_, "ranker", 2 * dim, dim, 1),
        noise_mu_(params_, "noise_mu", dim, dim, dim),
        noise_logvar_(params_, "noise_logvar", dim, dim, dim) {
    if (dim == 0 || n_users == 0 || n_items == 0) throw UsageError("model dimensions must be >= 1");
  }

  PrpModel(const PrpModel&) = delete;
  PrpModel& operator=(const PrpModel&) = delete;

  void init(Rng& rng) {
    // Embedding tables follow torch's xavier_uniform_ on an (n x d) weight.
    xavier_init(*user_emb_, dim_, n_users(), rng);
    xavier_init(*item_emb_, dim_, n_items(), rng);
    ranker_.init(rng);
    noise_mu_.init(rng);
    noise_logvar_.init(rng);
  }

  std::size_t dim() const { return dim_; }
  std::size_t n_users() const { return user_emb_->rows(); }
  std::size_t n_items() const { return item_emb_->rows(); }

  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  ParameterTensor& user_emb() { return *user_emb_; }
  ParameterTensor& item_emb() { return *item_emb_; }
  const ParameterTensor& user_emb() const { return *user_emb_; }
  const ParameterTensor& item_emb() const { return *item_emb_; }
  Mlp& ranker() { return ranker_; }
  const Mlp& ranker() const { return ranker_; }
  Mlp& noise_mu() { return noise_mu_; }
  const Mlp& noise_mu() const { return noise_mu_; }
  Mlp& noise_logvar() { return noise_logvar_; }
  const Mlp& noise_logvar() const { return noise_logvar_; }

  void check_user(Index u) const {
    if (u >= n_users()) throw UsageError("user index " + std::to_string(u) + " out of range");
  }
  void check_item(Index i) const {
    if (i >= n_items()) throw UsageError("item index " + std::to_string(i) + " out of range");
  }

 private:
  ParameterStore params_;
  std::size_t dim_;
  ParameterTensor* user_emb_;
  ParameterTensor* item_emb_;
  Mlp ranker_;
  Mlp noise_mu_;
  Mlp noise_logvar_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t n = 0; n < a.size(); ++n) s += a[n] * b[n];
  return s;
}

// s_u(e) for an arbitrary embedding (perturbed items have no index).
inline double score_embedding(const PrpModel& model, Index u, std::span<const double> e) {
  model.check_user(u);
  if (e.size() != model.dim()) throw UsageError("embedding width mismatch");
  return dot(model.user_emb().row(u), e);
}

inline double score(const PrpModel& model, Index u, Index i) {
  model.check_item(i);
  return score_embedding(model, u, model.item_emb().row(i));
}

// Rows [e_u ; e] for a ranker forward pass.
inline Mat ranker_input(const PrpModel& model, std::span<const Index> users, const Mat& item_embeddings) {
  const auto d = static_cast<Eigen::Index>(model.dim());
  Mat x(item_embeddings.rows(), 2 * d);
  const auto ue = model.user_emb().value_mat();
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    x.row(r).head(d) = ue.row(users[static_cast<std::size_t>(r)]);
    x.row(r).tail(d) = item_embeddings.row(r);
  }
  return x;
}

inline Mat gather_items(const PrpModel& model, std::span<const Index> items) {
  Mat out(static_cast<Eigen::Index>(items.size()), static_cast<Eigen::Index>(model.dim()));
  const auto ie = model.item_emb().value_mat();
  for (std::size_t r = 0; r < items.size(); ++r) {
    model.check_item(items[r]);
    out.row(static_cast<Eigen::Index>(r)) = ie.row(items[r]);
  }
  return out;
}

// r_u(i) = mlp([e_u ; e_i]) for every i in M, in M's order.
inline std::vector<double> ranker_scores(const PrpModel& model, Index u, std::span<const Index> items,
                                         Mlp::Tape* tape = nullptr) {
  model.check_user(u);
  std::vector<Index> users(items.size(), u);
  const Mat y = model.ranker().forward(ranker_input(model, users, gather_items(model, items)), tape);
  return {y.data(), y.data() + y.rows()};
}

// pi: items best-first; position[j] is the 1-based rank of candidates[j].
struct PseudoRanking {
  std::vector<Index> items;
  std::vector<double> scores;
  std::vector<std::size_t> order;
  std::vector<std::size_t> position;

  std::size_t k() const { return items.size(); }
};

// Argsort by score descending, ties by ascending item index. With pinning,
// candidates[0] (the positive) takes position 1 and the rest are sorted behind it.
inline PseudoRanking pseudo_rank(std::span<const double> scores, std::span<const Index> candidates,
                                 bool pin_positive) {
  if (scores.size() != candidates.size()) throw UsageError("pseudo_rank: score/candidate length mismatch");
  for (double s : scores) {
    if (!std::isfinite(s)) throw NumericError("pseudo_rank: non-finite ranker score");
  }
  PseudoRanking pr;
  pr.order.resize(candidates.size());
  std::iota(pr.order.begin(), pr.order.end(), std::size_t{0});
  const auto first = pr.order.begin() + (pin_positive && !pr.order.empty() ? 1 : 0);
  std::sort(first, pr.order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return candidates[a] < candidates[b];
  });
  pr.position.resize(candidates.size());
  for (std::size_t v = 0; v < pr.order.size(); ++v) {
    pr.items.push_back(candidates[pr.order[v]]);
    pr.scores.push_back(scores[pr.order[v]]);
    pr.position[pr.order[v]] = v + 1;
  }
  return pr;
}

// Per-row reparameterized noise: mu = mlp1(e_u), logvar = clamp(mlp2(mu)),
// eps = mu + exp(logvar / 2) * eta.
struct NoiseSample {
  Mat mu;
  Mat logvar_raw;
  Mat sigma;
  Mat eta;
  Mat epsilon;
  Mlp::Tape mu_tape;
  Mlp::Tape logvar_tape;
  std::vector<Index> users;
};

inline Mat gather_users(const PrpModel& model, std::span<const Index> users) {
  Mat out(static_cast<Eigen::Index>(users.size()), static_cast<Eigen::Index>(model.dim()));
  const auto ue = model.user_emb().value_mat();
  for (std::size_t r = 0; r < users.size(); ++r) {
    model.check_user(users[r]);
    out.row(static_cast<Eigen::Index>(r)) = ue.row(users[r]);
  }
  return out;
}

inline NoiseSample noise_with_eta(const PrpModel& model, std::span<const Index> users, Mat eta) {
  if (eta.rows() != static_cast<Eigen::Index>(users.size()) || eta.cols() != static_cast<Eigen::Index>(model.dim())) {
    throw UsageError("noise: eta shape mismatch");
  }
  NoiseSample ns;
  ns.users.assign(users.begin(), users.end());
  ns.mu = model.noise_mu().forward(gather_users(model, users), &ns.mu_tape);
  ns.logvar_raw = model.noise_logvar().forward(ns.mu, &ns.logvar_tape);
  ns.sigma = (0.5 * ns.logvar_raw.array().cwiseMax(kLogVarMin).cwiseMin(kLogVarMax)).exp().matrix();
  ns.eta = std::move(eta);
  ns.epsilon = ns.mu + ns.sigma.cwiseProduct(ns.eta);
  return ns;
}

inline Mat draw_eta(std::size_t rows, std::size_t dim, Rng& rng) {
  Mat eta(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  for (Eigen::Index r = 0; r < eta.rows(); ++r) {
    for (Eigen::Index c = 0; c < eta.cols(); ++c) eta(r, c) = rng.normal();
  }
  return eta;
}

inline NoiseSample sample_noise(const PrpModel& model, Index u, Rng& rng) {
  const Index users[] = {u};
  return noise_with_eta(model, users, draw_eta(1, model.dim(), rng));
}

// Backprop dL/d(epsilon) through the reparameterization into both noise nets;
// returns dL/d(e_u) per row (the caller scatters it into user_emb).
inline Mat noise_backward(PrpModel& model, const NoiseSample& ns, const Mat& grad_eps) {
  Mat d_mu = grad_eps;
  const Mat d_sigma = grad_eps.cwiseProduct(ns.eta);
  Mat d_logvar = (0.5 * d_sigma.array() * ns.sigma.array()).matrix();
  for (Eigen::Index r = 0; r < d_logvar.rows(); ++r) {
    for (Eigen::Index c = 0; c < d_logvar.cols(); ++c) {
      const double lv = ns.logvar_raw(r, c);
      if (lv < kLogVarMin || lv > kLogVarMax) d_logvar(r, c) = 0.0;
    }
  }
  d_mu += model.noise_logvar().backward(ns.logvar_tape, d_logvar);
  return model.noise_mu().backward(ns.mu_tape, d_mu);
}

// T_theta(e) = e + theta * eps
inline std::vector<double> inject_noise(std::span<const double> e, std::span<const double> eps, double theta) {
  if (e.size() != eps.size()) throw UsageError("inject_noise: width mismatch");
  if (!(theta >= 0.0)) throw UsageError("inject_noise: theta must be >= 0");
  std::vector<double> out(e.begin(), e.end());
  if (theta == 0.0) return out;
  for (std::size_t n = 0; n < out.size(); ++n) out[n] += theta * eps[n];
  return out;
}

using Thetas = std::array<double, 3>;

inline void check_thetas(const Thetas& t) {
  if (!(t[0] == 0.0 && t[0] < t[1] && t[1] < t[2])) {
    throw UsageError("noise magnitudes must satisfy theta1 = 0 < theta2 < theta3");
  }
}

// The three perturbed copies of e_p, best first, sharing one epsilon draw.
struct NoisyTriple {
  Index user = 0;
  Index positive = 0;
  Thetas thetas{};
  std::array<std::vector<double>, 3> embeddings;
  NoiseSample noise;

  std::span<const double> epsilon() const { return {noise.epsilon.data(), static_cast<std::size_t>(noise.epsilon.cols())}; }
};

inline NoisyTriple triple_from_noise(const PrpModel& model, Index u, Index i_p, const Thetas& thetas, NoiseSample ns) {
  check_thetas(thetas);
  model.check_item(i_p);
  NoisyTriple t;
  t.user = u;
  t.positive = i_p;
  t.thetas = thetas;
  t.noise = std::move(ns);
  const auto e_p = model.item_emb().row(i_p);
  for (std::size_t m = 0; m < 3; ++m) t.embeddings[m] = inject_noise(e_p, t.epsilon(), thetas[m]);
  return t;
}

inline NoisyTriple build_noisy_triple(const PrpModel& model, Index u, Index i_p, const Thetas& thetas, Rng& rng) {
  check_thetas(thetas);
  return triple_from_noise(model, u, i_p, thetas, sample_noise(model, u, rng));
}

}  // namespace prp
