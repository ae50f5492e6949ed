#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prp/datastore.hpp"
#include "prp/error.hpp"
#include "prp/scorer.hpp"

namespace prp {

struct TopKMetrics {
  double hr = 0;
  double recall = 0;
  double dcg = 0;
  double idcg = 0;
  double ndcg = 0;
};

// Binary-relevance metrics over the first K entries of `ranked`; log base 2 discount.
inline TopKMetrics metrics_at_k(std::span<const Index> ranked, std::span<const Index> positives, std::size_t K) {
  if (K == 0) throw UsageError("metrics_at_k: K must be >= 1");
  if (positives.empty()) throw UsageError("metrics_at_k: empty positive set");
  std::vector<Index> pos(positives.begin(), positives.end());
  std::sort(pos.begin(), pos.end());
  TopKMetrics m;
  std::size_t hits = 0;
  const std::size_t depth = std::min(K, ranked.size());
  for (std::size_t j = 0; j < depth; ++j) {
    if (std::binary_search(pos.begin(), pos.end(), ranked[j])) {
      ++hits;
      m.dcg += 1.0 / std::log2(static_cast<double>(j) + 2.0);
    }
  }
  for (std::size_t j = 0; j < std::min(K, pos.size()); ++j) m.idcg += 1.0 / std::log2(static_cast<double>(j) + 2.0);
  m.hr = hits > 0 ? 1.0 : 0.0;
  m.recall = static_cast<double>(hits) / static_cast<double>(pos.size());
  m.ndcg = m.dcg / m.idcg;
  return m;
}

namespace detail {

inline void user_scores(const PrpModel& model, Index u, std::vector<double>& out) {
  model.check_user(u);
  const auto ie = model.item_emb().value_mat();
  const auto eu = model.user_emb().value_mat().row(u);
  Eigen::Map<Vec> s(out.data(), static_cast<Eigen::Index>(out.size()));
  s.noalias() = ie * eu.transpose();
}

// Top `depth` of the non-excluded items; `excluded` is a per-item mask.
inline std::vector<Index> top_items(std::span<const double> scores, const std::vector<char>& excluded,
                                    std::size_t depth) {
  std::vector<Index> ids;
  ids.reserve(scores.size());
  for (Index i = 0; i < scores.size(); ++i) {
    if (!excluded[i]) ids.push_back(i);
  }
  const auto better = [&](Index a, Index b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  depth = std::min(depth, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(depth), ids.end(), better);
  ids.resize(depth);
  return ids;
}

}  // namespace detail

// Every non-excluded item by score descending, ties by ascending index.
inline std::vector<Index> rank_all_items(const PrpModel& model, Index u, std::span<const Index> exclude) {
  std::vector<double> scores(model.n_items());
  detail::user_scores(model, u, scores);
  std::vector<char> mask(model.n_items(), 0);
  for (Index i : exclude) {
    model.check_item(i);
    mask[i] = 1;
  }
  return detail::top_items(scores, mask, model.n_items());
}

struct MetricsRow {
  std::size_t K = 0;
  double hr = 0;
  double recall = 0;
  double ndcg = 0;
};

struct EvalResult {
  Split split = Split::kTest;
  std::vector<MetricsRow> rows;
  std::size_t n_users = 0;

  const MetricsRow& at(std::size_t K) const {
    for (const auto& r : rows) {
      if (r.K == K) return r;
    }
    throw UsageError("no metrics for K=" + std::to_string(K));
  }
};

// Full-ranking evaluation. Train items never compete; for the test split the
// user's validation items are excluded as well.
inline EvalResult evaluate(const PrpModel& model, const InteractionStore& store, Split split,
                           std::span<const std::size_t> ks) {
  if (ks.empty()) throw UsageError("evaluate: empty K list");
  if (split == Split::kTrain) throw UsageError("evaluate: split must be valid or test");
  if (!store.is_split()) throw UsageError("evaluate: store is not split");
  if (store.n_items() != model.n_items() || store.n_users() != model.n_users()) {
    throw DataError("evaluate: model and dataset dimensions differ");
  }
  std::size_t max_k = 0;
  for (std::size_t K : ks) {
    if (K == 0) throw UsageError("evaluate: K must be >= 1");
    max_k = std::max(max_k, K);
  }
  const auto& target = store.split_lists(split);

  EvalResult res;
  res.split = split;
  for (std::size_t K : ks) res.rows.push_back({K, 0, 0, 0});
  std::vector<double> scores(model.n_items());
  std::vector<char> mask(model.n_items(), 0);
  for (Index u = 0; u < store.n_users(); ++u) {
    if (target[u].empty()) continue;
    detail::user_scores(model, u, scores);
    for (Index i : store.train[u]) mask[i] = 1;
    if (split == Split::kTest) {
      for (Index i : store.valid[u]) mask[i] = 1;
    }
    const auto top = detail::top_items(scores, mask, max_k);
    for (auto& row : res.rows) {
      const auto m = metrics_at_k(top, target[u], row.K);
      row.hr += m.hr;
      row.recall += m.recall;
      row.ndcg += m.ndcg;
    }
    for (Index i : store.train[u]) mask[i] = 0;
    for (Index i : store.valid[u]) mask[i] = 0;
    ++res.n_users;
  }
  if (res.n_users == 0) throw DataError("evaluate: no users with positives in the " + std::string(split_name(split)) + " split");
  const double inv = 1.0 / static_cast<double>(res.n_users);
  for (auto& row : res.rows) {
    row.hr *= inv;
    row.recall *= inv;
    row.ndcg *= inv;
  }
  return res;
}

// One object per K: {split, K, hr, recall, ndcg, n_users, seed, epoch}.
inline nlohmann::json to_json(const EvalResult& r, std::uint64_t seed, std::size_t epoch) {
  auto rows = nlohmann::json::array();
  for (const auto& m : r.rows) {
    rows.push_back({{"split", std::string(split_name(r.split))},
                    {"K", m.K},
                    {"hr", m.hr},
                    {"recall", m.recall},
                    {"ndcg", m.ndcg},
                    {"n_users", r.n_users},
                    {"seed", seed},
                    {"epoch", epoch}});
  }
  return rows;
}

}  // namespace prp
