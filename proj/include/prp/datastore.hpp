#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "prp/error.hpp"
#include "prp/random.hpp"

namespace prp {

using Index = std::uint32_t;

struct Interaction {
  std::string user_raw;
  std::string item_raw;
  std::optional<std::int64_t> timestamp;
};

// Raw-id <-> dense-index bijection; dense ids are assigned in first-seen order.
class IdMap {
 public:
  Index intern(const std::string& raw) {
    auto [it, inserted] = index_.try_emplace(raw, static_cast<Index>(raw_.size()));
    if (inserted) raw_.push_back(raw);
    return it->second;
  }

  std::optional<Index> find(const std::string& raw) const {
    auto it = index_.find(raw);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& raw(Index idx) const { return raw_.at(idx); }
  std::size_t size() const { return raw_.size(); }
  const std::vector<std::string>& raws() const { return raw_; }

 private:
  std::vector<std::string> raw_;
  std::unordered_map<std::string, Index> index_;
};

enum class Split { kTrain, kValid, kTest };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "valid") return Split::kValid;
  if (name == "test") return Split::kTest;
  throw UsageError("unknown split '" + std::string(name) + "' (expected train|valid|test)");
}

struct UserItem {
  Index user = 0;
  Index item = 0;
  friend bool operator==(const UserItem&, const UserItem&) = default;
};

struct DatasetStats {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t n_interactions = 0;
  double sparsity = 0.0;
};

class InteractionStore {
 public:
  IdMap users;
  IdMap items;
  // Deduplicated dense interactions in file order.
  std::vector<UserItem> interactions;
  std::vector<std::optional<std::int64_t>> timestamps;

  // Per-user sorted item lists; empty until split() has run.
  std::vector<std::vector<Index>> train;
  std::vector<std::vector<Index>> valid;
  std::vector<std::vector<Index>> test;
  // Flat (u, i) list over train, user-major, used for uniform pair draws.
  std::vector<UserItem> train_pairs;

  std::size_t n_users() const { return users.size(); }
  std::size_t n_items() const { return items.size(); }
  bool is_split() const { return !train.empty(); }

  bool is_train_positive(Index u, Index i) const {
    const auto& row = train[u];
    return std::binary_search(row.begin(), row.end(), i);
  }

  const std::vector<std::vector<Index>>& split_lists(Split s) const {
    switch (s) {
      case Split::kTrain: return train;
      case Split::kValid: return valid;
      case Split::kTest: return test;
    }
    return train;
  }

  DatasetStats stats() const {
    DatasetStats st;
    st.n_users = n_users();
    st.n_items = n_items();
    st.n_interactions = interactions.size();
    const double cells = static_cast<double>(st.n_users) * static_cast<double>(st.n_items);
    st.sparsity = cells > 0 ? 1.0 - static_cast<double>(st.n_interactions) / cells : 0.0;
    return st;
  }

  void rebuild_train_pairs() {
    train_pairs.clear();
    for (Index u = 0; u < train.size(); ++u) {
      for (Index i : train[u]) train_pairs.push_back({u, i});
    }
  }
};

namespace detail {

inline bool is_number(std::string_view s) {
  if (s.empty()) return false;
  double v = 0;
  const char* first = s.data();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  return ec == std::errc() && ptr == s.data() + s.size();
}

inline std::vector<std::string_view> split_fields(std::string_view line, char delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  for (auto& f : out) {
    while (!f.empty() && (f.front() == ' ' || f.front() == '\r')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '\r')) f.remove_suffix(1);
  }
  return out;
}

inline std::optional<std::int64_t> parse_timestamp(std::string_view s) {
  if (s.empty()) return std::nullopt;
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return static_cast<std::int64_t>(v);
}

}  // namespace detail

struct LoadOptions {
  // Forced delimiter; auto-detected among tab/comma when empty.
  std::optional<char> delimiter;
  // RecBole atomic `.inter` header (`user_id:token item_id:token ...`).
  bool atomic = false;
};

// Parses delimiter-separated (user, item[, rating][, timestamp]) rows; duplicate
// pairs keep their first occurrence.
inline InteractionStore load_interactions(const std::filesystem::path& path, const LoadOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read interaction file: " + path.string());

  InteractionStore store;
  std::unordered_set<std::uint64_t> seen;
  std::optional<char> delim = opts.delimiter;
  std::size_t user_col = 0, item_col = 1;
  std::optional<std::size_t> ts_col;
  bool first_row = true;
  std::string line;
  std::size_t line_no = 0;

  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view(line);
    if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
    if (view.find_first_not_of(" \t") == std::string_view::npos) continue;
    if (!delim) delim = view.find('\t') != std::string_view::npos ? '\t' : ',';
    auto fields = detail::split_fields(view, *delim);

    if (first_row) {
      first_row = false;
      const bool header =
          opts.atomic || std::none_of(fields.begin(), fields.end(), [](auto f) { return detail::is_number(f); });
      if (header) {
        if (opts.atomic) {
          std::optional<std::size_t> u, i;
          for (std::size_t c = 0; c < fields.size(); ++c) {
            const auto name = fields[c].substr(0, fields[c].find(':'));
            if (name == "user_id") u = c;
            else if (name == "item_id") i = c;
            else if (name == "timestamp") ts_col = c;
          }
          if (!u || !i) {
            throw DataError("line " + std::to_string(line_no) + ": atomic header lacks user_id/item_id columns");
          }
          user_col = *u;
          item_col = *i;
        } else if (fields.size() >= 4) {
          ts_col = 3;
        }
        continue;
      }
      if (fields.size() >= 4) ts_col = 3;
    }

    const std::size_t need = std::max(user_col, item_col) + 1;
    if (fields.size() < std::max<std::size_t>(need, 2)) {
      throw DataError("line " + std::to_string(line_no) + ": expected at least " +
                      std::to_string(std::max<std::size_t>(need, 2)) + " columns, found " +
                      std::to_string(fields.size()));
    }
    const std::string user(fields[user_col]);
    const std::string item(fields[item_col]);
    if (user.empty() || item.empty()) {
      throw DataError("line " + std::to_string(line_no) + ": empty user or item field");
    }
    const Index u = store.users.intern(user);
    const Index i = store.items.intern(item);
    const std::uint64_t key = (static_cast<std::uint64_t>(u) << 32) | i;
    if (!seen.insert(key).second) continue;
    store.interactions.push_back({u, i});
    store.timestamps.push_back(ts_col && *ts_col < fields.size() ? detail::parse_timestamp(fields[*ts_col])
                                                                  : std::nullopt);
  }
  if (store.interactions.empty()) throw DataError("empty dataset");
  return store;
}

// Rebuilds dense maps over the interactions flagged in `keep`, preserving first-seen order.
inline InteractionStore compact(const InteractionStore& src, const std::vector<bool>& keep) {
  InteractionStore out;
  for (std::size_t n = 0; n < src.interactions.size(); ++n) {
    if (!keep[n]) continue;
    const auto [u, i] = src.interactions[n];
    out.interactions.push_back({out.users.intern(src.users.raw(u)), out.items.intern(src.items.raw(i))});
    out.timestamps.push_back(src.timestamps.empty() ? std::nullopt : src.timestamps[n]);
  }
  return out;
}

// Iteratively drops users and items with fewer than `min_interactions` records until a fixed point.
inline InteractionStore kcore_filter(const InteractionStore& store, std::size_t min_interactions) {
  std::vector<bool> keep(store.interactions.size(), true);
  if (min_interactions > 1) {
    std::vector<std::size_t> user_deg(store.n_users(), 0), item_deg(store.n_items(), 0);
    for (const auto& [u, i] : store.interactions) {
      ++user_deg[u];
      ++item_deg[i];
    }
    bool changed = true;
    while (changed) {
      changed = false;
      for (std::size_t n = 0; n < keep.size(); ++n) {
        if (!keep[n]) continue;
        const auto [u, i] = store.interactions[n];
        if (user_deg[u] < min_interactions || item_deg[i] < min_interactions) {
          keep[n] = false;
          --user_deg[u];
          --item_deg[i];
          changed = true;
        }
      }
    }
  }
  auto out = compact(store, keep);
  if (out.interactions.empty()) {
    throw DataError("k-core filter (min " + std::to_string(min_interactions) + ") emptied the dataset");
  }
  return out;
}

struct SplitRatios {
  double train = 0.8;
  double valid = 0.1;
  double test = 0.1;
};

// Held-out sizes for a user with n interactions: nothing is held out below 3,
// otherwise each held-out split gets max(1, floor(ratio * n)).
inline std::pair<std::size_t, std::size_t> heldout_sizes(std::size_t n, const SplitRatios& r = {}) {
  if (n < 3) return {0, 0};
  const auto take = [n](double ratio) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9)));
  };
  return {take(r.valid), take(r.test)};
}

// Per-user random partition into train/valid/test; a pure function of (store, ratios, seed).
inline InteractionStore split(InteractionStore store, const SplitRatios& ratios, std::uint64_t seed) {
  if (std::abs(ratios.train + ratios.valid + ratios.test - 1.0) > 1e-9 || ratios.train < 0 || ratios.valid < 0 ||
      ratios.test < 0) {
    throw UsageError("split ratios must be non-negative and sum to 1");
  }
  std::vector<std::vector<Index>> per_user(store.n_users());
  for (const auto& [u, i] : store.interactions) per_user[u].push_back(i);

  store.train.assign(store.n_users(), {});
  store.valid.assign(store.n_users(), {});
  store.test.assign(store.n_users(), {});
  Rng rng(seed);
  for (Index u = 0; u < per_user.size(); ++u) {
    auto& items = per_user[u];
    if (items.empty()) throw DataError("user " + store.users.raw(u) + " has no interactions");
    rng.shuffle(std::span<Index>(items));
    const auto [n_valid, n_test] = heldout_sizes(items.size(), ratios);
    auto it = items.begin();
    store.test[u].assign(it, it + static_cast<std::ptrdiff_t>(n_test));
    it += static_cast<std::ptrdiff_t>(n_test);
    store.valid[u].assign(it, it + static_cast<std::ptrdiff_t>(n_valid));
    it += static_cast<std::ptrdiff_t>(n_valid);
    store.train[u].assign(it, items.end());
    for (auto* lst : {&store.train[u], &store.valid[u], &store.test[u]}) std::sort(lst->begin(), lst->end());
  }
  store.rebuild_train_pairs();
  return store;
}

struct Batch {
  std::size_t k = 0;
  std::vector<UserItem> pairs;
  // Row-major B x k; row b holds M for pairs[b] with the positive (the noise anchor) first.
  std::vector<Index> candidates;

  std::size_t size() const { return pairs.size(); }
  std::span<const Index> candidate_set(std::size_t b) const { return {candidates.data() + b * k, k}; }
};

inline bool can_form_candidates(const InteractionStore& store, Index u, std::size_t k) {
  return store.n_items() >= store.train[u].size() + (k - 1);
}

namespace detail {

inline bool contains(std::span<const Index> xs, Index x) { return std::find(xs.begin(), xs.end(), x) != xs.end(); }

// Fills out[1..k) with items outside u's train positives; in-batch pool first,
// universe after 50*k rejected draws.
inline void fill_candidates(const InteractionStore& store, Index u, std::span<const Index> pool, std::span<Index> out,
                            Rng& rng) {
  const std::size_t k = out.size();
  std::size_t filled = 1;
  std::size_t rejected = 0;
  const std::size_t max_rejections = 50 * k;
  while (filled < k && rejected < max_rejections && !pool.empty()) {
    const Index cand = pool[rng.index(pool.size())];
    if (store.is_train_positive(u, cand) || contains(out.first(filled), cand)) {
      ++rejected;
      continue;
    }
    out[filled++] = cand;
  }
  while (filled < k) {
    const Index cand = static_cast<Index>(rng.index(store.n_items()));
    if (store.is_train_positive(u, cand) || contains(out.first(filled), cand)) continue;
    out[filled++] = cand;
  }
}

}  // namespace detail

// Builds M for each pair from the batch's positive-item pool. Pairs whose user
// has too few non-positive items are replaced by a uniform train draw.
inline Batch build_batch(const InteractionStore& store, std::vector<UserItem> pairs, std::size_t k, Rng& rng) {
  if (k < 2 || k > 10) throw UsageError("ranking length k must lie in [2, 10], got " + std::to_string(k));
  if (pairs.empty()) throw UsageError("batch size must be >= 1");
  if (!store.is_split()) throw UsageError("store must be split before sampling");

  bool any_formable = false;
  for (const auto& p : pairs) any_formable = any_formable || can_form_candidates(store, p.user, k);
  if (!any_formable) {
    for (Index u = 0; u < store.n_users() && !any_formable; ++u) {
      any_formable = !store.train[u].empty() && can_form_candidates(store, u, k);
    }
    if (!any_formable) throw DataError("no user has enough non-interacted items to form a candidate set");
  }
  for (auto& p : pairs) {
    while (!can_form_candidates(store, p.user, k)) p = store.train_pairs[rng.index(store.train_pairs.size())];
  }

  std::vector<Index> pool;
  pool.reserve(pairs.size());
  for (const auto& p : pairs) pool.push_back(p.item);
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());

  Batch batch;
  batch.k = k;
  batch.pairs = std::move(pairs);
  batch.candidates.assign(batch.pairs.size() * k, 0);
  for (std::size_t b = 0; b < batch.pairs.size(); ++b) {
    std::span<Index> row(batch.candidates.data() + b * k, k);
    row[0] = batch.pairs[b].item;
    detail::fill_candidates(store, batch.pairs[b].user, pool, row, rng);
  }
  return batch;
}

// Draws B (u, i_p) pairs uniformly from the train interactions and builds their candidate sets.
inline Batch sample_batch(const InteractionStore& store, std::size_t batch_size, std::size_t k, Rng& rng) {
  if (batch_size == 0) throw UsageError("batch size must be >= 1");
  if (store.train_pairs.empty()) throw DataError("no train interactions to sample from");
  std::vector<UserItem> pairs(batch_size);
  for (auto& p : pairs) p = store.train_pairs[rng.index(store.train_pairs.size())];
  return build_batch(store, std::move(pairs), k, rng);
}

// ---- prepared-data directory: split manifest, id maps, stats ----

inline void write_split_manifest(const InteractionStore& store, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (Index u = 0; u < store.n_users(); ++u) {
    for (Split s : {Split::kTrain, Split::kValid, Split::kTest}) {
      for (Index i : store.split_lists(s)[u]) out << u << '\t' << i << '\t' << split_name(s) << '\n';
    }
  }
}

inline void write_id_map(const IdMap& map, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (Index i = 0; i < map.size(); ++i) out << i << '\t' << map.raw(i) << '\n';
}

inline IdMap read_id_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  IdMap map;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = detail::split_fields(line, '\t');
    if (fields.size() < 2) throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed id-map row");
    const Index expect = static_cast<Index>(map.size());
    if (map.intern(std::string(fields[1])) != expect || std::to_string(expect) != fields[0]) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": id map is not dense");
    }
  }
  return map;
}

// Reassembles a split store from a prepared directory (users.tsv, items.tsv, split.tsv).
inline InteractionStore read_prepared(const std::filesystem::path& dir) {
  InteractionStore store;
  store.users = read_id_map(dir / "users.tsv");
  store.items = read_id_map(dir / "items.tsv");
  store.train.assign(store.n_users(), {});
  store.valid.assign(store.n_users(), {});
  store.test.assign(store.n_users(), {});

  const auto path = dir / "split.tsv";
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = detail::split_fields(line, '\t');
    const auto where = path.string() + ":" + std::to_string(line_no);
    if (fields.size() != 3) throw DataError(where + ": expected user_idx, item_idx, split");
    Index u = 0, i = 0;
    auto r1 = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), u);
    auto r2 = std::from_chars(fields[1].data(), fields[1].data() + fields[1].size(), i);
    if (r1.ec != std::errc() || r2.ec != std::errc() || u >= store.n_users() || i >= store.n_items()) {
      throw DataError(where + ": index out of range");
    }
    Split s;
    try {
      s = parse_split(fields[2]);
    } catch (const UsageError& e) {
      throw DataError(where + ": " + e.what());
    }
    store.interactions.push_back({u, i});
    store.timestamps.push_back(std::nullopt);
    switch (s) {
      case Split::kTrain: store.train[u].push_back(i); break;
      case Split::kValid: store.valid[u].push_back(i); break;
      case Split::kTest: store.test[u].push_back(i); break;
    }
  }
  for (Index u = 0; u < store.n_users(); ++u) {
    if (store.train[u].empty()) throw DataError("user " + std::to_string(u) + " has no train items");
    for (auto* lst : {&store.train[u], &store.valid[u], &store.test[u]}) std::sort(lst->begin(), lst->end());
  }
  store.rebuild_train_pairs();
  return store;
}

}  // namespace prp
