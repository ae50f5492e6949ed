#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "prp/datastore.hpp"
#include "prp/random.hpp"

namespace prp::test {

// Fresh scratch directory under the build tree, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("prp_test_" + tag + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  static int& counter() {
    static int n = 0;
    return n;
  }
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Unsplit store from (user, item) raw pairs.
inline InteractionStore store_from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs) {
  InteractionStore s;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& [u, i] : pairs) {
    if (!seen.insert({u, i}).second) continue;
    s.interactions.push_back({s.users.intern(u), s.items.intern(i)});
    s.timestamps.push_back(std::nullopt);
  }
  return s;
}

// Split store with explicitly given per-user train/valid/test lists.
inline InteractionStore manual_store(std::size_t n_items, const std::vector<std::vector<Index>>& train,
                                     const std::vector<std::vector<Index>>& valid = {},
                                     const std::vector<std::vector<Index>>& test = {}) {
  InteractionStore s;
  for (std::size_t u = 0; u < train.size(); ++u) s.users.intern("u" + std::to_string(u));
  for (std::size_t i = 0; i < n_items; ++i) s.items.intern("i" + std::to_string(i));
  s.train = train;
  s.valid = valid.empty() ? std::vector<std::vector<Index>>(train.size()) : valid;
  s.test = test.empty() ? std::vector<std::vector<Index>>(train.size()) : test;
  for (std::size_t u = 0; u < train.size(); ++u) {
    for (auto* lst : {&s.train[u], &s.valid[u], &s.test[u]}) {
      std::sort(lst->begin(), lst->end());
      for (Index i : *lst) s.interactions.push_back({static_cast<Index>(u), i});
    }
  }
  s.timestamps.assign(s.interactions.size(), std::nullopt);
  s.rebuild_train_pairs();
  return s;
}

// Random split store: each user gets `per_user` distinct items out of `n_items`.
inline InteractionStore random_store(std::size_t n_users, std::size_t n_items, std::size_t per_user,
                                     std::uint64_t seed) {
  Rng rng(seed);
  InteractionStore s;
  for (std::size_t u = 0; u < n_users; ++u) {
    const Index uu = s.users.intern("u" + std::to_string(u));
    std::vector<Index> mine;
    while (mine.size() < per_user) {
      const auto i = static_cast<Index>(rng.index(n_items));
      if (std::find(mine.begin(), mine.end(), i) == mine.end()) mine.push_back(i);
    }
    for (Index i : mine) {
      s.interactions.push_back({uu, s.items.intern("i" + std::to_string(i))});
      s.timestamps.push_back(std::nullopt);
    }
  }
  return split(std::move(s), {}, seed);
}

}  // namespace prp::test
