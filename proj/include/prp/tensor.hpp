#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "prp/error.hpp"
#include "prp/random.hpp"

namespace prp {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;
// Aligned storage keeps Eigen's vectorized reductions, and so the rounding,
// independent of where the heap places a buffer.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

// A learnable tensor with its gradient accumulator and Adam moments. All four
// buffers always share `shape`. Rank-1 tensors are viewed as 1 x n matrices.
struct ParameterTensor {
  std::string name;
  std::vector<std::size_t> shape;
  Buffer values;
  Buffer grad;
  Buffer adam_m;
  Buffer adam_v;
  std::uint64_t step_count = 0;
  // Bumped on every in-place update so stale backprop tapes can be detected.
  std::uint64_t version = 0;

  ParameterTensor(std::string n, std::vector<std::size_t> s) : name(std::move(n)), shape(std::move(s)) {
    const std::size_t count = numel();
    values.assign(count, 0.0);
    grad.assign(count, 0.0);
    adam_m.assign(count, 0.0);
    adam_v.assign(count, 0.0);
  }

  std::size_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }
  std::size_t rows() const { return shape.size() == 1 ? 1 : shape[0]; }
  std::size_t cols() const { return shape.back(); }

  MatMap value_mat() { return {values.data(), Eigen::Index(rows()), Eigen::Index(cols())}; }
  ConstMatMap value_mat() const { return {values.data(), Eigen::Index(rows()), Eigen::Index(cols())}; }
  MatMap grad_mat() { return {grad.data(), Eigen::Index(rows()), Eigen::Index(cols())}; }

  std::span<double> row(std::size_t r) { return {values.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols(), cols()}; }
  std::span<double> grad_row(std::size_t r) { return {grad.data() + r * cols(), cols()}; }

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

// Owns every learnable tensor of a model; references stay valid across add().
class ParameterStore {
 public:
  ParameterTensor& add(const std::string& name, std::vector<std::size_t> shape) {
    if (index_.count(name)) throw UsageError("duplicate parameter tensor '" + name + "'");
    index_[name] = tensors_.size();
    return tensors_.emplace_back(name, std::move(shape));
  }

  ParameterTensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter tensor '" + name + "'");
    return tensors_[it->second];
  }
  const ParameterTensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter tensor '" + name + "'");
    return tensors_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::deque<ParameterTensor>& tensors() { return tensors_; }
  const std::deque<ParameterTensor>& tensors() const { return tensors_; }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

 private:
  std::deque<ParameterTensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

inline double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

inline void xavier_init(ParameterTensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  if (fan_in == 0 || fan_out == 0) throw UsageError("xavier_init: fan_in and fan_out must be >= 1");
  const double bound = xavier_bound(fan_in, fan_out);
  for (double& v : t.values) v = rng.uniform(-bound, bound);
  ++t.version;
}

enum class Activation { kRelu, kIdentity };

// One hidden layer, linear output: y = W2 act(W1 x + b1) + b2. Weights are
// stored (out x in) so a batch X (N x in) maps to X W^T.
class Mlp {
 public:
  struct Tape {
    const Mlp* owner = nullptr;
    std::uint64_t versions[4] = {0, 0, 0, 0};
    Mat input;
    Mat pre_activation;
    Mat hidden;
  };

  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& prefix, std::size_t in_dim, std::size_t hidden_dim,
      std::size_t out_dim, Activation act = Activation::kRelu)
      : w1_(&store.add(prefix + ".w1", {hidden_dim, in_dim})),
        b1_(&store.add(prefix + ".b1", {hidden_dim})),
        w2_(&store.add(prefix + ".w2", {out_dim, hidden_dim})),
        b2_(&store.add(prefix + ".b2", {out_dim})),
        act_(act) {}

  std::size_t in_dim() const { return w1_->cols(); }
  std::size_t hidden_dim() const { return w1_->rows(); }
  std::size_t out_dim() const { return w2_->rows(); }
  Activation activation() const { return act_; }

  ParameterTensor& w1() { return *w1_; }
  ParameterTensor& b1() { return *b1_; }
  ParameterTensor& w2() { return *w2_; }
  ParameterTensor& b2() { return *b2_; }
  const ParameterTensor& w1() const { return *w1_; }
  const ParameterTensor& b1() const { return *b1_; }
  const ParameterTensor& w2() const { return *w2_; }
  const ParameterTensor& b2() const { return *b2_; }

  // Biases zero, weights Xavier-uniform.
  void init(Rng& rng) {
    xavier_init(*w1_, in_dim(), hidden_dim(), rng);
    xavier_init(*w2_, hidden_dim(), out_dim(), rng);
    std::fill(b1_->values.begin(), b1_->values.end(), 0.0);
    std::fill(b2_->values.begin(), b2_->values.end(), 0.0);
  }

  Mat forward(const Mat& x, Tape* tape = nullptr) const {
    if (static_cast<std::size_t>(x.cols()) != in_dim()) {
      throw UsageError("mlp forward: input width " + std::to_string(x.cols()) + " != " + std::to_string(in_dim()));
    }
    Mat z = x * w1_->value_mat().transpose();
    z.rowwise() += b1_->value_mat().row(0);
    Mat h = act_ == Activation::kRelu ? Mat(z.cwiseMax(0.0)) : z;
    Mat y = h * w2_->value_mat().transpose();
    y.rowwise() += b2_->value_mat().row(0);
    if (tape) {
      tape->owner = this;
      tape->versions[0] = w1_->version;
      tape->versions[1] = b1_->version;
      tape->versions[2] = w2_->version;
      tape->versions[3] = b2_->version;
      tape->input = x;
      tape->pre_activation = std::move(z);
      tape->hidden = std::move(h);
    }
    return y;
  }

  // Accumulates parameter gradients (+=) and returns dL/dx.
  Mat backward(const Tape& tape, const Mat& grad_out) {
    if (tape.owner != this || tape.versions[0] != w1_->version || tape.versions[1] != b1_->version ||
        tape.versions[2] != w2_->version || tape.versions[3] != b2_->version) {
      throw UsageError("mlp backward: stale or foreign tape");
    }
    if (static_cast<std::size_t>(grad_out.cols()) != out_dim() || grad_out.rows() != tape.input.rows()) {
      throw UsageError("mlp backward: output gradient shape mismatch");
    }
    w2_->grad_mat().noalias() += grad_out.transpose() * tape.hidden;
    b2_->grad_mat().row(0) += grad_out.colwise().sum();
    Mat dh = grad_out * w2_->value_mat();
    if (act_ == Activation::kRelu) dh = dh.cwiseProduct((tape.pre_activation.array() > 0.0).cast<double>().matrix());
    w1_->grad_mat().noalias() += dh.transpose() * tape.input;
    b1_->grad_mat().row(0) += dh.colwise().sum();
    return dh * w1_->value_mat();
  }

 private:
  ParameterTensor* w1_ = nullptr;
  ParameterTensor* b1_ = nullptr;
  ParameterTensor* w2_ = nullptr;
  ParameterTensor* b2_ = nullptr;
  Activation act_ = Activation::kRelu;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Coupled L2: added to the gradient before the moment updates.
  double l2 = 0.0;
};

// One Adam update over every tensor, then zeroes the gradients. A non-finite
// gradient aborts before any tensor is touched.
inline void adam_step(ParameterStore& params, const AdamConfig& cfg) {
  for (const auto& t : params.tensors()) {
    for (std::size_t n = 0; n < t.grad.size(); ++n) {
      if (!std::isfinite(t.grad[n])) {
        throw NumericError("non-finite gradient in tensor '" + t.name + "' at flat index " + std::to_string(n));
      }
    }
  }
  for (auto& t : params.tensors()) {
    ++t.step_count;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t.step_count));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t.step_count));
    for (std::size_t n = 0; n < t.values.size(); ++n) {
      const double g = t.grad[n] + cfg.l2 * t.values[n];
      t.adam_m[n] = cfg.beta1 * t.adam_m[n] + (1.0 - cfg.beta1) * g;
      t.adam_v[n] = cfg.beta2 * t.adam_v[n] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = t.adam_m[n] / bc1;
      const double v_hat = t.adam_v[n] / bc2;
      t.values[n] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
    ++t.version;
    t.zero_grad();
  }
}

struct FiniteDiffOptions {
  double h = 1e-5;
  double tol = 1e-4;
  std::size_t min_coordinates = 200;
  // Relative error uses max(|analytic|, |numeric|, abs_floor) as denominator.
  double abs_floor = 1e-6;
  std::uint64_t seed = 0;
};

struct FiniteDiffEntry {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_err = 0;
};

struct FiniteDiffReport {
  std::vector<FiniteDiffEntry> entries;
  double max_rel_err = 0;
  FiniteDiffEntry worst;
  std::map<std::string, std::size_t> per_tensor;
  bool passed = false;
};

// `loss_fn(true)` must accumulate analytic gradients into the store; `loss_fn(false)`
// only evaluates. Coordinates are stratified across tensors, preferring ones
// the loss actually touches.
inline FiniteDiffReport finite_diff_check(const std::function<double(bool)>& loss_fn, ParameterStore& params,
                                          const FiniteDiffOptions& opts = {}) {
  if (!(opts.h > 0.0) || !std::isfinite(opts.h)) throw UsageError("finite_diff_check: step h must be positive");
  params.zero_grad();
  loss_fn(true);

  struct Coord {
    ParameterTensor* t;
    std::size_t idx;
  };
  Rng rng(opts.seed);
  std::vector<std::vector<Coord>> buckets;
  for (auto& t : params.tensors()) {
    std::vector<Coord> touched, all;
    for (std::size_t n = 0; n < t.numel(); ++n) {
      (t.grad[n] != 0.0 ? touched : all).push_back({&t, n});
    }
    auto& pick = touched.empty() ? all : touched;
    if (!pick.empty()) {
      rng.shuffle(std::span<Coord>(pick));
      buckets.push_back(std::move(pick));
    }
  }
  std::vector<Coord> chosen;
  for (std::size_t round = 0; chosen.size() < opts.min_coordinates; ++round) {
    bool any = false;
    for (auto& b : buckets) {
      if (round < b.size()) {
        chosen.push_back(b[round]);
        any = true;
      }
    }
    if (!any) break;
  }

  std::vector<double> analytic;
  analytic.reserve(chosen.size());
  for (const auto& c : chosen) analytic.push_back(c.t->grad[c.idx]);
  params.zero_grad();

  FiniteDiffReport report;
  for (std::size_t n = 0; n < chosen.size(); ++n) {
    auto& [t, idx] = chosen[n];
    const double orig = t->values[idx];
    t->values[idx] = orig + opts.h;
    const double up = loss_fn(false);
    t->values[idx] = orig - opts.h;
    const double down = loss_fn(false);
    t->values[idx] = orig;
    FiniteDiffEntry e{t->name, idx, analytic[n], (up - down) / (2.0 * opts.h), 0.0};
    e.rel_err = std::abs(e.analytic - e.numeric) / std::max({std::abs(e.analytic), std::abs(e.numeric), opts.abs_floor});
    if (!std::isfinite(e.rel_err)) e.rel_err = INFINITY;
    if (report.entries.empty() || e.rel_err > report.max_rel_err) {
      report.max_rel_err = e.rel_err;
      report.worst = e;
    }
    ++report.per_tensor[e.tensor];
    report.entries.push_back(std::move(e));
  }
  report.passed = !report.entries.empty() && report.max_rel_err < opts.tol;
  return report;
}

}  // namespace prp
