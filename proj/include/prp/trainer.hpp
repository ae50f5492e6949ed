#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <type_traits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prp/checkpoint.hpp"
#include "prp/datastore.hpp"
#include "prp/evaluator.hpp"
#include "prp/objective.hpp"
#include "prp/tensor.hpp"

namespace prp {

struct Ablations {
  bool no_ranker = false;
  bool no_lp = false;
  bool no_confidence = false;
};

struct TrainConfig {
  std::size_t embedding_dim = 64;
  double lr = 1e-3;
  double l2 = 1e-4;
  std::size_t batch_size = 1024;
  std::size_t k = 4;
  double beta = 0.3;
  Thetas thetas{0.0, 0.01, 0.1};
  std::size_t bins = kDefaultBins;
  std::size_t epochs = 30;
  std::size_t eval_every = 1;
  std::size_t patience = 10;
  std::uint64_t seed = 2024;
  LossMode loss_mode = LossMode::kPrp;
  Ablations ablations;
  bool confidence_on_lp = true;
  bool pin_positive = true;

  // k as actually trained: BPR always compares one positive with one negative.
  std::size_t effective_k() const { return loss_mode == LossMode::kBpr ? 2 : k; }

  void validate() const {
    if (embedding_dim == 0) throw UsageError("config: embedding_dim must be >= 1");
    if (!(lr >= 0.0) || !(l2 >= 0.0)) throw UsageError("config: lr and l2 must be >= 0");
    if (batch_size == 0) throw UsageError("config: batch_size must be >= 1");
    if (k < 2 || k > 10) throw UsageError("config: k must lie in [2, 10]");
    if (!(beta >= 0.0)) throw UsageError("config: beta must be >= 0");
    if (bins == 0) throw UsageError("config: bins must be >= 1");
    if (eval_every == 0) throw UsageError("config: eval_every must be >= 1");
    check_thetas(thetas);
  }

  ObjectiveOptions objective() const {
    ObjectiveOptions o;
    o.mode = loss_mode;
    o.beta = beta;
    o.thetas = thetas;
    o.bins = bins;
    o.use_ranker = !ablations.no_ranker;
    o.use_lp = !ablations.no_lp;
    o.use_confidence = !ablations.no_confidence;
    o.confidence_on_lp = confidence_on_lp;
    o.pin_positive = pin_positive || ablations.no_ranker;
    return o;
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"embedding_dim", c.embedding_dim},
          {"lr", c.lr},
          {"l2", c.l2},
          {"batch_size", c.batch_size},
          {"k", c.k},
          {"beta", c.beta},
          {"thetas", c.thetas},
          {"bins", c.bins},
          {"epochs", c.epochs},
          {"eval_every", c.eval_every},
          {"patience", c.patience},
          {"seed", c.seed},
          {"loss_mode", c.loss_mode == LossMode::kPrp ? "prp" : "bpr"},
          {"ablations",
           {{"no_ranker", c.ablations.no_ranker},
            {"no_lp", c.ablations.no_lp},
            {"no_confidence", c.ablations.no_confidence}}},
          {"confidence_on_lp", c.confidence_on_lp},
          {"pin_positive", c.pin_positive}};
}

// Strict parse: unknown keys and wrongly typed values are rejected by name.
inline TrainConfig parse_train_config(const nlohmann::json& j) {
  if (!j.is_object()) throw UsageError("config: top level must be a JSON object");
  static const std::set<std::string> known = {"embedding_dim", "lr",         "l2",        "batch_size", "k",
                                              "beta",          "thetas",     "bins",      "epochs",     "eval_every",
                                              "patience",      "seed",       "loss_mode", "ablations",  "confidence_on_lp",
                                              "pin_positive"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw UsageError("config: unknown key '" + key + "'");
  }
  TrainConfig c;
  const auto read = [&j](const char* key, auto& field) {
    if (!j.contains(key)) return;
    using T = std::decay_t<decltype(field)>;
    const auto& v = j.at(key);
    const bool ok = std::is_same_v<T, bool> ? v.is_boolean()
                    : std::is_integral_v<T> ? v.is_number_integer() && v.template get<std::int64_t>() >= 0
                                            : v.is_number();
    if (!ok) throw UsageError(std::string("config: invalid value for '") + key + "'");
    field = v.get<T>();
  };
  read("embedding_dim", c.embedding_dim);
  read("lr", c.lr);
  read("l2", c.l2);
  read("batch_size", c.batch_size);
  read("k", c.k);
  read("beta", c.beta);
  read("bins", c.bins);
  read("epochs", c.epochs);
  read("eval_every", c.eval_every);
  read("patience", c.patience);
  read("seed", c.seed);
  read("confidence_on_lp", c.confidence_on_lp);
  read("pin_positive", c.pin_positive);
  if (j.contains("thetas")) {
    const auto& t = j.at("thetas");
    if (!t.is_array() || t.size() != 3) throw UsageError("config: invalid value for 'thetas' (need 3 numbers)");
    for (std::size_t m = 0; m < 3; ++m) {
      if (!t[m].is_number()) throw UsageError("config: invalid value for 'thetas'");
      c.thetas[m] = t[m].get<double>();
    }
  }
  if (j.contains("loss_mode")) {
    const auto& m = j.at("loss_mode");
    if (m == "prp") c.loss_mode = LossMode::kPrp;
    else if (m == "bpr") c.loss_mode = LossMode::kBpr;
    else throw UsageError("config: invalid value for 'loss_mode' (expected prp|bpr)");
  }
  if (j.contains("ablations")) {
    const auto& a = j.at("ablations");
    if (!a.is_object()) throw UsageError("config: invalid value for 'ablations'");
    for (const auto& [key, val] : a.items()) {
      bool* target = key == "no_ranker"       ? &c.ablations.no_ranker
                     : key == "no_lp"         ? &c.ablations.no_lp
                     : key == "no_confidence" ? &c.ablations.no_confidence
                                              : nullptr;
      if (!target) throw UsageError("config: unknown key 'ablations." + key + "'");
      if (!val.is_boolean()) throw UsageError("config: invalid value for 'ablations." + key + "'");
      *target = val.get<bool>();
    }
  }
  c.validate();
  return c;
}

// Reads a JSON config file; PRP_SEED in the environment overrides `seed`.
inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config: malformed JSON: " + std::string(e.what()));
  }
  auto cfg = parse_train_config(j);
  if (const char* env = std::getenv("PRP_SEED"); env && *env) {
    char* end = nullptr;
    const auto v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw UsageError("PRP_SEED must be an unsigned integer");
    cfg.seed = v;
  }
  return cfg;
}

// Per-step telemetry CSV; every field is a deterministic function of (config, data).
inline constexpr const char* kTelemetryHeader = "epoch,step,l_rank,l_p,l_total,mean_alpha,alpha_hist";

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  BatchOutputs outputs;
};

inline std::string telemetry_row(const StepRecord& r) {
  std::string hist;
  for (std::size_t b = 0; b < r.outputs.main_profile.counts.size(); ++b) {
    if (b) hist += ';';
    hist += std::to_string(r.outputs.main_profile.counts[b]);
  }
  return std::to_string(r.epoch) + ',' + std::to_string(r.step) + ',' + fmt_double(r.outputs.main_loss) + ',' +
         fmt_double(r.outputs.noise_loss) + ',' + fmt_double(r.outputs.total) + ',' +
         fmt_double(r.outputs.main_profile.mean_alpha()) + ',' + hist;
}

struct TrainState {
  std::size_t epoch = 0;
  std::size_t global_step = 0;
  double best_valid_ndcg = -1.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_since_improvement = 0;
  Rng sampling;
  Rng order;
  Rng noise;
  std::ostream* telemetry = nullptr;

  explicit TrainState(std::uint64_t seed) {
    Rng root(seed);
    sampling = root.fork(1);
    order = root.fork(2);
    noise = root.fork(3);
  }
};

// Builds a model with parameters drawn from the config seed's init stream.
inline std::unique_ptr<PrpModel> make_model(const TrainConfig& cfg, const InteractionStore& store) {
  auto model = std::make_unique<PrpModel>(store.n_users(), store.n_items(), cfg.embedding_dim);
  Rng root(cfg.seed);
  Rng init = root.fork(0);
  model->init(init);
  return model;
}

struct EpochTelemetry {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double main_loss = 0;
  double noise_loss = 0;
  double total = 0;
  double mean_alpha = 0;
  double wall_seconds = 0;
};

// One optimizer step on one batch: pseudo-rank, evaluate, backprop, Adam.
inline BatchOutputs train_step(TrainState& state, const TrainConfig& cfg, const InteractionStore& store,
                               PrpModel& model, std::vector<UserItem> pairs) {
  const auto opts = cfg.objective();
  Batch batch = build_batch(store, std::move(pairs), cfg.effective_k(), state.sampling);
  const StepPlan plan = plan_step(model, std::move(batch), opts, state.order, state.noise);
  model.params().zero_grad();
  auto out = evaluate_objective(model, plan, opts);
  if (!std::isfinite(out.total)) {
    throw NumericError("non-finite loss at epoch " + std::to_string(state.epoch) + " step " +
                       std::to_string(state.global_step) + " (l_rank=" + fmt_double(out.main_loss) +
                       ", l_p=" + fmt_double(out.noise_loss) + ")");
  }
  adam_step(model.params(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.l2});
  ++state.global_step;
  return out;
}

// A pass over the train interactions in a fresh random order, one Adam step per batch.
inline EpochTelemetry train_epoch(TrainState& state, const TrainConfig& cfg, const InteractionStore& store,
                                  PrpModel& model) {
  const auto t0 = std::chrono::steady_clock::now();
  ++state.epoch;
  std::vector<UserItem> order = store.train_pairs;
  state.sampling.shuffle(std::span<UserItem>(order));

  EpochTelemetry tel;
  tel.epoch = state.epoch;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const auto end = std::min(order.size(), start + cfg.batch_size);
    std::vector<UserItem> pairs(order.begin() + static_cast<std::ptrdiff_t>(start),
                                order.begin() + static_cast<std::ptrdiff_t>(end));
    const auto out = train_step(state, cfg, store, model, std::move(pairs));
    ++tel.steps;
    tel.main_loss += out.main_loss;
    tel.noise_loss += out.noise_loss;
    tel.total += out.total;
    tel.mean_alpha += out.main_profile.mean_alpha();
    if (state.telemetry) *state.telemetry << telemetry_row({state.epoch, tel.steps, out}) << '\n';
  }
  if (tel.steps) {
    const double inv = 1.0 / static_cast<double>(tel.steps);
    tel.main_loss *= inv;
    tel.noise_loss *= inv;
    tel.total *= inv;
    tel.mean_alpha *= inv;
  }
  tel.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return tel;
}

inline constexpr std::size_t kSelectionK = 10;
inline constexpr std::size_t kReportKs[] = {10, 20};

struct EvalRecord {
  std::size_t epoch = 0;
  EpochTelemetry train;
  EvalResult valid;
};

struct FitResult {
  std::unique_ptr<PrpModel> model;  // restored to the best-validation parameters
  std::size_t best_epoch = 0;
  double best_valid_ndcg = 0;
  std::vector<EvalRecord> history;
  std::vector<EpochTelemetry> epochs;
  EvalResult test;
  bool early_stopped = false;
};

// Trains until the epoch budget or early stop (NDCG@10 on valid, `patience`
// evaluations without strict improvement) and evaluates the best parameters on test.
inline FitResult fit(const TrainConfig& cfg, const InteractionStore& store, std::ostream* telemetry = nullptr,
                     std::ostream* log = nullptr) {
  cfg.validate();
  FitResult res;
  res.model = make_model(cfg, store);
  TrainState state(cfg.seed);
  state.telemetry = telemetry;
  if (telemetry) *telemetry << kTelemetryHeader << '\n';

  std::vector<Buffer> best;
  const auto snapshot = [&] {
    best.clear();
    for (const auto& t : res.model->params().tensors()) best.push_back(t.values);
  };

  if (cfg.epochs == 0) {
    EvalRecord rec;
    rec.valid = evaluate(*res.model, store, Split::kValid, kReportKs);
    res.best_valid_ndcg = rec.valid.at(kSelectionK).ndcg;
    res.history.push_back(std::move(rec));
  }
  snapshot();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    auto tel = train_epoch(state, cfg, store, *res.model);
    res.epochs.push_back(tel);
    if (state.epoch % cfg.eval_every != 0 && e + 1 != cfg.epochs) continue;
    EvalRecord rec{state.epoch, tel, evaluate(*res.model, store, Split::kValid, kReportKs)};
    const double ndcg = rec.valid.at(kSelectionK).ndcg;
    if (log) {
      *log << "epoch " << state.epoch << "  loss " << fmt_double(tel.total) << "  valid ndcg@10 " << ndcg << "  ("
           << tel.wall_seconds << " s)\n";
    }
    res.history.push_back(std::move(rec));
    if (ndcg > state.best_valid_ndcg) {
      state.best_valid_ndcg = ndcg;
      state.best_epoch = state.epoch;
      state.epochs_since_improvement = 0;
      snapshot();
    } else if (++state.epochs_since_improvement >= cfg.patience) {
      res.early_stopped = true;
      break;
    }
  }
  if (cfg.epochs > 0) {
    res.best_epoch = state.best_epoch;
    res.best_valid_ndcg = state.best_valid_ndcg;
  }
  auto& tensors = res.model->params().tensors();
  for (std::size_t n = 0; n < tensors.size(); ++n) tensors[n].values = best[n];
  res.test = evaluate(*res.model, store, Split::kTest, kReportKs);
  return res;
}

inline nlohmann::json history_json(const FitResult& r, std::uint64_t seed) {
  auto evals = nlohmann::json::array();
  for (const auto& rec : r.history) {
    evals.push_back({{"epoch", rec.epoch},
                     {"train_l_rank", rec.train.main_loss},
                     {"train_l_p", rec.train.noise_loss},
                     {"train_l_total", rec.train.total},
                     {"mean_alpha", rec.train.mean_alpha},
                     {"valid", to_json(rec.valid, seed, rec.epoch)}});
  }
  return {{"best_epoch", r.best_epoch},
          {"best_valid_ndcg@10", r.best_valid_ndcg},
          {"early_stopped", r.early_stopped},
          {"evaluations", evals}};
}

// Writes checkpoint/, telemetry is streamed separately; history.json,
// test_metrics.json and the non-deterministic timing.json go beside it.
inline void write_run(const FitResult& r, const TrainConfig& cfg, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  save_checkpoint(*r.model, out_dir / "checkpoint", {to_json(cfg), cfg.seed, r.best_epoch});
  std::ofstream(out_dir / "history.json") << history_json(r, cfg.seed).dump(2) << '\n';
  std::ofstream(out_dir / "test_metrics.json") << to_json(r.test, cfg.seed, r.best_epoch).dump(2) << '\n';
  auto timing = nlohmann::json::array();
  for (const auto& e : r.epochs) timing.push_back({{"epoch", e.epoch}, {"steps", e.steps}, {"wall_seconds", e.wall_seconds}});
  std::ofstream(out_dir / "timing.json") << timing.dump(2) << '\n';
}

}  // namespace prp
