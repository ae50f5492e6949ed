// prp: prepare data, train PRP/BPR models, evaluate checkpoints, run the theory
// checks and summarize runs.
//
// Exit codes: 0 success, 2 usage/config error, 3 data/checkpoint error,
// 4 verification failure.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <array>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include <nlohmann/json.hpp>

#include "prp/checkpoint.hpp"
#include "prp/datastore.hpp"
#include "prp/evaluator.hpp"
#include "prp/oracle.hpp"
#include "prp/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json stats_json(const prp::DatasetStats& s) {
  return {{"n_users", s.n_users}, {"n_items", s.n_items}, {"n_interactions", s.n_interactions}, {"sparsity", s.sparsity}};
}

struct PrepareArgs {
  std::string input, output, delimiter;
  std::size_t min_core = 5;
  std::uint64_t seed = 42;
  bool atomic = false;
};

int run_prepare(const PrepareArgs& a) {
  if (!fs::exists(a.input)) throw prp::UsageError("input file not found: " + a.input);
  prp::LoadOptions opts;
  opts.atomic = a.atomic;
  if (a.delimiter == "tab") opts.delimiter = '\t';
  else if (a.delimiter == "comma") opts.delimiter = ',';
  else if (!a.delimiter.empty()) throw prp::UsageError("--delimiter must be tab or comma");

  const auto raw = prp::load_interactions(a.input, opts);
  const auto filtered = prp::kcore_filter(raw, a.min_core);
  const auto store = prp::split(filtered, {}, a.seed);

  fs::create_directories(a.output);
  const fs::path out(a.output);
  prp::write_split_manifest(store, out / "split.tsv");
  prp::write_id_map(store.users, out / "users.tsv");
  prp::write_id_map(store.items, out / "items.tsv");

  std::size_t n_train = 0, n_valid = 0, n_test = 0;
  for (std::size_t u = 0; u < store.n_users(); ++u) {
    n_train += store.train[u].size();
    n_valid += store.valid[u].size();
    n_test += store.test[u].size();
  }
  const json stats = {{"input", a.input},
                      {"min_core", a.min_core},
                      {"seed", a.seed},
                      {"ratios", {0.8, 0.1, 0.1}},
                      {"raw", stats_json(raw.stats())},
                      {"filtered", stats_json(store.stats())},
                      {"split_sizes", {{"train", n_train}, {"valid", n_valid}, {"test", n_test}}}};
  std::ofstream(out / "stats.json") << stats.dump(2) << '\n';

  const auto rs = raw.stats(), fs_ = store.stats();
  std::cout << "raw:      " << rs.n_users << " users, " << rs.n_items << " items, " << rs.n_interactions
            << " interactions\n"
            << "filtered: " << fs_.n_users << " users, " << fs_.n_items << " items, " << fs_.n_interactions
            << " interactions (sparsity " << std::fixed << std::setprecision(2) << 100.0 * fs_.sparsity << "%)\n"
            << "split:    " << n_train << " / " << n_valid << " / " << n_test << " -> " << a.output << '\n';
  return 0;
}

struct TrainArgs {
  std::string config, data, out;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  const auto cfg = prp::load_train_config(a.config);
  const auto store = prp::read_prepared(a.data);
  fs::create_directories(a.out);
  std::ofstream telemetry(fs::path(a.out) / "telemetry.csv");
  const auto result = prp::fit(cfg, store, &telemetry, a.quiet ? nullptr : &std::cout);
  telemetry.close();
  prp::write_run(result, cfg, a.out);
  std::cout << "best epoch " << result.best_epoch << "  valid NDCG@10 " << result.best_valid_ndcg << '\n';
  for (const auto& row : result.test.rows) {
    std::cout << "test @" << row.K << "  HR " << row.hr << "  Recall " << row.recall << "  NDCG " << row.ndcg << '\n';
  }
  return 0;
}

struct EvaluateArgs {
  std::string checkpoint, data, split = "test", ks = "10,20", output;
};

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> ks;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t pos = 0;
      const long v = std::stol(tok, &pos);
      if (pos != tok.size() || v <= 0) throw std::invalid_argument(tok);
      ks.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw prp::UsageError("--k expects a comma-separated list of positive integers, got '" + s + "'");
    }
  }
  if (ks.empty()) throw prp::UsageError("--k list is empty");
  return ks;
}

int run_evaluate(const EvaluateArgs& a) {
  const auto split = prp::parse_split(a.split);
  const auto ks = parse_ks(a.ks);
  const auto ckpt = prp::load_checkpoint(a.checkpoint);
  const auto store = prp::read_prepared(a.data);
  const auto result = prp::evaluate(*ckpt.model, store, split, ks);
  const auto out = prp::to_json(result, ckpt.manifest.value("seed", std::uint64_t{0}),
                                ckpt.manifest.value("epoch", std::size_t{0}));
  if (!a.output.empty()) std::ofstream(a.output) << out.dump(2) << '\n';
  std::cout << out.dump(2) << '\n';
  return 0;
}

struct VerifyArgs {
  bool strict_timing = false;
  bool skip_timing = false;
  std::string report;
  std::uint64_t seed = 20240901;
  bool inject_failure = false;
};

int run_verify(const VerifyArgs& a) {
  prp::VerifyOptions opts;
  opts.seed = a.seed;
  opts.strict_timing = a.strict_timing;
  opts.skip_timing = a.skip_timing;
  if (a.inject_failure) opts.inject_failure = 1e-6;
  const auto reports = prp::run_all_checks(opts);

  bool failed = false;
  json all = json::array();
  std::cout << std::left << std::setw(30) << "check" << std::setw(11) << "instances" << std::setw(14) << "max_dev"
            << "result\n";
  for (const auto& r : reports) {
    const char* verdict = r.passed ? "PASS" : (r.advisory ? "WARN (advisory)" : "FAIL");
    std::cout << std::left << std::setw(30) << r.name << std::setw(11) << r.instances << std::setw(14)
              << std::setprecision(3) << std::scientific << r.max_deviation << std::defaultfloat << verdict << '\n';
    if (!r.passed && !r.advisory) {
      failed = true;
      std::cout << "  counterexample (seed " << r.seed << "): " << r.counterexample.dump() << '\n';
    }
    all.push_back(prp::to_json(r));
  }
  if (!a.report.empty()) std::ofstream(a.report) << all.dump(2) << '\n';
  return failed ? static_cast<int>(prp::ExitCode::kVerification) : 0;
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::string output;
};

// Mean and sample standard deviation of the test metrics across run directories.
int run_report(const ReportArgs& a) {
  std::map<std::size_t, std::vector<std::array<double, 3>>> by_k;
  for (const auto& dir : a.runs) {
    const auto path = fs::path(dir) / "test_metrics.json";
    std::ifstream in(path);
    if (!in) throw prp::DataError("cannot read " + path.string());
    json rows;
    try {
      rows = json::parse(in);
      for (const auto& row : rows) {
        by_k[row.at("K").get<std::size_t>()].push_back(
            {row.at("hr").get<double>(), row.at("recall").get<double>(), row.at("ndcg").get<double>()});
      }
    } catch (const json::exception& e) {
      throw prp::DataError("malformed " + path.string() + ": " + e.what());
    }
  }
  json summary = json::array();
  std::cout << std::left << std::setw(6) << "K" << std::setw(24) << "HR" << std::setw(24) << "Recall" << "NDCG\n";
  for (const auto& [K, vals] : by_k) {
    std::array<double, 3> mean{}, sd{};
    for (const auto& v : vals) {
      for (int m = 0; m < 3; ++m) mean[m] += v[m] / static_cast<double>(vals.size());
    }
    for (const auto& v : vals) {
      for (int m = 0; m < 3; ++m) sd[m] += (v[m] - mean[m]) * (v[m] - mean[m]);
    }
    for (int m = 0; m < 3; ++m) sd[m] = vals.size() > 1 ? std::sqrt(sd[m] / static_cast<double>(vals.size() - 1)) : 0.0;
    std::cout << std::left << std::setw(6) << K;
    for (int m = 0; m < 3; ++m) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(4) << mean[m] << " +- " << sd[m];
      std::cout << std::setw(24) << cell.str();
    }
    std::cout << '\n';
    summary.push_back({{"K", K},
                       {"runs", vals.size()},
                       {"hr_mean", mean[0]},
                       {"recall_mean", mean[1]},
                       {"ndcg_mean", mean[2]},
                       {"hr_sd", sd[0]},
                       {"recall_sd", sd[1]},
                       {"ndcg_sd", sd[2]}});
  }
  if (!a.output.empty()) std::ofstream(a.output) << summary.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Large per-step temporaries otherwise go through mmap/munmap every step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Collaborative filtering over pseudo-ranked candidates: prepare, train, evaluate, verify, report"};
  app.require_subcommand(1);

  PrepareArgs prep;
  auto* prepare = app.add_subcommand("prepare", "ingest, k-core filter and split an interaction file");
  prepare->add_option("--input", prep.input, "interaction file (user, item[, rating][, timestamp])")->required();
  prepare->add_option("--output", prep.output, "output directory")->required();
  prepare->add_option("--min-core", prep.min_core, "k-core threshold (0 disables)")->capture_default_str();
  prepare->add_option("--seed", prep.seed, "split seed")->capture_default_str();
  prepare->add_option("--delimiter", prep.delimiter, "force delimiter: tab|comma");
  prepare->add_flag("--atomic", prep.atomic, "input uses an atomic .inter header");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train a model from a JSON config");
  train_cmd->add_option("--config", train.config, "JSON config")->required();
  train_cmd->add_option("--data", train.data, "prepared data directory")->required();
  train_cmd->add_option("--out", train.out, "run output directory")->required();
  train_cmd->add_flag("--quiet", train.quiet, "suppress per-epoch log lines");

  EvaluateArgs eval;
  auto* eval_cmd = app.add_subcommand("evaluate", "full-ranking evaluation of a checkpoint");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint directory")->required();
  eval_cmd->add_option("--data", eval.data, "prepared data directory")->required();
  eval_cmd->add_option("--split", eval.split, "valid|test")->capture_default_str();
  eval_cmd->add_option("--k", eval.ks, "comma-separated cutoffs")->capture_default_str();
  eval_cmd->add_option("--output", eval.output, "also write the metrics JSON here");

  VerifyArgs ver;
  auto* verify = app.add_subcommand("verify", "run the theory and gradient oracles");
  verify->add_flag("--strict-timing", ver.strict_timing, "treat the timing bound as a hard failure");
  verify->add_flag("--skip-timing", ver.skip_timing, "skip the timing check");
  verify->add_option("--report", ver.report, "write the JSON report here");
  verify->add_option("--seed", ver.seed, "oracle seed")->capture_default_str();
#ifdef PRP_TEST_HOOKS
  verify->add_flag("--inject-failure", ver.inject_failure, "perturb one identity to exercise the failure path");
#endif

  ReportArgs rep;
  auto* report = app.add_subcommand("report", "aggregate test metrics across run directories");
  report->add_option("--runs", rep.runs, "run directories")->required()->expected(1, -1);
  report->add_option("--output", rep.output, "write the summary JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(prp::ExitCode::kUsage);
  }

  try {
    if (*prepare) return run_prepare(prep);
    if (*train_cmd) return run_train(train);
    if (*eval_cmd) return run_evaluate(eval);
    if (*verify) return run_verify(ver);
    if (*report) return run_report(rep);
  } catch (const prp::UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(prp::ExitCode::kUsage);
  } catch (const prp::DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(prp::ExitCode::kData);
  } catch (const prp::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return static_cast<int>(prp::ExitCode::kData);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(prp::ExitCode::kData);
  }
  return 0;
}
