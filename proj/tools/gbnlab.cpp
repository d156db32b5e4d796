// gbnlab: train, evaluate and probe GBN models from YAML experiment configs.
//
//   gbnlab train --config exp.yaml [--out-dir DIR] [--seed S]
//   gbnlab eval --config exp.yaml --checkpoint ckpt.bin [--gating soft|hard|forced:K]
//   gbnlab geometry --w 3,4 --epsilon 1
//   gbnlab stats-probe (--checkpoint ckpt.bin | --config exp.yaml)
//
// Exit codes: 0 success, 1 runtime error, 2 usage or config error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "gbnlab/checkpoint.hpp"
#include "gbnlab/config.hpp"
#include "gbnlab/error.hpp"
#include "gbnlab/eval.hpp"
#include "gbnlab/geometry.hpp"
#include "gbnlab/metrics.hpp"
#include "gbnlab/train.hpp"

namespace fs = std::filesystem;
using namespace gbnlab;

namespace {

struct Options {
  std::string config;
  std::string checkpoint;
  std::string gating;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::string w;
  double epsilon = 1.0;
};

ExperimentConfig load(const Options& opt) {
  if (opt.config.empty()) throw UsageError("--config is required");
  ExperimentConfig cfg = load_experiment_config(opt.config);
  if (opt.seed) cfg.override_seed(*opt.seed);
  if (!opt.out_dir.empty()) cfg.output_dir = opt.out_dir;
  if (!opt.gating.empty()) cfg.eval.gating = GatingMode::parse(opt.gating);
  return cfg;
}

void prepare_output(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  std::ofstream echo(cfg.output_dir / "config.yaml", std::ios::trunc);
  if (!echo) throw IoError("cannot write " + (cfg.output_dir / "config.yaml").string());
  echo << cfg.source_text;
}

int cmd_train(const Options& opt) {
  const ExperimentConfig cfg = load(opt);
  prepare_output(cfg);
  const Dataset data = load_train_data(cfg);
  LeNet model(cfg.model);
  std::vector<MetricRecord> records;
  const auto result = train(model, data, cfg.train, [&](const EpochMetrics& m) {
    fmt::print("epoch {:>3}  L_cls {:.4f}  L_DP {:.4f}  clean-train {:.4f}\n", m.epoch,
               m.classification_loss, m.domain_prediction_loss, m.clean_train_accuracy);
    std::fflush(stdout);
    auto rows = epoch_records(cfg.run_id, m);
    records.insert(records.end(), rows.begin(), rows.end());
  });
  save_checkpoint(model, result.rng, cfg.output_dir / "checkpoint.bin");
  write_metrics(records, cfg.output_dir / "train_metrics.jsonl");
  fmt::print("wrote {}\n", (cfg.output_dir / "checkpoint.bin").string());
  return 0;
}

void print_table(const EvalReport& report) {
  auto pct = [](double v) { return fmt::format("{:6.1f}", 100.0 * v); };
  fmt::print("{:<14}{:>8}\n", "", "acc (%)");
  for (const char* type : {"L1", "L2", "Linf"}) {
    const auto it = report.per_type_worst.find(type);
    fmt::print("{:<14}{:>8}\n", type, it == report.per_type_worst.end() ? "-" : pct(it->second));
  }
  fmt::print("{:<14}{:>8}\n", "All attacks", pct(report.all_attacks_accuracy));
  fmt::print("{:<14}{:>8}\n", "Clean", pct(report.clean_accuracy));
  fmt::print("\nper attack:\n");
  for (const auto& [name, acc] : report.per_attack_accuracy) {
    fmt::print("  {:<22}{:>8}\n", name, pct(acc));
  }
  if (report.gate_accuracy_per_layer) {
    fmt::print("\ngate accuracy (layer / domain):\n");
    for (const auto& [layer, per_domain] : *report.gate_accuracy_per_layer) {
      for (const auto& [domain, acc] : per_domain) {
        fmt::print("  gate{} domain {}  {}\n", layer, domain, pct(acc));
      }
    }
  }
}

int cmd_eval(const Options& opt) {
  if (opt.checkpoint.empty()) throw UsageError("--checkpoint is required");
  ExperimentConfig cfg = load(opt);
  fs::create_directories(cfg.output_dir);
  LeNet model(cfg.model);
  load_checkpoint(model, opt.checkpoint);
  AttackSuite suite = cfg.eval.suite;
  if (cfg.eval.adaptive) {
    const auto extra = adaptive_suite(model, suite.front().spec.iterations);
    suite.insert(suite.end(), extra.begin(), extra.end());
  }
  GatingMode mode = cfg.eval.gating;
  if (!model.has_gates() && mode.kind != GatingMode::Kind::Forced) {
    mode = GatingMode::forced(DomainLabel{0});
  }
  const Dataset data = load_test_data(cfg);
  const EvalReport report = evaluate(model, data, suite, mode, cfg.eval.options);
  write_metrics(report, cfg.run_id, cfg.output_dir / "eval_metrics.jsonl");
  fmt::print("{} on {} samples, gating {}\n\n", cfg.run_id, report.samples, mode.to_string());
  print_table(report);
  return 0;
}

int cmd_geometry(const Options& opt) {
  LinearClassifier clf;
  std::stringstream in(opt.w);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw UsageError("--w: cannot parse '" + item + "'");
    }
    if (used != item.size() && item.find_first_not_of(" \t", used) != std::string::npos) {
      throw UsageError("--w: cannot parse '" + item + "'");
    }
    clf.w.push_back(v);
  }
  if (clf.w.empty()) throw UsageError("--w needs a comma-separated weight vector");

  const Norm norms[] = {Norm::L1, Norm::L2, Norm::Linf};
  std::vector<std::vector<double>> deltas;
  for (Norm p : norms) deltas.push_back(optimal_perturbation(clf, 1, opt.epsilon, p));
  fmt::print("optimal perturbations (y = +1, eps = {}):\n", opt.epsilon);
  for (std::size_t k = 0; k < 3; ++k) {
    const Norm p = norms[k];
    const auto& d = deltas[k];
    std::string row;
    for (std::size_t i = 0; i < d.size(); ++i) row += (i ? ", " : "") + fmt::format("{:.6g}", d[i]);
    fmt::print("  {:<5} ({})\n", to_string(p), row);
  }
  fmt::print("\n{:<12}{:>14}{:>14}{:>12}\n", "pair", "W2", "oracle", "residual");
  const std::pair<Norm, Norm> pairs[] = {
      {Norm::L1, Norm::Linf}, {Norm::L1, Norm::L2}, {Norm::L2, Norm::Linf}};
  for (const auto& [p, q] : pairs) {
    const double closed = wasserstein_pair(clf, opt.epsilon, p, q);
    const double oracle = wasserstein_oracle(clf, opt.epsilon, p, q);
    fmt::print("{:<12}{:>14.9f}{:>14.9f}{:>12.2e}\n", to_string(p) + "," + to_string(q), closed,
               oracle, std::abs(closed - oracle));
  }
  return 0;
}

int cmd_stats_probe(const Options& opt) {
  std::optional<LeNet> model;
  std::vector<int> domains{0, 1, 2, 3};
  fs::path out_dir = opt.out_dir;
  if (!opt.checkpoint.empty()) {
    model.emplace(read_checkpoint_config(opt.checkpoint));
    load_checkpoint(*model, opt.checkpoint);
    if (!opt.config.empty()) domains = load(opt).train.domains;
  } else {
    ExperimentConfig cfg = load(opt);
    if (out_dir.empty()) out_dir = cfg.output_dir;
    prepare_output(cfg);
    domains = cfg.train.domains;
    model.emplace(cfg.model);
    if (model->num_branches() < 2) throw Error("stats-probe needs a multi-branch model");
    const Dataset data = load_train_data(cfg);
    separate_bn_probe(*model, data, cfg.train);
    save_checkpoint(*model, TrainingRngState{cfg.train.seed, 0}, cfg.output_dir / "checkpoint.bin");
  }
  if (model->num_branches() < 2) throw Error("stats-probe needs a multi-branch model");
  const ProbeReport report = branch_statistics(*model, domains);

  std::ostringstream csv;
  csv << "layer,branch,channel,running_mean,running_var\n";
  for (const auto& r : report.records) {
    csv << fmt::format("{},{},{},{:.17g},{:.17g}\n", r.layer, r.branch, r.channel, r.running_mean,
                       r.running_var);
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "branch_stats.csv", std::ios::trunc) << csv.str();
  }
  std::cout << csv.str();
  for (std::size_t layer = 0; layer < report.divergence.size(); ++layer) {
    fmt::print(stderr, "layer {}: divergence(Linf vs clean) {:.6g}  control(clean halves) {:.6g}\n",
               layer + 1, report.divergence[layer], report.control[layer]);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gated batch normalization lab"};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", opt.config, "YAML experiment config");
    cmd->add_option("--out-dir", opt.out_dir, "output directory (overrides the config)");
    cmd->add_option("--seed", opt.seed, "replace every seed in the config");
    cmd->add_option("--gating", opt.gating, "soft, hard or forced:K");
  };
  CLI::App* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(train_cmd);
  CLI::App* eval_cmd = app.add_subcommand("eval", "run the attack suite on a checkpoint");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", opt.checkpoint, "checkpoint to evaluate")->required();
  CLI::App* geo_cmd = app.add_subcommand("geometry", "closed-form perturbation geometry");
  geo_cmd->add_option("--w", opt.w, "comma-separated weight vector")->required();
  geo_cmd->add_option("--epsilon", opt.epsilon, "perturbation budget");
  CLI::App* probe_cmd = app.add_subcommand("stats-probe", "per-branch running statistics");
  add_common(probe_cmd);
  probe_cmd->add_option("--checkpoint", opt.checkpoint, "multi-branch checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return cmd_train(opt);
    if (*eval_cmd) return cmd_eval(opt);
    if (*geo_cmd) return cmd_geometry(opt);
    if (*probe_cmd) return cmd_stats_probe(opt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
