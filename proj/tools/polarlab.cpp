// polarlab command-line entry point.

#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "polarlab/runner.hpp"

using namespace polarlab;

namespace {

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size() || v < 1) throw BadFlag("");
      out.push_back(v);
    } catch (const std::exception&) {
      throw BadFlag("bad integer list entry '" + item + "'");
    }
  }
  if (out.empty()) throw BadFlag("empty integer list");
  return out;
}

std::vector<OptimizerKind> parse_optimizer_list(const std::string& text) {
  std::vector<OptimizerKind> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_optimizer_kind(item));
  if (out.empty()) throw BadFlag("empty optimizer list");
  return out;
}

Precision parse_precision(const std::string& s) {
  if (s == "bf16") return Precision::Bf16Emulated;
  if (s == "fp64") return Precision::Full;
  throw BadFlag("--ns-precision must be bf16 or fp64");
}

struct DataFlags {
  int layers = 3;
  int warmup = 10;
  int patience = 30;
  int epochs = 100;
  int n_train = 2048;
  int n_test = 512;
  int n_points = 32;
  int batch_size = 64;
  double wd = 0.0;
  std::string ns_precision = "bf16";
};

void add_data_flags(CLI::App* app, DataFlags& d) {
  app->add_option("--epochs", d.epochs, "Training epochs")->capture_default_str();
  app->add_option("--layers", d.layers, "Equivariant layers")->capture_default_str();
  app->add_option("--warmup", d.warmup, "Linear warmup epochs")->capture_default_str();
  app->add_option("--patience", d.patience, "Early-stopping patience (epochs)")->capture_default_str();
  app->add_option("--wd", d.wd, "Weight decay on the matrix group")->capture_default_str();
  app->add_option("--n-train", d.n_train, "Training clouds")->capture_default_str();
  app->add_option("--n-test", d.n_test, "Test clouds")->capture_default_str();
  app->add_option("--n-points", d.n_points, "Points per cloud")->capture_default_str();
  app->add_option("--batch-size", d.batch_size, "Mini-batch size")->capture_default_str();
  app->add_option("--ns-precision", d.ns_precision, "Newton-Schulz precision: bf16 | fp64")
      ->capture_default_str();
}

void apply_data_flags(const DataFlags& d, TrainConfig& c) {
  c.n_layers = d.layers;
  c.warmup_epochs = d.warmup;
  c.patience = d.patience;
  c.epochs = d.epochs;
  c.n_train = d.n_train;
  c.n_test = d.n_test;
  c.n_points = d.n_points;
  c.batch_size = d.batch_size;
  c.weight_decay = d.wd;
  c.ns_precision = parse_precision(d.ns_precision);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"polarlab: gauge audits and SO(3) optimizer comparisons"};
  app.set_version_flag("--version", "polarlab " + tool_version());
  app.require_subcommand(1);
  app.set_config("--config", "", "Config file with [audit], [counterexample], [train] or [sweep] sections");
  // Subcommands hand --config back to the app, so it may follow the subcommand name.
  app.fallthrough();

  // audit
  AuditOptions audit;
  auto* audit_cmd = app.add_subcommand("audit", "Conjugation-deviation audit over matrix shapes");
  audit_cmd->add_option("--shapes", audit.shapes, "default or RxC,RxC,...")->capture_default_str();
  audit_cmd->add_option("--triples", audit.triples, "(G, P, Q) samples per shape")->capture_default_str();
  audit_cmd->add_option("--seed", audit.seed, "Master seed")->capture_default_str();
  audit_cmd->add_option("--out", audit.out, "CSV output path");
  audit_cmd->add_option("--format", audit.format, "stdout format: table | csv")->capture_default_str();
  audit_cmd->add_flag("--timing", audit.timing, "Report wall time and timestamp the manifest");

  // counterexample
  CounterexampleOptions cex;
  std::string eps_text = "1e-3,1e-1,1,10";
  auto* cex_cmd = app.add_subcommand("counterexample", "Two-dimensional rho_eps counterexample");
  cex_cmd->add_option("--eps", eps_text, "Comma-separated eps values")->capture_default_str();
  cex_cmd->add_option("--out", cex.out, "CSV output path");

  // train
  TrainOptions tr;
  DataFlags tr_data;
  std::string tr_opt = "adamw";
  auto* train_cmd = app.add_subcommand("train", "One SO(3) training run");
  train_cmd->add_option("--hc", tr.config.hc, "Hidden channels")->capture_default_str();
  train_cmd->add_option("--optimizer", tr_opt, "adamw | muon | polaradamw")->capture_default_str();
  train_cmd->add_option("--seed", tr.config.seed, "Run seed")->capture_default_str();
  train_cmd->add_option("--lr", tr.config.base_lr, "Matrix-group learning rate (0 = default)");
  train_cmd->add_option("--aux-lr", tr.config.aux_lr, "Auxiliary AdamW learning rate (0 = default)");
  train_cmd->add_option("--out", tr.out, "JSON run record path");
  train_cmd->add_flag("--timing", tr.timing, "Record wall_seconds and a timestamp");
  add_data_flags(train_cmd, tr_data);

  // sweep
  SweepOptions sw;
  DataFlags sw_data;
  std::string hc_list = "16";
  std::string optimizers = "adamw,muon,polaradamw";
  auto* sweep_cmd = app.add_subcommand("sweep", "Paired-seed optimizer comparison grid");
  sweep_cmd->add_option("--hc-list", hc_list, "Comma-separated hidden widths")->capture_default_str();
  sweep_cmd->add_option("--optimizers", optimizers, "Comma-separated arms")->capture_default_str();
  sweep_cmd->add_option("--seeds", sw.seeds, "Paired seeds per cell")->capture_default_str();
  sweep_cmd->add_option("--seed-base", sw.seed_base, "First seed")->capture_default_str();
  sweep_cmd->add_option("--parallel", sw.parallel, "Worker threads")->capture_default_str();
  sweep_cmd->add_option("--out", sw.out, "CSV output path");
  sweep_cmd->add_option("--runs-dir", sw.runs_dir, "Directory for per-run JSON records");
  sweep_cmd->add_flag("--timing", sw.timing, "Record wall times and a timestamp");
  add_data_flags(sweep_cmd, sw_data);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*audit_cmd) return cmd_audit(audit, std::cout);
    if (*cex_cmd) {
      cex.eps = parse_eps_list(eps_text);
      return cmd_counterexample(cex, std::cout);
    }
    if (*train_cmd) {
      tr.config.optimizer = parse_optimizer_kind(tr_opt);
      apply_data_flags(tr_data, tr.config);
      return cmd_train(tr, std::cout);
    }
    if (*sweep_cmd) {
      sw.hc_list = parse_int_list(hc_list);
      sw.optimizers = parse_optimizer_list(optimizers);
      apply_data_flags(sw_data, sw.base);
      return cmd_sweep(sw, std::cout);
    }
  } catch (const BadFlag& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DivergenceDetected& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
