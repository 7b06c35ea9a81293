#include "polarlab/runner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include <json.hpp>

#ifndef POLARLAB_VERSION
#define POLARLAB_VERSION "0.0.0"
#endif

namespace polarlab {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(const char* spec, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

json manifest_ref(const std::string& artifact) {
  return artifact.empty() ? json(nullptr)
                          : json(std::filesystem::path(manifest_path_for(artifact)).filename().string());
}

std::string with_manifest_comment(const std::string& artifact, const std::string& csv) {
  return "# manifest: " + std::filesystem::path(manifest_path_for(artifact)).filename().string() +
         "\n" + csv;
}

void write_manifest(const std::string& artifact, const std::string& command, const json& config,
                    std::uint64_t seed, std::vector<std::string> extra_artifacts, bool timing) {
  RunManifest m;
  m.command = command;
  m.config_json = config.dump();
  m.master_seed = seed;
  m.artifacts.push_back(std::filesystem::path(artifact).filename().string());
  for (auto& a : extra_artifacts) m.artifacts.push_back(std::move(a));
  m.tool_version = tool_version();
  m.timestamp = manifest_timestamp(timing);
  write_text_file(manifest_path_for(artifact), manifest_json(m));
}

}  // namespace

std::string tool_version() { return POLARLAB_VERSION; }

// ---------------------------------------------------------------------------
// Manifests and files

std::string manifest_path_for(const std::string& artifact) { return artifact + ".manifest.json"; }

std::string manifest_json(const RunManifest& m) {
  json j;
  j["command"] = m.command;
  j["config"] = json::parse(m.config_json.empty() ? "{}" : m.config_json);
  j["master_seed"] = m.master_seed;
  j["artifacts"] = m.artifacts;
  j["tool_version"] = m.tool_version;
  j["timestamp"] = m.timestamp ? json(*m.timestamp) : json(nullptr);
  return j.dump(2) + "\n";
}

std::optional<std::string> manifest_timestamp(bool timing) {
  std::time_t t = 0;
  if (const char* sde = std::getenv("SOURCE_DATE_EPOCH")) {
    t = static_cast<std::time_t>(std::strtoll(sde, nullptr, 10));
  } else if (timing) {
    t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  } else {
    return std::nullopt;
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return std::string(buf);
}

void write_text_file(const std::string& path, const std::string& text) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(p.parent_path(), ec);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path + "'");
  f << text;
  if (!f) throw IoError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// audit

BandReport check_audit_bands(const std::vector<AuditRow>& rows) {
  BandReport report;
  auto flag = [&](const AuditRow& r, const std::string& what, double v) {
    report.ok = false;
    report.violations.push_back(r.shape_label + " (" + std::to_string(r.rows) + "x" +
                                std::to_string(r.cols) + "): " + what + " = " + fmt("%.3e", v));
  };
  for (const auto& r : rows) {
    if (!(r.delta_polar <= 1e-6)) flag(r, "polar", r.delta_polar);
    if (!(r.delta_ns_full <= 1e-6)) flag(r, "NS5 fp64", r.delta_ns_full);
    if (!(r.delta_ns_bf16 >= 0.005 && r.delta_ns_bf16 <= 0.10)) flag(r, "NS5 bf16", r.delta_ns_bf16);
    if (!(r.delta_rho0_mean >= 0.5 && r.delta_rho0_mean <= 1.1)) flag(r, "rho_0", r.delta_rho0_mean);
  }
  return report;
}

int cmd_audit(const AuditOptions& o, std::ostream& out) {
  if (o.triples < 1) throw BadFlag("--triples must be >= 1");
  if (o.format != "table" && o.format != "csv") throw BadFlag("--format must be table or csv");
  const auto shapes = parse_audit_shapes(o.shapes);

  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = run_shape_audit(shapes, o.triples, o.seed);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const std::string csv = audit_csv(rows);
  out << (o.format == "csv" ? csv : audit_table(rows));
  if (o.timing) out << "wall_seconds: " << fmt("%.2f", wall) << "\n";

  if (!o.out.empty()) {
    write_text_file(o.out, with_manifest_comment(o.out, csv));
    const json config = {{"shapes", o.shapes}, {"triples", o.triples}, {"seed", o.seed}};
    write_manifest(o.out, "audit", config, o.seed, {}, o.timing);
  }

  const BandReport bands = check_audit_bands(rows);
  for (const auto& v : bands.violations) out << "band violation: " << v << "\n";
  return bands.ok ? kExitOk : kExitBandViolation;
}

// ---------------------------------------------------------------------------
// counterexample

std::vector<double> parse_eps_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::logic_error&) {
      throw BadFlag("bad eps value '" + item + "'");
    }
    if (used != item.size()) throw BadFlag("bad eps value '" + item + "'");
    if (!(v > 0.0) || !std::isfinite(v)) throw BadFlag("eps must be positive and finite: '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw BadFlag("empty eps list");
  return out;
}

std::string counterexample_csv(const std::vector<CounterexampleResult>& rows) {
  std::string s = "eps,lhs_factor,rhs_factor,gap,lhs_matrix_error,rhs_matrix_error\n";
  for (const auto& r : rows) {
    s += fmt("%.17g", r.eps) + "," + fmt("%.17g", r.lhs_factor) + "," + fmt("%.17g", r.rhs_factor) +
         "," + fmt("%.17g", r.gap) + "," + fmt("%.3e", r.lhs_matrix_error) + "," +
         fmt("%.3e", r.rhs_matrix_error) + "\n";
  }
  return s;
}

double counterexample_sign_limit_delta() {
  const Matrix id = Matrix::Identity(2, 2);
  return conjugation_deviation(UpdateMap::RhoSign, id, rotation2(std::numbers::pi / 4.0), id);
}

int cmd_counterexample(const CounterexampleOptions& o, std::ostream& out) {
  if (o.eps.empty()) throw BadFlag("empty eps list");
  std::vector<CounterexampleResult> rows;
  char line[160];
  std::snprintf(line, sizeof line, "%12s %14s %14s %14s\n", "eps", "lhs_factor", "rhs_factor", "gap");
  out << line;
  bool ok = true;
  for (double e : o.eps) {
    if (!(e > 0.0)) throw BadFlag("eps must be positive");
    rows.push_back(counterexample_check(e));
    const auto& r = rows.back();
    std::snprintf(line, sizeof line, "%12.6g %14.6f %14.6f %14.6e\n", r.eps, r.lhs_factor,
                  r.rhs_factor, r.gap);
    out << line;
    ok = ok && r.gap > 1e-12;
  }
  out << "sign-limit Delta: " << fmt("%.12f", counterexample_sign_limit_delta()) << "\n";
  if (!o.out.empty()) {
    write_text_file(o.out, with_manifest_comment(o.out, counterexample_csv(rows)));
    write_manifest(o.out, "counterexample", {{"eps", o.eps}}, 0, {}, false);
  }
  return ok ? kExitOk : kExitBandViolation;
}

// ---------------------------------------------------------------------------
// train

namespace {

json config_to_json(const TrainConfig& c) {
  return {{"hc", c.hc},
          {"n_layers", c.n_layers},
          {"epochs", c.epochs},
          {"warmup_epochs", c.warmup_epochs},
          {"patience", c.patience},
          {"optimizer", std::string(to_string(c.optimizer))},
          {"matrix_lr", c.base_lr > 0.0 ? c.base_lr : default_matrix_lr(c.optimizer)},
          {"aux_lr", c.aux_lr > 0.0 ? c.aux_lr : default_aux_lr(c.optimizer)},
          {"weight_decay", c.weight_decay},
          {"seed", c.seed},
          {"n_train", c.n_train},
          {"n_test", c.n_test},
          {"n_points", c.n_points},
          {"batch_size", c.batch_size},
          {"ns_precision", c.ns_precision == Precision::Full ? "fp64" : "bf16"}};
}

}  // namespace

std::string train_config_json(const TrainConfig& config) { return config_to_json(config).dump(); }

std::string run_record_json(const TrainConfig& config, const TrainResult& result,
                            std::optional<double> wall_seconds, const std::string& manifest) {
  json history = json::array();
  for (const auto& h : result.history) {
    history.push_back(
        {{"epoch", h.epoch}, {"lr_scale", h.lr_scale}, {"train_mse", h.train_mse}, {"test_mse", h.test_mse}});
  }
  json j = {{"config", config_to_json(config)},
            {"history", history},
            {"final_test_mse", result.final_test_mse},
            {"best_epoch", result.best_epoch},
            {"stopped_epoch", result.stopped_epoch}};
  if (wall_seconds) j["wall_seconds"] = *wall_seconds;
  j["manifest"] = manifest.empty() ? json(nullptr) : json(manifest);
  return j.dump(2) + "\n";
}

int cmd_train(const TrainOptions& o, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result;
  try {
    result = train(o.config);
  } catch (const DivergenceDetected& e) {
    out << "diverged: " << e.what() << "\n";
    return kExitDivergence;
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const std::optional<double> timing = o.timing ? std::optional<double>(wall) : std::nullopt;

  if (o.out.empty()) {
    out << run_record_json(o.config, result, timing, "");
  } else {
    write_text_file(o.out, run_record_json(o.config, result, timing, manifest_ref(o.out)));
    write_manifest(o.out, "train", config_to_json(o.config), o.config.seed, {}, o.timing);
    out << "final_test_mse " << fmt("%.6e", result.final_test_mse) << " best_epoch "
        << result.best_epoch << " stopped_epoch " << result.stopped_epoch << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// sweep

std::optional<double> paired_t(const std::vector<double>& d) {
  const std::size_t n = d.size();
  if (n < 2) return std::nullopt;
  double mean = 0.0;
  for (double x : d) mean += x;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double x : d) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(sd > 0.0)) return std::nullopt;
  return mean / (sd / std::sqrt(static_cast<double>(n)));
}

PairedComparison compare_arms(const std::vector<SweepRun>& runs, int hc, OptimizerKind a,
                              OptimizerKind b) {
  std::map<std::uint64_t, double> mse_a, mse_b;
  for (const auto& r : runs) {
    if (r.hc != hc || !r.ok) continue;
    if (r.optimizer == a) mse_a[r.seed] = r.result.final_test_mse;
    if (r.optimizer == b) mse_b[r.seed] = r.result.final_test_mse;
  }
  std::vector<double> deltas;
  int positive = 0;
  for (const auto& [seed, va] : mse_a) {
    const auto it = mse_b.find(seed);
    if (it == mse_b.end()) continue;
    deltas.push_back(va - it->second);
    if (va - it->second > 0.0) ++positive;
  }
  PairedComparison c;
  c.hc = hc;
  c.a = a;
  c.b = b;
  c.n = static_cast<int>(deltas.size());
  if (c.n > 0) {
    for (double x : deltas) c.mean_delta += x;
    c.mean_delta /= c.n;
    c.positive_fraction = static_cast<double>(positive) / c.n;
  }
  c.t_stat = paired_t(deltas);
  return c;
}

SweepSummary run_sweep(const SweepOptions& o, const SweepProgress& progress) {
  if (o.seeds < 1) throw BadFlag("--seeds must be >= 1");
  if (o.parallel < 1) throw BadFlag("--parallel must be >= 1");
  if (o.hc_list.empty()) throw BadFlag("empty --hc-list");
  if (o.optimizers.empty()) throw BadFlag("empty --optimizers");

  SweepSummary summary;
  for (int hc : o.hc_list)
    for (auto kind : o.optimizers)
      for (int s = 0; s < o.seeds; ++s) {
        SweepRun r;
        r.hc = hc;
        r.optimizer = kind;
        r.seed = o.seed_base + static_cast<std::uint64_t>(s);
        summary.runs.push_back(r);
      }

  std::atomic<std::size_t> next{0};
  std::mutex sink;
  auto worker = [&] {
    for (std::size_t i = next++; i < summary.runs.size(); i = next++) {
      SweepRun& r = summary.runs[i];
      TrainConfig cfg = o.base;
      cfg.hc = r.hc;
      cfg.optimizer = r.optimizer;
      cfg.seed = r.seed;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        r.result = train(cfg);
        r.ok = true;
      } catch (const DivergenceDetected& e) {
        r.error = e.what();
      }
      r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (r.ok && !o.runs_dir.empty()) {
        const std::string path = o.runs_dir + "/hc" + std::to_string(r.hc) + "_" +
                                 std::string(to_string(r.optimizer)) + "_seed" +
                                 std::to_string(r.seed) + ".json";
        const std::optional<double> wall =
            o.timing ? std::optional<double>(r.wall_seconds) : std::nullopt;
        write_text_file(path, run_record_json(cfg, r.result, wall, ""));
      }
      std::lock_guard<std::mutex> lock(sink);
      if (progress) progress(r);
    }
  };
  std::vector<std::thread> pool;
  const int n_threads = std::min<int>(o.parallel, static_cast<int>(summary.runs.size()));
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  for (const auto& r : summary.runs) {
    if (!r.ok)
      summary.failures.push_back("hc=" + std::to_string(r.hc) + " " +
                                 std::string(to_string(r.optimizer)) + " seed=" +
                                 std::to_string(r.seed) + ": " + r.error);
  }

  for (int hc : o.hc_list) {
    for (auto kind : o.optimizers) {
      SweepCell cell;
      cell.hc = hc;
      cell.optimizer = kind;
      std::vector<double> v;
      for (const auto& r : summary.runs)
        if (r.ok && r.hc == hc && r.optimizer == kind) v.push_back(r.result.final_test_mse);
      cell.n = static_cast<int>(v.size());
      if (!v.empty()) {
        for (double x : v) cell.mean_mse += x;
        cell.mean_mse /= cell.n;
        double ss = 0.0;
        for (double x : v) ss += (x - cell.mean_mse) * (x - cell.mean_mse);
        cell.std_mse = cell.n > 1 ? std::sqrt(ss / (cell.n - 1)) : 0.0;
      }
      summary.cells.push_back(cell);
    }
    auto has = [&](OptimizerKind k) {
      return std::find(o.optimizers.begin(), o.optimizers.end(), k) != o.optimizers.end();
    };
    const std::pair<OptimizerKind, OptimizerKind> pairs[] = {
        {OptimizerKind::PolarAdamW, OptimizerKind::Muon},
        {OptimizerKind::AdamW, OptimizerKind::Muon},
        {OptimizerKind::AdamW, OptimizerKind::PolarAdamW}};
    for (const auto& [a, b] : pairs)
      if (has(a) && has(b)) summary.paired.push_back(compare_arms(summary.runs, hc, a, b));
  }
  return summary;
}

std::string sweep_csv(const SweepSummary& s) {
  std::string out = "row,hc,optimizer,n,mean_mse,std_mse,paired_delta,paired_t,positive_fraction\n";
  for (const auto& c : s.cells) {
    out += "cell," + std::to_string(c.hc) + "," + std::string(to_string(c.optimizer)) + "," +
           std::to_string(c.n) + "," + (c.n ? fmt("%.6e", c.mean_mse) : "") + "," +
           (c.n ? fmt("%.6e", c.std_mse) : "") + ",,,\n";
  }
  for (const auto& p : s.paired) {
    out += "paired," + std::to_string(p.hc) + "," + std::string(to_string(p.a)) + "-" +
           std::string(to_string(p.b)) + "," + std::to_string(p.n) + ",,," +
           (p.n ? fmt("%.6e", p.mean_delta) : "") + "," + (p.t_stat ? fmt("%.4f", *p.t_stat) : "") +
           "," + (p.n ? fmt("%.4f", p.positive_fraction) : "") + "\n";
  }
  return out;
}

std::string sweep_table(const SweepSummary& s) {
  std::ostringstream out;
  char line[200];
  std::snprintf(line, sizeof line, "%5s %12s %12s %12s %12s %9s %4s %8s\n", "hc", "AdamW", "Muon",
                "PolarAdamW", "Delta(P-M)", "paired t", "n", "P>M");
  out << line;
  std::vector<int> hcs;
  for (const auto& c : s.cells)
    if (std::find(hcs.begin(), hcs.end(), c.hc) == hcs.end()) hcs.push_back(c.hc);
  for (int hc : hcs) {
    auto mean_of = [&](OptimizerKind k) -> std::string {
      for (const auto& c : s.cells)
        if (c.hc == hc && c.optimizer == k && c.n > 0) return fmt("%.5f", c.mean_mse);
      return "-";
    };
    std::string delta = "-", t = "-", n = "-", frac = "-";
    for (const auto& p : s.paired) {
      if (p.hc == hc && p.a == OptimizerKind::PolarAdamW && p.b == OptimizerKind::Muon) {
        if (p.n) delta = fmt("%+.5f", p.mean_delta);
        if (p.t_stat) t = fmt("%.2f", *p.t_stat);
        n = std::to_string(p.n);
        if (p.n) frac = fmt("%.2f", p.positive_fraction);
      }
    }
    std::snprintf(line, sizeof line, "%5d %12s %12s %12s %12s %9s %4s %8s\n", hc,
                  mean_of(OptimizerKind::AdamW).c_str(), mean_of(OptimizerKind::Muon).c_str(),
                  mean_of(OptimizerKind::PolarAdamW).c_str(), delta.c_str(), t.c_str(), n.c_str(),
                  frac.c_str());
    out << line;
  }
  return out.str();
}

int cmd_sweep(const SweepOptions& o, std::ostream& out) {
  const SweepSummary summary = run_sweep(o, [&](const SweepRun& r) {
    out << "  hc=" << r.hc << " " << to_string(r.optimizer) << " seed=" << r.seed << " ";
    if (r.ok)
      out << "test_mse=" << fmt("%.6e", r.result.final_test_mse) << " epochs=" << r.result.stopped_epoch;
    else
      out << "FAILED (" << r.error << ")";
    if (o.timing) out << " wall=" << fmt("%.1f", r.wall_seconds) << "s";
    out << "\n" << std::flush;
  });
  out << sweep_table(summary);
  for (const auto& f : summary.failures) out << "excluded: " << f << "\n";

  if (!o.out.empty()) {
    write_text_file(o.out, with_manifest_comment(o.out, sweep_csv(summary)));
    json hcs = o.hc_list;
    json opts = json::array();
    for (auto k : o.optimizers) opts.push_back(std::string(to_string(k)));
    json config = {{"hc_list", hcs},          {"optimizers", opts},
                   {"seeds", o.seeds},        {"seed_base", o.seed_base},
                   {"base", config_to_json(o.base)}};
    std::vector<std::string> extra;
    if (!o.runs_dir.empty()) extra.push_back(o.runs_dir);
    write_manifest(o.out, "sweep", config, o.seed_base, extra, o.timing);
  }
  return kExitOk;
}

}  // namespace polarlab
