#ifndef POLARLAB_RUNNER_HPP
#define POLARLAB_RUNNER_HPP

// Command implementations behind the polarlab CLI. Each cmd_* returns a
// process exit code and writes human-readable output to `out`.

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "polarlab/gauge_audit.hpp"
#include "polarlab/so3_testbed.hpp"

namespace polarlab {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitBandViolation = 2;
inline constexpr int kExitDivergence = 3;

/// Tool version string.
std::string tool_version();

// ---------------------------------------------------------------------------
// Manifests

struct RunManifest {
  std::string command;
  std::string config_json;  // serialized config snapshot
  std::uint64_t master_seed = 0;
  std::vector<std::string> artifacts;
  std::string tool_version;
  std::optional<std::string> timestamp;  // ISO-8601 UTC
};

/// Manifest path that accompanies an output file.
std::string manifest_path_for(const std::string& artifact);
std::string manifest_json(const RunManifest& manifest);

/// Timestamp policy: SOURCE_DATE_EPOCH when set, the wall clock when
/// `timing` is true, otherwise none (keeps manifests reproducible).
std::optional<std::string> manifest_timestamp(bool timing);

/// Writes text to path; throws IoError.
void write_text_file(const std::string& path, const std::string& text);

// ---------------------------------------------------------------------------
// audit

struct AuditOptions {
  std::string shapes = "default";
  int triples = 50;
  std::uint64_t seed = 0;
  std::string out;             // CSV path; empty writes nothing
  std::string format = "table";  // table | csv (stdout rendering)
  bool timing = false;
};

struct BandReport {
  bool ok = true;
  std::vector<std::string> violations;
};

/// polar <= 1e-6, NS fp64 <= 1e-6, NS bf16 in [0.005, 0.10], rho_0 in [0.5, 1.1].
BandReport check_audit_bands(const std::vector<AuditRow>& rows);

int cmd_audit(const AuditOptions& options, std::ostream& out);

// ---------------------------------------------------------------------------
// counterexample

struct CounterexampleOptions {
  std::vector<double> eps{1e-3, 1e-1, 1.0, 10.0};
  std::string out;  // CSV path; empty writes nothing
};

/// Comma-separated positive reals; throws BadFlag.
std::vector<double> parse_eps_list(const std::string& text);

std::string counterexample_csv(const std::vector<CounterexampleResult>& rows);

/// Delta of rho_eps on the counterexample at the sign limit (sqrt(2) - 1).
double counterexample_sign_limit_delta();

int cmd_counterexample(const CounterexampleOptions& options, std::ostream& out);

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  TrainConfig config;
  std::string out;  // JSON run record; empty prints it to `out`
  bool timing = false;
};

std::string train_config_json(const TrainConfig& config);
std::string run_record_json(const TrainConfig& config, const TrainResult& result,
                            std::optional<double> wall_seconds, const std::string& manifest);

int cmd_train(const TrainOptions& options, std::ostream& out);

// ---------------------------------------------------------------------------
// sweep

struct SweepOptions {
  std::vector<int> hc_list{16};
  std::vector<OptimizerKind> optimizers{OptimizerKind::AdamW, OptimizerKind::Muon,
                                        OptimizerKind::PolarAdamW};
  int seeds = 20;
  std::uint64_t seed_base = 0;  // seeds are seed_base, seed_base + 1, ...
  int parallel = 1;
  TrainConfig base;       // hc, optimizer and seed are overwritten per run
  std::string out;        // CSV path; empty writes nothing
  std::string runs_dir;   // per-run JSON records; empty writes nothing
  bool timing = false;
};

struct SweepRun {
  int hc = 0;
  OptimizerKind optimizer = OptimizerKind::AdamW;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  TrainResult result;
  double wall_seconds = 0.0;
};

struct SweepCell {
  int hc = 0;
  OptimizerKind optimizer = OptimizerKind::AdamW;
  int n = 0;
  double mean_mse = 0.0;
  double std_mse = 0.0;
};

/// Per-seed differences a - b over seeds where both arms finished.
struct PairedComparison {
  int hc = 0;
  OptimizerKind a = OptimizerKind::PolarAdamW;
  OptimizerKind b = OptimizerKind::Muon;
  int n = 0;
  double mean_delta = 0.0;
  std::optional<double> t_stat;  // absent when n < 2 or the deltas have zero spread
  double positive_fraction = 0.0;  // fraction of seeds with a - b > 0
};

struct SweepSummary {
  std::vector<SweepRun> runs;  // ordered by (hc, optimizer, seed)
  std::vector<SweepCell> cells;
  std::vector<PairedComparison> paired;
  std::vector<std::string> failures;
};

/// mean(d) / (sd(d) / sqrt(n)) with the sample standard deviation.
std::optional<double> paired_t(const std::vector<double>& deltas);

PairedComparison compare_arms(const std::vector<SweepRun>& runs, int hc, OptimizerKind a,
                              OptimizerKind b);

using SweepProgress = std::function<void(const SweepRun&)>;
SweepSummary run_sweep(const SweepOptions& options, const SweepProgress& progress = {});

/// One row per (hc, optimizer), then one row per paired comparison.
std::string sweep_csv(const SweepSummary& summary);
/// Table-2-shaped text: hc, one column per arm, Delta(P-M), paired t, n.
std::string sweep_table(const SweepSummary& summary);

int cmd_sweep(const SweepOptions& options, std::ostream& out);

}  // namespace polarlab

#endif  // POLARLAB_RUNNER_HPP
