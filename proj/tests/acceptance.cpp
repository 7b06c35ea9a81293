// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--full-sweep | --smoke-only | --skip-sweep] [--cache DIR] [--no-cache]
//              [--cli PATH] [--parallel K]
//
// Without a sweep flag both the 30-epoch smoke grid and the 100-epoch grid run.
//
// Training runs of the optimizer comparison are cached under --cache, keyed by
// the library source hash and the run config.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "oracles.hpp"
#include "polarlab/gauge_audit.hpp"
#include "polarlab/runner.hpp"

#ifndef POLARLAB_SOURCE_HASH
#define POLARLAB_SOURCE_HASH "unknown"
#endif

using namespace polarlab;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string sci(double x, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*e", digits, x);
  return buf;
}

std::string fixed(double x, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    notes.push_back((ok ? "" : "FAILED ") + what);
  }
};

int n_failed = 0;

void report(int id, const std::string& name, const Outcome& o, double wall) {
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << ")";
  std::cout << " [" << fixed(wall, 1) << " s]\n";
  for (const auto& n : o.notes) std::cout << "    " << n << "\n";
  std::cout << std::flush;
  if (!o.pass) ++n_failed;
}

template <typename F>
void run_criterion(int id, const std::string& name, F&& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    body(o);
  } catch (const std::exception& e) {
    o.require(false, std::string("exception: ") + e.what());
  }
  report(id, name, o, seconds_since(t0));
}

// ---------------------------------------------------------------------------

void audit_bands(Outcome& o) {
  const auto t0 = Clock::now();
  const auto rows = run_shape_audit(default_audit_shapes(), 50, 0);
  const double wall = seconds_since(t0);
  double polar = 0.0, ns = 0.0, bf_lo = 1e9, bf_hi = 0.0, rho_lo = 1e9, rho_hi = 0.0;
  for (const auto& r : rows) {
    polar = std::max(polar, r.delta_polar);
    ns = std::max(ns, r.delta_ns_full);
    bf_lo = std::min(bf_lo, r.delta_ns_bf16);
    bf_hi = std::max(bf_hi, r.delta_ns_bf16);
    rho_lo = std::min(rho_lo, r.delta_rho0_mean);
    rho_hi = std::max(rho_hi, r.delta_rho0_mean);
  }
  std::cout << audit_table(rows);
  o.require(rows.size() == 15, "15 shapes audited (" + std::to_string(rows.size()) + ")");
  o.require(polar <= 1e-6, "max Delta(exact polar) " + sci(polar) + " <= 1e-6");
  o.require(ns <= 1e-6, "max Delta(NS fp64) " + sci(ns) + " <= 1e-6");
  o.require(bf_lo >= 0.005 && bf_hi <= 0.10,
            "Delta(NS bf16) in [" + sci(bf_lo) + ", " + sci(bf_hi) + "] within [0.005, 0.10]");
  o.require(rho_lo >= 0.5 && rho_hi <= 1.1,
            "Delta(rho_0) mean in [" + fixed(rho_lo) + ", " + fixed(rho_hi) + "] within [0.5, 1.1]");
  o.require(check_audit_bands(rows).ok, "cmd_audit band check agrees");
  o.require(wall < 120.0, "audit wall time " + fixed(wall, 1) + " s < 120 s");
}

void counterexample(Outcome& o) {
  double worst = 0.0;
  bool gaps = true;
  for (double eps : {1e-3, 1e-1, 1.0, 10.0}) {
    const auto r = counterexample_check(eps);
    worst = std::max(worst, std::abs(r.lhs_factor - std::sqrt(2.0) / (1.0 + std::sqrt(2.0) * eps)));
    worst = std::max(worst, std::abs(r.rhs_factor - 1.0 / (1.0 + eps)));
    worst = std::max({worst, r.lhs_matrix_error, r.rhs_matrix_error});
    gaps = gaps && r.gap > 0.0;
  }
  o.require(worst <= 1e-12, "closed-form factor error " + sci(worst) + " <= 1e-12");
  o.require(gaps, "gap > 0 for eps in {1e-3, 1e-1, 1, 10}");
  const double delta = counterexample_sign_limit_delta();
  const double err = std::abs(delta - (std::sqrt(2.0) - 1.0));
  o.require(err <= 1e-9, "sign-limit Delta " + fixed(delta, 12) + " vs sqrt(2)-1, error " + sci(err));
  std::ostringstream sink;
  o.require(cmd_counterexample({}, sink) == kExitOk, "cmd_counterexample exits 0");
}

void block_equivalence(Outcome& o) {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double polar = 0.0, ns = 0.0;
  for (int t = 0; t < 20; ++t) {
    const IsotypicSpec spec = oracle::random_spec(rng);
    const auto gaps = oracle::lemma2_gaps(spec, oracle::random_blocks(spec, rng));
    polar = std::max(polar, gaps.polar);
    ns = std::max(ns, gaps.ns);
  }
  const double wall = seconds_since(t0);
  o.require(polar <= 1e-9, "block vs ambient exact polar " + sci(polar) + " <= 1e-9");
  o.require(ns <= 1e-6, "block vs ambient NS fp64 (shared norm) " + sci(ns) + " <= 1e-6");
  o.require(wall < 30.0, "wall time " + fixed(wall, 2) + " s < 30 s");
}

void trajectory_covariance(Outcome& o) {
  const auto t0 = Clock::now();
  const double muon = oracle::trajectory_deviation(oracle::Arm::Muon, 8, 8, 5, 11);
  const double polar = oracle::trajectory_deviation(oracle::Arm::PolarAdamW, 8, 8, 5, 11);
  const double wall = seconds_since(t0);
  o.require(muon <= 1e-6, "Muon conjugated trajectory deviation " + sci(muon) + " <= 1e-6");
  o.require(polar >= 0.1, "PolarAdamW deviation " + sci(polar) + " >= 0.1");
  o.require(wall < 5.0, "wall time " + fixed(wall, 3) + " s < 5 s");
}

void so3_correctness(Outcome& o) {
  Rng rng(77);
  double inv = 0.0;
  for (int c = 0; c < 10; ++c) {
    So3Model model = So3Model::create(16, 3, rng);
    oracle::perturb(model, 0.3, rng);
    const Matrix x = generate_dataset(1, 32, rng)[0].points;
    inv = std::max(inv, invariance_check(model, x, 20, rng));
  }
  o.require(inv <= 1e-5, "invariance over 20 rotations x 10 clouds " + sci(inv) + " <= 1e-5");

  So3Model small = So3Model::create(4, 2, rng);
  oracle::perturb(small, 0.3, rng);
  const Matrix x = generate_dataset(1, 10, rng)[0].points;
  double worst = 0.0;
  std::string worst_id;
  for (const auto& e : oracle::gradient_errors(small, x)) {
    if (e.error > worst) {
      worst = e.error;
      worst_id = e.id;
    }
  }
  o.require(worst <= 1e-4, "finite-difference gradient error " + sci(worst) + " (" + worst_id + ") <= 1e-4");

  So3Model broken = So3Model::create(16, 3, rng);
  auto& layer = broken.layers[1];
  layer.debug_full_w11 = gaussian_matrix(3 * layer.m, 3 * layer.m_in, rng) / std::sqrt(3.0 * layer.m_in);
  const double dev = invariance_check(broken, generate_dataset(1, 32, rng)[0].points, 20, rng);
  o.require(dev >= 1e-2, "broken vector mixer deviation " + sci(dev) + " >= 1e-2");
}

void optimizer_identities(Outcome& o) {
  Rng rng(31);
  const Matrix g = gaussian_matrix(6, 5, rng);
  {
    auto st = AdamWState<double>::zeros(6, 5);
    Matrix w = Matrix::Zero(6, 5);
    adamw_step(st, w, g, 1.0);
    const Matrix expected = (g.array() / (g.array().abs() + st.eps)).matrix();
    const double err = (-w - expected).cwiseAbs().maxCoeff();
    o.require(err <= 1e-15, "AdamW t=1 direction error " + sci(err));
  }
  {
    const Matrix w0 = gaussian_matrix(6, 5, rng);
    auto st = AdamWState<double>::zeros(6, 5);
    st.weight_decay = 0.1;
    Matrix w = w0, expected = w0;
    for (int t = 0; t < 20; ++t) {
      adamw_step(st, w, Matrix(Matrix::Zero(6, 5)), 0.03);
      expected = (1.0 - 0.03 * 0.1) * expected;
    }
    o.require(w == expected, "g=0 decay is exactly (1 - eta lambda)^t, 20 steps");
  }
  {
    const Matrix w0 = gaussian_matrix(6, 5, rng);
    auto st = MuonState<double>::zeros(6, 5);
    Matrix w = w0;
    muon_matrix_step(st, w, Matrix(Matrix::Zero(6, 5)), 0.1);
    o.require(w == w0, "Muon applies no weight decay");
    Matrix w1 = w0;
    auto st1 = MuonState<double>::zeros(6, 5);
    muon_matrix_step(st1, w1, g, 0.1);
    const Matrix expected = w0 - 0.1 * shape_scale(6, 5) * newton_schulz(g, st1.ns);
    const double err = (w1 - expected).norm() / expected.norm();
    o.require(err <= 1e-14, "Muon step scaled by shape_scale = " + fixed(shape_scale(6, 5), 6) +
                                ", error " + sci(err));
  }
}

// ---------------------------------------------------------------------------
// Determinism through the CLI

struct Cli {
  std::string path;

  int run(const std::string& args) const {
    const std::string cmd = "\"" + path + "\" " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void determinism(Outcome& o, const Cli& cli, const fs::path& work) {
  fs::remove_all(work);
  fs::create_directories(work);
  const std::string tiny =
      " --layers 2 --epochs 3 --warmup 1 --n-train 64 --n-test 32 --n-points 8 --batch-size 16";
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"audit.csv", "audit --shapes 8x8,16x4,192x768 --triples 5 --seed 3 --out "},
      {"cex.csv", "counterexample --out "},
      {"train.json", "train --hc 4 --optimizer muon --seed 2" + tiny + " --out "},
      {"sweep.csv", "sweep --hc-list 4 --seeds 2" + tiny + " --out "},
  };
  for (const auto& [file, args] : commands) {
    const fs::path out = work / file;
    const fs::path manifest = manifest_path_for(out.string());
    std::string first, first_manifest;
    bool ok = true;
    for (int rep = 0; rep < 2; ++rep) {
      fs::remove(out);
      fs::remove(manifest);
      ok = ok && cli.run(args + "\"" + out.string() + "\"") == 0;
      const std::string body = slurp(out);
      const std::string man = slurp(manifest);
      ok = ok && !body.empty() && !man.empty();
      if (rep == 0) {
        first = body;
        first_manifest = man;
      } else {
        ok = ok && body == first && man == first_manifest;
      }
    }
    const std::string name = args.substr(0, args.find(' '));
    o.require(ok, name + ": output and manifest byte-identical across two runs");
  }
  fs::remove_all(work);
}

// ---------------------------------------------------------------------------
// Optimizer comparison on the SO(3) testbed

struct RunCache {
  fs::path dir;
  bool enabled = true;

  fs::path path_for(const TrainConfig& c) const {
    return dir / ("hc" + std::to_string(c.hc) + "_" + std::string(to_string(c.optimizer)) + "_e" +
                  std::to_string(c.epochs) + "_seed" + std::to_string(c.seed) + ".json");
  }

  static std::string key(const TrainConfig& c) {
    return std::string(POLARLAB_SOURCE_HASH) + "|" + train_config_json(c);
  }

  bool load(const TrainConfig& c, SweepRun& run) const {
    if (!enabled) return false;
    std::ifstream in(path_for(c));
    if (!in) return false;
    try {
      const json j = json::parse(in);
      if (j.at("key").get<std::string>() != key(c)) return false;
      run.ok = j.at("ok").get<bool>();
      run.error = j.at("error").get<std::string>();
      run.result.final_test_mse = j.at("final_test_mse").get<double>();
      run.result.best_epoch = j.at("best_epoch").get<int>();
      run.result.stopped_epoch = j.at("stopped_epoch").get<int>();
      run.wall_seconds = j.at("wall_seconds").get<double>();
      return true;
    } catch (const std::exception&) {
      return false;
    }
  }

  void store(const TrainConfig& c, const SweepRun& run) const {
    if (!enabled) return;
    json j = {{"key", key(c)},
              {"ok", run.ok},
              {"error", run.error},
              {"final_test_mse", run.result.final_test_mse},
              {"best_epoch", run.result.best_epoch},
              {"stopped_epoch", run.result.stopped_epoch},
              {"wall_seconds", run.wall_seconds}};
    fs::create_directories(dir);
    const fs::path tmp = path_for(c).string() + ".tmp";
    {
      std::ofstream out(tmp);
      out << j.dump(2) << "\n";
    }
    fs::rename(tmp, path_for(c));
  }
};

std::vector<SweepRun> run_grid(const TrainConfig& base, int seeds, const RunCache& cache, int parallel) {
  const OptimizerKind arms[] = {OptimizerKind::AdamW, OptimizerKind::Muon, OptimizerKind::PolarAdamW};
  std::vector<TrainConfig> configs;
  for (auto arm : arms) {
    for (int s = 0; s < seeds; ++s) {
      TrainConfig c = base;
      c.optimizer = arm;
      c.seed = static_cast<std::uint64_t>(s);
      configs.push_back(c);
    }
  }
  std::vector<SweepRun> runs(configs.size());
  std::atomic<std::size_t> next{0};
  std::mutex io;
  int cached = 0;
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      const TrainConfig& c = configs[i];
      SweepRun& r = runs[i];
      r.hc = c.hc;
      r.optimizer = c.optimizer;
      r.seed = c.seed;
      bool hit = cache.load(c, r);
      if (!hit) {
        const auto t0 = Clock::now();
        try {
          r.result = train(c);
          r.ok = true;
        } catch (const DivergenceDetected& e) {
          r.ok = false;
          r.error = e.what();
        }
        r.wall_seconds = seconds_since(t0);
        cache.store(c, r);
      }
      std::lock_guard<std::mutex> lock(io);
      if (hit) {
        ++cached;
        continue;
      }
      std::cout << "    " << to_string(c.optimizer) << " seed " << c.seed << " epochs " << c.epochs
                << ": " << (r.ok ? "test mse " + sci(r.result.final_test_mse) : "diverged") << " ("
                << fixed(r.wall_seconds, 0) << " s)\n"
                << std::flush;
    }
  };
  std::vector<std::thread> pool;
  for (int k = 0; k < std::max(1, parallel); ++k) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (cached > 0) std::cout << "    " << cached << " runs loaded from cache\n";
  return runs;
}

double mean_of(const std::vector<SweepRun>& runs, OptimizerKind k, int& n) {
  double sum = 0.0;
  n = 0;
  for (const auto& r : runs) {
    if (r.optimizer == k && r.ok) {
      sum += r.result.final_test_mse;
      ++n;
    }
  }
  return n ? sum / n : std::nan("");
}

void sweep_full(Outcome& o, const RunCache& cache, int parallel) {
  TrainConfig base;  // hc 16, 100 epochs, warmup 10, patience 30, wd 0
  const int seeds = 20;
  const auto runs = run_grid(base, seeds, cache, parallel);
  int na = 0, nm = 0, np = 0;
  const double a = mean_of(runs, OptimizerKind::AdamW, na);
  const double m = mean_of(runs, OptimizerKind::Muon, nm);
  const double p = mean_of(runs, OptimizerKind::PolarAdamW, np);
  for (const auto& r : runs)
    if (!r.ok) o.notes.push_back("excluded: " + std::string(to_string(r.optimizer)) + " seed " +
                                 std::to_string(r.seed) + " (" + r.error + ")");
  const auto pm = compare_arms(runs, 16, OptimizerKind::PolarAdamW, OptimizerKind::Muon);
  const auto am = compare_arms(runs, 16, OptimizerKind::AdamW, OptimizerKind::Muon);
  const auto ap = compare_arms(runs, 16, OptimizerKind::AdamW, OptimizerKind::PolarAdamW);
  o.notes.push_back("mean test MSE: AdamW " + sci(a) + " (n=" + std::to_string(na) + "), Muon " + sci(m) +
                    " (n=" + std::to_string(nm) + "), PolarAdamW " + sci(p) + " (n=" + std::to_string(np) + ")");
  o.require(pm.n >= 20 && am.n >= 20 && ap.n >= 20, "at least 20 paired seeds per comparison");
  o.require(m < p && p < a, "ordering Muon < PolarAdamW < AdamW");
  o.require(pm.mean_delta > 0.0, "paired Delta(PolarAdamW - Muon) " + sci(pm.mean_delta) + " > 0, t = " +
                                     (pm.t_stat ? fixed(*pm.t_stat, 2) : std::string("n/a")));
  o.require(pm.positive_fraction >= 0.7,
            "PolarAdamW worse than Muon on " + fixed(100 * pm.positive_fraction, 0) + "% of seeds (>= 70%)");
  o.require(am.positive_fraction >= 0.9,
            "Muon beats AdamW on " + fixed(100 * am.positive_fraction, 0) + "% of seeds (>= 90%)");
  o.require(ap.positive_fraction >= 0.9,
            "PolarAdamW beats AdamW on " + fixed(100 * ap.positive_fraction, 0) + "% of seeds (>= 90%)");
}

void sweep_smoke(Outcome& o, const RunCache& cache, int parallel) {
  TrainConfig base;
  base.epochs = 30;
  const auto runs = run_grid(base, 10, cache, parallel);
  int na = 0, nm = 0, np = 0;
  const double a = mean_of(runs, OptimizerKind::AdamW, na);
  const double m = mean_of(runs, OptimizerKind::Muon, nm);
  const double p = mean_of(runs, OptimizerKind::PolarAdamW, np);
  o.notes.push_back("30-epoch mean test MSE over 10 seeds: AdamW " + sci(a) + ", Muon " + sci(m) +
                    ", PolarAdamW " + sci(p));
  o.require(na + nm + np == 30, "no excluded runs (" + std::to_string(na + nm + np) + "/30)");
  o.require(m < a, "Muon < AdamW");
  o.require(p < a, "PolarAdamW < AdamW");
}

}  // namespace

int main(int argc, char** argv) {
  bool full = true;
  bool smoke = true;
  int parallel = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  RunCache cache;
  cache.dir = fs::path(argv[0]).parent_path() / "acceptance_runs";
  Cli cli;
  cli.path = (fs::path(argv[0]).parent_path() / "polarlab").string();
  if (const char* env = std::getenv("POLARLAB_CLI")) cli.path = env;

  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    auto value = [&]() -> std::string {
      if (i + 1 >= argc) {
        std::cerr << a << " needs a value\n";
        std::exit(1);
      }
      return argv[++i];
    };
    if (a == "--skip-sweep") {
      full = smoke = false;
    } else if (a == "--full-sweep") {
      full = true;
      smoke = false;
    } else if (a == "--smoke-only") {
      full = false;
    } else if (a == "--cache") {
      cache.dir = value();
    } else if (a == "--no-cache") {
      cache.enabled = false;
    } else if (a == "--cli") {
      cli.path = value();
    } else if (a == "--parallel") {
      parallel = std::stoi(value());
    } else {
      std::cerr << "usage: acceptance [--full-sweep | --smoke-only | --skip-sweep] [--cache DIR] "
                   "[--no-cache] [--cli PATH] [--parallel K]\n";
      return 1;
    }
  }

  std::cout << "polarlab " << tool_version() << " acceptance (source " << POLARLAB_SOURCE_HASH << ")\n";
  run_criterion(1, "audit bands over the 15 shapes", audit_bands);
  run_criterion(2, "rho_eps counterexample", counterexample);
  run_criterion(3, "block-wise polar equals ambient polar", block_equivalence);
  run_criterion(4, "conjugated optimizer trajectories", trajectory_covariance);
  run_criterion(5, "SO(3) model invariance and gradients", so3_correctness);
  if (smoke || full) {
    run_criterion(6, "hc=16 optimizer ordering", [&](Outcome& o) {
      if (smoke) {
        std::cout << "  30-epoch, 10-seed smoke grid\n";
        Outcome s;
        sweep_smoke(s, cache, parallel);
        for (auto& n : s.notes) o.notes.push_back("smoke: " + n);
        o.pass = o.pass && s.pass;
      }
      if (full) {
        std::cout << "  100-epoch, 20-seed grid\n";
        sweep_full(o, cache, parallel);
      }
    });
  } else {
    std::cout << "SKIP criterion 6 (hc=16 optimizer ordering)\n";
  }
  run_criterion(7, "optimizer unit identities", optimizer_identities);
  run_criterion(8, "byte-identical outputs", [&](Outcome& o) {
    determinism(o, cli, fs::temp_directory_path() / ("polarlab_acceptance_" + std::to_string(::getpid())));
  });

  std::cout << (n_failed == 0 ? "all criteria passed" : std::to_string(n_failed) + " criteria failed") << "\n";
  return n_failed == 0 ? 0 : 1;
}
