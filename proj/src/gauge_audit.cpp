#include "polarlab/gauge_audit.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <thread>

namespace polarlab {

namespace {

bool is_orthogonal(const Matrix& m) {
  if (m.rows() != m.cols()) return false;
  return (m.transpose() * m - Matrix::Identity(m.rows(), m.cols())).norm() <= 1e-10;
}

std::string format_sci(double x, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*e", digits, x);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

Matrix apply_update_map(UpdateMap map, const Matrix& g) {
  switch (map) {
    case UpdateMap::ExactPolar: return exact_polar(g);
    case UpdateMap::NsFull: return newton_schulz(g, NsConfig{});
    case UpdateMap::NsBf16: {
      NsConfig cfg;
      cfg.precision = Precision::Bf16Emulated;
      return newton_schulz(g, cfg);
    }
    case UpdateMap::RhoSign: return rho_eps(g, kSignLimitEps);
  }
  return g;
}

namespace {

double deviation_given(UpdateMap map, const Matrix& g, const Matrix& conjugated, const Matrix& p,
                       const Matrix& q) {
  const Matrix phi_g = apply_update_map(map, g);
  const Matrix phi_conj = apply_update_map(map, conjugated);
  const Matrix pulled = p * phi_g * q.transpose();
  return (phi_conj - pulled).norm() / (phi_g.norm() + 1e-12);
}

void check_deviation_args(UpdateMap map, const Matrix& g, const Matrix& p, const Matrix& q) {
  if (p.rows() != g.rows() || q.rows() != g.cols())
    throw ShapeMismatch("conjugation_deviation: P must be rows x rows and Q cols x cols");
  if (!is_orthogonal(p)) throw NotOrthogonal("conjugation_deviation: P is not orthogonal");
  if (!is_orthogonal(q)) throw NotOrthogonal("conjugation_deviation: Q is not orthogonal");
  if (map != UpdateMap::RhoSign && g.isZero(0))
    throw ZeroMatrix("conjugation_deviation: polar maps need a nonzero G");
}

}  // namespace

double conjugation_deviation(UpdateMap map, const Matrix& g, const Matrix& p, const Matrix& q) {
  check_deviation_args(map, g, p, q);
  const Matrix conjugated = p * g * q.transpose();
  return deviation_given(map, g, conjugated, p, q);
}

std::vector<AuditShape> default_audit_shapes() {
  return {
      {"W_00 / W_11 layer 0", 8, 1},
      {"W_00 / W_11 layer k", 8, 8},
      {"cg_proj", 8, 44},
      {"DeiT-Tiny attn.qkv", 192, 192},
      {"DeiT-Tiny mlp.fc1", 768, 192},
      {"tiny square", 4, 4},
      {"small square", 16, 16},
      {"medium square", 32, 32},
      {"medium-large square", 128, 128},
      {"tall non-square", 4, 16},
      {"wide non-square", 16, 4},
      {"tall non-square", 8, 32},
      {"wide non-square", 32, 8},
      {"DeiT-Tiny mlp.fc2", 192, 768},
      {"large square", 768, 768},
  };
}

std::vector<AuditShape> parse_audit_shapes(const std::string& text) {
  if (text == "default") return default_audit_shapes();
  std::vector<AuditShape> shapes;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto x = item.find('x');
    if (item.empty() || x == std::string::npos) throw BadFlag("bad shape '" + item + "' (want RxC)");
    try {
      std::size_t used = 0;
      const long rows = std::stol(item.substr(0, x), &used);
      if (used != x) throw BadFlag("bad shape '" + item + "'");
      const std::string rest = item.substr(x + 1);
      const long cols = std::stol(rest, &used);
      if (used != rest.size()) throw BadFlag("bad shape '" + item + "'");
      if (rows < 1 || cols < 1) throw BadFlag("shape dimensions must be >= 1: '" + item + "'");
      shapes.push_back({item, rows, cols});
    } catch (const std::logic_error&) {
      throw BadFlag("bad shape '" + item + "' (want RxC)");
    }
  }
  if (shapes.empty()) throw BadFlag("empty shape list");
  return shapes;
}

std::vector<AuditRow> run_shape_audit(const std::vector<AuditShape>& shapes, int n_triples,
                                      std::uint64_t master_seed) {
  if (shapes.empty()) throw BadFlag("run_shape_audit: no shapes");
  if (n_triples < 1) throw BadFlag("run_shape_audit: n_triples must be >= 1");
  const Rng master(master_seed);
  std::vector<AuditRow> rows;
  rows.reserve(shapes.size());

  for (const auto& shape : shapes) {
    // Labels repeat in the default list, so the dimensions join the key.
    const std::string key =
        shape.label + "|" + std::to_string(shape.rows) + "x" + std::to_string(shape.cols);
    const Rng shape_rng = master.split(key);

    std::vector<double> polar(n_triples), ns_full(n_triples), ns_bf16(n_triples), rho(n_triples);
    auto run_triple = [&](int t) {
      Rng rng = shape_rng.split(static_cast<std::uint64_t>(t));
      const Matrix g = gaussian_matrix(shape.rows, shape.cols, rng);
      const Matrix p = haar_orthogonal(shape.rows, rng);
      const Matrix q = haar_orthogonal(shape.cols, rng);
      check_deviation_args(UpdateMap::ExactPolar, g, p, q);
      const Matrix conjugated = p * g * q.transpose();
      polar[t] = deviation_given(UpdateMap::ExactPolar, g, conjugated, p, q);
      ns_full[t] = deviation_given(UpdateMap::NsFull, g, conjugated, p, q);
      ns_bf16[t] = deviation_given(UpdateMap::NsBf16, g, conjugated, p, q);
      rho[t] = deviation_given(UpdateMap::RhoSign, g, conjugated, p, q);
    };
    const int workers = std::clamp(static_cast<int>(std::thread::hardware_concurrency()), 1, n_triples);
    if (workers == 1) {
      for (int t = 0; t < n_triples; ++t) run_triple(t);
    } else {
      std::vector<std::exception_ptr> errors(workers);
      std::vector<std::thread> pool;
      for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (int t = w; t < n_triples; t += workers) run_triple(t);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
      for (auto& th : pool) th.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }

    auto mean = [](const std::vector<double>& xs) {
      double acc = 0.0;
      for (double x : xs) acc += x;
      return acc / static_cast<double>(xs.size());
    };
    AuditRow row;
    row.shape_label = shape.label;
    row.rows = shape.rows;
    row.cols = shape.cols;
    row.delta_polar = mean(polar);
    row.delta_ns_full = mean(ns_full);
    row.delta_ns_bf16 = mean(ns_bf16);
    row.delta_rho0_mean = mean(rho);
    double ss = 0.0;
    for (double x : rho) ss += (x - row.delta_rho0_mean) * (x - row.delta_rho0_mean);
    row.delta_rho0_std = n_triples > 1 ? std::sqrt(ss / (n_triples - 1)) : 0.0;
    row.n_triples = n_triples;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string audit_csv(const std::vector<AuditRow>& rows) {
  std::ostringstream out;
  out << "shape_label,rows,cols,delta_polar,delta_ns_fp64,delta_ns_bf16,delta_rho0_mean,"
         "delta_rho0_std,n_triples\n";
  for (const auto& r : rows) {
    out << csv_field(r.shape_label) << ',' << r.rows << ',' << r.cols << ','
        << format_sci(r.delta_polar) << ',' << format_sci(r.delta_ns_full) << ','
        << format_sci(r.delta_ns_bf16) << ',' << format_sci(r.delta_rho0_mean) << ','
        << format_sci(r.delta_rho0_std) << ',' << r.n_triples << '\n';
  }
  return out.str();
}

std::string audit_table(const std::vector<AuditRow>& rows) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-34s %10s %12s %12s %12s %14s\n", "Shape (n,m)", "polar",
                "NS5 fp64", "NS5 bf16", "rho_0", "");
  out << line;
  for (const auto& r : rows) {
    const std::string shape = r.shape_label + " (" + std::to_string(r.rows) + "," +
                              std::to_string(r.cols) + ")";
    std::snprintf(line, sizeof line, "%-34s %10.1e %12.1e %12.1e %7.2f +- %.2f\n", shape.c_str(),
                  r.delta_polar, r.delta_ns_full, r.delta_ns_bf16, r.delta_rho0_mean,
                  r.delta_rho0_std);
    out << line;
  }
  return out.str();
}

Matrix rotation2(double angle) {
  Matrix r(2, 2);
  r << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
  return r;
}

CounterexampleResult counterexample_check(double eps) {
  if (!(eps > 0.0)) throw BadFlag("counterexample_check: eps must be positive");
  const Matrix m = Matrix::Identity(2, 2);
  const Matrix q = Matrix::Identity(2, 2);
  const Matrix p = rotation2(std::numbers::pi / 4.0);

  const Matrix lhs = rho_eps(Matrix(p * m * q.transpose()), eps);
  const Matrix rhs = p * rho_eps(m, eps) * q.transpose();

  CounterexampleResult r;
  r.eps = eps;
  r.lhs_factor = std::numbers::sqrt2 / (1.0 + std::numbers::sqrt2 * eps);
  r.rhs_factor = 1.0 / (1.0 + eps);
  r.gap = std::abs(r.lhs_factor - r.rhs_factor);
  r.lhs_matrix_error = (lhs - r.lhs_factor * p).norm();
  r.rhs_matrix_error = (rhs - r.rhs_factor * p).norm();
  if (!(r.gap > 0.0)) throw std::logic_error("counterexample_check: factors coincide");
  return r;
}

}  // namespace polarlab
