#ifndef POLARLAB_GAUGE_AUDIT_HPP
#define POLARLAB_GAUGE_AUDIT_HPP

// Conjugation-deviation audit of update maps under orthogonal changes of
// basis G -> P G Q^T.

#include <cstdint>
#include <string>
#include <vector>

#include "polarlab/matcore.hpp"
#include "polarlab/polar.hpp"

namespace polarlab {

enum class UpdateMap { ExactPolar, NsFull, NsBf16, RhoSign };

/// Epsilon used for the sign-limit column.
inline constexpr double kSignLimitEps = 1e-30;

/// Elementwise M_ij / (|M_ij| + eps).
template <typename Derived>
DenseMatrix<typename Derived::Scalar> rho_eps(const Eigen::MatrixBase<Derived>& m, double eps) {
  using Scalar = typename Derived::Scalar;
  if (!(eps > 0.0)) throw BadFlag("rho_eps: eps must be positive");
  const auto e = static_cast<Scalar>(eps);
  return m.unaryExpr([e](Scalar x) { return x / (std::abs(x) + e); });
}

/// phi(G) for one of the audited maps.
Matrix apply_update_map(UpdateMap map, const Matrix& g);

/// ||phi(P G Q^T) - P phi(G) Q^T||_F / (||phi(G)||_F + 1e-12).
/// P and Q must be orthogonal to 1e-10 (Frobenius).
double conjugation_deviation(UpdateMap map, const Matrix& g, const Matrix& p, const Matrix& q);

struct AuditShape {
  std::string label;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
};

struct AuditRow {
  std::string shape_label;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  double delta_polar = 0.0;
  double delta_ns_full = 0.0;
  double delta_ns_bf16 = 0.0;
  double delta_rho0_mean = 0.0;
  double delta_rho0_std = 0.0;
  int n_triples = 0;
};

/// The fifteen audited shapes: SO(3) multiplicity blocks at hc = 8, three
/// DeiT-Tiny projections and synthetic square / non-square shapes.
std::vector<AuditShape> default_audit_shapes();

/// Parses "default" or a comma-separated list such as "8x8,16x4".
std::vector<AuditShape> parse_audit_shapes(const std::string& text);

/// Samples n_triples (G, P, Q) per shape, G Gaussian and P, Q Haar. The
/// random stream of each shape is derived from (master_seed, label), so a
/// row does not depend on its position in the list.
std::vector<AuditRow> run_shape_audit(const std::vector<AuditShape>& shapes, int n_triples,
                                      std::uint64_t master_seed);

std::string audit_csv(const std::vector<AuditRow>& rows);
std::string audit_table(const std::vector<AuditRow>& rows);

struct CounterexampleResult {
  double eps = 0.0;
  double lhs_factor = 0.0;  // rho_eps(P M Q^T) = lhs_factor * P
  double rhs_factor = 0.0;  // P rho_eps(M) Q^T = rhs_factor * P
  double gap = 0.0;
  double lhs_matrix_error = 0.0;  // ||rho_eps(P) - lhs_factor P||_F
  double rhs_matrix_error = 0.0;
};

/// Two-dimensional witness that rho_eps is not basis-covariant:
/// M = Q = I_2, P = rotation by pi/4.
CounterexampleResult counterexample_check(double eps);

/// 2x2 rotation by angle (radians).
Matrix rotation2(double angle);

}  // namespace polarlab

#endif  // POLARLAB_GAUGE_AUDIT_HPP
