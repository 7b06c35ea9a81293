#ifndef POLARLAB_POLAR_HPP
#define POLARLAB_POLAR_HPP

#include <algorithm>
#include <cmath>
#include <limits>

#include "polarlab/matcore.hpp"

namespace polarlab {

enum class Precision { Full, Bf16Emulated };

/// Quintic Newton-Schulz settings. Defaults are the Muon coefficients with
/// five iterations.
struct NsConfig {
  double coeff_a = 3.4445;
  double coeff_b = -4.7750;
  double coeff_c = 2.0315;
  int iterations = 5;
  Precision precision = Precision::Full;
};

/// polar(m) = U * I_rect * V^T from the full SVD.
///
/// Singular pairs whose value is numerically zero are sign-fixed on each
/// side independently (as null-space columns), so a rank-deficient input
/// such as diag(3, 0) maps to the identity.
template <typename Derived>
DenseMatrix<typename Derived::Scalar> exact_polar(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  auto f = svd(m);
  const Eigen::Index k = f.s.size();
  const Scalar tiny = f.s(0) * std::numeric_limits<Scalar>::epsilon() *
                      static_cast<Scalar>(std::max(m.rows(), m.cols()));
  for (Eigen::Index j = 0; j < k; ++j) {
    if (f.s(j) > tiny) continue;
    if (detail::needs_flip(f.v.col(j))) f.v.col(j) = -f.v.col(j);
  }
  return f.u.leftCols(k) * f.v.leftCols(k).transpose();
}

namespace detail {

// One quintic step X <- aX + (bA + cA^2) X with A = X X^T; X is wide.
template <typename Scalar>
void ns_step_full(DenseMatrix<Scalar>& x, const NsConfig& cfg) {
  const DenseMatrix<Scalar> a = x * x.transpose();
  const DenseMatrix<Scalar> b = Scalar(cfg.coeff_b) * a + Scalar(cfg.coeff_c) * (a * a);
  x = Scalar(cfg.coeff_a) * x + b * x;
}

// The same step with every materialised tensor rounded to bf16. Products
// accumulate in fp32 before rounding, like bf16 tensor-core matmuls.
inline void ns_step_bf16(DenseMatrix<float>& x, const NsConfig& cfg) {
  const auto a_coef = static_cast<float>(cfg.coeff_a);
  const auto b_coef = static_cast<float>(cfg.coeff_b);
  const auto c_coef = static_cast<float>(cfg.coeff_c);
  const DenseMatrix<float> a = round_bf16(x * x.transpose());
  const DenseMatrix<float> aa = round_bf16(a * a);
  const DenseMatrix<float> b = round_bf16(round_bf16(b_coef * a) + round_bf16(c_coef * aa));
  const DenseMatrix<float> bx = round_bf16(b * x);
  x = round_bf16(round_bf16(a_coef * x) + bx);
}

}  // namespace detail

/// Runs cfg.iterations quintic steps starting from x0 as given (no
/// normalisation). In bf16 mode x0 is rounded first.
template <typename Derived>
DenseMatrix<typename Derived::Scalar> newton_schulz_iterate(const Eigen::MatrixBase<Derived>& x0,
                                                            const NsConfig& cfg = {}) {
  using Scalar = typename Derived::Scalar;
  const bool tall = x0.rows() > x0.cols();

  if (cfg.precision == Precision::Full) {
    DenseMatrix<Scalar> x = tall ? DenseMatrix<Scalar>(x0.transpose()) : DenseMatrix<Scalar>(x0);
    for (int it = 0; it < cfg.iterations; ++it) detail::ns_step_full(x, cfg);
    if (tall) return x.transpose();
    return x;
  }

  const DenseMatrix<double> start = round_bf16(x0.template cast<double>());
  DenseMatrix<float> x = tall ? DenseMatrix<float>(start.transpose().cast<float>())
                              : DenseMatrix<float>(start.cast<float>());
  for (int it = 0; it < cfg.iterations; ++it) detail::ns_step_bf16(x, cfg);
  if (tall) return x.transpose().template cast<Scalar>();
  return x.template cast<Scalar>();
}

/// Order-k Newton-Schulz approximation of polar(m), iterated on m/||m||_F.
/// The Gram matrix is always formed on the smaller side: tall inputs are
/// transposed in and out. In bf16 mode the input is rounded before it is
/// normalised.
template <typename Derived>
DenseMatrix<typename Derived::Scalar> newton_schulz(const Eigen::MatrixBase<Derived>& m,
                                                    const NsConfig& cfg = {}) {
  using Scalar = typename Derived::Scalar;
  if (cfg.precision == Precision::Full) {
    const Scalar norm = m.norm();
    if (!(norm > Scalar(0))) throw ZeroMatrix("newton_schulz: input has zero Frobenius norm");
    return newton_schulz_iterate(m / norm, cfg);
  }
  const DenseMatrix<double> rounded = round_bf16(m.template cast<double>());
  const double norm = rounded.norm();
  if (!(norm > 0.0)) throw ZeroMatrix("newton_schulz: input has zero Frobenius norm in bf16");
  return newton_schulz_iterate(rounded / norm, cfg).template cast<Scalar>();
}

/// sqrt(max(rows, cols) / min(rows, cols)).
inline double shape_scale(Eigen::Index rows, Eigen::Index cols) {
  if (rows < 1 || cols < 1) throw ShapeMismatch("shape_scale: dimensions must be >= 1");
  const auto hi = static_cast<double>(std::max(rows, cols));
  const auto lo = static_cast<double>(std::min(rows, cols));
  return std::sqrt(hi / lo);
}

}  // namespace polarlab

#endif  // POLARLAB_POLAR_HPP
