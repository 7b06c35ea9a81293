#ifndef POLARLAB_MATCORE_HPP
#define POLARLAB_MATCORE_HPP

// Dense real matrix kernel shared by every other module: storage aliases,
// norms, full SVD, Gaussian and Haar sampling, and bf16 emulation.

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <string_view>

#include "polarlab/error.hpp"

namespace polarlab {

template <typename Scalar>
using DenseMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using DenseVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = DenseMatrix<double>;
using Vector = DenseVector<double>;

// ---------------------------------------------------------------------------
// Rng

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

/// Deterministic 64-bit generator. Child streams are derived from
/// (seed, label) so that independent tasks stay reproducible regardless
/// of the order in which they are scheduled.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(detail::splitmix64(seed)) {}

  [[nodiscard]] std::uint64_t seed() const { return seed_; }

  [[nodiscard]] Rng split(std::string_view label) const {
    return Rng(detail::splitmix64(seed_ ^ detail::splitmix64(detail::fnv1a(label))));
  }

  [[nodiscard]] Rng split(std::uint64_t index) const {
    return Rng(detail::splitmix64(seed_ + detail::splitmix64(index + 0x632BE59BD9B4E019ULL)));
  }

  double normal() { return normal_(engine_); }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  std::uint64_t next_u64() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

// ---------------------------------------------------------------------------
// Norms and sampling

template <typename Derived>
typename Derived::Scalar frobenius_norm(const Eigen::MatrixBase<Derived>& m) {
  return m.norm();
}

/// I.i.d. standard normal entries, filled in row-major order.
template <typename Scalar = double>
DenseMatrix<Scalar> gaussian_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  if (rows < 1 || cols < 1) throw ShapeMismatch("gaussian_matrix: rows and cols must be >= 1");
  DenseMatrix<Scalar> out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = static_cast<Scalar>(rng.normal());
  return out;
}

/// Haar-distributed element of O(n): QR of a Gaussian matrix with the
/// columns of Q multiplied by sign(diag(R)).
template <typename Scalar = double>
DenseMatrix<Scalar> haar_orthogonal(Eigen::Index n, Rng& rng) {
  using ColMajor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  if (n < 1) throw ShapeMismatch("haar_orthogonal: n must be >= 1");
  const ColMajor g = gaussian_matrix<Scalar>(n, n, rng);
  Eigen::HouseholderQR<ColMajor> qr(g);
  ColMajor q = qr.householderQ();
  for (Eigen::Index j = 0; j < n; ++j)
    if (qr.matrixQR()(j, j) < Scalar(0)) q.col(j) = -q.col(j);
  return q;
}

// ---------------------------------------------------------------------------
// SVD

template <typename Scalar>
struct SvdResult {
  DenseMatrix<Scalar> u;  // rows x rows
  DenseVector<Scalar> s;  // min(rows, cols), nonincreasing
  DenseMatrix<Scalar> v;  // cols x cols
};

namespace detail {

// Flip column j so that its largest-magnitude entry is nonnegative.
// Returns true when a flip happened.
template <typename M>
bool needs_flip(const M& col) {
  Eigen::Index idx = 0;
  col.cwiseAbs().maxCoeff(&idx);
  return col(idx) < 0;
}

}  // namespace detail

/// Full SVD m = u * diag_rect(s) * v^T. Each singular pair is sign-fixed so
/// the largest-magnitude entry of the u column is nonnegative; null-space
/// columns of u and v are fixed independently by the same rule.
template <typename Derived>
SvdResult<typename Derived::Scalar> svd(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  using ColMajor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  if (m.size() == 0) throw ShapeMismatch("svd: empty matrix");
  if (!m.allFinite()) throw NonConvergence("svd: input has non-finite entries");

  const ColMajor a(m);
  const Eigen::Index k = std::min(a.rows(), a.cols());
  const Scalar tol = Scalar(1000) * static_cast<Scalar>(std::max(a.rows(), a.cols())) *
                     std::numeric_limits<Scalar>::epsilon() * a.norm();
  auto accurate = [&](const SvdResult<Scalar>& f) {
    if (f.u.size() == 0 || !f.u.allFinite() || !f.v.allFinite() || !f.s.allFinite()) return false;
    const ColMajor rec = f.u.leftCols(k) * f.s.asDiagonal() * f.v.leftCols(k).transpose();
    return (rec - a).norm() <= tol;
  };

  // BDCSVD can lose accuracy on heavily repeated singular values (Kronecker
  // blocks); such results fail the reconstruction check and are recomputed
  // with one-sided Jacobi.
  SvdResult<Scalar> out;
  {
    Eigen::BDCSVD<ColMajor> solver(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
    if (solver.info() == Eigen::Success)
      out = {solver.matrixU(), solver.singularValues(), solver.matrixV()};
  }
  if (!accurate(out)) {
    Eigen::JacobiSVD<ColMajor> solver(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
    if (solver.info() != Eigen::Success) throw NonConvergence("svd: solver did not converge");
    out = {solver.matrixU(), solver.singularValues(), solver.matrixV()};
    if (!accurate(out)) throw NonConvergence("svd: inaccurate factors");
  }

  for (Eigen::Index j = 0; j < k; ++j) {
    if (detail::needs_flip(out.u.col(j))) {
      out.u.col(j) = -out.u.col(j);
      out.v.col(j) = -out.v.col(j);
    }
  }
  for (Eigen::Index j = k; j < out.u.cols(); ++j)
    if (detail::needs_flip(out.u.col(j))) out.u.col(j) = -out.u.col(j);
  for (Eigen::Index j = k; j < out.v.cols(); ++j)
    if (detail::needs_flip(out.v.col(j))) out.v.col(j) = -out.v.col(j);
  return out;
}

/// rows x cols matrix with s on the leading diagonal.
template <typename Scalar>
DenseMatrix<Scalar> diag_rect(const DenseVector<Scalar>& s, Eigen::Index rows, Eigen::Index cols) {
  DenseMatrix<Scalar> out = DenseMatrix<Scalar>::Zero(rows, cols);
  for (Eigen::Index i = 0; i < s.size(); ++i) out(i, i) = s(i);
  return out;
}

// ---------------------------------------------------------------------------
// bf16 emulation

namespace detail {
inline std::atomic<std::uint64_t>& bf16_saturations() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}
}  // namespace detail

/// Largest finite bf16 value, (2 - 2^-7) * 2^127.
inline constexpr double kBf16Max = 0x1.FEp127;

/// Number of entries saturated to +-kBf16Max since process start.
inline std::uint64_t bf16_saturation_count() { return detail::bf16_saturations().load(); }

/// Round to the nearest bf16 value (8 exponent bits, 7 explicit mantissa
/// bits, ties to even) and widen back. Out-of-range values saturate.
inline double round_bf16(double x) {
  if (!std::isfinite(x) || x == 0.0) return x;
  double r;
  if (std::abs(x) >= 0x1p-126) {
    // Drop the low 45 of the 52 stored mantissa bits with round-half-even.
    auto bits = std::bit_cast<std::uint64_t>(x);
    constexpr std::uint64_t kDrop = 45;
    const std::uint64_t lsb = (bits >> kDrop) & 1U;
    bits += ((std::uint64_t{1} << (kDrop - 1)) - 1) + lsb;
    bits &= ~((std::uint64_t{1} << kDrop) - 1);
    r = std::bit_cast<double>(bits);
  } else {
    // bf16 subnormal range: fixed quantum 2^-133.
    r = std::nearbyint(x * 0x1p133) * 0x1p-133;
  }
  if (!(std::abs(r) <= kBf16Max)) {
    detail::bf16_saturations().fetch_add(1, std::memory_order_relaxed);
    r = std::copysign(kBf16Max, x);
  }
  return r;
}

inline float round_bf16(float x) {
  if (!std::isfinite(x) || x == 0.0f) return x;
  auto bits = std::bit_cast<std::uint32_t>(x);
  const std::uint32_t lsb = (bits >> 16) & 1U;
  bits += 0x7FFFU + lsb;
  bits &= 0xFFFF0000U;
  float r = std::bit_cast<float>(bits);
  if (!std::isfinite(r)) {
    detail::bf16_saturations().fetch_add(1, std::memory_order_relaxed);
    r = std::copysign(static_cast<float>(kBf16Max), x);
  }
  return r;
}

template <typename Derived>
DenseMatrix<typename Derived::Scalar> round_bf16(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  return m.unaryExpr([](Scalar x) { return round_bf16(x); });
}

}  // namespace polarlab

#endif  // POLARLAB_MATCORE_HPP
