#ifndef POLARLAB_SCHUR_HPP
#define POLARLAB_SCHUR_HPP

// Multiplicity-block model of equivariant linear maps: a map between
// isotypic decompositions is a direct sum of B_l (x) I_{d_l} blocks.

#include <set>
#include <string>
#include <vector>

#include "polarlab/matcore.hpp"
#include "polarlab/polar.hpp"

namespace polarlab {

struct IsotypicEntry {
  int label = 0;
  Eigen::Index irrep_dim = 1;
  Eigen::Index mult_in = 0;
  Eigen::Index mult_out = 0;
};

/// Ordered list of irrep types. Ambient offsets follow the list order.
struct IsotypicSpec {
  std::vector<IsotypicEntry> entries;

  void validate() const {
    std::set<int> seen;
    for (const auto& e : entries) {
      if (e.irrep_dim < 1) throw SpecMismatch("isotypic spec: irrep_dim must be >= 1");
      if (e.mult_in < 0 || e.mult_out < 0)
        throw SpecMismatch("isotypic spec: multiplicities must be >= 0");
      if (!seen.insert(e.label).second)
        throw SpecMismatch("isotypic spec: duplicate label " + std::to_string(e.label));
    }
  }

  [[nodiscard]] Eigen::Index ambient_in() const {
    Eigen::Index n = 0;
    for (const auto& e : entries) n += e.irrep_dim * e.mult_in;
    return n;
  }

  [[nodiscard]] Eigen::Index ambient_out() const {
    Eigen::Index n = 0;
    for (const auto& e : entries) n += e.irrep_dim * e.mult_out;
    return n;
  }
};

template <typename Scalar>
struct MultiplicityBlock {
  int label = 0;
  DenseMatrix<Scalar> b;  // mult_out x mult_in
};

template <typename Scalar>
using BlockList = std::vector<MultiplicityBlock<Scalar>>;

/// B (x) I_d: entry (i*d + r, j*d + c) = B(i, j) * [r == c].
template <typename Derived>
DenseMatrix<typename Derived::Scalar> kron_identity(const Eigen::MatrixBase<Derived>& b,
                                                    Eigen::Index d) {
  using Scalar = typename Derived::Scalar;
  if (d < 1) throw ShapeMismatch("kron_identity: d must be >= 1");
  DenseMatrix<Scalar> out = DenseMatrix<Scalar>::Zero(b.rows() * d, b.cols() * d);
  for (Eigen::Index i = 0; i < b.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      for (Eigen::Index r = 0; r < d; ++r) out(i * d + r, j * d + r) = b(i, j);
  return out;
}

namespace detail {

template <typename Scalar>
void check_blocks(const IsotypicSpec& spec, const BlockList<Scalar>& blocks) {
  spec.validate();
  if (blocks.size() != spec.entries.size())
    throw SpecMismatch("block count does not match the isotypic spec");
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const auto& e = spec.entries[k];
    const auto& blk = blocks[k];
    if (blk.label != e.label) throw SpecMismatch("block label order does not match the spec");
    if (blk.b.rows() != e.mult_out || blk.b.cols() != e.mult_in)
      throw SpecMismatch("block " + std::to_string(e.label) + " has the wrong shape");
  }
}

}  // namespace detail

/// Block-diagonal ambient matrix with the l-th diagonal block B_l (x) I_{d_l}.
template <typename Scalar>
DenseMatrix<Scalar> assemble_equivariant(const IsotypicSpec& spec, const BlockList<Scalar>& blocks) {
  detail::check_blocks(spec, blocks);
  DenseMatrix<Scalar> out = DenseMatrix<Scalar>::Zero(spec.ambient_out(), spec.ambient_in());
  Eigen::Index row = 0;
  Eigen::Index col = 0;
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const auto& e = spec.entries[k];
    const Eigen::Index h = e.irrep_dim * e.mult_out;
    const Eigen::Index w = e.irrep_dim * e.mult_in;
    if (h > 0 && w > 0) out.block(row, col, h, w) = kron_identity(blocks[k].b, e.irrep_dim);
    row += h;
    col += w;
  }
  return out;
}

template <typename Scalar>
struct BlockExtraction {
  BlockList<Scalar> blocks;
  Scalar residual = 0;  // ||m - assemble(blocks)||_F
};

/// Projects m onto the equivariant subspace: B_l(i, j) is the mean of the
/// d_l diagonal entries of the (i, j) sub-block. The residual measures the
/// non-equivariant part of m.
template <typename Derived>
BlockExtraction<typename Derived::Scalar> extract_blocks(const IsotypicSpec& spec,
                                                         const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  spec.validate();
  if (m.rows() != spec.ambient_out() || m.cols() != spec.ambient_in())
    throw ShapeMismatch("extract_blocks: matrix shape does not match the isotypic spec");

  BlockExtraction<Scalar> out;
  Eigen::Index row = 0;
  Eigen::Index col = 0;
  for (const auto& e : spec.entries) {
    const Eigen::Index d = e.irrep_dim;
    DenseMatrix<Scalar> b(e.mult_out, e.mult_in);
    for (Eigen::Index i = 0; i < e.mult_out; ++i) {
      for (Eigen::Index j = 0; j < e.mult_in; ++j) {
        // Mean written as first + mean offset, exact when the d copies agree.
        const Scalar first = m(row + i * d, col + j * d);
        Scalar acc = 0;
        for (Eigen::Index r = 1; r < d; ++r) acc += m(row + i * d + r, col + j * d + r) - first;
        b(i, j) = first + acc / static_cast<Scalar>(d);
      }
    }
    out.blocks.push_back({e.label, std::move(b)});
    row += d * e.mult_out;
    col += d * e.mult_in;
  }
  out.residual = (m - assemble_equivariant(spec, out.blocks)).norm();
  return out;
}

/// Applies exact_polar to every multiplicity block. Empty blocks pass through.
template <typename Scalar>
BlockList<Scalar> block_polar(const IsotypicSpec& spec, const BlockList<Scalar>& blocks) {
  detail::check_blocks(spec, blocks);
  BlockList<Scalar> out;
  out.reserve(blocks.size());
  for (const auto& blk : blocks) {
    if (blk.b.size() == 0) {
      out.push_back(blk);
      continue;
    }
    out.push_back({blk.label, exact_polar(blk.b)});
  }
  return out;
}

/// Block-wise Newton-Schulz with one shared normalisation: every block is
/// divided by the ambient Frobenius norm ||assemble(blocks)||_F before the
/// iteration, which is what the ambient iteration sees.
template <typename Scalar>
BlockList<Scalar> block_newton_schulz(const IsotypicSpec& spec, const BlockList<Scalar>& blocks,
                                      const NsConfig& cfg = {}) {
  detail::check_blocks(spec, blocks);
  Scalar ambient_sq = 0;
  for (std::size_t k = 0; k < blocks.size(); ++k)
    ambient_sq += static_cast<Scalar>(spec.entries[k].irrep_dim) * blocks[k].b.squaredNorm();
  const Scalar ambient = std::sqrt(ambient_sq);
  if (!(ambient > Scalar(0))) throw ZeroMatrix("block_newton_schulz: all blocks are zero");

  BlockList<Scalar> out;
  out.reserve(blocks.size());
  for (const auto& blk : blocks) {
    if (blk.b.size() == 0) {
      out.push_back(blk);
      continue;
    }
    out.push_back({blk.label, newton_schulz_iterate(blk.b / ambient, cfg)});
  }
  return out;
}

}  // namespace polarlab

#endif  // POLARLAB_SCHUR_HPP
