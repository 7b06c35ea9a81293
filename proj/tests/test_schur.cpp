#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "polarlab/schur.hpp"

using namespace polarlab;

TEST_CASE("kron with identity") {
  Matrix b(1, 1);
  b << 2;
  CHECK(kron_identity(b, 3) == Matrix(2.0 * Matrix::Identity(3, 3)));
  CHECK(kron_identity(Matrix(Matrix::Identity(2, 2)), 2) == Matrix(Matrix::Identity(4, 4)));

  Rng rng(1);
  const Matrix r = gaussian_matrix(3, 5, rng);
  const Matrix k = kron_identity(r, 4);
  CHECK(k.rows() == 12);
  CHECK(k.cols() == 20);
  CHECK(k.norm() == doctest::Approx(2.0 * r.norm()).epsilon(1e-14));
  CHECK(k(1 * 4 + 2, 3 * 4 + 2) == r(1, 3));
  CHECK(k(1 * 4 + 2, 3 * 4 + 1) == 0.0);
  CHECK_THROWS_AS(kron_identity(r, 0), ShapeMismatch);
}

TEST_CASE("kron with identity repeats each singular value d times") {
  Rng rng(2);
  const Matrix b = gaussian_matrix(3, 3, rng);
  const auto fb = svd(b);
  const auto fk = svd(kron_identity(b, 3));
  for (Eigen::Index i = 0; i < 3; ++i)
    for (Eigen::Index r = 0; r < 3; ++r) CHECK(std::abs(fk.s(i * 3 + r) - fb.s(i)) <= 1e-12);
}

TEST_CASE("assemble small specs") {
  IsotypicSpec one{{{0, 1, 2, 2}}};
  Rng rng(3);
  const Matrix b = gaussian_matrix(2, 2, rng);
  CHECK(assemble_equivariant(one, BlockList<double>{{0, b}}) == b);

  IsotypicSpec two{{{0, 1, 1, 1}, {1, 3, 1, 1}}};
  Matrix a(1, 1), c(1, 1);
  a << 2.0;
  c << -1.5;
  const Matrix m = assemble_equivariant(two, BlockList<double>{{0, a}, {1, c}});
  Matrix expected = Matrix::Zero(4, 4);
  expected.diagonal() << 2.0, -1.5, -1.5, -1.5;
  CHECK(m == expected);
}

TEST_CASE("assemble rejects mismatched blocks") {
  IsotypicSpec spec{{{0, 1, 2, 2}, {1, 3, 1, 2}}};
  CHECK_THROWS_AS(assemble_equivariant(spec, BlockList<double>{{0, Matrix::Zero(2, 2)}}), SpecMismatch);
  CHECK_THROWS_AS(
      assemble_equivariant(spec, BlockList<double>{{0, Matrix::Zero(2, 2)}, {1, Matrix::Zero(1, 2)}}),
      SpecMismatch);
  CHECK_THROWS_AS(
      assemble_equivariant(spec, BlockList<double>{{1, Matrix::Zero(2, 1)}, {0, Matrix::Zero(2, 2)}}),
      SpecMismatch);
  IsotypicSpec dup{{{0, 1, 1, 1}, {0, 3, 1, 1}}};
  CHECK_THROWS_AS(dup.validate(), SpecMismatch);
  IsotypicSpec zero_dim{{{0, 0, 1, 1}}};
  CHECK_THROWS_AS(zero_dim.validate(), SpecMismatch);
}

TEST_CASE("extract inverts assemble exactly") {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const IsotypicSpec spec = oracle::random_spec(rng, false);
    const auto blocks = oracle::random_blocks(spec, rng);
    const auto ex = extract_blocks(spec, assemble_equivariant(spec, blocks));
    CHECK(ex.residual == 0.0);
    for (std::size_t k = 0; k < blocks.size(); ++k) CHECK(ex.blocks[k].b == blocks[k].b);
  }
}

TEST_CASE("extract residual equals the norm of off-structure noise") {
  IsotypicSpec spec{{{0, 1, 2, 2}, {1, 3, 2, 1}}};
  Rng rng(5);
  const auto blocks = oracle::random_blocks(spec, rng);
  const Matrix clean = assemble_equivariant(spec, blocks);
  // Noise supported where the equivariant pattern is identically zero.
  Matrix noise = gaussian_matrix(clean.rows(), clean.cols(), rng);
  const Matrix pattern = assemble_equivariant(
      spec, BlockList<double>{{0, Matrix::Ones(2, 2)}, {1, Matrix::Ones(1, 2)}});
  for (Eigen::Index i = 0; i < noise.rows(); ++i)
    for (Eigen::Index j = 0; j < noise.cols(); ++j)
      if (pattern(i, j) != 0.0) noise(i, j) = 0.0;
  const auto ex = extract_blocks(spec, Matrix(clean + noise));
  CHECK(ex.residual == doctest::Approx(noise.norm()).epsilon(1e-12));
  for (std::size_t k = 0; k < blocks.size(); ++k) CHECK((ex.blocks[k].b - blocks[k].b).norm() <= 1e-15);

  CHECK_THROWS_AS(extract_blocks(spec, Matrix::Zero(3, 3)), ShapeMismatch);
}

TEST_CASE("extract on a d = 1 spec reads the diagonal sub-matrices") {
  IsotypicSpec spec{{{0, 1, 2, 1}, {1, 1, 1, 2}}};
  Rng rng(6);
  const Matrix m = gaussian_matrix(3, 3, rng);
  const auto ex = extract_blocks(spec, m);
  CHECK(ex.blocks[0].b == m.block(0, 0, 1, 2));
  CHECK(ex.blocks[1].b == m.block(1, 2, 2, 1));
  const double off = std::sqrt(m.block(0, 2, 1, 1).squaredNorm() + m.block(1, 0, 2, 2).squaredNorm());
  CHECK(ex.residual == doctest::Approx(off).epsilon(1e-14));
}

TEST_CASE("block polar leaves orthogonal blocks unchanged and matches exact polar for one block") {
  Rng rng(7);
  IsotypicSpec spec{{{0, 1, 4, 4}, {1, 3, 3, 3}}};
  const BlockList<double> ortho{{0, haar_orthogonal(4, rng)}, {1, haar_orthogonal(3, rng)}};
  const auto out = block_polar(spec, ortho);
  for (std::size_t k = 0; k < 2; ++k) CHECK((out[k].b - ortho[k].b).norm() <= 1e-12);

  IsotypicSpec single{{{0, 1, 5, 6}}};
  const Matrix b = gaussian_matrix(6, 5, rng);
  CHECK((block_polar(single, BlockList<double>{{0, b}})[0].b - exact_polar(b)).norm() <= 1e-14);
}

TEST_CASE("block-wise polar and NS agree with the ambient maps") {
  Rng rng(8);
  double worst_polar = 0.0, worst_ns = 0.0;
  for (int t = 0; t < 20; ++t) {
    const IsotypicSpec spec = oracle::random_spec(rng);
    const auto gaps = oracle::lemma2_gaps(spec, oracle::random_blocks(spec, rng));
    worst_polar = std::max(worst_polar, gaps.polar);
    worst_ns = std::max(worst_ns, gaps.ns);
  }
  CHECK(worst_polar <= 1e-9);
  CHECK(worst_ns <= 1e-6);
}

TEST_CASE("block NS rejects all-zero blocks") {
  IsotypicSpec spec{{{0, 3, 2, 2}}};
  CHECK_THROWS_AS(block_newton_schulz(spec, BlockList<double>{{0, Matrix::Zero(2, 2)}}), ZeroMatrix);
}
