#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "m3d/svd.hpp"

using namespace m3d;
using Td = Tensor<double>;

namespace {

double orthonormality_error(const Td& cols_matrix, bool by_rows) {
  const Td g = by_rows ? matmul(cols_matrix, transpose(cols_matrix))
                       : matmul(transpose(cols_matrix), cols_matrix);
  return max_abs_diff(g, identity<double>(g.rows()));
}

}  // namespace

TEST(Svd, Diagonal) {
  Td m = Td::from_rows({{3, 0}, {0, 2}});
  auto r = truncated_svd(m, 2);
  EXPECT_NEAR(r.S[0], 3, 1e-14);
  EXPECT_NEAR(r.S[1], 2, 1e-14);
  EXPECT_LE(max_abs_diff(r.U, identity<double>(2)), 1e-14);
  EXPECT_LE(max_abs_diff(r.Vt, identity<double>(2)), 1e-14);
}

TEST(Svd, RankOutOfRange) {
  Td m({4, 3}, 1.0);
  EXPECT_THROW(truncated_svd(m, 0), ParameterError);
  EXPECT_THROW(truncated_svd(m, 4), ParameterError);
}

TEST(Svd, KnownRankTwoConstruction) {
  // m = 5·u1 w1ᵀ + 2·u2 w2ᵀ with orthonormal u's and w's.
  const double s = 1 / std::sqrt(2.0);
  std::vector<double> u1{s, s, 0, 0}, u2{0, 0, s, -s};
  std::vector<double> w1{0.6, 0.8, 0}, w2{0, 0, 1};
  Td m({4, 3});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) m.at(i, j) = 5 * u1[i] * w1[j] + 2 * u2[i] * w2[j];
  auto r2 = truncated_svd(m, 2);
  EXPECT_LE(frobenius_norm(r2.reconstruct() - m) / frobenius_norm(m), 1e-10);
  auto r1 = truncated_svd(m, 1);
  EXPECT_NEAR(frobenius_norm(r1.reconstruct() - m), 2.0, 1e-8);
}

TEST(Svd, SignConvention) {
  std::mt19937_64 rng(9);
  Td m = random_normal<double>({7, 5}, 1.0, rng);
  auto r = truncated_svd(m, 5);
  for (std::size_t k = 0; k < 5; ++k) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < 7; ++i)
      if (std::abs(r.U.at(i, k)) > std::abs(r.U.at(best, k))) best = i;
    EXPECT_GE(r.U.at(best, k), 0.0);
  }
}

TEST(Svd, ZeroMatrixStillOrthonormal) {
  auto r = truncated_svd(Td({5, 3}), 3);
  for (double s : r.S.data()) EXPECT_EQ(s, 0.0);
  EXPECT_LE(orthonormality_error(r.U, false), 1e-12);
  EXPECT_LE(orthonormality_error(r.Vt, true), 1e-12);
}

class SvdRandom : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(SvdRandom, OrthonormalReconstructsAndTruncatesOptimally) {
  std::mt19937_64 rng(GetParam());
  std::uniform_int_distribution<std::size_t> dim(1, 32);
  std::size_t rows = dim(rng), cols = std::uniform_int_distribution<std::size_t>(1, 16)(rng);
  if (GetParam() % 3 == 0) std::swap(rows, cols);  // wide inputs too
  Td m = random_normal<double>({rows, cols}, 1.0, rng);
  const std::size_t full = std::min(rows, cols);

  auto r = truncated_svd(m, full);
  EXPECT_LE(orthonormality_error(r.U, false), 1e-8);
  EXPECT_LE(orthonormality_error(r.Vt, true), 1e-8);
  EXPECT_LE(frobenius_norm(r.reconstruct() - m) / frobenius_norm(m), 1e-10);
  for (std::size_t k = 1; k < full; ++k) {
    EXPECT_GE(r.S[k - 1], r.S[k]);
    EXPECT_GE(r.S[k], 0.0);
  }

  double prev = INFINITY;
  for (std::size_t k = 1; k <= full; ++k) {
    auto t = truncated_svd(m, k);
    double discarded = 0;
    for (std::size_t j = k; j < full; ++j) discarded += r.S[j] * r.S[j];
    const double err = frobenius_norm(t.reconstruct() - m);
    EXPECT_NEAR(err, std::sqrt(discarded), 1e-8) << rows << "x" << cols << " k=" << k;
    EXPECT_LE(err, prev + 1e-12);
    prev = err;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, SvdRandom, ::testing::Range<std::uint64_t>(0, 24));
