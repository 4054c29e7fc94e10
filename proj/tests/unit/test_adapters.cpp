#include <gtest/gtest.h>

#include "pvb/adapters.hpp"
#include "support/support.hpp"

namespace pvb::adapters {
namespace {

using pvb::testing::numeric_gradient;
using pvb::testing::random_matrix;
using pvb::testing::rel_err;
using pvb::testing::to_eigen;

PolarAdapter random_polar(Rng& rng, std::size_t m, std::size_t n, std::size_t r, double scale) {
  PolarAdapter p = init_polar(rng, m, n, r, scale);
  p.lam = random_matrix(rng, r, r);
  return p;
}

TEST(PolarDelta, Cases) {
  Rng rng(1);
  PolarAdapter p = init_polar(rng, 5, 4, 2, 2.0);
  p.lam = Matrix(2, 2);
  EXPECT_EQ(polar_delta(p), Matrix(5, 4));

  const double d[] = {3.0, -1.0, 0.5};
  PolarAdapter eye{StiefelFactor(Matrix::identity(3)), StiefelFactor(Matrix::identity(3)),
                   Matrix::diagonal(d), 1.0};
  EXPECT_EQ(polar_delta(eye), Matrix::diagonal(d));

  const PolarAdapter q = random_polar(rng, 6, 5, 3, 0.7);
  const Eigen::MatrixXd oracle =
      0.7 * to_eigen(q.u.mat()) * to_eigen(q.lam) * to_eigen(q.v.mat()).transpose();
  EXPECT_LT(max_abs_diff(polar_delta(q), pvb::testing::from_eigen(oracle)), 1e-14);
}

TEST(PolarDelta, LinearInCore) {
  Rng rng(2);
  PolarAdapter p = random_polar(rng, 6, 4, 3, 1.5);
  const Matrix l1 = random_matrix(rng, 3, 3);
  const Matrix l2 = random_matrix(rng, 3, 3);
  PolarAdapter a = p, b = p, ab = p;
  a.lam = l1;
  b.lam = l2;
  ab.lam = l1 + l2;
  EXPECT_LT(max_abs_diff(polar_delta(ab), polar_delta(a) + polar_delta(b)), 1e-14);
}

TEST(PolarInit, FactorsOrthonormal) {
  Rng rng(3);
  const PolarAdapter p = init_polar(rng, 32, 8, 8, 2.0);
  EXPECT_LT(p.u.infeasibility(), 1e-24);
  EXPECT_LT(p.v.infeasibility(), 1e-24);
  EXPECT_EQ(p.rank(), 8u);
  EXPECT_DOUBLE_EQ(p.alpha_scale, 2.0);
}

TEST(PolarFactorGrads, Cases) {
  Rng rng(4);
  const PolarAdapter p = random_polar(rng, 5, 4, 2, 1.3);
  const FactorGrads z = polar_factor_grads(p, Matrix(5, 4));
  EXPECT_EQ(z.g_u, Matrix(5, 2));
  EXPECT_EQ(z.g_v, Matrix(4, 2));
  EXPECT_EQ(z.g_lam, Matrix(2, 2));

  PolarAdapter one{StiefelFactor(Matrix::from_rows({{1}, {0}, {0}})),
                   StiefelFactor(Matrix::from_rows({{1}, {0}})), Matrix::from_rows({{0.7}}), 2.5};
  const Matrix g = Matrix::from_rows({{3, 1}, {4, 1}, {5, 9}});
  EXPECT_DOUBLE_EQ(polar_factor_grads(one, g).g_lam(0, 0), 3.0 * 2.5);
  EXPECT_THROW(polar_factor_grads(one, Matrix(2, 2)), Error);
}

TEST(PolarFactorGrads, MatchFiniteDifferences) {
  Rng rng(5);
  for (int it = 0; it < 20; ++it) {
    const std::size_t m = 2 + rng.next_u64() % 8, n = 2 + rng.next_u64() % 8;
    const std::size_t r = 1 + rng.next_u64() % std::min(m, n);
    PolarAdapter p = random_polar(rng, m, n, r, 0.5 + rng.uniform());
    const Matrix g = random_matrix(rng, m, n);
    const FactorGrads fg = polar_factor_grads(p, g);

    Matrix u = p.u.mat(), v = p.v.mat();
    auto loss = [&] {
      PolarAdapter q{StiefelFactor(u), StiefelFactor(v), p.lam, p.alpha_scale};
      return inner(g, polar_delta(q));
    };
    EXPECT_LE(rel_err(fg.g_u, numeric_gradient(&u, loss)), 1e-6);
    EXPECT_LE(rel_err(fg.g_v, numeric_gradient(&v, loss)), 1e-6);
    EXPECT_LE(rel_err(fg.g_lam, numeric_gradient(&p.lam, loss)), 1e-6);
  }
}

TEST(Lora, InitIsZeroAndGradsVanishForZeroG) {
  Rng rng(6);
  const LoraAdapter l = init_lora(rng, 6, 5, 3, 2.0);
  EXPECT_EQ(lora_delta(l), Matrix(6, 5));
  EXPECT_EQ(l.b, Matrix(6, 3));
  LoraAdapter r = l;
  r.b = random_matrix(rng, 6, 3);
  const LoraGrads z = lora_factor_grads(r, Matrix(6, 5));
  EXPECT_EQ(z.g_b, Matrix(6, 3));
  EXPECT_EQ(z.g_a, Matrix(3, 5));
  EXPECT_THROW(lora_factor_grads(r, Matrix(5, 5)), Error);
}

TEST(Lora, InitScaleOfA) {
  Rng rng(7);
  const LoraAdapter l = init_lora(rng, 40, 500, 8, 2.0);
  double sq = 0.0;
  for (double v : l.a.values()) sq += v * v;
  EXPECT_NEAR(std::sqrt(sq / static_cast<double>(l.a.size())), 0.02, 0.002);
}

TEST(Lora, GradsMatchFiniteDifferences) {
  Rng rng(8);
  for (int it = 0; it < 20; ++it) {
    LoraAdapter l{random_matrix(rng, 6, 3), random_matrix(rng, 3, 7), 0.5 + rng.uniform()};
    const Matrix g = random_matrix(rng, 6, 7);
    const LoraGrads lg = lora_factor_grads(l, g);
    auto loss = [&] { return inner(g, lora_delta(l)); };
    EXPECT_LE(rel_err(lg.g_b, numeric_gradient(&l.b, loss)), 1e-6);
    EXPECT_LE(rel_err(lg.g_a, numeric_gradient(&l.a, loss)), 1e-6);
  }
}

TEST(AdapterDelta, EmptySlotIsZero) {
  EXPECT_EQ(adapter_delta(Adapter{}, 3, 4), Matrix(3, 4));
}

TEST(StableRank, Cases) {
  Rng rng(9);
  const Matrix r1 = matmul_nt(random_matrix(rng, 5, 1), random_matrix(rng, 4, 1));
  EXPECT_NEAR(stable_rank(r1), 1.0, 1e-9);
  EXPECT_NEAR(stable_rank(Matrix::from_rows({{2, 0}, {0, 1}})), 1.25, 1e-9);
  Matrix iso(6, 4);
  for (std::size_t i = 0; i < 4; ++i) iso(i, i) = 3.0;
  EXPECT_NEAR(stable_rank(iso), 4.0, 1e-9);
  // Any matrix with equal singular values: an orthonormal frame times a scale.
  const Matrix q = qr_orthonormalize(random_matrix(rng, 9, 5)) * 0.3;
  EXPECT_NEAR(stable_rank(q), 5.0, 1e-8);
  EXPECT_THROW(stable_rank(Matrix(3, 3)), Error);
}

TEST(StableRank, WithinBounds) {
  Rng rng(10);
  for (int it = 0; it < 20; ++it) {
    const Matrix a = random_matrix(rng, 3 + it % 5, 2 + it % 7);
    const double sr = stable_rank(a);
    EXPECT_GE(sr, 1.0);
    EXPECT_LE(sr, static_cast<double>(std::min(a.rows(), a.cols())));
  }
}

}  // namespace
}  // namespace pvb::adapters
