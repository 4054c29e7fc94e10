#include <cmath>

#include <gtest/gtest.h>

#include "pvb/vbll.hpp"
#include "support/support.hpp"

namespace pvb::vbll {
namespace {

using pvb::testing::numeric_gradient;
using pvb::testing::random_head;
using pvb::testing::random_matrix;
using pvb::testing::random_onehot;
using pvb::testing::rel_err;
using pvb::testing::to_eigen;
using pvb::testing::uniform_int;

VbllHead near_deterministic(Matrix means) {
  VbllHead h = init_head(means.rows(), means.cols(), 1.0, 0.0);
  h.means = std::move(means);
  for (auto& l : h.chol) l = Matrix::identity(h.feature_dim()) * 1e-8;
  return h;
}

double ce_oracle(const Matrix& w, const Matrix& x, const Matrix& y) {
  const Eigen::MatrixXd logits = to_eigen(x) * to_eigen(w).transpose();
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    for (Eigen::Index c = 0; c < logits.cols(); ++c) total -= y(i, c) * (logits(i, c) - lse);
  }
  return total / static_cast<double>(logits.rows());
}

// Gaussian KL to N(0, s2 I) in its textbook trace / Mahalanobis / log-det form.
double kl_oracle(const VbllHead& h) {
  const double s2 = h.prior_var;
  const auto d = static_cast<double>(h.feature_dim());
  double kl = 0.0;
  for (std::size_t c = 0; c < h.num_classes(); ++c) {
    const Eigen::MatrixXd l = to_eigen(h.chol[c]);
    const Eigen::MatrixXd s = l * l.transpose();
    const Eigen::VectorXd mu = to_eigen(h.means).row(static_cast<Eigen::Index>(c)).transpose();
    kl += 0.5 * (s.trace() / s2 + mu.squaredNorm() / s2 - d + d * std::log(s2) -
                 std::log(s.determinant()));
  }
  return kl;
}

TEST(Init, PriorShaped) {
  const VbllHead h = init_head(3, 4, 0.25, 0.1);
  EXPECT_EQ(h.means, Matrix(3, 4));
  ASSERT_EQ(h.chol.size(), 3u);
  for (const auto& l : h.chol) EXPECT_EQ(l, Matrix::identity(4) * 0.5);
  EXPECT_NO_THROW(validate(h));
  EXPECT_EQ(kl_to_prior(h), 0.0);
}

TEST(Validate, RejectsBadFactors) {
  VbllHead h = init_head(2, 3, 1.0, 0.0);
  h.chol[1](2, 2) = 0.0;
  EXPECT_THROW(validate(h), Error);
  h = init_head(2, 3, 1.0, 0.0);
  h.chol[0](0, 2) = 0.1;
  EXPECT_THROW(validate(h), Error);
  h = init_head(2, 3, 1.0, 0.0);
  h.chol.pop_back();
  EXPECT_THROW(validate(h), Error);
}

TEST(JensenLogits, UnitCovarianceZeroMean) {
  const VbllHead h = init_head(4, 3, 1.0, 0.0);
  const JensenLogits j = jensen_logits(h, Matrix::from_rows({{1, 0, 0}}));
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_DOUBLE_EQ(j.eta(0, c), 0.5);
    EXPECT_DOUBLE_EQ(j.ptilde(0, c), 0.25);
  }
}

TEST(JensenLogits, DegenerateCovarianceGivesMeanLogits) {
  Rng rng(1);
  const Matrix means = random_matrix(rng, 3, 4);
  const Matrix x = random_matrix(rng, 5, 4);
  const JensenLogits j = jensen_logits(near_deterministic(means), x);
  EXPECT_LT(max_abs_diff(j.eta, matmul_nt(x, means)), 1e-12);
}

TEST(JensenLogits, MatchesDirectFormula) {
  Rng rng(2);
  for (int it = 0; it < 20; ++it) {
    const VbllHead h = random_head(rng, 4, 6);
    const Matrix x = random_matrix(rng, 3, 6);
    const JensenLogits j = jensen_logits(h, x);
    for (std::size_t n = 0; n < 3; ++n) {
      const Eigen::VectorXd phi = to_eigen(x).row(static_cast<Eigen::Index>(n)).transpose();
      double total = 0.0;
      for (std::size_t c = 0; c < 4; ++c) {
        const Eigen::MatrixXd l = to_eigen(h.chol[c]);
        const Eigen::VectorXd mu =
            to_eigen(h.means).row(static_cast<Eigen::Index>(c)).transpose();
        const double eta = mu.dot(phi) + 0.5 * phi.dot(l * l.transpose() * phi);
        EXPECT_NEAR(j.eta(n, c), eta, 1e-12);
        total += j.ptilde(n, c);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(JensenLogits, ConstantShiftLeavesPtilde) {
  Rng rng(3);
  VbllHead h = random_head(rng, 3, 2);
  const Matrix x = Matrix::from_rows({{1, 0}});
  const Matrix before = jensen_logits(h, x).ptilde;
  for (std::size_t c = 0; c < 3; ++c) h.means(c, 0) += 5.0;  // eta shifts by 5 for every class
  EXPECT_LT(max_abs_diff(jensen_logits(h, x).ptilde, before), 1e-12);
}

TEST(SurrogateLoss, UninformativeTwoClass) {
  const VbllHead h = near_deterministic(Matrix(2, 3));
  Rng rng(4);
  const Matrix x = random_matrix(rng, 6, 3);
  EXPECT_NEAR(surrogate_loss(h, x, random_onehot(rng, 6, 2)), std::log(2.0), 1e-12);
}

TEST(SurrogateLoss, DeterministicLimitIsCrossEntropy) {
  Rng rng(5);
  for (int it = 0; it < 20; ++it) {
    const Matrix means = random_matrix(rng, 4, 5);
    const Matrix x = random_matrix(rng, 7, 5);
    const Matrix y = random_onehot(rng, 7, 4);
    EXPECT_NEAR(surrogate_loss(near_deterministic(means), x, y), ce_oracle(means, x, y), 1e-10);
    EXPECT_NEAR(cross_entropy(means, x, y), ce_oracle(means, x, y), 1e-12);
  }
}

TEST(SurrogateLoss, MatchesHandAssembly) {
  Rng rng(6);
  for (int it = 0; it < 20; ++it) {
    const VbllHead h = random_head(rng, 3, 4, 0.5 + rng.uniform(), 0.05);
    const Matrix x = random_matrix(rng, 4, 4);
    const Matrix y = random_onehot(rng, 4, 3);
    double lik = 0.0;
    for (std::size_t n = 0; n < 4; ++n) {
      const Eigen::VectorXd phi = to_eigen(x).row(static_cast<Eigen::Index>(n)).transpose();
      Eigen::VectorXd eta(3), lin(3);
      for (std::size_t c = 0; c < 3; ++c) {
        const Eigen::MatrixXd l = to_eigen(h.chol[c]);
        lin(static_cast<Eigen::Index>(c)) =
            to_eigen(h.means).row(static_cast<Eigen::Index>(c)).dot(phi.transpose());
        eta(static_cast<Eigen::Index>(c)) =
            lin(static_cast<Eigen::Index>(c)) + 0.5 * (l.transpose() * phi).squaredNorm();
      }
      const double m = eta.maxCoeff();
      const double lse = m + std::log((eta.array() - m).exp().sum());
      for (std::size_t c = 0; c < 3; ++c) lik += y(n, c) * (lse - lin(static_cast<Eigen::Index>(c)));
    }
    const double want = lik / 4.0 + h.kl_weight * kl_oracle(h);
    EXPECT_NEAR(surrogate_loss(h, x, y), want, 1e-12);
  }
}

TEST(Kl, Analytic) {
  VbllHead h = init_head(2, 1, 1.0, 0.0);
  h.means(0, 0) = 1.0;  // second class stays at the prior
  EXPECT_NEAR(kl_to_prior(h), 0.5, 1e-15);
  EXPECT_EQ(kl_to_prior(init_head(3, 5, 4.0, 0.0)), 0.0);
  // sqrt(2.5)^2 != 2.5 in floating point, leaving only second-order residue.
  EXPECT_LE(kl_to_prior(init_head(3, 5, 2.5, 0.0)), 1e-30);
}

TEST(Kl, MatchesOracleAndNonNegative) {
  Rng rng(7);
  for (int it = 0; it < 20; ++it) {
    const std::size_t d = uniform_int(rng, 1, 8);
    const VbllHead h = random_head(rng, uniform_int(rng, 2, 5), d, 0.2 + 2.0 * rng.uniform());
    const double kl = kl_to_prior(h);
    EXPECT_GE(kl, 0.0);
    EXPECT_NEAR(kl, kl_oracle(h), 1e-9 * std::max(1.0, kl));
  }
}

TEST(Grads, LikelihoodFixedPoint) {
  // Features orthogonal to every mean make p~ uniform; labels equal to that
  // distribution zero out the mean gradient of the likelihood term.
  VbllHead h = init_head(2, 2, 1.0, 0.0);
  const Matrix x = Matrix::from_rows({{1, 0}, {1, 0}});
  const Matrix y = Matrix::from_rows({{1, 0}, {0, 1}});
  const VbllGrads g = grads(h, x, y);
  EXPECT_LT(frobenius_norm(g.d_mu), 1e-15);
}

TEST(Grads, KlOnlyWithZeroFeatures) {
  Rng rng(8);
  const VbllHead h = random_head(rng, 3, 4, 2.0, 0.3);
  const VbllGrads g = grads(h, Matrix(5, 4), random_onehot(rng, 5, 3));
  EXPECT_LT(max_abs_diff(g.d_mu, h.means * (0.3 / 2.0)), 1e-15);
}

TEST(Grads, MatchFiniteDifferences) {
  Rng rng(9);
  for (int it = 0; it < 20; ++it) {
    const std::size_t c = uniform_int(rng, 2, 5), d = uniform_int(rng, 1, 8);
    const std::size_t b = uniform_int(rng, 1, 4);
    VbllHead h = random_head(rng, c, d, 0.5 + rng.uniform(), 0.2 * rng.uniform());
    Matrix x = random_matrix(rng, b, d);
    const Matrix y = random_onehot(rng, b, c);
    const VbllGrads g = grads(h, x, y);
    auto loss = [&] { return surrogate_loss(h, x, y); };

    EXPECT_LE(rel_err(g.d_mu, numeric_gradient(&h.means, loss)), 1e-5);
    EXPECT_LE(rel_err(g.d_features, numeric_gradient(&x, loss)), 1e-5);
    for (std::size_t k = 0; k < c; ++k) {
      EXPECT_EQ(g.d_chol[k], lower_triangle(g.d_chol[k]));
      const Matrix num = lower_triangle(numeric_gradient(&h.chol[k], loss));
      EXPECT_LE(rel_err(g.d_chol[k], num), 1e-5);
    }
  }
}

TEST(Grads, SoftmaxCrossEntropyFiniteDifferences) {
  Rng rng(10);
  for (int it = 0; it < 20; ++it) {
    Matrix w = random_matrix(rng, 4, 3);
    Matrix x = random_matrix(rng, 3, 3);
    const Matrix y = random_onehot(rng, 3, 4);
    const SoftmaxGrads g = cross_entropy_grads(w, x, y);
    auto loss = [&] { return cross_entropy(w, x, y); };
    EXPECT_LE(rel_err(g.d_weights, numeric_gradient(&w, loss)), 1e-6);
    EXPECT_LE(rel_err(g.d_features, numeric_gradient(&x, loss)), 1e-6);
  }
}

TEST(ApplyStep, FloorsDiagonal) {
  Rng rng(11);
  VbllHead h = random_head(rng, 2, 3);
  VbllGrads g = grads(h, random_matrix(rng, 2, 3), random_onehot(rng, 2, 2));
  for (auto& dc : g.d_chol) dc = Matrix::identity(3) * 1e6;
  apply_step(h, g, 1.0);
  for (const auto& l : h.chol)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_GE(l(i, i), kCholDiagFloor);
  EXPECT_NO_THROW(validate(h));
}

TEST(McLoss, DeterministicLimitAndSeeding) {
  Rng rng(12);
  const Matrix means = random_matrix(rng, 3, 4);
  const Matrix x = random_matrix(rng, 5, 4);
  const Matrix y = random_onehot(rng, 5, 3);
  Rng mc(0);
  EXPECT_NEAR(mc_loss_estimate(near_deterministic(means), x, y, mc, 3).value,
              ce_oracle(means, x, y), 1e-6);

  const VbllHead h = random_head(rng, 3, 4);
  Rng a(5), b(5);
  EXPECT_EQ(mc_loss_estimate(h, x, y, a, 50).value, mc_loss_estimate(h, x, y, b, 50).value);
  EXPECT_THROW(mc_loss_estimate(h, x, y, a, 0), Error);
}

TEST(McLoss, JensenBoundsFromAbove) {
  Rng rng(13);
  for (int it = 0; it < 20; ++it) {
    const VbllHead h = random_head(rng, uniform_int(rng, 2, 5), uniform_int(rng, 1, 8));
    const Matrix x = random_matrix(rng, 4, h.feature_dim());
    const Matrix y = random_onehot(rng, 4, h.num_classes());
    const McEstimate mc = mc_loss_estimate(h, x, y, rng, 10000);
    EXPECT_GE(surrogate_loss(h, x, y), mc.value - 3.0 * mc.std_error);
  }
}

}  // namespace
}  // namespace pvb::vbll
