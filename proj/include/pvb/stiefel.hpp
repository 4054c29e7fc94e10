#pragma once

#include "pvb/numerics.hpp"

namespace pvb::stiefel {

// Landing iterates must stay within this infeasibility of the manifold.
inline constexpr double kSafetyRegion = 0.5;
inline constexpr double kDefaultLanding = 1.0;

// N(X) = ||X^T X - I||_F^2
double infeasibility(const Matrix& x);

// A tall matrix that should have orthonormal columns, together with its
// cached infeasibility. The cache is refreshed on every construction.
class StiefelFactor {
 public:
  explicit StiefelFactor(Matrix mat);

  const Matrix& mat() const noexcept { return mat_; }
  double infeasibility() const noexcept { return infeasibility_; }
  std::size_t rows() const noexcept { return mat_.rows(); }
  std::size_t cols() const noexcept { return mat_.cols(); }

  friend bool operator==(const StiefelFactor&, const StiefelFactor&) = default;

 private:
  Matrix mat_;
  double infeasibility_;
};

// Uniformly random point of St(m, r): QR of a Gaussian matrix.
StiefelFactor random_factor(Rng& rng, std::size_t m, std::size_t r);

// (A - A^T) / 2
Matrix skew(const Matrix& a);

// grad N(X) = 4 X (X^T X - I)
Matrix infeasibility_gradient(const StiefelFactor& x);

// psi(X) = Skew(grad f(X) X^T), an m x m skew-symmetric matrix.
Matrix riemannian_component(const StiefelFactor& x, const Matrix& euclid_grad);

// Gamma(X) = psi(X) X + lambda grad N(X)
Matrix landing_field(const StiefelFactor& x, const Matrix& euclid_grad, double lambda);

// X - step * Gamma(X). Throws SafetyRegionViolation when the new iterate has
// N > kSafetyRegion.
StiefelFactor landing_step(const StiefelFactor& x, const Matrix& euclid_grad, double lambda,
                           double step);

}  // namespace pvb::stiefel
