#include "pvb/stiefel.hpp"

#include <cmath>

namespace pvb::stiefel {

namespace {

Matrix gram_minus_identity(const Matrix& x) {
  Matrix g = matmul_tn(x, x);
  for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) -= 1.0;
  return g;
}

}  // namespace

double infeasibility(const Matrix& x) { return frobenius_sq(gram_minus_identity(x)); }

StiefelFactor::StiefelFactor(Matrix mat) : mat_(std::move(mat)), infeasibility_(0.0) {
  if (mat_.rows() < mat_.cols()) {
    throw Error(ErrorCode::InvalidArgument,
                "Stiefel factor must be tall, got " + std::to_string(mat_.rows()) + "x" +
                    std::to_string(mat_.cols()));
  }
  infeasibility_ = stiefel::infeasibility(mat_);
}

StiefelFactor random_factor(Rng& rng, std::size_t m, std::size_t r) {
  return StiefelFactor(qr_orthonormalize(sample_std_normal(rng, m, r)));
}

Matrix skew(const Matrix& a) {
  if (!a.is_square()) throw Error(ErrorCode::NotSquare, "skew");
  const std::size_t n = a.rows();
  Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = 0.5 * (a(i, j) - a(j, i));
      s(i, j) = v;
      s(j, i) = -v;
    }
  return s;
}

Matrix infeasibility_gradient(const StiefelFactor& x) {
  return matmul(x.mat(), gram_minus_identity(x.mat())) * 4.0;
}

Matrix riemannian_component(const StiefelFactor& x, const Matrix& euclid_grad) {
  require_same_shape(x.mat(), euclid_grad, "riemannian_component");
  return skew(matmul_nt(euclid_grad, x.mat()));
}

Matrix landing_field(const StiefelFactor& x, const Matrix& euclid_grad, double lambda) {
  if (!(lambda > 0.0)) throw Error(ErrorCode::InvalidArgument, "landing lambda must be > 0");
  Matrix field = matmul(riemannian_component(x, euclid_grad), x.mat());
  field += infeasibility_gradient(x) * lambda;
  return field;
}

StiefelFactor landing_step(const StiefelFactor& x, const Matrix& euclid_grad, double lambda,
                           double step) {
  if (!(step > 0.0)) throw Error(ErrorCode::InvalidArgument, "landing step must be > 0");
  StiefelFactor next(x.mat() - landing_field(x, euclid_grad, lambda) * step);
  if (!(next.infeasibility() <= kSafetyRegion)) {
    throw Error(ErrorCode::SafetyRegionViolation,
                "N(X) = " + std::to_string(next.infeasibility()) + " after step " +
                    std::to_string(step));
  }
  return next;
}

}  // namespace pvb::stiefel
