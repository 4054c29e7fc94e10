#pragma once

#include <vector>

#include "pvb/numerics.hpp"

namespace pvb::vbll {

inline constexpr double kDefaultPriorVar = 1.0;
// Floor applied to diagonal entries of each Cholesky factor after an update.
inline constexpr double kCholDiagFloor = 1e-8;

/// Variational last layer: independent Gaussians q(theta_c) = N(mu_c, S_c)
/// with S_c = L_c L_c^T, under the prior N(0, prior_var I).
struct VbllHead {
  Matrix means;               // C x d, row c is mu_c
  std::vector<Matrix> chol;   // C lower-triangular d x d factors
  double prior_var = kDefaultPriorVar;
  double kl_weight = 0.0;

  std::size_t num_classes() const noexcept { return means.rows(); }
  std::size_t feature_dim() const noexcept { return means.cols(); }
  Matrix covariance(std::size_t c) const;

  friend bool operator==(const VbllHead&, const VbllHead&) = default;
};

// mu_c = 0, L_c = sqrt(prior_var) I.
VbllHead init_head(std::size_t num_classes, std::size_t feature_dim, double prior_var,
                   double kl_weight);

// Checks shape and the strictly-positive diagonal of every factor.
void validate(const VbllHead& head);

struct JensenLogits {
  Matrix eta;     // B x C, mu_c^T phi + phi^T S_c phi / 2
  Matrix ptilde;  // row softmax of eta
};

JensenLogits jensen_logits(const VbllHead& head, const Matrix& features);

// Closed-form KL(q || prior) summed over classes.
double kl_to_prior(const VbllHead& head);

// Negative Jensen-tightened ELBO per example:
//   (1/B) sum_n [LSE_c(eta_nc) - sum_c y_nc mu_c^T phi_n] + kl_weight * KL
double surrogate_loss(const VbllHead& head, const Matrix& features, const Matrix& labels_onehot);

struct VbllGrads {
  Matrix d_mu;                 // C x d
  std::vector<Matrix> d_chol;  // C lower-triangular d x d
  Matrix d_features;           // B x d
};

// Gradients of surrogate_loss (minimization convention).
VbllGrads grads(const VbllHead& head, const Matrix& features, const Matrix& labels_onehot);

struct McEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

// Monte Carlo estimate of -(1/B) E_q[log p(batch | Theta)] + kl_weight * KL
// with theta_c = mu_c + L_c xi. The standard error covers the sampled term.
McEstimate mc_loss_estimate(const VbllHead& head, const Matrix& features,
                            const Matrix& labels_onehot, Rng& rng, std::size_t num_samples);

// Gradient step on (mu, L) followed by the diagonal floor.
void apply_step(VbllHead& head, const VbllGrads& g, double lr);

// Deterministic softmax head trained by maximum likelihood.
struct SoftmaxHead {
  Matrix weights;  // C x d

  std::size_t num_classes() const noexcept { return weights.rows(); }
  std::size_t feature_dim() const noexcept { return weights.cols(); }
  friend bool operator==(const SoftmaxHead&, const SoftmaxHead&) = default;
};

struct SoftmaxGrads {
  Matrix d_weights;
  Matrix d_features;
};

// Mean cross-entropy of softmax(W phi) against one-hot labels.
double cross_entropy(const Matrix& weights, const Matrix& features, const Matrix& labels_onehot);
SoftmaxGrads cross_entropy_grads(const Matrix& weights, const Matrix& features,
                                 const Matrix& labels_onehot);

}  // namespace pvb::vbll
