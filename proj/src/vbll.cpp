#include "pvb/vbll.hpp"

#include <algorithm>
#include <cmath>

namespace pvb::vbll {

namespace {

void require_batch(const VbllHead& head, const Matrix& features, const Matrix* labels) {
  if (features.cols() != head.feature_dim()) {
    throw Error(ErrorCode::ShapeMismatch, "features have " + std::to_string(features.cols()) +
                                              " columns, head expects " +
                                              std::to_string(head.feature_dim()));
  }
  if (labels != nullptr &&
      (labels->rows() != features.rows() || labels->cols() != head.num_classes())) {
    throw Error(ErrorCode::ShapeMismatch, "one-hot labels do not match batch");
  }
}

// L^T phi for one factor and one feature row.
void chol_t_times(const Matrix& l, std::span<const double> phi, std::span<double> out) {
  const std::size_t d = l.rows();
  for (std::size_t j = 0; j < d; ++j) {
    double s = 0.0;
    for (std::size_t i = j; i < d; ++i) s += l(i, j) * phi[i];
    out[j] = s;
  }
}

}  // namespace

Matrix VbllHead::covariance(std::size_t c) const { return matmul_nt(chol[c], chol[c]); }

VbllHead init_head(std::size_t num_classes, std::size_t feature_dim, double prior_var,
                   double kl_weight) {
  if (num_classes < 2) throw Error(ErrorCode::InvalidArgument, "need at least two classes");
  if (!(prior_var > 0.0)) throw Error(ErrorCode::InvalidArgument, "prior_var must be > 0");
  if (!(kl_weight >= 0.0)) throw Error(ErrorCode::InvalidArgument, "kl_weight must be >= 0");
  VbllHead head;
  head.means = Matrix(num_classes, feature_dim);
  head.chol.assign(num_classes, Matrix::identity(feature_dim) * std::sqrt(prior_var));
  head.prior_var = prior_var;
  head.kl_weight = kl_weight;
  return head;
}

void validate(const VbllHead& head) {
  if (head.chol.size() != head.num_classes()) {
    throw Error(ErrorCode::ShapeMismatch, "one Cholesky factor per class required");
  }
  for (const Matrix& l : head.chol) {
    if (l.rows() != head.feature_dim() || !l.is_square()) {
      throw Error(ErrorCode::ShapeMismatch, "Cholesky factor has wrong shape");
    }
    for (std::size_t i = 0; i < l.rows(); ++i) {
      if (!(l(i, i) > 0.0)) {
        throw Error(ErrorCode::NotPositiveDefinite, "non-positive Cholesky diagonal");
      }
      for (std::size_t j = i + 1; j < l.cols(); ++j) {
        if (l(i, j) != 0.0) throw Error(ErrorCode::InvalidArgument, "factor not lower triangular");
      }
    }
  }
}

JensenLogits jensen_logits(const VbllHead& head, const Matrix& features) {
  require_batch(head, features, nullptr);
  const std::size_t b = features.rows();
  const std::size_t c_count = head.num_classes();
  const std::size_t d = head.feature_dim();
  JensenLogits out{Matrix(b, c_count), Matrix()};
  std::vector<double> lt_phi(d);
  for (std::size_t n = 0; n < b; ++n) {
    auto phi = features.row(n);
    for (std::size_t c = 0; c < c_count; ++c) {
      double mean = 0.0;
      for (std::size_t i = 0; i < d; ++i) mean += head.means(c, i) * phi[i];
      chol_t_times(head.chol[c], phi, lt_phi);
      double quad = 0.0;
      for (double v : lt_phi) quad += v * v;
      out.eta(n, c) = mean + 0.5 * quad;
    }
  }
  out.ptilde = softmax_rows(out.eta);
  return out;
}

double kl_to_prior(const VbllHead& head) {
  const double s2 = head.prior_var;
  const std::size_t d = head.feature_dim();
  double kl = 0.0;
  for (std::size_t c = 0; c < head.num_classes(); ++c) {
    const Matrix& l = head.chol[c];
    double quad = 0.0;  // off-diagonal mass of L L^T plus mu^T mu
    double diag = 0.0;  // sum_i (r_i - 1 - log r_i), r_i = L_ii^2 / s2
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < i; ++j) quad += l(i, j) * l(i, j);
      const double x = l(i, i) * l(i, i) / s2 - 1.0;
      diag += x - std::log1p(x);
      quad += head.means(c, i) * head.means(c, i);
    }
    kl += 0.5 * (quad / s2 + diag);
  }
  return std::max(kl, 0.0);
}

double surrogate_loss(const VbllHead& head, const Matrix& features, const Matrix& labels_onehot) {
  require_batch(head, features, &labels_onehot);
  const JensenLogits jl = jensen_logits(head, features);
  const std::size_t b = features.rows();
  double lik = 0.0;
  for (std::size_t n = 0; n < b; ++n) {
    auto phi = features.row(n);
    double fit = 0.0;
    for (std::size_t c = 0; c < head.num_classes(); ++c) {
      const double y = labels_onehot(n, c);
      if (y == 0.0) continue;
      double mean = 0.0;
      for (std::size_t i = 0; i < phi.size(); ++i) mean += head.means(c, i) * phi[i];
      fit += y * mean;
    }
    lik += log_sum_exp(jl.eta.row(n)) - fit;
  }
  const double per_example = b == 0 ? 0.0 : lik / static_cast<double>(b);
  return per_example + head.kl_weight * kl_to_prior(head);
}

VbllGrads grads(const VbllHead& head, const Matrix& features, const Matrix& labels_onehot) {
  require_batch(head, features, &labels_onehot);
  validate(head);
  const std::size_t b = features.rows();
  const std::size_t c_count = head.num_classes();
  const std::size_t d = head.feature_dim();
  const double inv_b = b == 0 ? 0.0 : 1.0 / static_cast<double>(b);
  const double lam = head.kl_weight;
  const double inv_s2 = 1.0 / head.prior_var;

  const JensenLogits jl = jensen_logits(head, features);

  VbllGrads g;
  g.d_mu = Matrix(c_count, d);
  g.d_chol.assign(c_count, Matrix(d, d));
  g.d_features = Matrix(b, d);

  std::vector<double> lt_phi(d);
  std::vector<double> s_phi(d);
  for (std::size_t n = 0; n < b; ++n) {
    auto phi = features.row(n);
    auto dphi = g.d_features.row(n);
    for (std::size_t c = 0; c < c_count; ++c) {
      const double p = jl.ptilde(n, c);
      const double y = labels_onehot(n, c);
      const double resid = (p - y) * inv_b;
      const Matrix& l = head.chol[c];
      chol_t_times(l, phi, lt_phi);
      // S_c phi = L (L^T phi)
      for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j <= i; ++j) s += l(i, j) * lt_phi[j];
        s_phi[i] = s;
      }
      for (std::size_t i = 0; i < d; ++i) {
        g.d_mu(c, i) += resid * phi[i];
        dphi[i] += resid * head.means(c, i) + inv_b * p * s_phi[i];
      }
      // dS_c = (1/2B) sum_n p phi phi^T, so dL_c = 2 dS_c L_c = (1/B) sum_n p phi (L^T phi)^T.
      const double w = p * inv_b;
      Matrix& dl = g.d_chol[c];
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j <= i; ++j) dl(i, j) += w * phi[i] * lt_phi[j];
    }
  }

  // KL terms. For -1/2 log|S| the chain rule through L collapses to
  // -diag(1/L_ii) once masked to the lower triangle (S^{-1} L = L^{-T}).
  for (std::size_t c = 0; c < c_count; ++c) {
    for (std::size_t i = 0; i < d; ++i) g.d_mu(c, i) += lam * head.means(c, i) * inv_s2;
    const Matrix& l = head.chol[c];
    Matrix& dl = g.d_chol[c];
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j <= i; ++j) dl(i, j) += lam * l(i, j) * inv_s2;
      dl(i, i) -= lam / l(i, i);
    }
  }
  return g;
}

McEstimate mc_loss_estimate(const VbllHead& head, const Matrix& features,
                            const Matrix& labels_onehot, Rng& rng, std::size_t num_samples) {
  require_batch(head, features, &labels_onehot);
  if (num_samples == 0) throw Error(ErrorCode::InvalidArgument, "num_samples must be >= 1");
  const std::size_t b = features.rows();
  const std::size_t c_count = head.num_classes();
  const std::size_t d = head.feature_dim();

  std::vector<double> sample_losses(num_samples);
  Matrix theta(c_count, d);
  for (std::size_t s = 0; s < num_samples; ++s) {
    for (std::size_t c = 0; c < c_count; ++c) {
      const Matrix xi = sample_std_normal(rng, d, 1);
      const Matrix& l = head.chol[c];
      for (std::size_t i = 0; i < d; ++i) {
        double v = head.means(c, i);
        for (std::size_t j = 0; j <= i; ++j) v += l(i, j) * xi(j, 0);
        theta(c, i) = v;
      }
    }
    const Matrix logits = matmul_nt(features, theta);
    double loss = 0.0;
    for (std::size_t n = 0; n < b; ++n) {
      double fit = 0.0;
      for (std::size_t c = 0; c < c_count; ++c) fit += labels_onehot(n, c) * logits(n, c);
      loss += log_sum_exp(logits.row(n)) - fit;
    }
    sample_losses[s] = b == 0 ? 0.0 : loss / static_cast<double>(b);
  }

  double mean = 0.0;
  for (double v : sample_losses) mean += v;
  mean /= static_cast<double>(num_samples);
  double se = 0.0;
  if (num_samples > 1) {
    double var = 0.0;
    for (double v : sample_losses) var += (v - mean) * (v - mean);
    var /= static_cast<double>(num_samples - 1);
    se = std::sqrt(var / static_cast<double>(num_samples));
  }
  return McEstimate{mean + head.kl_weight * kl_to_prior(head), se};
}

void apply_step(VbllHead& head, const VbllGrads& g, double lr) {
  head.means -= g.d_mu * lr;
  for (std::size_t c = 0; c < head.chol.size(); ++c) {
    Matrix& l = head.chol[c];
    const Matrix& dl = g.d_chol[c];
    for (std::size_t i = 0; i < l.rows(); ++i) {
      for (std::size_t j = 0; j <= i; ++j) l(i, j) -= lr * dl(i, j);
      l(i, i) = std::max(l(i, i), kCholDiagFloor);
    }
  }
}

double cross_entropy(const Matrix& weights, const Matrix& features, const Matrix& labels_onehot) {
  if (labels_onehot.rows() != features.rows() || labels_onehot.cols() != weights.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "one-hot labels do not match batch");
  }
  const Matrix logits = matmul_nt(features, weights);
  double loss = 0.0;
  for (std::size_t n = 0; n < logits.rows(); ++n) {
    double fit = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) fit += labels_onehot(n, c) * logits(n, c);
    loss += log_sum_exp(logits.row(n)) - fit;
  }
  return logits.rows() == 0 ? 0.0 : loss / static_cast<double>(logits.rows());
}

SoftmaxGrads cross_entropy_grads(const Matrix& weights, const Matrix& features,
                                 const Matrix& labels_onehot) {
  if (labels_onehot.rows() != features.rows() || labels_onehot.cols() != weights.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "one-hot labels do not match batch");
  }
  const double inv_b = features.rows() == 0 ? 0.0 : 1.0 / static_cast<double>(features.rows());
  Matrix resid = softmax_rows(matmul_nt(features, weights));
  resid -= labels_onehot;
  resid *= inv_b;
  return SoftmaxGrads{matmul_tn(resid, features), matmul(resid, weights)};
}

}  // namespace pvb::vbll
