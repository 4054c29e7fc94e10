#include "pvb/laplace.hpp"

namespace pvb::laplace {

std::string_view mode_name(Mode mode) {
  return mode == Mode::ExactFull ? "exact-full" : "block-diagonal";
}

Mode parse_mode(std::string_view name) {
  if (name == "exact-full") return Mode::ExactFull;
  if (name == "block-diagonal") return Mode::BlockDiagonal;
  throw Error(ErrorCode::InvalidArgument, "unknown Laplace mode '" + std::string(name) + "'");
}

LaplacePosterior make_posterior(Matrix means, std::vector<Matrix> sigmas) {
  if (sigmas.size() != means.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "one covariance per class required");
  }
  LaplacePosterior post{std::move(means), std::move(sigmas), {}};
  post.chol.reserve(post.sigmas.size());
  for (const Matrix& s : post.sigmas) {
    if (s.rows() != post.feature_dim() || !s.is_square()) {
      throw Error(ErrorCode::ShapeMismatch, "covariance has wrong shape");
    }
    post.chol.push_back(cholesky(s));
  }
  return post;
}

namespace {

void require_features(const Matrix& means, const Matrix& features) {
  if (features.rows() > 0 && features.cols() != means.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "features do not match head dimension");
  }
}

}  // namespace

Matrix full_hessian(const Matrix& means, const Matrix& features, double prior_var,
                    std::size_t max_dim) {
  require_features(means, features);
  const std::size_t c_count = means.rows();
  const std::size_t d = means.cols();
  const std::size_t dim = c_count * d;
  if (dim > max_dim) {
    throw Error(ErrorCode::DimensionTooLarge,
                "C*d = " + std::to_string(dim) + " exceeds cap " + std::to_string(max_dim));
  }
  Matrix h(dim, dim);
  const double prior_prec = 1.0 / prior_var;
  for (std::size_t k = 0; k < dim; ++k) h(k, k) = prior_prec;
  if (features.rows() == 0) return h;

  const Matrix probs = softmax_rows(matmul_nt(features, means));
  for (std::size_t n = 0; n < features.rows(); ++n) {
    auto phi = features.row(n);
    auto p = probs.row(n);
    for (std::size_t c = 0; c < c_count; ++c) {
      for (std::size_t c2 = 0; c2 < c_count; ++c2) {
        const double w = (c == c2 ? p[c] : 0.0) - p[c] * p[c2];
        if (w == 0.0) continue;
        for (std::size_t i = 0; i < d; ++i) {
          const double wi = w * phi[i];
          auto hrow = h.row(c * d + i);
          for (std::size_t j = 0; j < d; ++j) hrow[c2 * d + j] += wi * phi[j];
        }
      }
    }
  }
  return h;
}

LaplacePosterior refine(const vbll::VbllHead& head, const Matrix& features, Mode mode,
                        std::size_t max_dim) {
  require_features(head.means, features);
  const std::size_t c_count = head.num_classes();
  const std::size_t d = head.feature_dim();
  std::vector<Matrix> sigmas;
  sigmas.reserve(c_count);

  if (mode == Mode::ExactFull) {
    const Matrix cov = spd_inverse(full_hessian(head.means, features, head.prior_var, max_dim));
    for (std::size_t c = 0; c < c_count; ++c) {
      Matrix block(d, d);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) block(i, j) = cov(c * d + i, c * d + j);
      sigmas.push_back(std::move(block));
    }
  } else {
    const Matrix probs = features.rows() == 0 ? Matrix()
                                              : softmax_rows(matmul_nt(features, head.means));
    for (std::size_t c = 0; c < c_count; ++c) {
      Matrix block = Matrix::identity(d) * (1.0 / head.prior_var);
      for (std::size_t n = 0; n < features.rows(); ++n) {
        const double w = probs(n, c) * (1.0 - probs(n, c));
        auto phi = features.row(n);
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t j = 0; j < d; ++j) block(i, j) += w * phi[i] * phi[j];
      }
      sigmas.push_back(spd_inverse(block));
    }
  }
  return make_posterior(head.means, std::move(sigmas));
}

}  // namespace pvb::laplace
