#include "pvb/predict.hpp"

#include <algorithm>
#include <cmath>

namespace pvb::predict {

std::string_view source_name(PosteriorSource source) {
  switch (source) {
    case PosteriorSource::Variational: return "variational";
    case PosteriorSource::Laplace: return "laplace";
    case PosteriorSource::Mean: return "mean";
  }
  return "unknown";
}

PosteriorSource parse_source(std::string_view name) {
  if (name == "variational") return PosteriorSource::Variational;
  if (name == "laplace") return PosteriorSource::Laplace;
  if (name == "mean") return PosteriorSource::Mean;
  throw Error(ErrorCode::InvalidArgument, "unknown posterior '" + std::string(name) + "'");
}

GaussianLastLayer view(const vbll::VbllHead& head) { return {head.means, head.chol}; }

GaussianLastLayer view(const laplace::LaplacePosterior& post) { return {post.means, post.chol}; }

Matrix mc_probs(const Matrix& features, const GaussianLastLayer& layer, Rng& rng, std::size_t k) {
  if (k == 0) throw Error(ErrorCode::InvalidArgument, "need at least one sample");
  const std::size_t c_count = layer.means.rows();
  const std::size_t d = layer.means.cols();
  if (features.cols() != d) {
    throw Error(ErrorCode::ShapeMismatch, "features do not match posterior dimension");
  }
  const std::size_t b = features.rows();

  // z_c = mu_c^T phi + xi_c^T (L_c^T phi): precompute both terms once.
  const Matrix mean_logits = matmul_nt(features, layer.means);
  std::vector<Matrix> lt_phi;  // per class: B x d
  lt_phi.reserve(c_count);
  for (std::size_t c = 0; c < c_count; ++c) lt_phi.push_back(matmul(features, layer.chol[c]));

  Matrix acc(b, c_count);
  std::vector<double> z(c_count);
  Matrix xi(c_count, d);
  for (std::size_t s = 0; s < k; ++s) {
    for (double& v : xi.values()) v = rng.normal();
    for (std::size_t n = 0; n < b; ++n) {
      double zmax = -INFINITY;
      for (std::size_t c = 0; c < c_count; ++c) {
        auto proj = lt_phi[c].row(n);
        auto xr = xi.row(c);
        double v = mean_logits(n, c);
        for (std::size_t i = 0; i < d; ++i) v += xr[i] * proj[i];
        z[c] = v;
        zmax = std::max(zmax, v);
      }
      double total = 0.0;
      for (double& v : z) {
        v = std::exp(v - zmax);
        total += v;
      }
      auto out = acc.row(n);
      for (std::size_t c = 0; c < c_count; ++c) out[c] += z[c] / total;
    }
  }
  acc *= 1.0 / static_cast<double>(k);
  return acc;
}

PredictiveDist predict_mc(const Matrix& features, const vbll::VbllHead& head, Rng& rng,
                          std::size_t k) {
  return {mc_probs(features, view(head), rng, k), k, PosteriorSource::Variational};
}

PredictiveDist predict_mc(const Matrix& features, const laplace::LaplacePosterior& post,
                          Rng& rng, std::size_t k) {
  return {mc_probs(features, view(post), rng, k), k, PosteriorSource::Laplace};
}

PredictiveDist predict_mean(const Matrix& features, const Matrix& means) {
  if (features.cols() != means.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "features do not match head dimension");
  }
  return {softmax_rows(matmul_nt(features, means)), 0, PosteriorSource::Mean};
}

}  // namespace pvb::predict
