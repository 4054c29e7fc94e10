#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include <Eigen/Dense>

#include "pvb/adapters.hpp"
#include "pvb/features.hpp"
#include "pvb/numerics.hpp"
#include "pvb/vbll.hpp"

namespace pvb::testing {

inline Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

inline Matrix from_eigen(const Eigen::MatrixXd& e) {
  Matrix out(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
  for (Eigen::Index i = 0; i < e.rows(); ++i)
    for (Eigen::Index j = 0; j < e.cols(); ++j) out(i, j) = e(i, j);
  return out;
}

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  return sample_std_normal(rng, r, c) * scale;
}

inline std::size_t uniform_int(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.next_u64() % (hi - lo + 1));
}

inline Matrix random_spd(Rng& rng, std::size_t n) {
  const Matrix m = random_matrix(rng, n, n);
  return matmul_nt(m, m) + Matrix::identity(n);
}

inline Matrix random_lower(Rng& rng, std::size_t d, double off = 0.3) {
  Matrix l(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) l(i, j) = off * rng.normal();
    l(i, i) = 0.4 + rng.uniform();
  }
  return l;
}

inline vbll::VbllHead random_head(Rng& rng, std::size_t c, std::size_t d, double prior_var = 1.0,
                                  double kl_weight = 0.1) {
  vbll::VbllHead h;
  h.means = random_matrix(rng, c, d, 0.7);
  for (std::size_t k = 0; k < c; ++k) h.chol.push_back(random_lower(rng, d));
  h.prior_var = prior_var;
  h.kl_weight = kl_weight;
  return h;
}

inline Matrix random_onehot(Rng& rng, std::size_t b, std::size_t c) {
  Matrix y(b, c);
  for (std::size_t i = 0; i < b; ++i) y(i, uniform_int(rng, 0, c - 1)) = 1.0;
  return y;
}

// Two tanh/identity layers d0 -> h -> d with PoLAR adapters whose core is
// large enough to matter in gradient checks.
inline features::FeatureExtractor random_polar_extractor(Rng& rng, std::size_t d0, std::size_t h,
                                                         std::size_t d, std::size_t r) {
  features::FeatureExtractor fx = features::make_extractor({d0, h, d}, rng);
  for (auto& layer : fx.layers) {
    adapters::PolarAdapter p = adapters::init_polar(rng, layer.out_dim(), layer.in_dim(), r, 0.5);
    p.lam = random_matrix(rng, r, r, 0.5);
    layer.adapter = std::move(p);
  }
  return fx;
}

// Central differences of f over every entry of *param.
inline Matrix numeric_gradient(Matrix* param, const std::function<double()>& f,
                               double eps = 1e-5) {
  Matrix g(param->rows(), param->cols());
  auto vals = param->values();
  for (std::size_t k = 0; k < vals.size(); ++k) {
    const double saved = vals[k];
    vals[k] = saved + eps;
    const double hi = f();
    vals[k] = saved - eps;
    const double lo = f();
    vals[k] = saved;
    g.values()[k] = (hi - lo) / (2.0 * eps);
  }
  return g;
}

inline double rel_err(const Matrix& got, const Matrix& want) {
  const double denom = std::max(frobenius_norm(want), 1e-12);
  return frobenius_norm(got - want) / denom;
}

}  // namespace pvb::testing
