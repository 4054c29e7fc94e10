#pragma once

#include <string_view>
#include <vector>

#include "pvb/numerics.hpp"
#include "pvb/vbll.hpp"

namespace pvb::laplace {

inline constexpr std::size_t kDefaultMaxDim = 4096;

enum class Mode : std::uint8_t { ExactFull = 0, BlockDiagonal = 1 };

std::string_view mode_name(Mode mode);
Mode parse_mode(std::string_view name);

// Refined last-layer posterior N(mu_c, Sigma_c). Means are copied from the
// variational head untouched; chol holds the factors of each Sigma_c.
struct LaplacePosterior {
  Matrix means;
  std::vector<Matrix> sigmas;
  std::vector<Matrix> chol;

  std::size_t num_classes() const noexcept { return means.rows(); }
  std::size_t feature_dim() const noexcept { return means.cols(); }
  friend bool operator==(const LaplacePosterior&, const LaplacePosterior&) = default;
};

// Factorizes every Sigma_c; throws NotPositiveDefinite.
LaplacePosterior make_posterior(Matrix means, std::vector<Matrix> sigmas);

// Negative Hessian of log p(D | Theta) + log p(Theta) at Theta = means, indexed
// (c, i) -> c * d + i. Throws DimensionTooLarge when C * d > max_dim.
Matrix full_hessian(const Matrix& means, const Matrix& features, double prior_var,
                    std::size_t max_dim = kDefaultMaxDim);

// ExactFull inverts the joint Hessian and keeps its diagonal blocks;
// BlockDiagonal inverts the per-class blocks directly.
LaplacePosterior refine(const vbll::VbllHead& head, const Matrix& features, Mode mode,
                        std::size_t max_dim = kDefaultMaxDim);

}  // namespace pvb::laplace
