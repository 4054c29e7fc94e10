#pragma once

#include <string_view>
#include <vector>

#include "pvb/laplace.hpp"
#include "pvb/numerics.hpp"
#include "pvb/vbll.hpp"

namespace pvb::predict {

inline constexpr std::size_t kDefaultSamples = 10;

enum class PosteriorSource : std::uint8_t { Variational = 0, Laplace = 1, Mean = 2 };

std::string_view source_name(PosteriorSource source);
PosteriorSource parse_source(std::string_view name);

struct PredictiveDist {
  Matrix probs;  // B x C, rows sum to one
  std::size_t num_samples = 0;
  PosteriorSource source = PosteriorSource::Mean;
};

// Borrowed view of a Gaussian last layer: per-class means and covariance
// factors.
struct GaussianLastLayer {
  const Matrix& means;
  const std::vector<Matrix>& chol;
};

GaussianLastLayer view(const vbll::VbllHead& head);
GaussianLastLayer view(const laplace::LaplacePosterior& post);

// (1/k) sum_k softmax(Theta^(k) phi). One weight draw Theta^(k) is shared by
// all rows of the batch; features are the only per-sample input.
Matrix mc_probs(const Matrix& features, const GaussianLastLayer& layer, Rng& rng, std::size_t k);

PredictiveDist predict_mc(const Matrix& features, const vbll::VbllHead& head, Rng& rng,
                          std::size_t k = kDefaultSamples);
PredictiveDist predict_mc(const Matrix& features, const laplace::LaplacePosterior& post,
                          Rng& rng, std::size_t k = kDefaultSamples);

// softmax(M phi) with rows of M the class means.
PredictiveDist predict_mean(const Matrix& features, const Matrix& means);

}  // namespace pvb::predict
