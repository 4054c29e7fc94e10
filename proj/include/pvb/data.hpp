#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pvb/numerics.hpp"

namespace pvb::data {

struct Dataset {
  Matrix x;                        // N x d0
  std::vector<std::size_t> y;      // labels in [0, num_classes)
  std::size_t num_classes = 0;
  std::string provenance;

  std::size_t size() const noexcept { return y.size(); }
  std::size_t input_dim() const noexcept { return x.cols(); }
};

// Gaussian mixture: class c ~ N(m_c, I). Class means sit on a random
// orthonormal frame scaled by `overlap`, centred, then offset by `shift`.
struct SynthSpec {
  std::size_t num_classes = 3;
  std::size_t input_dim = 8;
  std::size_t per_class = 200;
  double overlap = 2.0;
  std::vector<double> shift;  // empty means no offset
  std::uint64_t seed = 0;
  // Seeds the per-sample noise; unset reuses `seed`. A second draw from the
  // same means (a held-out split) only needs a different noise seed.
  std::optional<std::uint64_t> noise_seed;
};

Dataset gen_gaussian_mixture(const SynthSpec& spec);

// The class means gen_gaussian_mixture draws for `spec`.
Matrix mixture_means(const SynthSpec& spec);

Dataset shift(const Dataset& dataset, std::span<const double> delta);

// Subset of rows, in the given order.
Dataset take(const Dataset& dataset, std::span<const std::size_t> indices);

// JSON Lines, one {"x": [...], "y": k} record per line. Without an explicit
// class count the loader uses max(y) + 1 (at least 2).
Dataset load_jsonl(const std::filesystem::path& path,
                   std::optional<std::size_t> num_classes = std::nullopt);
void save_jsonl(const Dataset& dataset, const std::filesystem::path& path);

Matrix one_hot(std::span<const std::size_t> labels, std::size_t num_classes);

// Mean of x per class, C x d0. Classes without samples get zero rows.
Matrix class_means(const Dataset& dataset);

// Accuracy of assigning each sample to the closest of `means`.
double nearest_mean_accuracy(const Dataset& dataset, const Matrix& means);

}  // namespace pvb::data
