#pragma once

#include <cstdint>
#include <vector>

#include "pvb/adapters.hpp"
#include "pvb/numerics.hpp"

namespace pvb::features {

enum class Activation : std::uint8_t { Identity = 0, Tanh = 1 };

// One dense layer h = act((W0 + delta) x). W0 is out x in and frozen.
struct Layer {
  Matrix base;
  adapters::Adapter adapter;
  Activation activation = Activation::Tanh;

  std::size_t out_dim() const noexcept { return base.rows(); }
  std::size_t in_dim() const noexcept { return base.cols(); }
  Matrix effective_weight() const;

  friend bool operator==(const Layer&, const Layer&) = default;
};

// Widths of the default two-layer extractor input -> hidden -> feature.
struct ExtractorSpec {
  std::size_t input_dim = 8;
  std::size_t hidden_dim = 32;
  std::size_t feature_dim = 16;
};

// Frozen MLP phi_W(x). Hidden layers use tanh, the last layer is linear.
struct FeatureExtractor {
  std::vector<Layer> layers;

  std::size_t input_dim() const;
  std::size_t feature_dim() const;

  friend bool operator==(const FeatureExtractor&, const FeatureExtractor&) = default;
};

// Bases ~ N(0, 1/fan_in), no adapters attached.
FeatureExtractor make_extractor(const ExtractorSpec& spec, Rng& rng);

// Per-layer inputs and post-activation outputs for one batch.
struct ForwardTape {
  std::vector<Matrix> inputs;
  std::vector<Matrix> outputs;
};

struct ForwardResult {
  Matrix features;  // B x d
  ForwardTape tape;
};

// Rows of batch_x are samples. Each call bumps forward_call_count().
ForwardResult forward(const FeatureExtractor& fx, const Matrix& batch_x);

// Returns dL/d(delta_l) for every layer (out x in), given dL/d(features).
// Entries for layers without an adapter are still filled: the gradient wrt
// the effective weight is the same quantity.
std::vector<Matrix> backward_to_adapters(const FeatureExtractor& fx, const ForwardTape& tape,
                                         const Matrix& feature_grad);

// Process-wide count of forward() calls; instrumentation for inference tests.
std::uint64_t forward_call_count();

}  // namespace pvb::features
