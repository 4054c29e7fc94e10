#include "pvb/features.hpp"

#include <atomic>
#include <cmath>

namespace pvb::features {

namespace {

std::atomic<std::uint64_t> g_forward_calls{0};

}  // namespace

std::uint64_t forward_call_count() { return g_forward_calls.load(std::memory_order_relaxed); }

Matrix Layer::effective_weight() const {
  if (std::holds_alternative<std::monostate>(adapter)) return base;
  return base + adapters::adapter_delta(adapter, out_dim(), in_dim());
}

std::size_t FeatureExtractor::input_dim() const {
  return layers.empty() ? 0 : layers.front().in_dim();
}

std::size_t FeatureExtractor::feature_dim() const {
  return layers.empty() ? 0 : layers.back().out_dim();
}

FeatureExtractor make_extractor(const ExtractorSpec& spec, Rng& rng) {
  if (spec.input_dim == 0 || spec.hidden_dim == 0 || spec.feature_dim == 0) {
    throw Error(ErrorCode::InvalidArgument, "extractor widths must be positive");
  }
  auto make_base = [&rng](std::size_t out, std::size_t in) {
    return sample_std_normal(rng, out, in) * (1.0 / std::sqrt(static_cast<double>(in)));
  };
  FeatureExtractor fx;
  fx.layers.push_back(Layer{make_base(spec.hidden_dim, spec.input_dim), {}, Activation::Tanh});
  fx.layers.push_back(
      Layer{make_base(spec.feature_dim, spec.hidden_dim), {}, Activation::Identity});
  return fx;
}

ForwardResult forward(const FeatureExtractor& fx, const Matrix& batch_x) {
  if (fx.layers.empty()) throw Error(ErrorCode::InvalidArgument, "extractor has no layers");
  if (batch_x.rows() == 0) throw Error(ErrorCode::InvalidArgument, "empty batch");
  if (batch_x.cols() != fx.input_dim()) {
    throw Error(ErrorCode::ShapeMismatch, "batch has " + std::to_string(batch_x.cols()) +
                                              " columns, extractor expects " +
                                              std::to_string(fx.input_dim()));
  }
  g_forward_calls.fetch_add(1, std::memory_order_relaxed);

  ForwardResult result;
  result.tape.inputs.reserve(fx.layers.size());
  result.tape.outputs.reserve(fx.layers.size());
  Matrix h = batch_x;
  for (const Layer& layer : fx.layers) {
    if (h.cols() != layer.in_dim()) {
      throw Error(ErrorCode::ShapeMismatch, "layer widths do not chain");
    }
    Matrix out = matmul_nt(h, layer.effective_weight());
    if (layer.activation == Activation::Tanh) {
      for (double& v : out.values()) v = std::tanh(v);
    }
    result.tape.inputs.push_back(std::move(h));
    h = out;
    result.tape.outputs.push_back(std::move(out));
  }
  result.features = std::move(h);
  return result;
}

std::vector<Matrix> backward_to_adapters(const FeatureExtractor& fx, const ForwardTape& tape,
                                         const Matrix& feature_grad) {
  const std::size_t n_layers = fx.layers.size();
  if (tape.inputs.size() != n_layers || tape.outputs.size() != n_layers) {
    throw Error(ErrorCode::TapeMismatch, "tape length does not match layer count");
  }
  const Matrix& last = tape.outputs.back();
  if (feature_grad.rows() != last.rows() || feature_grad.cols() != last.cols()) {
    throw Error(ErrorCode::TapeMismatch, "feature gradient shape does not match tape");
  }

  std::vector<Matrix> grads(n_layers);
  Matrix upstream = feature_grad;  // dL/d(layer output), B x out
  for (std::size_t k = n_layers; k-- > 0;) {
    const Layer& layer = fx.layers[k];
    const Matrix& out = tape.outputs[k];
    if (out.cols() != layer.out_dim() || tape.inputs[k].cols() != layer.in_dim()) {
      throw Error(ErrorCode::TapeMismatch, "tape entry " + std::to_string(k) +
                                               " does not match layer shape");
    }
    Matrix delta = std::move(upstream);  // dL/d(pre-activation)
    if (layer.activation == Activation::Tanh) {
      auto dv = delta.values();
      auto hv = out.values();
      for (std::size_t i = 0; i < dv.size(); ++i) dv[i] *= 1.0 - hv[i] * hv[i];
    }
    // Sum over the batch in row order.
    grads[k] = matmul_tn(delta, tape.inputs[k]);
    if (k > 0) upstream = matmul(delta, layer.effective_weight());
  }
  return grads;
}

}  // namespace pvb::features
