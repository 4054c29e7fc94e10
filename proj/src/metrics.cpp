#include "pvb/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

namespace pvb::metrics {

namespace {

void require_labels(const Matrix& probs, std::span<const std::size_t> labels) {
  if (probs.rows() != labels.size()) {
    throw Error(ErrorCode::ShapeMismatch, "probs has " + std::to_string(probs.rows()) +
                                              " rows for " + std::to_string(labels.size()) +
                                              " labels");
  }
  for (std::size_t y : labels) {
    if (y >= probs.cols()) throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(y));
  }
}

std::size_t argmax_low(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

// Bin index b such that conf lies in (b/M, (b+1)/M]; confidence 0 joins bin 0.
std::size_t bin_of(double conf, std::size_t bins) {
  const auto m = static_cast<double>(bins);
  auto idx = static_cast<std::ptrdiff_t>(std::ceil(conf * m)) - 1;
  idx = std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(bins) - 1);
  // Resolve rounding in conf * m against the exact boundaries.
  while (idx > 0 && conf <= static_cast<double>(idx) / m) --idx;
  while (idx + 1 < static_cast<std::ptrdiff_t>(bins) && conf > static_cast<double>(idx + 1) / m)
    ++idx;
  return static_cast<std::size_t>(idx);
}

std::uint64_t batch_seed(std::uint64_t seed, std::size_t batch_index) {
  std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL * (batch_index + 1));
  z = (z ^ (z >> 31)) * 0xd6e8feb86659fd93ULL;
  return z ^ (z >> 32);
}

}  // namespace

std::string to_json(const EvalReport& r) {
  nlohmann::json j;
  j["acc"] = r.acc;
  j["ece"] = r.ece;
  j["nll"] = r.nll;
  j["n"] = r.n;
  j["bins"] = r.bins;
  return j.dump();
}

double accuracy(const Matrix& probs, std::span<const std::size_t> labels) {
  require_labels(probs, labels);
  if (labels.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += argmax_low(probs.row(i)) == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double ece(const Matrix& probs, std::span<const std::size_t> labels, std::size_t bins) {
  require_labels(probs, labels);
  if (bins == 0) throw Error(ErrorCode::InvalidArgument, "ECE needs at least one bin");
  if (labels.empty()) return 0.0;
  std::vector<double> conf_sum(bins, 0.0);
  std::vector<double> correct(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto row = probs.row(i);
    const std::size_t pred = argmax_low(row);
    const double conf = row[pred];
    const std::size_t b = bin_of(conf, bins);
    conf_sum[b] += conf;
    correct[b] += pred == labels[i] ? 1.0 : 0.0;
    ++count[b];
  }
  const auto n = static_cast<double>(labels.size());
  double total = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    const auto nb = static_cast<double>(count[b]);
    total += (nb / n) * std::abs(correct[b] / nb - conf_sum[b] / nb);
  }
  return total;
}

double nll(const Matrix& probs, std::span<const std::size_t> labels) {
  require_labels(probs, labels);
  if (labels.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    total -= std::log(std::max(probs(i, labels[i]), kProbFloor));
  }
  return total / static_cast<double>(labels.size());
}

EvalReport evaluate(const Matrix& probs, std::span<const std::size_t> labels, std::size_t bins) {
  return EvalReport{accuracy(probs, labels), ece(probs, labels, bins), nll(probs, labels),
                    labels.size(), bins};
}

EvalOutcome evaluate_checkpoint(const train::Checkpoint& ckpt, const data::Dataset& dataset,
                                const EvalOptions& options) {
  using predict::PosteriorSource;
  if (options.batch == 0) throw Error(ErrorCode::InvalidArgument, "eval batch must be >= 1");
  if (dataset.num_classes > ckpt.num_classes()) {
    throw Error(ErrorCode::LabelOutOfRange, "dataset has more classes than the checkpoint head");
  }
  const auto* vhead = std::get_if<vbll::VbllHead>(&ckpt.head);
  if (vhead != nullptr && options.posterior == PosteriorSource::Laplace && !ckpt.laplace) {
    throw Error(ErrorCode::InvalidArgument,
                "checkpoint has no Laplace section; run laplace-fit first");
  }

  EvalOutcome out;
  out.probs = Matrix(dataset.size(), ckpt.num_classes());
  const std::uint64_t calls_before = features::forward_call_count();
  std::vector<std::size_t> idx;
  for (std::size_t start = 0, b = 0; start < dataset.size(); start += options.batch, ++b) {
    const std::size_t stop = std::min(dataset.size(), start + options.batch);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const data::Dataset batch = data::take(dataset, idx);
    const Matrix phi = features::forward(ckpt.extractor, batch.x).features;

    Matrix probs;
    if (vhead == nullptr) {
      probs = predict::predict_mean(phi, std::get<vbll::SoftmaxHead>(ckpt.head).weights).probs;
    } else if (options.posterior == PosteriorSource::Mean) {
      probs = predict::predict_mean(phi, vhead->means).probs;
    } else {
      Rng rng(batch_seed(options.seed, b));
      probs = options.posterior == PosteriorSource::Laplace
                  ? predict::predict_mc(phi, *ckpt.laplace, rng, options.samples).probs
                  : predict::predict_mc(phi, *vhead, rng, options.samples).probs;
    }
    for (std::size_t i = 0; i < probs.rows(); ++i) {
      auto src = probs.row(i);
      std::copy(src.begin(), src.end(), out.probs.row(start + i).begin());
    }
    ++out.batches;
  }
  out.forward_passes = static_cast<std::size_t>(features::forward_call_count() - calls_before);
  out.report = evaluate(out.probs, dataset.y, options.bins);
  return out;
}

StableRankReport stable_rank_report(const train::Checkpoint& ckpt) {
  StableRankReport rep;
  double sum = 0.0;
  std::size_t defined = 0;
  for (const auto& layer : ckpt.extractor.layers) {
    std::optional<double> value;
    if (!std::holds_alternative<std::monostate>(layer.adapter)) {
      const Matrix delta = adapters::adapter_delta(layer.adapter, layer.out_dim(), layer.in_dim());
      try {
        value = adapters::stable_rank(delta);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::ZeroMatrix) throw;
      }
    }
    if (value) {
      sum += *value;
      ++defined;
    }
    rep.per_layer.push_back(value);
  }
  if (defined > 0) rep.mean = sum / static_cast<double>(defined);
  return rep;
}

std::string to_json(const StableRankReport& rep) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < rep.per_layer.size(); ++l) {
    nlohmann::json entry;
    entry["layer"] = l;
    entry["stable_rank"] = rep.per_layer[l] ? nlohmann::json(*rep.per_layer[l]) : nlohmann::json();
    entry["defined"] = rep.per_layer[l].has_value();
    layers.push_back(entry);
  }
  nlohmann::json j;
  j["layers"] = layers;
  j["mean"] = rep.mean ? nlohmann::json(*rep.mean) : nlohmann::json();
  return j.dump();
}

std::string to_json(const GapRecord& rec) {
  nlohmann::json j;
  j["step"] = rec.step;
  j["jensen_loss"] = rec.jensen_loss;
  j["mc_loss"] = rec.mc_loss;
  j["mc_std_error"] = rec.mc_std_error;
  j["abs_gap"] = rec.abs_gap;
  return j.dump();
}

GapRecord jensen_gap_probe(const vbll::VbllHead& head, const features::FeatureExtractor& fx,
                           const data::Dataset& probe, Rng& rng, std::size_t mc_samples,
                           std::size_t step) {
  const Matrix phi = features::forward(fx, probe.x).features;
  const Matrix y = data::one_hot(probe.y, head.num_classes());
  GapRecord rec;
  rec.step = step;
  rec.jensen_loss = vbll::surrogate_loss(head, phi, y);
  const vbll::McEstimate mc = vbll::mc_loss_estimate(head, phi, y, rng, mc_samples);
  rec.mc_loss = mc.value;
  rec.mc_std_error = mc.std_error;
  rec.abs_gap = std::abs(rec.jensen_loss - rec.mc_loss);
  return rec;
}

GapTrace jensen_gap_trace(const train::TrainConfig& config, const data::Dataset& dataset,
                          std::size_t probe_size, std::uint64_t mc_seed, std::size_t mc_samples,
                          std::span<const std::size_t> probe_steps) {
  if (config.head != train::HeadKind::Vbll) {
    throw Error(ErrorCode::InvalidArgument, "Jensen gap needs a variational head");
  }
  std::vector<std::size_t> idx(std::min(probe_size, dataset.size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const data::Dataset probe = data::take(dataset, idx);
  Rng rng(mc_seed);

  GapTrace trace;
  auto wanted = [&](std::size_t step) {
    return std::find(probe_steps.begin(), probe_steps.end(), step) != probe_steps.end();
  };
  if (wanted(0)) {
    const train::Checkpoint init = train::initialize(config, dataset);
    trace.records.push_back(jensen_gap_probe(std::get<vbll::VbllHead>(init.head), init.extractor,
                                             probe, rng, mc_samples, 0));
  }
  trace.run = train::train(config, dataset, [&](std::size_t step, const train::Checkpoint& s) {
    if (!wanted(step)) return;
    trace.records.push_back(jensen_gap_probe(std::get<vbll::VbllHead>(s.head), s.extractor, probe,
                                             rng, mc_samples, step));
  });
  return trace;
}

}  // namespace pvb::metrics
