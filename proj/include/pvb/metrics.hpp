#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pvb/data.hpp"
#include "pvb/predict.hpp"
#include "pvb/train.hpp"

namespace pvb::metrics {

inline constexpr std::size_t kDefaultBins = 15;
inline constexpr double kProbFloor = 1e-12;

struct EvalReport {
  double acc = 0.0;
  double ece = 0.0;
  double nll = 0.0;
  std::size_t n = 0;
  std::size_t bins = kDefaultBins;
};

// {"acc", "ece", "nll", "n", "bins"}
std::string to_json(const EvalReport& report);

// Argmax accuracy; ties go to the lowest class index.
double accuracy(const Matrix& probs, std::span<const std::size_t> labels);

// Top-label ECE over equal-width bins ((b-1)/M, b/M].
double ece(const Matrix& probs, std::span<const std::size_t> labels,
           std::size_t bins = kDefaultBins);

// Mean negative log probability of the true class, floored at kProbFloor.
double nll(const Matrix& probs, std::span<const std::size_t> labels);

EvalReport evaluate(const Matrix& probs, std::span<const std::size_t> labels,
                    std::size_t bins = kDefaultBins);

struct EvalOptions {
  predict::PosteriorSource posterior = predict::PosteriorSource::Variational;
  std::size_t samples = predict::kDefaultSamples;
  std::size_t bins = kDefaultBins;
  std::size_t batch = 256;
  std::uint64_t seed = 0;
};

struct EvalOutcome {
  EvalReport report;
  Matrix probs;
  std::size_t forward_passes = 0;  // extractor calls made for this evaluation
  std::size_t batches = 0;
};

// One extractor pass per batch, then predictive sampling on the features.
// A softmax-head checkpoint is always evaluated deterministically, whatever
// the requested posterior. Throws InvalidArgument when a variational head is
// asked for its Laplace posterior but has none.
EvalOutcome evaluate_checkpoint(const train::Checkpoint& ckpt, const data::Dataset& dataset,
                                const EvalOptions& options);

struct StableRankReport {
  std::vector<std::optional<double>> per_layer;  // nullopt: no adapter or zero update
  std::optional<double> mean;                    // over defined layers
};

StableRankReport stable_rank_report(const train::Checkpoint& ckpt);
std::string to_json(const StableRankReport& report);

struct GapRecord {
  std::size_t step = 0;
  double jensen_loss = 0.0;
  double mc_loss = 0.0;
  double mc_std_error = 0.0;
  double abs_gap = 0.0;

  double gap() const { return jensen_loss - mc_loss; }
};

std::string to_json(const GapRecord& rec);

// Jensen surrogate vs Monte Carlo loss of `head` on one probe batch.
GapRecord jensen_gap_probe(const vbll::VbllHead& head, const features::FeatureExtractor& fx,
                           const data::Dataset& probe, Rng& rng, std::size_t mc_samples,
                           std::size_t step = 0);

struct GapTrace {
  std::vector<GapRecord> records;
  train::TrainResult run;
};

// Trains with `config` and probes the gap on a fixed batch (the first
// `probe_size` training rows) at each requested step; step 0 is the
// initialization.
GapTrace jensen_gap_trace(const train::TrainConfig& config, const data::Dataset& dataset,
                          std::size_t probe_size, std::uint64_t mc_seed, std::size_t mc_samples,
                          std::span<const std::size_t> probe_steps);

}  // namespace pvb::metrics
