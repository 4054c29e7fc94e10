#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "pvb/adapters.hpp"
#include "pvb/data.hpp"
#include "pvb/features.hpp"
#include "pvb/laplace.hpp"
#include "pvb/vbll.hpp"

namespace pvb::train {

enum class AdapterKind : std::uint8_t { None = 0, Polar = 1, Lora = 2 };
enum class HeadKind : std::uint8_t { Vbll = 0, Mle = 1 };
enum class SchedulerKind : std::uint8_t { CosineRestarts = 0, Constant = 1 };

std::string_view adapter_kind_name(AdapterKind kind);
std::string_view head_kind_name(HeadKind kind);
std::string_view scheduler_name(SchedulerKind kind);
AdapterKind parse_adapter_kind(std::string_view name);
HeadKind parse_head_kind(std::string_view name);
SchedulerKind parse_scheduler(std::string_view name);

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 32;
  double lr_polar = 1e-2;  // adapters (landing steps for U, V; plain steps otherwise)
  double lr_vbll = 1e-2;   // last layer
  double landing = stiefel::kDefaultLanding;
  double prior_var = vbll::kDefaultPriorVar;
  double kl_weight = -1.0;  // negative selects 1/N
  AdapterKind adapter = AdapterKind::Polar;
  HeadKind head = HeadKind::Vbll;
  std::size_t rank = adapters::kDefaultRank;
  double alpha = adapters::kDefaultAlpha;
  std::uint64_t seed = 0;
  SchedulerKind scheduler = SchedulerKind::CosineRestarts;
  std::size_t restart_period = 500;  // steps per cosine cycle
  std::size_t eval_every = 100;
  std::size_t hidden_dim = 32;
  std::size_t feature_dim = 16;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Throws InvalidArgument on non-positive rates, zero batch and the like.
void validate(const TrainConfig& config);

// Learning rate at zero-based step t.
double scheduled_lr(const TrainConfig& config, double base, std::size_t step);

using Head = std::variant<vbll::VbllHead, vbll::SoftmaxHead>;

inline constexpr std::uint32_t kFormatVersion = 1;

struct Checkpoint {
  std::uint32_t version = kFormatVersion;
  TrainConfig config;
  features::FeatureExtractor extractor;
  Head head;
  std::optional<laplace::LaplacePosterior> laplace;
  std::string rng_state;

  std::size_t num_classes() const;
  std::size_t feature_dim() const;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

struct LogRecord {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> feas_u;  // max N(U) over PoLAR layers
  std::optional<double> feas_v;
  double lr = 0.0;
};

std::string to_json_line(const LogRecord& rec);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LogRecord> log;
  std::vector<double> losses;  // per-step batch loss
};

// Invoked after every completed step with the number of steps done so far.
using StepObserver = std::function<void(std::size_t steps_done, const Checkpoint& state)>;

// Initial state for `config` on a dataset of the given shape: frozen bases,
// fresh adapters and head. Equals train() with steps = 0.
Checkpoint initialize(const TrainConfig& config, const data::Dataset& dataset);

// Joint optimisation of adapters (landing field for U, V) and the head, or
// the softmax baseline when config.head == Mle. Throws NonFiniteLoss with the
// step index, and propagates SafetyRegionViolation.
TrainResult train(const TrainConfig& config, const data::Dataset& dataset,
                  const StepObserver& observer = {});

// Same loop with a deterministic softmax head and cross-entropy loss.
TrainResult train_mle_head(TrainConfig config, const data::Dataset& dataset,
                           const StepObserver& observer = {});

double max_infeasibility_u(const features::FeatureExtractor& fx);
double max_infeasibility_v(const features::FeatureExtractor& fx);

// Binary checkpoint I/O. See README for the byte layout.
std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(std::span<const std::uint8_t> bytes);
void save(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load(const std::filesystem::path& path);

}  // namespace pvb::train
