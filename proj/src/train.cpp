#include "pvb/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace pvb::train {

std::string_view adapter_kind_name(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::None: return "none";
    case AdapterKind::Polar: return "polar";
    case AdapterKind::Lora: return "lora";
  }
  return "unknown";
}

std::string_view head_kind_name(HeadKind kind) { return kind == HeadKind::Vbll ? "vbll" : "mle"; }

std::string_view scheduler_name(SchedulerKind kind) {
  return kind == SchedulerKind::CosineRestarts ? "cosine-restarts" : "constant";
}

AdapterKind parse_adapter_kind(std::string_view name) {
  if (name == "polar") return AdapterKind::Polar;
  if (name == "lora") return AdapterKind::Lora;
  if (name == "none") return AdapterKind::None;
  throw Error(ErrorCode::InvalidArgument, "unknown adapter kind '" + std::string(name) + "'");
}

HeadKind parse_head_kind(std::string_view name) {
  if (name == "vbll") return HeadKind::Vbll;
  if (name == "mle") return HeadKind::Mle;
  throw Error(ErrorCode::InvalidArgument, "unknown head kind '" + std::string(name) + "'");
}

SchedulerKind parse_scheduler(std::string_view name) {
  if (name == "cosine-restarts") return SchedulerKind::CosineRestarts;
  if (name == "constant") return SchedulerKind::Constant;
  throw Error(ErrorCode::InvalidArgument, "unknown scheduler '" + std::string(name) + "'");
}

void validate(const TrainConfig& c) {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidArgument, msg); };
  if (c.batch == 0) fail("batch must be >= 1");
  if (!(c.lr_polar > 0.0) || !(c.lr_vbll > 0.0)) fail("learning rates must be > 0");
  if (!(c.landing > 0.0)) fail("landing lambda must be > 0");
  if (!(c.prior_var > 0.0)) fail("prior_var must be > 0");
  if (!std::isfinite(c.kl_weight)) fail("kl_weight must be finite");
  if (c.adapter != AdapterKind::None && c.rank == 0) fail("rank must be >= 1");
  if (!(c.alpha > 0.0)) fail("alpha must be > 0");
  if (c.restart_period == 0) fail("restart_period must be >= 1");
  if (c.eval_every == 0) fail("eval_every must be >= 1");
  if (c.hidden_dim == 0 || c.feature_dim == 0) fail("extractor widths must be >= 1");
}

double scheduled_lr(const TrainConfig& config, double base, std::size_t step) {
  if (config.scheduler == SchedulerKind::Constant) return base;
  // Warm restarts with eta_min = 0 and a fixed cycle length.
  const double phase = static_cast<double>(step % config.restart_period) /
                       static_cast<double>(config.restart_period);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * phase));
}

std::size_t Checkpoint::num_classes() const {
  return std::visit([](const auto& h) { return h.num_classes(); }, head);
}

std::size_t Checkpoint::feature_dim() const {
  return std::visit([](const auto& h) { return h.feature_dim(); }, head);
}

std::string to_json_line(const LogRecord& rec) {
  nlohmann::json j;
  j["step"] = rec.step;
  j["loss"] = rec.loss;
  j["feas_u"] = rec.feas_u ? nlohmann::json(*rec.feas_u) : nlohmann::json(nullptr);
  j["feas_v"] = rec.feas_v ? nlohmann::json(*rec.feas_v) : nlohmann::json(nullptr);
  j["lr"] = rec.lr;
  return j.dump();
}

double max_infeasibility_u(const features::FeatureExtractor& fx) {
  double m = 0.0;
  for (const auto& layer : fx.layers)
    if (const auto* p = std::get_if<adapters::PolarAdapter>(&layer.adapter))
      m = std::max(m, p->u.infeasibility());
  return m;
}

double max_infeasibility_v(const features::FeatureExtractor& fx) {
  double m = 0.0;
  for (const auto& layer : fx.layers)
    if (const auto* p = std::get_if<adapters::PolarAdapter>(&layer.adapter))
      m = std::max(m, p->v.infeasibility());
  return m;
}

namespace {

// Independent streams per concern so that, for one seed, the frozen bases
// are identical across adapter kinds.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kBaseStream = 0;
constexpr std::uint64_t kAdapterStream = 1;
constexpr std::uint64_t kShuffleStream = 2;

double resolved_kl_weight(const TrainConfig& config, std::size_t n) {
  if (config.kl_weight >= 0.0) return config.kl_weight;
  return 1.0 / static_cast<double>(std::max<std::size_t>(n, 1));
}

void check_dataset(const TrainConfig& config, const data::Dataset& dataset) {
  if (dataset.size() == 0) throw Error(ErrorCode::EmptyDataset, "training set is empty");
  if (dataset.num_classes < 2) throw Error(ErrorCode::InvalidArgument, "need >= 2 classes");
  if (config.adapter != AdapterKind::None) {
    const std::size_t max_rank =
        std::min({dataset.input_dim(), config.hidden_dim, config.feature_dim});
    if (config.rank > max_rank) {
      throw Error(ErrorCode::InvalidArgument,
                  "rank " + std::to_string(config.rank) + " exceeds a layer dimension");
    }
  }
}

// Sequential epochs over a seeded shuffle.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, Rng& rng) : order_(n), rng_(rng) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (cursor_ == order_.size()) reshuffle();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    // Fisher-Yates on the raw engine output keeps the order stable across
    // standard library implementations.
    for (std::size_t i = order_.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng_.next_u64() % i);
      std::swap(order_[i - 1], order_[j]);
    }
    cursor_ = 0;
  }

  std::vector<std::size_t> order_;
  Rng& rng_;
  std::size_t cursor_ = 0;
};

void update_adapter(adapters::Adapter& slot, const Matrix& g, const TrainConfig& config,
                    double lr) {
  if (auto* p = std::get_if<adapters::PolarAdapter>(&slot)) {
    const adapters::FactorGrads fg = adapters::polar_factor_grads(*p, g);
    p->u = stiefel::landing_step(p->u, fg.g_u, config.landing, lr);
    p->v = stiefel::landing_step(p->v, fg.g_v, config.landing, lr);
    p->lam -= fg.g_lam * lr;
  } else if (auto* l = std::get_if<adapters::LoraAdapter>(&slot)) {
    const adapters::LoraGrads lg = adapters::lora_factor_grads(*l, g);
    l->b -= lg.g_b * lr;
    l->a -= lg.g_a * lr;
  }
}

}  // namespace

Checkpoint initialize(const TrainConfig& config, const data::Dataset& dataset) {
  validate(config);
  check_dataset(config, dataset);
  Checkpoint ckpt;
  ckpt.config = config;

  Rng base_rng(stream_seed(config.seed, kBaseStream));
  features::ExtractorSpec spec{dataset.input_dim(), config.hidden_dim, config.feature_dim};
  ckpt.extractor = features::make_extractor(spec, base_rng);

  Rng adapter_rng(stream_seed(config.seed, kAdapterStream));
  const double alpha_scale =
      config.adapter == AdapterKind::None ? 1.0 : config.alpha / static_cast<double>(config.rank);
  for (auto& layer : ckpt.extractor.layers) {
    const std::size_t m = layer.out_dim();
    const std::size_t n = layer.in_dim();
    if (config.adapter == AdapterKind::Polar) {
      layer.adapter = adapters::init_polar(adapter_rng, m, n, config.rank, alpha_scale);
    } else if (config.adapter == AdapterKind::Lora) {
      layer.adapter = adapters::init_lora(adapter_rng, m, n, config.rank, alpha_scale);
    }
  }

  const double kl_weight = resolved_kl_weight(config, dataset.size());
  ckpt.config.kl_weight = kl_weight;
  if (config.head == HeadKind::Vbll) {
    ckpt.head = vbll::init_head(dataset.num_classes, config.feature_dim, config.prior_var,
                                kl_weight);
  } else {
    ckpt.head = vbll::SoftmaxHead{Matrix(dataset.num_classes, config.feature_dim)};
  }
  ckpt.rng_state = Rng(stream_seed(config.seed, kShuffleStream)).state();
  return ckpt;
}

TrainResult train(const TrainConfig& config, const data::Dataset& dataset,
                  const StepObserver& observer) {
  TrainResult result;
  result.checkpoint = initialize(config, dataset);
  Checkpoint& state = result.checkpoint;

  Rng rng(stream_seed(config.seed, kShuffleStream));
  BatchSampler sampler(dataset.size(), rng);
  result.losses.reserve(config.steps);

  for (std::size_t t = 0; t < config.steps; ++t) {
    const std::vector<std::size_t> idx = sampler.next(config.batch);
    const data::Dataset batch = data::take(dataset, idx);
    const Matrix y = data::one_hot(batch.y, dataset.num_classes);

    const features::ForwardResult fwd = features::forward(state.extractor, batch.x);
    const double lr_p = scheduled_lr(config, config.lr_polar, t);
    const double lr_v = scheduled_lr(config, config.lr_vbll, t);

    double loss = 0.0;
    Matrix feature_grad;
    if (auto* head = std::get_if<vbll::VbllHead>(&state.head)) {
      loss = vbll::surrogate_loss(*head, fwd.features, y);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCode::NonFiniteLoss, "loss is not finite at step " + std::to_string(t));
      }
      vbll::VbllGrads g = vbll::grads(*head, fwd.features, y);
      feature_grad = std::move(g.d_features);
      const std::vector<Matrix> weight_grads =
          features::backward_to_adapters(state.extractor, fwd.tape, feature_grad);
      for (std::size_t l = 0; l < state.extractor.layers.size(); ++l) {
        update_adapter(state.extractor.layers[l].adapter, weight_grads[l], config, lr_p);
      }
      vbll::apply_step(*head, g, lr_v);
    } else {
      auto& mle = std::get<vbll::SoftmaxHead>(state.head);
      loss = vbll::cross_entropy(mle.weights, fwd.features, y);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCode::NonFiniteLoss, "loss is not finite at step " + std::to_string(t));
      }
      vbll::SoftmaxGrads g = vbll::cross_entropy_grads(mle.weights, fwd.features, y);
      const std::vector<Matrix> weight_grads =
          features::backward_to_adapters(state.extractor, fwd.tape, g.d_features);
      for (std::size_t l = 0; l < state.extractor.layers.size(); ++l) {
        update_adapter(state.extractor.layers[l].adapter, weight_grads[l], config, lr_p);
      }
      mle.weights -= g.d_weights * lr_v;
    }
    result.losses.push_back(loss);

    const std::size_t done = t + 1;
    if (done % config.eval_every == 0 || done == config.steps) {
      LogRecord rec;
      rec.step = done;
      rec.loss = loss;
      rec.lr = lr_p;
      if (config.adapter == AdapterKind::Polar) {
        rec.feas_u = max_infeasibility_u(state.extractor);
        rec.feas_v = max_infeasibility_v(state.extractor);
      }
      result.log.push_back(rec);
    }
    state.rng_state = rng.state();
    if (observer) observer(done, state);
  }
  return result;
}

TrainResult train_mle_head(TrainConfig config, const data::Dataset& dataset,
                           const StepObserver& observer) {
  config.head = HeadKind::Mle;
  return train(config, dataset, observer);
}

}  // namespace pvb::train
