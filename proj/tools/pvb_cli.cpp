#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pvb/data.hpp"
#include "pvb/laplace.hpp"
#include "pvb/metrics.hpp"
#include "pvb/predict.hpp"
#include "pvb/train.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitRuntime = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code_for(pvb::ErrorCode code) {
  using pvb::ErrorCode;
  switch (code) {
    case ErrorCode::Io:
    case ErrorCode::ParseError:
    case ErrorCode::DimMismatch:
    case ErrorCode::LabelOutOfRange:
    case ErrorCode::EmptyDataset:
    case ErrorCode::BadMagic:
    case ErrorCode::VersionUnsupported:
    case ErrorCode::ChecksumMismatch:
    case ErrorCode::TruncatedFile:
      return kExitIo;
    default:
      return kExitRuntime;
  }
}

void emit(const json& j) { std::cout << j.dump() << '\n'; }

// --- train configuration -------------------------------------------------

struct TrainPaths {
  std::optional<std::string> data;
  std::optional<std::string> out;
  std::optional<std::string> log;
};

template <typename T>
T get_as(const json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw UsageError("config key '" + key + "' has the wrong type");
  }
}

std::size_t get_count(const json& j, const std::string& key) {
  if (!j.is_number_unsigned()) throw UsageError("config key '" + key + "' must be a non-negative integer");
  return j.get<std::size_t>();
}

void apply_config_file(const fs::path& path, pvb::train::TrainConfig& c, TrainPaths& paths) {
  std::ifstream in(path);
  if (!in) throw pvb::Error(pvb::ErrorCode::Io, "cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!doc.is_object()) throw UsageError("config must be a JSON object");
  for (const auto& [key, v] : doc.items()) {
    try {
      if (key == "steps") c.steps = get_count(v, key);
      else if (key == "batch") c.batch = get_count(v, key);
      else if (key == "lr_polar") c.lr_polar = get_as<double>(v, key);
      else if (key == "lr_vbll") c.lr_vbll = get_as<double>(v, key);
      else if (key == "landing") c.landing = get_as<double>(v, key);
      else if (key == "prior_var") c.prior_var = get_as<double>(v, key);
      else if (key == "kl_weight") c.kl_weight = get_as<double>(v, key);
      else if (key == "adapter") c.adapter = pvb::train::parse_adapter_kind(get_as<std::string>(v, key));
      else if (key == "head") c.head = pvb::train::parse_head_kind(get_as<std::string>(v, key));
      else if (key == "rank") c.rank = get_count(v, key);
      else if (key == "alpha") c.alpha = get_as<double>(v, key);
      else if (key == "seed") c.seed = get_as<std::uint64_t>(v, key);
      else if (key == "scheduler") c.scheduler = pvb::train::parse_scheduler(get_as<std::string>(v, key));
      else if (key == "restart_period") c.restart_period = get_count(v, key);
      else if (key == "eval_every") c.eval_every = get_count(v, key);
      else if (key == "hidden_dim") c.hidden_dim = get_count(v, key);
      else if (key == "feature_dim") c.feature_dim = get_count(v, key);
      else if (key == "data") paths.data = get_as<std::string>(v, key);
      else if (key == "out") paths.out = get_as<std::string>(v, key);
      else if (key == "log") paths.log = get_as<std::string>(v, key);
      else throw UsageError("unknown config key '" + key + "'");
    } catch (const pvb::Error& e) {
      throw UsageError("config key '" + key + "': " + e.what());
    }
  }
}

struct TrainFlags {
  std::string config;
  TrainPaths paths;
  std::optional<std::size_t> steps, batch, rank, restart_period, eval_every, hidden_dim, feature_dim;
  std::optional<double> lr_polar, lr_vbll, landing, prior_var, kl_weight, alpha;
  std::optional<std::string> adapter, head, scheduler;
  std::optional<std::uint64_t> seed;
};

template <typename T>
void override(std::optional<T> flag, T& field) {
  if (flag) field = *flag;
}

pvb::train::TrainConfig resolve_config(const TrainFlags& f, TrainPaths& paths) {
  pvb::train::TrainConfig c;
  if (!f.config.empty()) apply_config_file(f.config, c, paths);
  override(f.steps, c.steps);
  override(f.batch, c.batch);
  override(f.rank, c.rank);
  override(f.restart_period, c.restart_period);
  override(f.eval_every, c.eval_every);
  override(f.hidden_dim, c.hidden_dim);
  override(f.feature_dim, c.feature_dim);
  override(f.lr_polar, c.lr_polar);
  override(f.lr_vbll, c.lr_vbll);
  override(f.landing, c.landing);
  override(f.prior_var, c.prior_var);
  override(f.kl_weight, c.kl_weight);
  override(f.alpha, c.alpha);
  override(f.seed, c.seed);
  try {
    if (f.adapter) c.adapter = pvb::train::parse_adapter_kind(*f.adapter);
    if (f.head) c.head = pvb::train::parse_head_kind(*f.head);
    if (f.scheduler) c.scheduler = pvb::train::parse_scheduler(*f.scheduler);
    pvb::train::validate(c);
  } catch (const pvb::Error& e) {
    throw UsageError(e.what());
  }
  if (f.paths.data) paths.data = f.paths.data;
  if (f.paths.out) paths.out = f.paths.out;
  if (f.paths.log) paths.log = f.paths.log;
  if (!paths.data) throw UsageError("train needs --data (flag or config key)");
  if (!paths.out) throw UsageError("train needs --out (flag or config key)");
  if (!paths.log) paths.log = *paths.out + ".log.jsonl";
  return c;
}

json config_json(const pvb::train::TrainConfig& c) {
  return json{{"steps", c.steps},
              {"batch", c.batch},
              {"lr_polar", c.lr_polar},
              {"lr_vbll", c.lr_vbll},
              {"landing", c.landing},
              {"prior_var", c.prior_var},
              {"kl_weight", c.kl_weight},
              {"adapter", pvb::train::adapter_kind_name(c.adapter)},
              {"head", pvb::train::head_kind_name(c.head)},
              {"rank", c.rank},
              {"alpha", c.alpha},
              {"seed", c.seed},
              {"scheduler", pvb::train::scheduler_name(c.scheduler)},
              {"restart_period", c.restart_period},
              {"eval_every", c.eval_every},
              {"hidden_dim", c.hidden_dim},
              {"feature_dim", c.feature_dim}};
}

int run_train(const TrainFlags& flags) {
  TrainPaths paths;
  const pvb::train::TrainConfig config = resolve_config(flags, paths);
  const pvb::data::Dataset dataset = pvb::data::load_jsonl(*paths.data);

  pvb::train::TrainResult result;
  try {
    result = pvb::train::train(config, dataset);
  } catch (const pvb::Error& e) {
    emit({{"status", "aborted"}, {"error", pvb::error_code_name(e.code())}, {"message", e.what()}});
    std::cerr << "training aborted: " << e.what() << '\n';
    return kExitRuntime;
  }
  pvb::train::save(result.checkpoint, *paths.out);
  std::ofstream log(*paths.log);
  if (!log) throw pvb::Error(pvb::ErrorCode::Io, "cannot write log " + *paths.log);
  for (const auto& rec : result.log) log << pvb::train::to_json_line(rec) << '\n';
  if (!log) throw pvb::Error(pvb::ErrorCode::Io, "failed writing log " + *paths.log);

  json summary{{"status", "ok"},
               {"out", *paths.out},
               {"log", *paths.log},
               {"n", dataset.size()},
               {"config", config_json(result.checkpoint.config)}};
  summary["final_loss"] = result.losses.empty() ? json() : json(result.losses.back());
  if (config.adapter == pvb::train::AdapterKind::Polar) {
    summary["feas_u"] = pvb::train::max_infeasibility_u(result.checkpoint.extractor);
    summary["feas_v"] = pvb::train::max_infeasibility_v(result.checkpoint.extractor);
  }
  emit(summary);
  std::cerr << "trained " << config.steps << " steps on " << dataset.size() << " samples\n";
  return kExitOk;
}

// --- other commands --------------------------------------------------------

struct GenFlags {
  std::string out;
  std::size_t classes = 3;
  std::size_t dim = 8;
  std::size_t per_class = 200;
  double overlap = 2.0;
  std::string shift;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> noise_seed;
};

std::vector<double> parse_vector(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw UsageError("--shift entry '" + item + "' is not a number");
    }
    if (item.find_first_not_of(" \t", used) != std::string::npos) {
      throw UsageError("--shift entry '" + item + "' is not a number");
    }
    out.push_back(v);
  }
  return out;
}

int run_gen_data(const GenFlags& f) {
  pvb::data::SynthSpec spec;
  spec.num_classes = f.classes;
  spec.input_dim = f.dim;
  spec.per_class = f.per_class;
  spec.overlap = f.overlap;
  spec.seed = f.seed;
  spec.noise_seed = f.noise_seed;
  if (!f.shift.empty()) {
    spec.shift = parse_vector(f.shift);
    if (spec.shift.size() != f.dim) {
      throw UsageError("--shift has " + std::to_string(spec.shift.size()) + " entries for --dim " +
                       std::to_string(f.dim));
    }
  }
  const pvb::data::Dataset ds = pvb::data::gen_gaussian_mixture(spec);
  pvb::data::save_jsonl(ds, f.out);
  emit({{"out", f.out},
        {"n", ds.size()},
        {"classes", spec.num_classes},
        {"dim", spec.input_dim},
        {"per_class", spec.per_class},
        {"overlap", spec.overlap},
        {"shift", spec.shift},
        {"seed", spec.seed},
        {"noise_seed", spec.noise_seed ? json(*spec.noise_seed) : json()}});
  return kExitOk;
}

struct LaplaceFlags {
  std::string ckpt, data, out, mode = "exact-full";
  std::size_t max_dim = pvb::laplace::kDefaultMaxDim;
};

int run_laplace_fit(const LaplaceFlags& f) {
  const pvb::laplace::Mode mode = [&] {
    try {
      return pvb::laplace::parse_mode(f.mode);
    } catch (const pvb::Error& e) {
      throw UsageError(e.what());
    }
  }();
  pvb::train::Checkpoint ckpt = pvb::train::load(f.ckpt);
  const auto* head = std::get_if<pvb::vbll::VbllHead>(&ckpt.head);
  if (head == nullptr) {
    std::cerr << "laplace-fit needs a variational head; this checkpoint has a softmax head\n";
    return kExitRuntime;
  }
  pvb::Matrix phi(0, head->feature_dim());
  std::size_t n = 0;
  try {
    const pvb::data::Dataset ds = pvb::data::load_jsonl(f.data, head->num_classes());
    n = ds.size();
    phi = pvb::features::forward(ckpt.extractor, ds.x).features;
  } catch (const pvb::Error& e) {
    if (e.code() != pvb::ErrorCode::EmptyDataset) throw;
    std::cerr << "empty data: posterior falls back to the prior\n";
  }
  try {
    ckpt.laplace = pvb::laplace::refine(*head, phi, mode, f.max_dim);
  } catch (const pvb::Error& e) {
    if (e.code() == pvb::ErrorCode::DimensionTooLarge) {
      std::cerr << e.what() << "; rerun with --mode block-diagonal or raise --max-dim\n";
    }
    throw;
  }
  pvb::train::save(ckpt, f.out);

  json traces = json::array();
  for (const auto& s : ckpt.laplace->sigmas) traces.push_back(pvb::trace(s));
  emit({{"out", f.out}, {"mode", pvb::laplace::mode_name(mode)}, {"n", n}, {"trace_sigma", traces}});
  return kExitOk;
}

struct EvalFlags {
  std::string ckpt, data, posterior = "variational";
  std::size_t samples = pvb::predict::kDefaultSamples;
  std::size_t bins = pvb::metrics::kDefaultBins;
  std::size_t batch = 256;
  std::uint64_t seed = 0;
};

int run_eval(const EvalFlags& f) {
  pvb::metrics::EvalOptions opts;
  try {
    opts.posterior = pvb::predict::parse_source(f.posterior);
  } catch (const pvb::Error& e) {
    throw UsageError(e.what());
  }
  opts.samples = f.samples;
  opts.bins = f.bins;
  opts.batch = f.batch;
  opts.seed = f.seed;
  const pvb::train::Checkpoint ckpt = pvb::train::load(f.ckpt);
  if (opts.posterior == pvb::predict::PosteriorSource::Laplace && !ckpt.laplace) {
    std::cerr << "checkpoint has no Laplace section; run laplace-fit first\n";
    return kExitRuntime;
  }
  const pvb::data::Dataset ds = pvb::data::load_jsonl(f.data, ckpt.num_classes());
  const pvb::metrics::EvalOutcome outcome = pvb::metrics::evaluate_checkpoint(ckpt, ds, opts);
  std::cout << pvb::metrics::to_json(outcome.report) << '\n';
  std::cerr << "posterior " << f.posterior << ", " << outcome.batches << " batches, "
            << outcome.forward_passes << " extractor passes\n";
  return kExitOk;
}

int run_stable_rank(const std::string& ckpt_path) {
  const pvb::train::Checkpoint ckpt = pvb::train::load(ckpt_path);
  const pvb::metrics::StableRankReport rep = pvb::metrics::stable_rank_report(ckpt);
  std::cout << pvb::metrics::to_json(rep) << '\n';
  if (!rep.mean) {
    std::cerr << "stable rank undefined: every adapter update is zero or absent\n";
    return kExitRuntime;
  }
  return kExitOk;
}

struct GapFlags {
  std::string ckpt, data;
  std::size_t samples = 50;
  std::size_t probe = 256;
  std::uint64_t seed = 0;
};

int run_jensen_gap(const GapFlags& f) {
  const pvb::train::Checkpoint ckpt = pvb::train::load(f.ckpt);
  const auto* head = std::get_if<pvb::vbll::VbllHead>(&ckpt.head);
  if (head == nullptr) {
    std::cerr << "jensen-gap needs a variational head\n";
    return kExitRuntime;
  }
  const pvb::data::Dataset ds = pvb::data::load_jsonl(f.data, head->num_classes());
  std::vector<std::size_t> idx(std::min(f.probe, ds.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  pvb::Rng rng(f.seed);
  const pvb::metrics::GapRecord rec = pvb::metrics::jensen_gap_probe(
      *head, ckpt.extractor, pvb::data::take(ds, idx), rng, f.samples, ckpt.config.steps);
  json j = json::parse(pvb::metrics::to_json(rec));
  j["gap"] = rec.gap();
  j["probe_size"] = idx.size();
  j["bound_holds"] = rec.gap() >= -3.0 * rec.mc_std_error;
  emit(j);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pvb: low-rank adapters with a Bayesian last layer on synthetic data"};
  app.require_subcommand(1);
  app.get_formatter()->column_width(36);

  GenFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a Gaussian-mixture JSONL dataset");
  gen_cmd->add_option("--out", gen.out, "Output JSONL path")->required();
  gen_cmd->add_option("--classes", gen.classes, "Number of classes")->capture_default_str()
      ->check(CLI::Range(std::size_t{2}, std::size_t{1} << 20));
  gen_cmd->add_option("--dim", gen.dim, "Input dimension")->capture_default_str()
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--per-class", gen.per_class, "Samples per class")->capture_default_str()
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--overlap", gen.overlap, "Class-mean separation scale (> 0)")
      ->capture_default_str()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--shift", gen.shift, "Offset added to every mean, \"v1,v2,...\" (default none)");
  gen_cmd->add_option("--seed", gen.seed, "Seed for class means (and noise by default)")
      ->capture_default_str();
  gen_cmd->add_option("--noise-seed", gen.noise_seed,
                      "Separate seed for sample noise, e.g. a held-out split (default: --seed)");

  const pvb::train::TrainConfig defaults;
  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "Train adapters and head; flags override --config");
  train_cmd->add_option("--config", tf.config, "JSON config file (optional)");
  train_cmd->add_option("--data", tf.paths.data, "Training JSONL");
  train_cmd->add_option("--out", tf.paths.out, "Checkpoint path");
  train_cmd->add_option("--log", tf.paths.log, "JSONL log path (default <out>.log.jsonl)");
  auto dflt = [](auto v) {
    std::ostringstream os;
    os << v;
    return os.str();
  };
  train_cmd->add_option("--steps", tf.steps, "Training steps")->default_str(dflt(defaults.steps));
  train_cmd->add_option("--batch", tf.batch, "Mini-batch size")->default_str(dflt(defaults.batch));
  train_cmd->add_option("--lr-polar", tf.lr_polar, "Adapter learning rate")
      ->default_str(dflt(defaults.lr_polar));
  train_cmd->add_option("--lr-vbll", tf.lr_vbll, "Head learning rate")
      ->default_str(dflt(defaults.lr_vbll));
  train_cmd->add_option("--landing", tf.landing, "Landing strength")
      ->default_str(dflt(defaults.landing));
  train_cmd->add_option("--prior-var", tf.prior_var, "Prior variance of head weights")
      ->default_str(dflt(defaults.prior_var));
  train_cmd->add_option("--kl-weight", tf.kl_weight, "KL weight; negative means 1/N")
      ->default_str(dflt(defaults.kl_weight));
  train_cmd->add_option("--adapter", tf.adapter, "polar | lora | none")
      ->default_str(std::string(pvb::train::adapter_kind_name(defaults.adapter)));
  train_cmd->add_option("--head", tf.head, "vbll | mle")
      ->default_str(std::string(pvb::train::head_kind_name(defaults.head)));
  train_cmd->add_option("--rank", tf.rank, "Adapter rank")->default_str(dflt(defaults.rank));
  train_cmd->add_option("--alpha", tf.alpha, "Adapter scale numerator (scale = alpha / rank)")
      ->default_str(dflt(defaults.alpha));
  train_cmd->add_option("--seed", tf.seed, "RNG seed")->default_str(dflt(defaults.seed));
  train_cmd->add_option("--scheduler", tf.scheduler, "cosine-restarts | constant")
      ->default_str(std::string(pvb::train::scheduler_name(defaults.scheduler)));
  train_cmd->add_option("--restart-period", tf.restart_period, "Steps per cosine cycle")
      ->default_str(dflt(defaults.restart_period));
  train_cmd->add_option("--eval-every", tf.eval_every, "Log interval in steps")
      ->default_str(dflt(defaults.eval_every));
  train_cmd->add_option("--hidden-dim", tf.hidden_dim, "Extractor hidden width")
      ->default_str(dflt(defaults.hidden_dim));
  train_cmd->add_option("--feature-dim", tf.feature_dim, "Feature dimension")
      ->default_str(dflt(defaults.feature_dim));

  LaplaceFlags lf;
  auto* lap_cmd = app.add_subcommand("laplace-fit", "Refine the head covariance with a Laplace step");
  lap_cmd->add_option("--ckpt", lf.ckpt, "Input checkpoint")->required();
  lap_cmd->add_option("--data", lf.data, "Data JSONL for the Hessian")->required();
  lap_cmd->add_option("--out", lf.out, "Output checkpoint")->required();
  lap_cmd->add_option("--mode", lf.mode, "exact-full | block-diagonal")->capture_default_str();
  lap_cmd->add_option("--max-dim", lf.max_dim, "Cap on C*d for exact-full")->capture_default_str();

  EvalFlags ef;
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy, ECE and NLL of a checkpoint");
  eval_cmd->add_option("--ckpt", ef.ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--data", ef.data, "Evaluation JSONL")->required();
  eval_cmd->add_option("--samples", ef.samples, "Monte Carlo samples K")->capture_default_str()
      ->check(CLI::PositiveNumber);
  eval_cmd->add_option("--posterior", ef.posterior, "variational | laplace | mean")
      ->capture_default_str();
  eval_cmd->add_option("--bins", ef.bins, "ECE bins")->capture_default_str()
      ->check(CLI::PositiveNumber);
  eval_cmd->add_option("--batch", ef.batch, "Evaluation batch size")->capture_default_str()
      ->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", ef.seed, "Sampling seed")->capture_default_str();

  auto* diag_cmd = app.add_subcommand("diagnose", "Diagnostics on a checkpoint");
  diag_cmd->require_subcommand(1);
  std::string sr_ckpt;
  auto* sr_cmd = diag_cmd->add_subcommand("stable-rank", "Per-layer stable rank of adapter updates");
  sr_cmd->add_option("--ckpt", sr_ckpt, "Checkpoint")->required();
  GapFlags gf;
  auto* gap_cmd = diag_cmd->add_subcommand("jensen-gap", "Jensen surrogate vs Monte Carlo loss");
  gap_cmd->add_option("--ckpt", gf.ckpt, "Checkpoint")->required();
  gap_cmd->add_option("--data", gf.data, "Probe JSONL")->required();
  gap_cmd->add_option("--samples", gf.samples, "Monte Carlo samples")->capture_default_str()
      ->check(CLI::Range(std::size_t{2}, std::size_t{1} << 30));
  gap_cmd->add_option("--probe-size", gf.probe, "Rows used from the start of the data")
      ->capture_default_str()->check(CLI::PositiveNumber);
  gap_cmd->add_option("--seed", gf.seed, "Sampling seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return run_gen_data(gen);
    if (train_cmd->parsed()) return run_train(tf);
    if (lap_cmd->parsed()) return run_laplace_fit(lf);
    if (eval_cmd->parsed()) return run_eval(ef);
    if (sr_cmd->parsed()) return run_stable_rank(sr_ckpt);
    if (gap_cmd->parsed()) return run_jensen_gap(gf);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const pvb::Error& e) {
    std::cerr << pvb::error_code_name(e.code()) << ": " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
