#include "pvb/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace pvb::data {

namespace {

void validate_spec(const SynthSpec& spec) {
  if (spec.num_classes < 2) throw Error(ErrorCode::InvalidArgument, "need at least two classes");
  if (spec.input_dim == 0) throw Error(ErrorCode::InvalidArgument, "input_dim must be positive");
  if (spec.per_class == 0) throw Error(ErrorCode::InvalidArgument, "per_class must be positive");
  if (!(spec.overlap > 0.0)) throw Error(ErrorCode::InvalidArgument, "overlap must be > 0");
  if (!spec.shift.empty() && spec.shift.size() != spec.input_dim) {
    throw Error(ErrorCode::ShapeMismatch, "shift has " + std::to_string(spec.shift.size()) +
                                              " entries, input_dim is " +
                                              std::to_string(spec.input_dim));
  }
}

std::string describe(const SynthSpec& spec) {
  std::ostringstream os;
  os << "synthetic(classes=" << spec.num_classes << ", dim=" << spec.input_dim
     << ", per_class=" << spec.per_class << ", overlap=" << spec.overlap << ", seed=" << spec.seed;
  if (spec.noise_seed) os << ", noise_seed=" << *spec.noise_seed;
  os << (spec.shift.empty() ? "" : ", shifted") << ")";
  return os.str();
}

}  // namespace

Matrix mixture_means(const SynthSpec& spec) {
  validate_spec(spec);
  const std::size_t c_count = spec.num_classes;
  const std::size_t d0 = spec.input_dim;
  Rng rng(spec.seed);
  // Frame columns are the unscaled class directions.
  Matrix frame;
  if (d0 >= c_count) {
    frame = qr_orthonormalize(sample_std_normal(rng, d0, c_count));
  } else {
    frame = sample_std_normal(rng, d0, c_count) * (1.0 / std::sqrt(static_cast<double>(d0)));
  }
  Matrix means = transpose(frame) * spec.overlap;  // C x d0
  for (std::size_t j = 0; j < d0; ++j) {
    double centre = 0.0;
    for (std::size_t c = 0; c < c_count; ++c) centre += means(c, j);
    centre /= static_cast<double>(c_count);
    const double offset = spec.shift.empty() ? 0.0 : spec.shift[j];
    for (std::size_t c = 0; c < c_count; ++c) means(c, j) += offset - centre;
  }
  return means;
}

Dataset gen_gaussian_mixture(const SynthSpec& spec) {
  const Matrix means = mixture_means(spec);
  // Noise stream is separate from the mean stream so shifting a spec leaves
  // the noise draws untouched.
  Rng rng(spec.noise_seed.value_or(spec.seed) ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t n = spec.num_classes * spec.per_class;
  Dataset ds;
  ds.x = Matrix(n, spec.input_dim);
  ds.y.reserve(n);
  ds.num_classes = spec.num_classes;
  ds.provenance = describe(spec);
  std::size_t row = 0;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t k = 0; k < spec.per_class; ++k, ++row) {
      for (std::size_t j = 0; j < spec.input_dim; ++j) ds.x(row, j) = means(c, j) + rng.normal();
      ds.y.push_back(c);
    }
  }
  return ds;
}

Dataset shift(const Dataset& dataset, std::span<const double> delta) {
  if (delta.size() != dataset.input_dim()) {
    throw Error(ErrorCode::ShapeMismatch, "shift has " + std::to_string(delta.size()) +
                                              " entries, dataset dim is " +
                                              std::to_string(dataset.input_dim()));
  }
  Dataset out = dataset;
  for (std::size_t i = 0; i < out.x.rows(); ++i) {
    auto row = out.x.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += delta[j];
  }
  out.provenance = dataset.provenance + " + shift";
  return out;
}

Dataset take(const Dataset& dataset, std::span<const std::size_t> indices) {
  Dataset out;
  out.x = Matrix(indices.size(), dataset.input_dim());
  out.y.reserve(indices.size());
  out.num_classes = dataset.num_classes;
  out.provenance = dataset.provenance;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= dataset.size()) throw Error(ErrorCode::InvalidArgument, "index out of range");
    auto src = dataset.x.row(i);
    std::copy(src.begin(), src.end(), out.x.row(k).begin());
    out.y.push_back(dataset.y[i]);
  }
  return out;
}

Dataset load_jsonl(const std::filesystem::path& path, std::optional<std::size_t> num_classes) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());

  std::vector<double> values;
  std::vector<std::size_t> labels;
  std::size_t dim = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::ParseError, where + ": " + e.what());
    }
    if (!rec.is_object() || !rec.contains("x") || !rec.contains("y") || !rec["x"].is_array() ||
        !rec["y"].is_number_integer()) {
      throw Error(ErrorCode::ParseError, where + ": expected {\"x\": [...], \"y\": int}");
    }
    const auto& xs = rec["x"];
    if (labels.empty()) {
      dim = xs.size();
      if (dim == 0) throw Error(ErrorCode::DimMismatch, where + ": empty feature vector");
    } else if (xs.size() != dim) {
      throw Error(ErrorCode::DimMismatch, where + ": has " + std::to_string(xs.size()) +
                                              " features, expected " + std::to_string(dim));
    }
    for (const auto& v : xs) {
      if (!v.is_number()) throw Error(ErrorCode::ParseError, where + ": non-numeric feature");
      const double value = v.get<double>();
      if (!std::isfinite(value)) throw Error(ErrorCode::ParseError, where + ": non-finite value");
      values.push_back(value);
    }
    const auto y = rec["y"].get<std::int64_t>();
    if (y < 0 || (num_classes && static_cast<std::size_t>(y) >= *num_classes)) {
      throw Error(ErrorCode::LabelOutOfRange, where + ": label " + std::to_string(y));
    }
    labels.push_back(static_cast<std::size_t>(y));
  }
  if (labels.empty()) throw Error(ErrorCode::EmptyDataset, path.string() + " has no records");

  Dataset ds;
  ds.x = Matrix(labels.size(), dim, std::move(values));
  std::size_t max_label = 0;
  for (std::size_t y : labels) max_label = std::max(max_label, y);
  ds.num_classes = num_classes.value_or(std::max<std::size_t>(2, max_label + 1));
  ds.y = std::move(labels);
  ds.provenance = path.string();
  return ds;
}

void save_jsonl(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  char buf[32];
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    out << "{\"x\": [";
    auto row = dataset.x.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", row[j]);
      out << (j ? ", " : "") << buf;
    }
    out << "], \"y\": " << dataset.y[i] << "}\n";
  }
  if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

Matrix one_hot(std::span<const std::size_t> labels, std::size_t num_classes) {
  Matrix m(labels.size(), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(labels[i]) + " at row " +
                                                  std::to_string(i));
    }
    m(i, labels[i]) = 1.0;
  }
  return m;
}

Matrix class_means(const Dataset& dataset) {
  Matrix means(dataset.num_classes, dataset.input_dim());
  std::vector<std::size_t> counts(dataset.num_classes, 0);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const std::size_t c = dataset.y[i];
    ++counts[c];
    auto src = dataset.x.row(i);
    auto dst = means.row(c);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
  }
  for (std::size_t c = 0; c < dataset.num_classes; ++c) {
    if (counts[c] == 0) continue;
    for (double& v : means.row(c)) v /= static_cast<double>(counts[c]);
  }
  return means;
}

double nearest_mean_accuracy(const Dataset& dataset, const Matrix& means) {
  if (dataset.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    auto x = dataset.x.row(i);
    std::size_t best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < means.rows(); ++c) {
      double dist = 0.0;
      for (std::size_t j = 0; j < x.size(); ++j) {
        const double diff = x[j] - means(c, j);
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = c;
      }
    }
    correct += best == dataset.y[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

}  // namespace pvb::data
