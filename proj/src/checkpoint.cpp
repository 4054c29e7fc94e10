// Binary checkpoint layout (all integers little-endian):
//
//   "PVB1"                      magic, 4 bytes
//   u32 version
//   u64 payload length
//   payload                     see write_payload()
//   u32 CRC-32 of the payload
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "pvb/train.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace pvb::train {

namespace {

constexpr char kMagic[4] = {'P', 'V', 'B', '1'};

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void size(std::size_t v) { u64(static_cast<std::uint64_t>(v)); }
  void matrix(const Matrix& m) {
    size(m.rows());
    size(m.cols());
    for (double v : m.values()) f64(v);
  }
  void string(const std::string& s) {
    size(s.size());
    raw(s.data(), s.size());
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  double f64() {
    double v;
    raw(&v, sizeof v);
    return v;
  }
  std::size_t size() { return static_cast<std::size_t>(u64()); }
  Matrix matrix() {
    const std::size_t r = size();
    const std::size_t c = size();
    if (c != 0 && r > remaining() / 8 / c) {
      throw Error(ErrorCode::TruncatedFile, "array of " + std::to_string(r) + "x" +
                                                std::to_string(c) + " overruns the payload");
    }
    std::vector<double> data(r * c);
    raw(data.data(), data.size() * sizeof(double));
    return Matrix(r, c, std::move(data));
  }
  std::string string() {
    const std::size_t n = size();
    if (n > remaining()) throw Error(ErrorCode::TruncatedFile, "string overruns the payload");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void raw(void* p, std::size_t n) {
    if (n > remaining()) throw Error(ErrorCode::TruncatedFile, "unexpected end of data");
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

AdapterKind adapter_kind_of(const features::FeatureExtractor& fx) {
  for (const auto& layer : fx.layers) {
    if (std::holds_alternative<adapters::PolarAdapter>(layer.adapter)) return AdapterKind::Polar;
    if (std::holds_alternative<adapters::LoraAdapter>(layer.adapter)) return AdapterKind::Lora;
  }
  return AdapterKind::None;
}

void write_config(Writer& w, const TrainConfig& c) {
  w.size(c.steps);
  w.size(c.batch);
  w.f64(c.lr_polar);
  w.f64(c.lr_vbll);
  w.f64(c.landing);
  w.f64(c.prior_var);
  w.f64(c.kl_weight);
  w.u8(static_cast<std::uint8_t>(c.adapter));
  w.u8(static_cast<std::uint8_t>(c.head));
  w.size(c.rank);
  w.f64(c.alpha);
  w.u64(c.seed);
  w.u8(static_cast<std::uint8_t>(c.scheduler));
  w.size(c.restart_period);
  w.size(c.eval_every);
  w.size(c.hidden_dim);
  w.size(c.feature_dim);
}

TrainConfig read_config(Reader& r) {
  TrainConfig c;
  c.steps = r.size();
  c.batch = r.size();
  c.lr_polar = r.f64();
  c.lr_vbll = r.f64();
  c.landing = r.f64();
  c.prior_var = r.f64();
  c.kl_weight = r.f64();
  const std::uint8_t adapter = r.u8();
  const std::uint8_t head = r.u8();
  if (adapter > 2 || head > 1) throw Error(ErrorCode::ParseError, "bad kind in config block");
  c.adapter = static_cast<AdapterKind>(adapter);
  c.head = static_cast<HeadKind>(head);
  c.rank = r.size();
  c.alpha = r.f64();
  c.seed = r.u64();
  const std::uint8_t sched = r.u8();
  if (sched > 1) throw Error(ErrorCode::ParseError, "bad scheduler in config block");
  c.scheduler = static_cast<SchedulerKind>(sched);
  c.restart_period = r.size();
  c.eval_every = r.size();
  c.hidden_dim = r.size();
  c.feature_dim = r.size();
  return c;
}

void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols, const char* what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw Error(ErrorCode::ParseError, std::string(what) + " has shape " +
                                           std::to_string(m.rows()) + "x" +
                                           std::to_string(m.cols()));
  }
}

// Payload:
//   u32 d0, hidden, d, C, r
//   u8 adapter kind, u8 head kind, u8 laplace present, u8 reserved (0)
//   config block (write_config)
//   per layer (2): base W0; u8 adapter tag; PoLAR: U, V, Lam, f64 scale |
//                  LoRA: B, A, f64 scale
//   VBLL head: means, C factors, f64 prior_var, f64 kl_weight | MLE: weights
//   Laplace (if present): C covariances
//   RNG state string
// Arrays are u64 rows, u64 cols, then rows*cols f64 in row-major order.
std::vector<std::uint8_t> write_payload(const Checkpoint& ck) {
  if (ck.extractor.layers.size() != 2) {
    throw Error(ErrorCode::InvalidArgument, "checkpoints hold two-layer extractors");
  }
  const auto& fx = ck.extractor;
  std::size_t rank = 0;
  for (const auto& layer : fx.layers) {
    if (const auto* p = std::get_if<adapters::PolarAdapter>(&layer.adapter)) rank = p->rank();
    if (const auto* l = std::get_if<adapters::LoraAdapter>(&layer.adapter)) rank = l->rank();
  }
  const bool is_vbll = std::holds_alternative<vbll::VbllHead>(ck.head);

  Writer w;
  w.u32(static_cast<std::uint32_t>(fx.input_dim()));
  w.u32(static_cast<std::uint32_t>(fx.layers[0].out_dim()));
  w.u32(static_cast<std::uint32_t>(fx.feature_dim()));
  w.u32(static_cast<std::uint32_t>(ck.num_classes()));
  w.u32(static_cast<std::uint32_t>(rank));
  w.u8(static_cast<std::uint8_t>(adapter_kind_of(fx)));
  w.u8(static_cast<std::uint8_t>(is_vbll ? HeadKind::Vbll : HeadKind::Mle));
  w.u8(ck.laplace ? 1 : 0);
  w.u8(0);
  write_config(w, ck.config);

  for (const auto& layer : fx.layers) {
    w.matrix(layer.base);
    if (const auto* p = std::get_if<adapters::PolarAdapter>(&layer.adapter)) {
      w.u8(static_cast<std::uint8_t>(AdapterKind::Polar));
      w.matrix(p->u.mat());
      w.matrix(p->v.mat());
      w.matrix(p->lam);
      w.f64(p->alpha_scale);
    } else if (const auto* l = std::get_if<adapters::LoraAdapter>(&layer.adapter)) {
      w.u8(static_cast<std::uint8_t>(AdapterKind::Lora));
      w.matrix(l->b);
      w.matrix(l->a);
      w.f64(l->alpha_scale);
    } else {
      w.u8(static_cast<std::uint8_t>(AdapterKind::None));
    }
  }

  if (const auto* h = std::get_if<vbll::VbllHead>(&ck.head)) {
    w.matrix(h->means);
    for (const Matrix& l : h->chol) w.matrix(l);
    w.f64(h->prior_var);
    w.f64(h->kl_weight);
  } else {
    w.matrix(std::get<vbll::SoftmaxHead>(ck.head).weights);
  }
  if (ck.laplace) {
    for (const Matrix& s : ck.laplace->sigmas) w.matrix(s);
  }
  w.string(ck.rng_state);
  return std::move(w.bytes());
}

Checkpoint read_payload(std::span<const std::uint8_t> payload, std::uint32_t version) {
  Reader r(payload);
  const std::size_t d0 = r.u32();
  const std::size_t hidden = r.u32();
  const std::size_t d = r.u32();
  const std::size_t c_count = r.u32();
  const std::size_t rank = r.u32();
  const std::uint8_t adapter_flag = r.u8();
  const std::uint8_t head_flag = r.u8();
  const std::uint8_t laplace_flag = r.u8();
  r.u8();
  if (adapter_flag > 2 || head_flag > 1 || laplace_flag > 1) {
    throw Error(ErrorCode::ParseError, "bad header flags");
  }

  Checkpoint ck;
  ck.version = version;
  ck.config = read_config(r);

  const std::size_t widths[3] = {d0, hidden, d};
  for (std::size_t k = 0; k < 2; ++k) {
    features::Layer layer;
    layer.activation = k == 0 ? features::Activation::Tanh : features::Activation::Identity;
    layer.base = r.matrix();
    const std::size_t m = widths[k + 1];
    const std::size_t n = widths[k];
    expect_shape(layer.base, m, n, "layer base");
    const std::uint8_t tag = r.u8();
    if (tag == static_cast<std::uint8_t>(AdapterKind::Polar)) {
      Matrix u = r.matrix();
      Matrix v = r.matrix();
      Matrix lam = r.matrix();
      const double scale = r.f64();
      expect_shape(u, m, rank, "U");
      expect_shape(v, n, rank, "V");
      expect_shape(lam, rank, rank, "Lambda");
      layer.adapter = adapters::PolarAdapter{stiefel::StiefelFactor(std::move(u)),
                                             stiefel::StiefelFactor(std::move(v)),
                                             std::move(lam), scale};
    } else if (tag == static_cast<std::uint8_t>(AdapterKind::Lora)) {
      Matrix b = r.matrix();
      Matrix a = r.matrix();
      const double scale = r.f64();
      expect_shape(b, m, rank, "B");
      expect_shape(a, rank, n, "A");
      layer.adapter = adapters::LoraAdapter{std::move(b), std::move(a), scale};
    } else if (tag != static_cast<std::uint8_t>(AdapterKind::None)) {
      throw Error(ErrorCode::ParseError, "bad adapter tag");
    }
    ck.extractor.layers.push_back(std::move(layer));
  }

  if (head_flag == static_cast<std::uint8_t>(HeadKind::Vbll)) {
    vbll::VbllHead head;
    head.means = r.matrix();
    expect_shape(head.means, c_count, d, "means");
    for (std::size_t c = 0; c < c_count; ++c) {
      head.chol.push_back(r.matrix());
      expect_shape(head.chol.back(), d, d, "Cholesky factor");
    }
    head.prior_var = r.f64();
    head.kl_weight = r.f64();
    ck.head = std::move(head);
  } else {
    vbll::SoftmaxHead head{r.matrix()};
    expect_shape(head.weights, c_count, d, "softmax weights");
    ck.head = std::move(head);
  }

  if (laplace_flag) {
    const Matrix& means = std::visit(
        [](const auto& h) -> const Matrix& {
          if constexpr (std::is_same_v<std::decay_t<decltype(h)>, vbll::VbllHead>) {
            return h.means;
          } else {
            return h.weights;
          }
        },
        ck.head);
    std::vector<Matrix> sigmas;
    for (std::size_t c = 0; c < c_count; ++c) {
      sigmas.push_back(r.matrix());
      expect_shape(sigmas.back(), d, d, "Laplace covariance");
    }
    ck.laplace = laplace::make_posterior(means, std::move(sigmas));
  }
  ck.rng_state = r.string();
  if (r.remaining() != 0) throw Error(ErrorCode::ParseError, "trailing bytes after payload");
  return ck;
}

}  // namespace

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  const std::vector<std::uint8_t> payload = write_payload(ckpt);
  Writer w;
  for (char ch : kMagic) w.u8(static_cast<std::uint8_t>(ch));
  w.u32(kFormatVersion);
  w.size(payload.size());
  std::vector<std::uint8_t> out = std::move(w.bytes());
  out.insert(out.end(), payload.begin(), payload.end());
  const std::uint32_t crc = crc32_of(payload);
  const auto* cb = reinterpret_cast<const std::uint8_t*>(&crc);
  out.insert(out.end(), cb, cb + sizeof crc);
  return out;
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw Error(ErrorCode::TruncatedFile, "shorter than the magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw Error(ErrorCode::BadMagic, "not a PVB1 file");
  Reader header(bytes.subspan(4));
  const std::uint32_t version = header.u32();
  if (version == 0 || version > kFormatVersion) {
    throw Error(ErrorCode::VersionUnsupported, "format version " + std::to_string(version) +
                                                   ", this build reads up to " +
                                                   std::to_string(kFormatVersion));
  }
  const std::uint64_t payload_len = header.u64();
  constexpr std::size_t kHeaderLen = 4 + 4 + 8;
  if (payload_len > bytes.size() || bytes.size() - kHeaderLen < payload_len + 4 ||
      bytes.size() < kHeaderLen + 4) {
    throw Error(ErrorCode::TruncatedFile, "file holds " + std::to_string(bytes.size()) +
                                              " bytes, header announces a " +
                                              std::to_string(payload_len) + "-byte payload");
  }
  if (bytes.size() != kHeaderLen + payload_len + 4) {
    throw Error(ErrorCode::ParseError, "trailing bytes after checksum");
  }
  const auto payload = bytes.subspan(kHeaderLen, payload_len);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + kHeaderLen + payload_len, sizeof stored);
  if (crc32_of(payload) != stored) throw Error(ErrorCode::ChecksumMismatch, "payload CRC-32 differs");
  return read_payload(payload, version);
}

void save(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = serialize(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

Checkpoint load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace pvb::train
