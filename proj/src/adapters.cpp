#include "pvb/adapters.hpp"

#include <algorithm>

namespace pvb::adapters {

namespace {

void require_rank(std::size_t m, std::size_t n, std::size_t rank) {
  if (rank == 0 || rank > std::min(m, n)) {
    throw Error(ErrorCode::InvalidArgument, "rank " + std::to_string(rank) +
                                                " out of range for " + std::to_string(m) +
                                                "x" + std::to_string(n) + " layer");
  }
}

}  // namespace

PolarAdapter init_polar(Rng& rng, std::size_t m, std::size_t n, std::size_t rank,
                        double alpha_scale) {
  require_rank(m, n, rank);
  StiefelFactor u = stiefel::random_factor(rng, m, rank);
  StiefelFactor v = stiefel::random_factor(rng, n, rank);
  Matrix lam = sample_std_normal(rng, rank, rank) * 0.01;
  return PolarAdapter{std::move(u), std::move(v), std::move(lam), alpha_scale};
}

LoraAdapter init_lora(Rng& rng, std::size_t m, std::size_t n, std::size_t rank,
                      double alpha_scale) {
  require_rank(m, n, rank);
  Matrix a = sample_std_normal(rng, rank, n) * 0.02;
  return LoraAdapter{Matrix(m, rank), std::move(a), alpha_scale};
}

Matrix polar_delta(const PolarAdapter& adapter) {
  return matmul_nt(matmul(adapter.u.mat(), adapter.lam), adapter.v.mat()) * adapter.alpha_scale;
}

FactorGrads polar_factor_grads(const PolarAdapter& adapter, const Matrix& g) {
  const Matrix& u = adapter.u.mat();
  const Matrix& v = adapter.v.mat();
  if (g.rows() != u.rows() || g.cols() != v.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "weight gradient does not match adapter shape");
  }
  const double s = adapter.alpha_scale;
  const Matrix gv = matmul(g, v);     // m x r
  const Matrix gtu = matmul_tn(g, u);  // n x r
  FactorGrads out;
  out.g_u = matmul_nt(gv, adapter.lam) * s;
  out.g_v = matmul(gtu, adapter.lam) * s;
  out.g_lam = matmul_tn(u, gv) * s;
  return out;
}

Matrix lora_delta(const LoraAdapter& adapter) {
  return matmul(adapter.b, adapter.a) * adapter.alpha_scale;
}

LoraGrads lora_factor_grads(const LoraAdapter& adapter, const Matrix& g) {
  if (g.rows() != adapter.b.rows() || g.cols() != adapter.a.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "weight gradient does not match adapter shape");
  }
  const double s = adapter.alpha_scale;
  return LoraGrads{matmul_nt(g, adapter.a) * s, matmul_tn(adapter.b, g) * s};
}

Matrix adapter_delta(const Adapter& adapter, std::size_t m, std::size_t n) {
  if (const auto* p = std::get_if<PolarAdapter>(&adapter)) return polar_delta(*p);
  if (const auto* l = std::get_if<LoraAdapter>(&adapter)) return lora_delta(*l);
  return Matrix(m, n);
}

double stable_rank(const Matrix& delta) {
  const double fro_sq = frobenius_sq(delta);
  if (fro_sq == 0.0) throw Error(ErrorCode::ZeroMatrix, "stable rank of a zero matrix");
  const double sigma = spectral_norm(delta);
  // Power iteration can undershoot sigma at rounding level.
  const double bound = static_cast<double>(std::min(delta.rows(), delta.cols()));
  return std::clamp(fro_sq / (sigma * sigma), 1.0, bound);
}

}  // namespace pvb::adapters
