#pragma once

#include <variant>

#include "pvb/numerics.hpp"
#include "pvb/stiefel.hpp"

namespace pvb::adapters {

using stiefel::StiefelFactor;

inline constexpr std::size_t kDefaultRank = 8;
inline constexpr double kDefaultAlpha = 16.0;

/// Polar-decomposed low-rank update  delta = alpha_scale * U Lam V^T  with
/// U in St(m, r), V in St(n, r) and an unconstrained r x r core.
struct PolarAdapter {
  StiefelFactor u;
  StiefelFactor v;
  Matrix lam;
  double alpha_scale = 1.0;

  std::size_t rank() const noexcept { return lam.rows(); }
  friend bool operator==(const PolarAdapter&, const PolarAdapter&) = default;
};

/// Classic low-rank update  delta = alpha_scale * B A.
struct LoraAdapter {
  Matrix b;  // m x r
  Matrix a;  // r x n
  double alpha_scale = 1.0;

  std::size_t rank() const noexcept { return a.rows(); }
  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

struct FactorGrads {
  Matrix g_u;
  Matrix g_v;
  Matrix g_lam;
};

struct LoraGrads {
  Matrix g_b;
  Matrix g_a;
};

using Adapter = std::variant<std::monostate, PolarAdapter, LoraAdapter>;

// U, V from QR of Gaussian matrices, Lam ~ N(0, 0.01^2).
PolarAdapter init_polar(Rng& rng, std::size_t m, std::size_t n, std::size_t rank,
                        double alpha_scale);
// B = 0, A ~ N(0, 0.02^2): the update starts at exactly zero.
LoraAdapter init_lora(Rng& rng, std::size_t m, std::size_t n, std::size_t rank,
                      double alpha_scale);

Matrix polar_delta(const PolarAdapter& adapter);
// Gradients of a loss wrt the factors given g = dL/d(delta).
FactorGrads polar_factor_grads(const PolarAdapter& adapter, const Matrix& g);

Matrix lora_delta(const LoraAdapter& adapter);
LoraGrads lora_factor_grads(const LoraAdapter& adapter, const Matrix& g);

// Zero m x n matrix for an empty slot.
Matrix adapter_delta(const Adapter& adapter, std::size_t m, std::size_t n);

// ||A||_F^2 / ||A||_2^2, in [1, min(m, n)]. Throws ZeroMatrix.
double stable_rank(const Matrix& delta);

}  // namespace pvb::adapters
