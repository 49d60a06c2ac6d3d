#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "mixformer/matrix.hpp"

namespace mixformer {

inline constexpr double kDefaultNormEps = 1e-6;

struct NormParams {
  std::vector<double> scale;
  double eps = kDefaultNormEps;

  static NormParams unit(std::size_t dim, double eps = kDefaultNormEps) {
    return {std::vector<double>(dim, 1.0), eps};
  }
};

// SwiGLU feed-forward weights, stored input-major so that y = x * W:
//   gate, up: in x hidden;  down: hidden x out.
// (Mathematically gate/up are hidden x in and down is out x hidden; this is
// their transpose.)
struct FfnParams {
  Matrix gate;
  Matrix up;
  Matrix down;

  std::size_t in_dim() const { return gate.rows(); }
  std::size_t hidden_dim() const { return gate.cols(); }
  std::size_t out_dim() const { return down.cols(); }
  void validate() const;
};

/// y_i = scale_i * x_i / sqrt(mean(x^2) + eps)
std::vector<double> rms_norm(std::span<const double> x, const NormParams& p);
/// y_i = scale_i * (x_i - mean) / sqrt(var + eps); zero-variance input maps to 0.
std::vector<double> layer_norm(std::span<const double> x, const NormParams& p);
/// down^T( swish(gate^T x) * (up^T x) ), bias-free.
std::vector<double> swiglu_ffn(std::span<const double> x, const FfnParams& p);
/// Max-subtracted softmax. Throws ShapeError on empty input.
std::vector<double> softmax(std::span<const double> v);

inline double sigmoid(double z) {
  // Split on sign so exp never overflows.
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}
inline double swish(double z) { return z * sigmoid(z); }
/// d/dz [z * sigmoid(z)]
inline double swish_grad(double z) {
  const double s = sigmoid(z);
  return s * (1.0 + z * (1.0 - s));
}

/// Glorot-uniform fill: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
void xavier_uniform(Matrix& m, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

/// Multiply-add accounting convention shared by the tape and the analytic meter.
namespace flops {
/// m x k times k x n costs 2*m*k*n.
constexpr std::uint64_t matmul(std::uint64_t m, std::uint64_t k, std::uint64_t n) { return 2 * m * k * n; }
/// Softmax and normalisation: 5 per element. Pure elementwise ops (residual
/// adds, gating, masking, activations) are not counted.
inline constexpr std::uint64_t kPerNormalizedElement = 5;
}  // namespace flops

}  // namespace mixformer
