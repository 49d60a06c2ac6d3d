#include "mixformer/mathcore.hpp"

#include <algorithm>
#include <cmath>

namespace mixformer {
namespace {

void require_finite(std::span<const double> x, const char* who) {
  for (double v : x)
    if (!std::isfinite(v)) throw NumericError(std::string(who) + ": non-finite input");
}

std::vector<double> vec_times_matrix(std::span<const double> x, const Matrix& w) {
  std::vector<double> y(w.cols(), 0.0);
  for (std::size_t k = 0; k < w.rows(); ++k)
    for (std::size_t j = 0; j < w.cols(); ++j) y[j] += x[k] * w(k, j);
  return y;
}

}  // namespace

void FfnParams::validate() const {
  require_shape(gate.same_shape(up), "FfnParams: gate and up differ in shape");
  require_shape(down.rows() == gate.cols(), "FfnParams: down rows != hidden width");
}

std::vector<double> rms_norm(std::span<const double> x, const NormParams& p) {
  require_shape(x.size() == p.scale.size(), "rms_norm: length mismatch");
  require_finite(x, "rms_norm");
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + p.eps);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = p.scale[i] * x[i] * inv;
  // eps == 0 on an all-zero vector gives 0 * inf; the fixed point is 0.
  if (ss == 0.0) std::fill(y.begin(), y.end(), 0.0);
  return y;
}

std::vector<double> layer_norm(std::span<const double> x, const NormParams& p) {
  require_shape(x.size() == p.scale.size(), "layer_norm: length mismatch");
  require_finite(x, "layer_norm");
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  std::vector<double> y(x.size(), 0.0);
  if (var == 0.0) return y;
  const double inv = 1.0 / std::sqrt(var + p.eps);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = p.scale[i] * (x[i] - mean) * inv;
  return y;
}

std::vector<double> swiglu_ffn(std::span<const double> x, const FfnParams& p) {
  p.validate();
  require_shape(x.size() == p.in_dim(), "swiglu_ffn: input length != gate rows");
  std::vector<double> g = vec_times_matrix(x, p.gate);
  const std::vector<double> u = vec_times_matrix(x, p.up);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = swish(g[i]) * u[i];
  return vec_times_matrix(g, p.down);
}

std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw ShapeError("softmax: empty input");
  require_finite(v, "softmax");
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& o : out) o /= sum;
  return out;
}

void xavier_uniform(Matrix& m, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  for (double& v : m.flat()) v = dist(rng);
}

}  // namespace mixformer
