#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "mixformer/config.hpp"
#include "mixformer/features.hpp"
#include "mixformer/tape.hpp"

// Closed-form multiply-add accounting. Conventions (shared with the tape):
//   * an m x k by k x n product costs 2*m*k*n;
//   * softmax and normalisation cost 5 per element;
//   * elementwise ops (residuals, gating, masks, activations) are free.

namespace mixformer {

/// Embedding widths that shape the model's input side.
struct InputDims {
  std::size_t d_user = 0;  ///< user + context fields
  std::size_t d_item = 0;
  std::size_t action_width = 0;

  static InputDims of(const FeatureSchema& s) { return {s.d_user(), s.d_item(), s.action_width()}; }
};

struct FlopsReport {
  FlopsTrace counts;  ///< whole batch, by component and side
  std::uint64_t params = 0;
  std::uint64_t total() const { return counts.total(); }
};

/// Dense parameter count (embedding tables excluded).
std::uint64_t count_params(const ModelConfig& cfg, const InputDims& in);

/// Flops of scoring `batch` impressions grouped into requests of K
/// candidates with T actions each. rlb = false recomputes every shareable
/// piece per candidate; rlb = true computes it once per request.
/// batch must be a positive multiple of K.
FlopsReport count_flops(const ModelConfig& cfg, const InputDims& in, std::size_t steps, std::size_t k,
                        std::size_t batch, bool rlb);

/// 1 - flops(rlb) / flops(no rlb) for one request of K candidates.
/// Throws ConfigError unless decoupling is enabled.
double rlb_savings(const ModelConfig& cfg, const InputDims& in, std::size_t steps, std::size_t k);

enum class ScalingAxis { kDense, kSequence };

struct ScalingRow {
  std::size_t heads = 0, layers = 0, head_dim = 0, steps = 0;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

/// Dense axis: points are head_dim values at T = 512. Sequence axis: points
/// are sequence lengths at the base config's size.
std::vector<ScalingRow> scaling_report(const ModelConfig& base, const InputDims& in, ScalingAxis axis,
                                       const std::vector<std::size_t>& points, std::size_t k, std::size_t batch,
                                       bool rlb);

/// Sequence lengths of the sequence-scaling study.
inline const std::vector<std::size_t> kSequencePoints = {512, 2048, 8192, 10000};

/// CSV writers; `header` lines are emitted as `# ...` comments first.
void write_report_csv(std::ostream& os, const FlopsReport& r, const std::string& header);
void write_scaling_csv(std::ostream& os, const std::vector<ScalingRow>& rows, const std::string& header);

}  // namespace mixformer
