#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mixformer/config.hpp"
#include "mixformer/datagen.hpp"
#include "mixformer/flopsmeter.hpp"
#include "mixformer/trainer.hpp"

// Command implementations behind tools/mixformer. Each takes the resolved
// RunConfig and writes its artifacts with that config embedded.
//
// Data directory layout (written by gen, read by the rest):
//   schema.txt, train.bin, holdout.bin, train.oracle.csv, holdout.oracle.csv

namespace mixformer::cli {

namespace fs = std::filesystem;

/// Config file (if any) + `--set` overrides + flag shorthands.
RunConfig resolve(const std::optional<fs::path>& config_file, const std::vector<std::string>& overrides,
                  const std::optional<std::uint64_t>& seed, const std::optional<std::string>& preset);

/// Model config with model.tasks defaulted from the schema.
ModelConfig model_config(const RunConfig& rc, const FeatureSchema& schema);

struct DataDir {
  FeatureSchema schema;
  Dataset train, holdout;
  std::optional<Matrix> holdout_oracle;
};
DataDir load_data(const fs::path& dir);

/// The RunConfig as `key = value` lines, for `# ` headers.
std::string header_text(const RunConfig& rc);

struct GenResult {
  GeneratorSpec spec;  ///< with the calibrated temperature
  double oracle_auc_train = 0.0;
  double oracle_auc_holdout = 0.0;
  std::size_t train_requests = 0, holdout_requests = 0;
};
GenResult cmd_gen(const RunConfig& rc, const fs::path& out);

struct TrainResult {
  MetricSummary holdout;
  std::optional<MetricSummary> baseline;
  std::optional<double> oracle_auc;
  std::vector<StepRecord> log;
  std::uint64_t steps = 0;
};
TrainResult cmd_train(const RunConfig& rc, const fs::path& data, const fs::path& out,
                      const std::optional<fs::path>& resume = std::nullopt);

MetricSummary cmd_eval(const RunConfig& rc, const fs::path& data, const fs::path& checkpoint, const fs::path& out);

/// Flops CSV. Keys: flops.axis (none|dense|sequence), flops.rlb,
/// flops.candidates, flops.batch, flops.steps, flops.points,
/// flops.d_user / flops.d_item / flops.action_width.
void cmd_flops(const RunConfig& rc, std::ostream& os);

struct RlbBench {
  double max_abs_dev = 0.0;
  double max_rel_dev = 0.0;
  std::vector<std::pair<std::size_t, double>> savings;  ///< (K, flops savings)
  std::size_t wall_k = 32;
  double seconds_rlb = 0.0;
  double seconds_per_candidate = 0.0;
  double speedup() const { return seconds_rlb > 0.0 ? seconds_per_candidate / seconds_rlb : 0.0; }
};
/// Requires decouple.enabled. Keys: bench.requests, bench.k, bench.checkpoint.
RlbBench cmd_bench_rlb(const RunConfig& rc, const Dataset& data, const std::optional<fs::path>& out);

std::vector<AblationResult> cmd_ablate(const RunConfig& rc, const fs::path& data, const fs::path& out);

/// Full command line; returns the process exit code.
int run(int argc, char** argv);

}  // namespace mixformer::cli
