#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "mixformer/config.hpp"
#include "mixformer/features.hpp"
#include "mixformer/matrix.hpp"
#include "mixformer/trainer.hpp"

// Synthetic requests with a planted signal.
//
// Items cluster around category centres on the unit sphere; each user mixes
// a few categories. Sequences are drawn with probability proportional to
// exp(beta <u, v>); the label logit of a candidate v is
//
//   s = w_inter <u, v> + w_seq match(seq, v)
//   finish ~ Bernoulli(sigmoid((s - mean s) / temperature + bias))
//   skip   ~ Bernoulli(sigmoid(-(s - mean s) / temperature + bias))
//
// where match counts sequence items with cosine > match_threshold, capped.

namespace mixformer {

struct GeneratorSpec {
  std::uint64_t n_users = 50000;
  std::uint64_t n_items = 5000;
  std::uint64_t n_categories = 20;
  std::uint64_t latent_dim = 16;
  std::uint64_t interests = 2;           ///< categories mixed into each user
  std::uint64_t n_requests = 125000;     ///< x K impressions
  std::uint64_t candidates = 8;          ///< K
  std::uint64_t min_seq = 8, max_seq = 64;
  double item_spread = 0.1;              ///< per-coordinate noise around the category centre
  double user_spread = 0.3;
  double beta = 6.0;                     ///< sequence affinity sharpness
  double explore = 0.5;                  ///< share of candidates drawn uniformly instead of by affinity
  double match_threshold = 0.8;
  std::uint64_t match_cap = 10;
  double w_inter = 1.0;
  double w_seq = 0.1;
  double temperature = 1.0;
  double bias = 0.0;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 1;

  /// `gen.*` keys; missing keys keep the defaults above.
  static GeneratorSpec from_run_config(const RunConfig& rc);
  RunConfig to_run_config() const;
  void validate() const;

  /// Schema of the generated data (fields sized from this spec).
  FeatureSchema schema() const;
};

/// Impressions x n_tasks true label probabilities, in dataset order.
struct GeneratedData {
  Dataset train, holdout;
  Matrix train_oracle, holdout_oracle;
};

GeneratedData generate(const GeneratorSpec& spec);

/// Mean over tasks of the AUC obtained by scoring with `probs`.
double oracle_auc(const Matrix& probs, const Dataset& d);

/// Bisects the temperature (log scale, same random draws at every probe)
/// until the oracle AUC on all impressions lies in [lo, hi]. Throws
/// ConfigError if the signal cannot reach the band.
GeneratorSpec calibrate_temperature(GeneratorSpec spec, double lo = 0.84, double hi = 0.86);

void write_oracle_csv(const std::filesystem::path& p, const Matrix& probs, const FeatureSchema& s,
                      const std::string& header);
Matrix read_oracle_csv(const std::filesystem::path& p, std::size_t n_tasks);

/// Trains the mean-pooling logistic baseline with the given schedule and
/// returns its holdout metrics.
MetricSummary baseline_score(const Dataset& train_data, const Dataset& holdout, const TrainOptions& o,
                             std::uint64_t seed);

}  // namespace mixformer
