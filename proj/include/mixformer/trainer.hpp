#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mixformer/config.hpp"
#include "mixformer/features.hpp"
#include "mixformer/model.hpp"

namespace mixformer {

struct OptimizerConfig {
  double dense_lr = 0.01;   ///< RMSProp
  double rms_decay = 0.9;
  double rms_eps = 1e-8;
  double sparse_lr = 0.05;  ///< Adagrad
  double adagrad_eps = 1e-10;
};

struct TrainOptions {
  OptimizerConfig opt;
  std::size_t batch_impressions = 256;  ///< requests are packed until this many impressions
  std::size_t epochs = 1;
  std::uint64_t seed = 0;               ///< shuffling
  std::size_t eval_every = 0;           ///< steps between holdout AUC records; 0 = end only
  bool weighted_uauc = false;

  /// `train.*` keys.
  static TrainOptions from_run_config(const RunConfig& rc);
  RunConfig to_run_config() const;
};

/// RMSProp on every dense parameter, Adagrad on the embedding rows touched
/// since the last step. Gradients are consumed (zeroed) afterwards.
void apply_optimizer(ParameterStore& dense, EmbeddingSet& sparse, const OptimizerConfig& opt);

/// Anything the training loop can fit: produces K x n_tasks logits per request.
class Learner {
 public:
  virtual ~Learner() = default;
  virtual const FeatureSchema& schema() const = 0;
  virtual ParameterStore& params() = 0;
  virtual EmbeddingSet& embeddings() = 0;
  virtual std::uint64_t& steps() = 0;
  /// Records the logits of every candidate of r on t.
  virtual Var logits(Tape& t, const Request& r, bool trainable) = 0;
  /// Logits without gradients. Must be safe to call concurrently.
  virtual Matrix score(const Request& r);
};

class ModelLearner final : public Learner {
 public:
  explicit ModelLearner(Model& m) : m_(m) {}
  const FeatureSchema& schema() const override { return m_.schema(); }
  ParameterStore& params() override { return m_.params(); }
  EmbeddingSet& embeddings() override { return m_.embeddings(); }
  std::uint64_t& steps() override { return m_.train_steps; }
  Var logits(Tape& t, const Request& r, bool trainable) override;
  Matrix score(const Request& r) override { return m_.score_request(r); }

 private:
  Model& m_;
};

/// Per-task logistic regression on [user fields | item fields | mean-pooled
/// action fields]: no attention and no feature interaction.
class LogisticBaseline final : public Learner {
 public:
  LogisticBaseline(FeatureSchema schema, std::uint64_t seed);
  const FeatureSchema& schema() const override { return schema_; }
  ParameterStore& params() override { return params_; }
  EmbeddingSet& embeddings() override { return emb_; }
  std::uint64_t& steps() override { return steps_; }
  Var logits(Tape& t, const Request& r, bool trainable) override;

 private:
  FeatureSchema schema_;
  ParameterStore params_;
  EmbeddingSet emb_;
  std::uint64_t steps_ = 0;
};

/// Summed BCE over the batch's impressions and tasks, divided by the
/// impression count; applies one optimizer step. Throws NumericError on a
/// non-finite loss.
double train_step(Learner& l, std::span<const Request* const> batch, const OptimizerConfig& opt);

struct StepRecord {
  std::uint64_t step = 0;
  double loss = 0.0;
  double holdout_auc = -1.0;  ///< -1 when not evaluated at this step
};

/// Request batches of one epoch, in the deterministic shuffled order.
std::vector<std::vector<const Request*>> epoch_batches(const Dataset& d, std::size_t batch_impressions,
                                                       std::uint64_t seed, std::size_t epoch);

/// One pass over the data; returns the loss of every step.
std::vector<double> train_epoch(Learner& l, const Dataset& d, const TrainOptions& o, std::size_t epoch = 0);

/// All epochs. Steps already counted in l.steps() are skipped, so a restored
/// checkpoint continues exactly where it stopped. max_steps bounds the
/// number of new steps (0 = no bound).
std::vector<StepRecord> train(Learner& l, const Dataset& d, const TrainOptions& o, const Dataset* holdout = nullptr,
                              std::size_t max_steps = 0);

struct MetricSummary {
  std::vector<double> auc;   ///< per task
  std::vector<double> uauc;  ///< per task
  std::size_t n_users = 0;   ///< users with both classes (first task)
  double logloss = 0.0;      ///< mean BCE per impression and task

  double mean_auc() const;
  double mean_uauc() const;
};

/// Probability that a random positive outranks a random negative; ties
/// count 1/2. Throws MetricError without both classes.
double auc(std::span<const double> scores, std::span<const std::uint8_t> labels);
/// Mean of per-user AUC over users with both classes (optionally weighted
/// by impression count). Throws MetricError when no user qualifies.
double uauc(std::span<const double> scores, std::span<const std::uint8_t> labels,
            std::span<const std::uint64_t> user_ids, bool weighted = false);

/// Scores (K x n_tasks per request, stacked) for every impression of d.
Matrix score_dataset(Learner& l, const Dataset& d);
MetricSummary summarize(const Matrix& logits, const Dataset& d, bool weighted_uauc = false);
MetricSummary evaluate(Learner& l, const Dataset& d, bool weighted_uauc = false);

struct AblationResult {
  std::string name;
  std::vector<std::string> changed_keys;  ///< config keys that differ from base
  std::uint64_t params = 0;
  double final_loss = 0.0;
  bool losses_finite = true;
  MetricSummary metrics;
  double delta_auc = 0.0;   ///< variant - base, mean over tasks
  double delta_uauc = 0.0;
};

/// Config keys whose values differ between a and b.
std::vector<std::string> config_diff(const ModelConfig& a, const ModelConfig& b);

/// Trains the named variant with the same seeds and schedule as `base` and
/// reports its metrics against `base_metrics`.
AblationResult run_ablation(const std::string& name, const ModelConfig& base, const MetricSummary& base_metrics,
                            const Dataset& train_data, const Dataset& holdout, const TrainOptions& o,
                            std::uint64_t model_seed);

void write_train_log_csv(std::ostream& os, const std::vector<StepRecord>& log, const std::string& header);
void write_ablation_csv(std::ostream& os, const std::vector<AblationResult>& rows, const std::string& header);

}  // namespace mixformer
