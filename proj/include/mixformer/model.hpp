#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mixformer/config.hpp"
#include "mixformer/features.hpp"
#include "mixformer/matrix.hpp"
#include "mixformer/ops.hpp"
#include "mixformer/tape.hpp"

namespace mixformer {

/// Starting value of every RMSProp mean-square entry.
inline constexpr double kRmsInit = 1.0;

/// Dense parameters in canonical (creation) order, with gradient and
/// RMSProp slots of identical shape.
class ParameterStore {
 public:
  std::size_t add(std::string name, Matrix value);

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_[i].name; }
  Matrix& value(std::size_t i) { return entries_[i].value; }
  const Matrix& value(std::size_t i) const { return entries_[i].value; }
  Matrix& grad(std::size_t i) { return entries_[i].grad; }
  const Matrix& grad(std::size_t i) const { return entries_[i].grad; }
  Matrix& rms(std::size_t i) { return entries_[i].rms; }
  const Matrix& rms(std::size_t i) const { return entries_[i].rms; }

  void zero_grad();
  /// Total scalar count.
  std::uint64_t count() const;

 private:
  struct Entry {
    std::string name;
    Matrix value;
    Matrix grad;
    Matrix rms;
  };
  std::vector<Entry> entries_;
};

inline constexpr std::size_t kNoParam = std::numeric_limits<std::size_t>::max();

struct FfnSlots {
  std::size_t gate = kNoParam, up = kNoParam, down = kNoParam;
};

/// Parameter indices of one block. Shared-parameter ablations point several
/// blocks (or heads) at the same index.
struct BlockSlots {
  std::size_t qm_mix_norm = kNoParam;  ///< Norm before HeadMixing / self-attention
  std::size_t qm_ffn_norm = kNoParam;
  std::vector<FfnSlots> qm_ffn;        ///< N entries, empty under wo_qm_ffn
  std::size_t sa_q = kNoParam, sa_k = kNoParam, sa_v = kNoParam;  ///< hm_to_sa only
  std::size_t seq_norm = kNoParam;
  FfnSlots seq_ffn;
  std::vector<std::size_t> key_proj;    ///< N entries, D x D
  std::vector<std::size_t> value_proj;  ///< N entries, D x D
  std::size_t of_norm = kNoParam;
  std::vector<FfnSlots> of_ffn;         ///< N entries (all equal under shared_of_ffn)
};

struct TaskSlots {
  std::size_t w1 = kNoParam, b1 = kNoParam, w2 = kNoParam, b2 = kNoParam;
};

/// How the non-sequential input is cut into heads.
struct HeadLayout {
  std::size_t n_user = 0;  ///< user heads (rows 0..n_user-1); 0 when not decoupled
  std::size_t n_item = 0;
  std::vector<ops::Segment> segments;  ///< in head order; one segment unless n_user > 0
};

/// Per-layer activations of the full N-row route, recorded on request.
struct LayerActivations {
  Matrix p, q, z, o;  ///< B*N x D each
};

class Model;

/// Model parameters bound to one tape.
struct Bound {
  std::vector<Var> dense;
  bool trainable = false;
};

/// Keys and values of every layer for one request's sequence (T*N x D each).
struct SequenceSide {
  std::vector<Var> keys;
  std::vector<Var> values;
  std::size_t steps = 0;
};

class Model {
 public:
  Model(ModelConfig cfg, FeatureSchema schema, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const FeatureSchema& schema() const { return schema_; }
  const HeadLayout& layout() const { return layout_; }
  /// N x D decoupling mask; empty when decoupling is off.
  const Matrix& mask() const { return mask_; }
  bool decoupled() const { return cfg_.decoupling.enabled; }

  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  EmbeddingSet& embeddings() { return emb_; }
  const EmbeddingSet& embeddings() const { return emb_; }

  const std::vector<std::size_t>& split_proj() const { return split_proj_; }
  std::size_t action_proj() const { return action_proj_; }
  const std::vector<BlockSlots>& blocks() const { return blocks_; }
  const std::vector<TaskSlots>& tasks() const { return tasks_; }

  /// Optimizer steps applied so far (stored in the checkpoint).
  std::uint64_t train_steps = 0;

  // ---- graph construction ----
  Bound bind(Tape& t, bool trainable);
  SequenceSide sequence_side(Tape& t, const Bound& b, const Request& r, bool trainable);

  /// Full route: every candidate carries all N head rows (masked HeadMixing
  /// when decoupled). Returns B x n_tasks logits for the listed candidates.
  Var full_logits(Tape& t, const Bound& b, const Request& r, std::span<const std::size_t> candidates,
                  const SequenceSide& seq, bool trainable, std::vector<LayerActivations>* acts = nullptr);

  /// Split route: user heads computed once, item heads per candidate.
  /// Requires decoupling with at least one user head.
  Var split_logits(Tape& t, const Bound& b, const Request& r, std::span<const std::size_t> candidates,
                   const SequenceSide& seq, bool trainable);

  /// Whichever route training and RLB inference use for this config.
  Var request_logits(Tape& t, const Bound& b, const Request& r, std::span<const std::size_t> candidates,
                     const SequenceSide& seq, bool trainable);
  bool uses_split_route() const { return decoupled() && layout_.n_user > 0; }

  // ---- convenience evaluation (no gradients) ----
  /// 1 x n_tasks logits of one candidate through the full route, recomputing
  /// the sequence side. Decoupled configs use masked HeadMixing.
  Matrix forward(const Request& r, std::size_t candidate, std::vector<LayerActivations>* acts = nullptr);
  /// K x n_tasks logits, sequence side shared, route per uses_split_route().
  Matrix score_request(const Request& r);

  /// Flops of scoring every candidate of r. rlb = false recomputes
  /// everything per candidate.
  FlopsTrace trace_request(const Request& r, bool rlb);

  // ---- checkpoint ----
  void save(const std::filesystem::path& p) const;
  static Model load(const std::filesystem::path& p);
  std::string serialize() const;
  static Model deserialize(const std::string& bytes);

 private:
  Var qm_rows(Tape& t, const Bound& b, const BlockSlots& s, Var x, Var mixed, std::size_t offset, std::size_t period,
              Var* p_out = nullptr);
  Var ffn_rows(Tape& t, const Bound& b, std::span<const FfnSlots> ffn, Var x, std::size_t offset,
               std::size_t period);
  Var norm(Tape& t, const Bound& b, std::size_t gain, Var x);
  Var residual_ffn(Tape& t, const Bound& b, std::size_t gain, std::span<const FfnSlots> ffn, Var x,
                   std::size_t offset, std::size_t period);
  Var fuse_attention(Tape& t, Var q, const SequenceSide& seq, std::size_t layer, ops::HeadMap map);
  Var task_heads(Tape& t, const Bound& b, Var flat);

  ModelConfig cfg_;
  FeatureSchema schema_;
  HeadLayout layout_;
  Matrix mask_;
  ParameterStore params_;
  EmbeddingSet emb_;
  std::vector<std::size_t> split_proj_;
  std::size_t action_proj_ = kNoParam;
  std::vector<BlockSlots> blocks_;
  std::vector<TaskSlots> tasks_;
};

// ---- standalone block operations (no parameters bound to a model) ----

/// Parameter-free HeadMixing of an N x D matrix (chunk width D / N).
Matrix head_mixing(const Matrix& x, std::size_t n_heads);
/// z_i = sum_t softmax_t(q_i . k_t^i / sqrt(D)) v_t^i + q_i. keys/values hold
/// T*N rows, row t*N + i for head i.
Matrix cross_attention(const Matrix& q, const Matrix& keys, const Matrix& values);
/// Attention weights (N x T) of cross_attention.
Matrix attention_weights(const Matrix& q, const Matrix& keys);

}  // namespace mixformer
