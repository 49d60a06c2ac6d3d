#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mixformer/matrix.hpp"
#include "mixformer/ops.hpp"
#include "mixformer/tape.hpp"

namespace mixformer {

enum class FieldSide : std::uint8_t { kUser, kItem, kContext };

std::string_view field_side_name(FieldSide s);
FieldSide parse_field_side(std::string_view s);

struct FeatureField {
  std::string name;
  std::uint32_t vocab = 1;
  std::uint32_t dim = 1;
  FieldSide side = FieldSide::kUser;  // ignored for action fields

  friend bool operator==(const FeatureField&, const FeatureField&) = default;
};

/// Non-sequential and action feature layout.
///
/// The concatenated non-sequential embedding always places user and context
/// fields first (in schema order), then item fields (in schema order).
struct FeatureSchema {
  std::vector<FeatureField> nonseq;
  std::vector<FeatureField> action;
  std::uint32_t max_seq_len = 64;
  std::vector<std::string> tasks;

  void validate() const;

  /// Indices into `nonseq` of user + context fields, then of item fields.
  std::vector<std::size_t> user_fields() const;
  std::vector<std::size_t> item_fields() const;

  std::size_t d_ns() const { return d_user() + d_item(); }
  std::size_t d_user() const;
  std::size_t d_item() const;
  std::size_t action_width() const;
  std::size_t n_tasks() const { return tasks.size(); }

  /// Plain-text descriptor; see docs/formats.md.
  std::string to_text() const;
  static FeatureSchema from_text(const std::string& text);
  void save(const std::filesystem::path& p) const;
  static FeatureSchema load(const std::filesystem::path& p);

  /// Action-field sides are not part of the schema and are not compared.
  friend bool operator==(const FeatureSchema& a, const FeatureSchema& b) {
    const auto same_action = [](const FeatureField& x, const FeatureField& y) {
      return x.name == y.name && x.vocab == y.vocab && x.dim == y.dim;
    };
    return a.nonseq == b.nonseq && a.max_seq_len == b.max_seq_len && a.tasks == b.tasks &&
           std::ranges::equal(a.action, b.action, same_action);
  }
};

/// Starting value of every Adagrad accumulator entry.
inline constexpr double kAdagradInit = 0.1;

/// One sparse embedding table with its gradient and Adagrad state.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::uint32_t vocab, std::uint32_t dim);

  std::uint32_t vocab() const { return static_cast<std::uint32_t>(values_.rows()); }
  std::uint32_t dim() const { return static_cast<std::uint32_t>(values_.cols()); }

  std::span<const double> lookup(std::uint32_t id) const;
  Matrix& values() { return values_; }
  const Matrix& values() const { return values_; }
  Matrix& accumulator() { return accum_; }
  const Matrix& accumulator() const { return accum_; }

  /// Adds g into the gradient of row `id` and marks it touched.
  void accumulate_grad(std::uint32_t id, std::span<const double> g);
  std::span<const double> grad_row(std::uint32_t id) const { return grad_.row(id); }
  const std::vector<std::uint32_t>& touched() const { return touched_; }
  /// Zeroes the gradient of every touched row and clears the touched list.
  void clear_grad();

 private:
  Matrix values_;
  Matrix grad_;
  Matrix accum_;
  std::vector<std::uint8_t> is_touched_;
  std::vector<std::uint32_t> touched_;
};

/// One user's request: shared features, behaviour sequence and K candidates.
struct Request {
  std::uint64_t user_id = 0;
  std::vector<std::uint32_t> user_ids;       ///< one id per user/context field, schema order
  std::vector<std::uint32_t> sequence;       ///< T x n_action_fields, temporal order
  std::vector<std::uint32_t> candidates;     ///< K x n_item_fields
  std::vector<std::uint8_t> labels;          ///< K x n_tasks, empty when unlabeled

  std::size_t seq_len(const FeatureSchema& s) const { return s.action.empty() ? 0 : sequence.size() / s.action.size(); }
  std::size_t n_candidates(const FeatureSchema& s) const;
  std::span<const std::uint32_t> action(const FeatureSchema& s, std::size_t t) const;
  std::span<const std::uint32_t> candidate(const FeatureSchema& s, std::size_t k) const;
  bool label(const FeatureSchema& s, std::size_t k, std::size_t task) const {
    return labels[k * s.n_tasks() + task] != 0;
  }

  /// Checks sizes and that every id is inside its field's vocabulary.
  void validate(const FeatureSchema& s) const;

  friend bool operator==(const Request&, const Request&) = default;
};

struct Dataset {
  FeatureSchema schema;
  std::vector<Request> requests;

  std::size_t impressions() const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Length-prefixed little-endian record file (layout in docs/formats.md).
void write_dataset(const std::filesystem::path& p, const Dataset& d);
/// Reads records and validates them against `schema`.
Dataset read_dataset(const std::filesystem::path& p, const FeatureSchema& schema);

/// Embedding tables for every non-sequential and action field, schema order.
struct EmbeddingSet {
  std::vector<EmbeddingTable> nonseq;
  std::vector<EmbeddingTable> action;

  static EmbeddingSet zeros(const FeatureSchema& s);
  /// N(0, 0.1^2)-style uniform init U(-0.1, 0.1) from a seeded generator.
  static EmbeddingSet random(const FeatureSchema& s, std::uint64_t seed);
  void clear_grad();
};

// ---- Tape ops --------------------------------------------------------------

/// Rows table[ids[i]]; gradients scatter into the table when the tape records them.
Var gather(Tape& t, EmbeddingTable& table, std::span<const std::uint32_t> ids, bool trainable);

/// Concatenated user + context embeddings, repeated for `copies` rows.
Var embed_user_fields(Tape& t, EmbeddingSet& emb, const FeatureSchema& s, const Request& r,
                      std::size_t copies, bool trainable);
/// Concatenated item embeddings, one row per listed candidate.
Var embed_item_fields(Tape& t, EmbeddingSet& emb, const FeatureSchema& s, const Request& r,
                      std::span<const std::size_t> candidates, bool trainable);
/// Concatenated action-field embeddings, one row per sequence step (T x sum of action dims).
Var embed_action_fields(Tape& t, EmbeddingSet& emb, const FeatureSchema& s, const Request& r, bool trainable);

// ---- Plain forward helpers -------------------------------------------------

/// e_ns for one candidate: user/context fields, then item fields.
std::vector<double> embed_nonseq(const Request& r, std::size_t candidate, const EmbeddingSet& emb,
                                 const FeatureSchema& s);

/// Heads x D: row j = proj[j] applied to the j-th chunk of e_ns (zero padded
/// to a multiple of the head count). proj[j] is chunk x D (input-major).
Matrix split_heads(std::span<const double> e_ns, std::span<const Matrix> proj);

/// One action: concatenated field embeddings times the shared input projection.
std::vector<double> embed_action(std::span<const std::uint32_t> ids, const EmbeddingSet& emb,
                                 const Matrix& input_proj);
/// T x (N*D); zero rows for an empty sequence.
Matrix embed_sequence(const Request& r, const EmbeddingSet& emb, const FeatureSchema& s,
                      const Matrix& input_proj);

/// Log-spaced recency bucket in [0, n_buckets): bucket = floor(log2(1 + age)), clamped.
std::uint32_t recency_bucket(std::uint64_t age_seconds, std::uint32_t n_buckets = 32);

}  // namespace mixformer
