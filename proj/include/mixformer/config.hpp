#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mixformer {

/// Plain-text `key = value` configuration, ordered by key.
///
/// serialize() emits one line per key in sorted order, so parse(serialize(c))
/// == c and serialize(parse(s)) is canonical.
class RunConfig {
 public:
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& p);
  std::string serialize() const;

  bool has(const std::string& key) const { return values_.contains(key); }
  void set(const std::string& key, const std::string& value);
  /// Applies `key=value` overrides (CLI style).
  void apply_override(const std::string& assignment);
  void merge(const RunConfig& other);

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  friend bool operator==(const RunConfig&, const RunConfig&) = default;

 private:
  std::map<std::string, std::string> values_;
};

/// Architecture switches for the six ablation variants.
struct AblationSwitches {
  bool wo_hm = false;           ///< drop the HeadMixing term in the query mixer
  bool hm_to_sa = false;        ///< HeadMixing -> self-attention over heads
  bool wo_qm_ffn = false;       ///< drop the per-head FFN in the query mixer
  bool shared_seq_ffn = false;  ///< one action FFN shared by all layers
  bool shared_of_ffn = false;   ///< one output-fusion FFN shared by all heads
  bool post_ln = false;         ///< post-LayerNorm instead of pre-RMSNorm

  friend bool operator==(const AblationSwitches&, const AblationSwitches&) = default;
};

struct DecouplingConfig {
  bool enabled = false;
  /// User heads N_U; nullopt derives N_U/N_G from the embedding widths.
  std::optional<std::size_t> user_heads;

  friend bool operator==(const DecouplingConfig&, const DecouplingConfig&) = default;
};

struct ModelConfig {
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t head_dim = 32;
  std::size_t max_seq_len = 64;
  std::size_t expansion_ratio = 2;  ///< SwiGLU hidden width = ratio * input width
  std::size_t n_tasks = 2;
  std::size_t task_hidden = 0;  ///< 0 means head_dim
  double norm_eps = 1e-6;
  AblationSwitches ablation;
  DecouplingConfig decoupling;

  std::size_t model_width() const { return n_heads * head_dim; }
  std::size_t task_hidden_width() const { return task_hidden == 0 ? head_dim : task_hidden; }

  /// Throws ConfigError on any inconsistency (e.g. head_dim % n_heads != 0).
  void validate() const;

  RunConfig to_run_config() const;
  /// Reads `model.*`, `ablation.*` and `decouple.*` keys over defaults.
  static ModelConfig from_run_config(const RunConfig& rc);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Named presets. `paper-small` carries head_dim 386, which
/// is not divisible by 16 heads and fails validate(); the `-corrected`
/// presets use 384 and 768.
std::vector<std::string> preset_names();
ModelConfig preset(const std::string& name);

/// The six ablation variant names, in reporting order.
const std::vector<std::string>& ablation_names();
/// Copy of base with exactly one switch flipped.
ModelConfig apply_ablation(const ModelConfig& base, const std::string& name);

}  // namespace mixformer
