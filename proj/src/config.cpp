#include "mixformer/config.hpp"

#include <fstream>
#include <sstream>

#include "mixformer/errors.hpp"

namespace mixformer {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig rc;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    rc.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return rc;
}

RunConfig RunConfig::load(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot read config " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key.empty() || key.find_first_of(" \t=#") != std::string::npos)
    throw ConfigError("invalid config key '" + key + "'");
  if (value.find_first_of("#\n") != std::string::npos) throw ConfigError("invalid value for '" + key + "'");
  values_[key] = value;
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::merge(const RunConfig& other) {
  for (const auto& [k, v] : other.values_) values_[k] = v;
}

std::string RunConfig::get_string(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::int64_t RunConfig::get_int(const std::string& key, std::int64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t used = 0;
    const auto v = std::stoll(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(it->second);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config '" + key + "': not an integer: " + it->second);
  }
}

std::uint64_t RunConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t used = 0;
    if (!it->second.empty() && it->second[0] == '-') throw std::invalid_argument(it->second);
    const auto v = std::stoull(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(it->second);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config '" + key + "': not an unsigned integer: " + it->second);
  }
}

double RunConfig::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t used = 0;
    const auto v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(it->second);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config '" + key + "': not a number: " + it->second);
  }
}

bool RunConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError("config '" + key + "': not a boolean: " + it->second);
}

// ---- ModelConfig -----------------------------------------------------------

void ModelConfig::validate() const {
  if (n_heads < 1) throw ConfigError("model.heads must be >= 1");
  if (n_layers < 1) throw ConfigError("model.layers must be >= 1");
  if (head_dim < 1) throw ConfigError("model.head_dim must be >= 1");
  if (head_dim % n_heads != 0)
    throw ConfigError("model.head_dim (" + std::to_string(head_dim) + ") must be divisible by model.heads (" +
                      std::to_string(n_heads) + ") for HeadMixing");
  if (expansion_ratio < 1) throw ConfigError("model.expansion must be >= 1");
  if (n_tasks < 1) throw ConfigError("model.tasks must be >= 1");
  if (!(norm_eps > 0.0)) throw ConfigError("model.norm_eps must be positive");
  if (ablation.wo_hm && ablation.hm_to_sa) throw ConfigError("ablation.wo_hm and ablation.hm_to_sa are exclusive");
  if (decoupling.enabled) {
    if (n_heads < 2) throw ConfigError("decoupling needs at least 2 heads");
    if (ablation.hm_to_sa) throw ConfigError("decoupling is defined for HeadMixing, not ablation.hm_to_sa");
    if (decoupling.user_heads && *decoupling.user_heads >= n_heads)
      throw ConfigError("decouple.user_heads must be < model.heads");
  }
}

RunConfig ModelConfig::to_run_config() const {
  RunConfig rc;
  rc.set("model.heads", std::to_string(n_heads));
  rc.set("model.layers", std::to_string(n_layers));
  rc.set("model.head_dim", std::to_string(head_dim));
  rc.set("model.max_seq_len", std::to_string(max_seq_len));
  rc.set("model.expansion", std::to_string(expansion_ratio));
  rc.set("model.tasks", std::to_string(n_tasks));
  rc.set("model.task_hidden", std::to_string(task_hidden));
  rc.set("model.norm_eps", fmt_double(norm_eps));
  rc.set("ablation.wo_hm", ablation.wo_hm ? "true" : "false");
  rc.set("ablation.hm_to_sa", ablation.hm_to_sa ? "true" : "false");
  rc.set("ablation.wo_qm_ffn", ablation.wo_qm_ffn ? "true" : "false");
  rc.set("ablation.shared_seq_ffn", ablation.shared_seq_ffn ? "true" : "false");
  rc.set("ablation.shared_of_ffn", ablation.shared_of_ffn ? "true" : "false");
  rc.set("ablation.post_ln", ablation.post_ln ? "true" : "false");
  rc.set("decouple.enabled", decoupling.enabled ? "true" : "false");
  rc.set("decouple.user_heads", decoupling.user_heads ? std::to_string(*decoupling.user_heads) : "auto");
  return rc;
}

ModelConfig ModelConfig::from_run_config(const RunConfig& rc) {
  ModelConfig c;
  if (rc.has("model.preset")) c = preset(rc.get_string("model.preset", ""));
  auto size = [&](const char* key, std::size_t fallback) {
    const auto v = rc.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  c.n_heads = size("model.heads", c.n_heads);
  c.n_layers = size("model.layers", c.n_layers);
  c.head_dim = size("model.head_dim", c.head_dim);
  c.max_seq_len = size("model.max_seq_len", c.max_seq_len);
  c.expansion_ratio = size("model.expansion", c.expansion_ratio);
  c.n_tasks = size("model.tasks", c.n_tasks);
  c.task_hidden = size("model.task_hidden", c.task_hidden);
  c.norm_eps = rc.get_double("model.norm_eps", c.norm_eps);
  c.ablation.wo_hm = rc.get_bool("ablation.wo_hm", c.ablation.wo_hm);
  c.ablation.hm_to_sa = rc.get_bool("ablation.hm_to_sa", c.ablation.hm_to_sa);
  c.ablation.wo_qm_ffn = rc.get_bool("ablation.wo_qm_ffn", c.ablation.wo_qm_ffn);
  c.ablation.shared_seq_ffn = rc.get_bool("ablation.shared_seq_ffn", c.ablation.shared_seq_ffn);
  c.ablation.shared_of_ffn = rc.get_bool("ablation.shared_of_ffn", c.ablation.shared_of_ffn);
  c.ablation.post_ln = rc.get_bool("ablation.post_ln", c.ablation.post_ln);
  c.decoupling.enabled = rc.get_bool("decouple.enabled", c.decoupling.enabled);
  const auto uh = rc.get_string("decouple.user_heads", "auto");
  if (uh == "auto") {
    c.decoupling.user_heads.reset();
  } else {
    c.decoupling.user_heads = size("decouple.user_heads", 0);
  }
  return c;
}

std::vector<std::string> preset_names() {
  return {"desk-small", "paper-small", "paper-small-corrected", "paper-medium-corrected"};
}

ModelConfig preset(const std::string& name) {
  ModelConfig c;
  if (name == "desk-small") {
    c.n_heads = 4;
    c.n_layers = 2;
    c.head_dim = 32;
    c.max_seq_len = 64;
  } else if (name == "paper-small") {
    c.n_heads = 16;
    c.n_layers = 4;
    c.head_dim = 386;
    c.max_seq_len = 512;
  } else if (name == "paper-small-corrected") {
    c.n_heads = 16;
    c.n_layers = 4;
    c.head_dim = 384;
    c.max_seq_len = 512;
  } else if (name == "paper-medium-corrected") {
    c.n_heads = 16;
    c.n_layers = 4;
    c.head_dim = 768;
    c.max_seq_len = 512;
  } else {
    std::string valid;
    for (const auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "'; valid presets: " + valid);
  }
  return c;
}

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {"wo_hm",          "hm_to_sa",      "wo_qm_ffn",
                                                 "shared_seq_ffn", "shared_of_ffn", "post_ln"};
  return names;
}

ModelConfig apply_ablation(const ModelConfig& base, const std::string& name) {
  ModelConfig c = base;
  auto& a = c.ablation;
  if (name == "wo_hm") a.wo_hm = !a.wo_hm;
  else if (name == "hm_to_sa") a.hm_to_sa = !a.hm_to_sa;
  else if (name == "wo_qm_ffn") a.wo_qm_ffn = !a.wo_qm_ffn;
  else if (name == "shared_seq_ffn") a.shared_seq_ffn = !a.shared_seq_ffn;
  else if (name == "shared_of_ffn") a.shared_of_ffn = !a.shared_of_ffn;
  else if (name == "post_ln") a.post_ln = !a.post_ln;
  else throw ConfigError("unknown ablation '" + name + "'");
  return c;
}

}  // namespace mixformer
