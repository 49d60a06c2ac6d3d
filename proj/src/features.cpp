#include "mixformer/features.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "binio.hpp"

namespace mixformer {

static_assert(std::endian::native == std::endian::little, "dataset IO assumes a little-endian host");

namespace {

constexpr char kDatasetMagic[4] = {'M', 'X', 'D', 'S'};
constexpr std::uint32_t kDatasetVersion = 1;

using binio::ByteReader;
using binio::ByteWriter;

std::uint32_t checked_u32(const std::string& tok, const std::string& what) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(tok, &used);
    if (used != tok.size() || v > 0xffffffffULL) throw std::invalid_argument(tok);
    return static_cast<std::uint32_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("schema: bad " + what + " '" + tok + "'");
  }
}

}  // namespace

std::string_view field_side_name(FieldSide s) {
  switch (s) {
    case FieldSide::kUser: return "user";
    case FieldSide::kItem: return "item";
    case FieldSide::kContext: return "context";
  }
  return "?";
}

FieldSide parse_field_side(std::string_view s) {
  if (s == "user") return FieldSide::kUser;
  if (s == "item") return FieldSide::kItem;
  if (s == "context") return FieldSide::kContext;
  throw ConfigError("unknown field side '" + std::string(s) + "'");
}

// ---- FeatureSchema ---------------------------------------------------------

void FeatureSchema::validate() const {
  if (nonseq.empty()) throw ConfigError("schema: no non-sequential fields");
  if (item_fields().empty()) throw ConfigError("schema: no item-side field");
  for (const auto& group : {nonseq, action})
    for (const auto& f : group)
      if (f.vocab < 1 || f.dim < 1) throw ConfigError("schema: field '" + f.name + "' needs vocab >= 1 and dim >= 1");
  if (tasks.empty()) throw ConfigError("schema: no tasks");
  if (!action.empty() && max_seq_len == 0) throw ConfigError("schema: max_seq_len must be positive");
}

std::vector<std::size_t> FeatureSchema::user_fields() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nonseq.size(); ++i)
    if (nonseq[i].side != FieldSide::kItem) out.push_back(i);
  return out;
}

std::vector<std::size_t> FeatureSchema::item_fields() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nonseq.size(); ++i)
    if (nonseq[i].side == FieldSide::kItem) out.push_back(i);
  return out;
}

std::size_t FeatureSchema::d_user() const {
  std::size_t d = 0;
  for (auto i : user_fields()) d += nonseq[i].dim;
  return d;
}

std::size_t FeatureSchema::d_item() const {
  std::size_t d = 0;
  for (auto i : item_fields()) d += nonseq[i].dim;
  return d;
}

std::size_t FeatureSchema::action_width() const {
  std::size_t d = 0;
  for (const auto& f : action) d += f.dim;
  return d;
}

std::string FeatureSchema::to_text() const {
  std::ostringstream os;
  os << "max_seq_len " << max_seq_len << "\n";
  for (const auto& t : tasks) os << "task " << t << "\n";
  for (const auto& f : nonseq) os << f.name << ' ' << field_side_name(f.side) << ' ' << f.vocab << ' ' << f.dim << "\n";
  for (const auto& f : action) os << f.name << " action " << f.vocab << ' ' << f.dim << "\n";
  return os.str();
}

FeatureSchema FeatureSchema::from_text(const std::string& text) {
  FeatureSchema s;
  s.max_seq_len = 0;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string w; ls >> w;) tok.push_back(w);
    if (tok.empty()) continue;
    const std::string where = " (line " + std::to_string(lineno) + ")";
    if (tok[0] == "max_seq_len") {
      if (tok.size() != 2) throw ConfigError("schema: max_seq_len takes one value" + where);
      s.max_seq_len = checked_u32(tok[1], "max_seq_len");
    } else if (tok[0] == "task") {
      if (tok.size() != 2) throw ConfigError("schema: task takes one name" + where);
      s.tasks.push_back(tok[1]);
    } else {
      if (tok.size() != 4) throw ConfigError("schema: expected 'name side vocab dim'" + where);
      FeatureField f{tok[0], checked_u32(tok[2], "vocab"), checked_u32(tok[3], "dim"), FieldSide::kUser};
      if (tok[1] == "action") {
        s.action.push_back(f);
      } else {
        f.side = parse_field_side(tok[1]);
        s.nonseq.push_back(f);
      }
    }
  }
  s.validate();
  return s;
}

void FeatureSchema::save(const std::filesystem::path& p) const {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write schema " + p.string());
  out << to_text();
  if (!out) throw DataError("write failed: " + p.string());
}

FeatureSchema FeatureSchema::load(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot read schema " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

// ---- EmbeddingTable --------------------------------------------------------

EmbeddingTable::EmbeddingTable(std::uint32_t vocab, std::uint32_t dim)
    : values_(vocab, dim), accum_(vocab, dim, kAdagradInit), is_touched_(vocab, 0) {}

std::span<const double> EmbeddingTable::lookup(std::uint32_t id) const {
  if (id >= vocab()) throw LookupError("embedding id " + std::to_string(id) + " outside vocab " + std::to_string(vocab()));
  return values_.row(id);
}

void EmbeddingTable::accumulate_grad(std::uint32_t id, std::span<const double> g) {
  if (grad_.empty()) grad_ = Matrix(values_.rows(), values_.cols());
  if (!is_touched_[id]) {
    is_touched_[id] = 1;
    touched_.push_back(id);
  }
  auto row = grad_.row(id);
  for (std::size_t i = 0; i < row.size(); ++i) row[i] += g[i];
}

void EmbeddingTable::clear_grad() {
  for (auto id : touched_) {
    for (double& v : grad_.row(id)) v = 0.0;
    is_touched_[id] = 0;
  }
  touched_.clear();
}

// ---- Request / Dataset -----------------------------------------------------

std::size_t Request::n_candidates(const FeatureSchema& s) const {
  const std::size_t w = s.item_fields().size();
  return w == 0 ? 0 : candidates.size() / w;
}

std::span<const std::uint32_t> Request::action(const FeatureSchema& s, std::size_t t) const {
  const std::size_t w = s.action.size();
  return std::span<const std::uint32_t>(sequence).subspan(t * w, w);
}

std::span<const std::uint32_t> Request::candidate(const FeatureSchema& s, std::size_t k) const {
  const std::size_t w = s.item_fields().size();
  if (k >= n_candidates(s)) throw LookupError("candidate index " + std::to_string(k) + " out of range");
  return std::span<const std::uint32_t>(candidates).subspan(k * w, w);
}

void Request::validate(const FeatureSchema& s) const {
  const auto uf = s.user_fields();
  const auto itf = s.item_fields();
  if (user_ids.size() != uf.size()) throw DataError("request: wrong number of user/context ids");
  if (candidates.empty() || candidates.size() % itf.size() != 0) throw DataError("request: needs K >= 1 complete candidates");
  if (!s.action.empty() && sequence.size() % s.action.size() != 0) throw DataError("request: ragged sequence");
  if (s.action.empty() && !sequence.empty()) throw DataError("request: sequence without action fields");
  if (seq_len(s) > s.max_seq_len) throw DataError("request: sequence longer than max_seq_len");
  if (!labels.empty() && labels.size() != n_candidates(s) * s.n_tasks()) throw DataError("request: label count");
  auto check = [](std::uint32_t id, const FeatureField& f) {
    if (id >= f.vocab) throw LookupError("id " + std::to_string(id) + " outside vocab of field '" + f.name + "'");
  };
  for (std::size_t i = 0; i < uf.size(); ++i) check(user_ids[i], s.nonseq[uf[i]]);
  for (std::size_t i = 0; i < candidates.size(); ++i) check(candidates[i], s.nonseq[itf[i % itf.size()]]);
  for (std::size_t i = 0; i < sequence.size(); ++i) check(sequence[i], s.action[i % s.action.size()]);
}

std::size_t Dataset::impressions() const {
  std::size_t n = 0;
  for (const auto& r : requests) n += r.n_candidates(schema);
  return n;
}

void write_dataset(const std::filesystem::path& p, const Dataset& d) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write dataset " + p.string());
  const auto& s = d.schema;
  ByteWriter header;
  for (char c : kDatasetMagic) header.put(c);
  header.put(kDatasetVersion);
  header.put(static_cast<std::uint32_t>(s.user_fields().size()));
  header.put(static_cast<std::uint32_t>(s.item_fields().size()));
  header.put(static_cast<std::uint32_t>(s.action.size()));
  header.put(static_cast<std::uint32_t>(s.n_tasks()));
  header.put(static_cast<std::uint64_t>(d.requests.size()));
  out.write(header.bytes().data(), static_cast<std::streamsize>(header.bytes().size()));
  for (const auto& r : d.requests) {
    ByteWriter rec;
    rec.put(r.user_id);
    rec.put(static_cast<std::uint32_t>(r.n_candidates(s)));
    rec.put(static_cast<std::uint32_t>(r.seq_len(s)));
    rec.put_all<std::uint32_t>(r.user_ids);
    rec.put_all<std::uint32_t>(r.sequence);
    rec.put_all<std::uint32_t>(r.candidates);
    rec.put(static_cast<std::uint8_t>(r.labels.empty() ? 0 : 1));
    rec.put_all<std::uint8_t>(r.labels);
    const auto len = static_cast<std::uint32_t>(rec.bytes().size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(rec.bytes().data(), static_cast<std::streamsize>(len));
  }
  if (!out) throw DataError("write failed: " + p.string());
}

Dataset read_dataset(const std::filesystem::path& p, const FeatureSchema& schema) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read dataset " + p.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ByteReader hr(std::span<const char>(bytes).first(std::min<std::size_t>(bytes.size(), 32)), "dataset header");
  for (char c : kDatasetMagic)
    if (hr.get<char>() != c) throw DataError(p.string() + ": not a dataset file");
  if (hr.get<std::uint32_t>() != kDatasetVersion) throw DataError(p.string() + ": unsupported version");
  const auto n_user = hr.get<std::uint32_t>();
  const auto n_item = hr.get<std::uint32_t>();
  const auto n_action = hr.get<std::uint32_t>();
  const auto n_tasks = hr.get<std::uint32_t>();
  const auto n_records = hr.get<std::uint64_t>();
  if (n_user != schema.user_fields().size() || n_item != schema.item_fields().size() ||
      n_action != schema.action.size() || n_tasks != schema.n_tasks())
    throw DataError(p.string() + ": field counts do not match schema");

  Dataset d{schema, {}};
  d.requests.reserve(n_records);
  std::size_t pos = 32;
  for (std::uint64_t i = 0; i < n_records; ++i) {
    if (pos + 4 > bytes.size()) throw DataError(p.string() + ": truncated record header");
    std::uint32_t len;
    std::memcpy(&len, bytes.data() + pos, 4);
    pos += 4;
    if (pos + len > bytes.size()) throw DataError(p.string() + ": truncated record");
    ByteReader rr(std::span<const char>(bytes).subspan(pos, len), "dataset record");
    pos += len;
    Request r;
    r.user_id = rr.get<std::uint64_t>();
    const auto k = rr.get<std::uint32_t>();
    const auto t = rr.get<std::uint32_t>();
    r.user_ids = rr.get_n<std::uint32_t>(n_user);
    r.sequence = rr.get_n<std::uint32_t>(std::size_t{t} * n_action);
    r.candidates = rr.get_n<std::uint32_t>(std::size_t{k} * n_item);
    if (rr.get<std::uint8_t>() != 0) r.labels = rr.get_n<std::uint8_t>(std::size_t{k} * n_tasks);
    if (!rr.done()) throw DataError(p.string() + ": record length mismatch");
    r.validate(schema);
    d.requests.push_back(std::move(r));
  }
  if (pos != bytes.size()) throw DataError(p.string() + ": trailing bytes");
  return d;
}

// ---- EmbeddingSet ----------------------------------------------------------

EmbeddingSet EmbeddingSet::zeros(const FeatureSchema& s) {
  EmbeddingSet e;
  for (const auto& f : s.nonseq) e.nonseq.emplace_back(f.vocab, f.dim);
  for (const auto& f : s.action) e.action.emplace_back(f.vocab, f.dim);
  return e;
}

EmbeddingSet EmbeddingSet::random(const FeatureSchema& s, std::uint64_t seed) {
  EmbeddingSet e = zeros(s);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-0.1, 0.1);
  for (auto* group : {&e.nonseq, &e.action})
    for (auto& t : *group)
      for (double& v : t.values().flat()) v = dist(rng);
  return e;
}

void EmbeddingSet::clear_grad() {
  for (auto* group : {&nonseq, &action})
    for (auto& t : *group) t.clear_grad();
}

// ---- Tape ops --------------------------------------------------------------

Var gather(Tape& t, EmbeddingTable& table, std::span<const std::uint32_t> ids, bool trainable) {
  Matrix out(ids.size(), table.dim());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto row = table.lookup(ids[i]);
    std::copy(row.begin(), row.end(), out.row(i).begin());
  }
  std::vector<std::uint32_t> id_copy(ids.begin(), ids.end());
  return t.push(std::move(out), trainable, [&table, id_copy = std::move(id_copy)](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    for (std::size_t i = 0; i < id_copy.size(); ++i) table.accumulate_grad(id_copy[i], g.row(i));
  }, 0);
}

Var embed_user_fields(Tape& t, EmbeddingSet& emb, const FeatureSchema& s, const Request& r,
                      std::size_t copies, bool trainable) {
  const auto uf = s.user_fields();
  std::vector<Var> parts;
  for (std::size_t i = 0; i < uf.size(); ++i) {
    const std::vector<std::uint32_t> ids(copies, r.user_ids[i]);
    parts.push_back(gather(t, emb.nonseq[uf[i]], ids, trainable));
  }
  if (parts.empty()) return t.constant(Matrix(copies, 0));
  return parts.size() == 1 ? parts[0] : ops::concat_cols(t, parts);
}

Var embed_item_fields(Tape& t, EmbeddingSet& emb, const FeatureSchema& s, const Request& r,
                      std::span<const std::size_t> candidates, bool trainable) {
  const auto itf = s.item_fields();
  std::vector<Var> parts;
  for (std::size_t i = 0; i < itf.size(); ++i) {
    std::vector<std::uint32_t> ids;
    for (auto k : candidates) ids.push_back(r.candidate(s, k)[i]);
    parts.push_back(gather(t, emb.nonseq[itf[i]], ids, trainable));
  }
  return parts.size() == 1 ? parts[0] : ops::concat_cols(t, parts);
}

Var embed_action_fields(Tape& t, EmbeddingSet& emb, const FeatureSchema& s, const Request& r, bool trainable) {
  const std::size_t steps = r.seq_len(s);
  std::vector<Var> parts;
  for (std::size_t f = 0; f < s.action.size(); ++f) {
    std::vector<std::uint32_t> ids(steps);
    for (std::size_t st = 0; st < steps; ++st) ids[st] = r.sequence[st * s.action.size() + f];
    parts.push_back(gather(t, emb.action[f], ids, trainable));
  }
  if (parts.empty()) return t.constant(Matrix(0, 0));
  return parts.size() == 1 ? parts[0] : ops::concat_cols(t, parts);
}

// ---- Plain helpers ---------------------------------------------------------

std::vector<double> embed_nonseq(const Request& r, std::size_t candidate, const EmbeddingSet& emb,
                                 const FeatureSchema& s) {
  std::vector<double> out;
  out.reserve(s.d_ns());
  const auto uf = s.user_fields();
  for (std::size_t i = 0; i < uf.size(); ++i) {
    const auto row = emb.nonseq[uf[i]].lookup(r.user_ids[i]);
    out.insert(out.end(), row.begin(), row.end());
  }
  const auto cand = r.candidate(s, candidate);
  const auto itf = s.item_fields();
  for (std::size_t i = 0; i < itf.size(); ++i) {
    const auto row = emb.nonseq[itf[i]].lookup(cand[i]);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

Matrix split_heads(std::span<const double> e_ns, std::span<const Matrix> proj) {
  Tape t(false);
  const Var e = t.constant(Matrix::row_vector(e_ns));
  std::vector<Var> w;
  for (const auto& m : proj) w.push_back(t.param(m, nullptr));
  const ops::Segment seg{0, e_ns.size(), proj.size()};
  require_shape(!proj.empty() && proj[0].rows() == seg.chunk(),
                "split_heads: projection rows must equal the padded chunk width");
  return t.value(ops::split_project(t, e, std::span(&seg, 1), w));
}

std::vector<double> embed_action(std::span<const std::uint32_t> ids, const EmbeddingSet& emb,
                                 const Matrix& input_proj) {
  require_shape(ids.size() == emb.action.size(), "embed_action: one id per action field required");
  std::vector<double> cat;
  for (std::size_t f = 0; f < ids.size(); ++f) {
    const auto row = emb.action[f].lookup(ids[f]);
    cat.insert(cat.end(), row.begin(), row.end());
  }
  require_shape(input_proj.rows() == cat.size(), "embed_action: projection rows != action width");
  std::vector<double> out(input_proj.cols(), 0.0);
  for (std::size_t k = 0; k < cat.size(); ++k)
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += cat[k] * input_proj(k, j);
  return out;
}

Matrix embed_sequence(const Request& r, const EmbeddingSet& emb, const FeatureSchema& s,
                      const Matrix& input_proj) {
  const std::size_t steps = r.seq_len(s);
  Matrix out(steps, input_proj.cols());
  for (std::size_t t = 0; t < steps; ++t) {
    const auto row = embed_action(r.action(s, t), emb, input_proj);
    std::copy(row.begin(), row.end(), out.row(t).begin());
  }
  return out;
}

std::uint32_t recency_bucket(std::uint64_t age_seconds, std::uint32_t n_buckets) {
  const auto b = static_cast<std::uint32_t>(std::bit_width(age_seconds + 1) - 1);
  return std::min(b, n_buckets - 1);
}

}  // namespace mixformer
