#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "binio.hpp"
#include "mixformer/decouple.hpp"
#include "mixformer/mathcore.hpp"
#include "mixformer/model.hpp"

namespace mixformer {

// ---- ParameterStore --------------------------------------------------------

std::size_t ParameterStore::add(std::string name, Matrix value) {
  Matrix zeros(value.rows(), value.cols());
  Matrix rms(value.rows(), value.cols(), kRmsInit);
  entries_.push_back(Entry{std::move(name), std::move(value), zeros, std::move(rms)});
  return entries_.size() - 1;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.grad.fill(0.0);
}

std::uint64_t ParameterStore::count() const {
  std::uint64_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

// ---- construction ----------------------------------------------------------

namespace {

Matrix xavier(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  Matrix m(rows, cols);
  xavier_uniform(m, rows, cols, rng);
  return m;
}

std::string key(std::size_t layer, const char* what) { return "block" + std::to_string(layer) + "." + what; }
std::string key(std::size_t layer, const char* what, std::size_t head) {
  return key(layer, what) + "." + std::to_string(head);
}

FfnSlots add_ffn(ParameterStore& ps, const std::string& prefix, std::size_t in, std::size_t hidden,
                 std::mt19937_64& rng) {
  FfnSlots f;
  f.gate = ps.add(prefix + ".gate", xavier(in, hidden, rng));
  f.up = ps.add(prefix + ".up", xavier(in, hidden, rng));
  f.down = ps.add(prefix + ".down", xavier(hidden, in, rng));
  return f;
}

}  // namespace

Model::Model(ModelConfig cfg, FeatureSchema schema, std::uint64_t seed)
    : cfg_(std::move(cfg)), schema_(std::move(schema)) {
  cfg_.validate();
  schema_.validate();
  if (schema_.n_tasks() != cfg_.n_tasks)
    throw ConfigError("schema declares " + std::to_string(schema_.n_tasks()) + " tasks but model.tasks = " +
                      std::to_string(cfg_.n_tasks));
  const std::size_t n = cfg_.n_heads, d = cfg_.head_dim, w = cfg_.model_width();
  const std::size_t r = cfg_.expansion_ratio;
  const auto& ab = cfg_.ablation;

  if (cfg_.decoupling.enabled) {
    layout_.n_user = cfg_.decoupling.user_heads ? *cfg_.decoupling.user_heads
                                                : allocate_heads(schema_.d_user(), schema_.d_item(), n).n_user;
    layout_.n_item = n - layout_.n_user;
    mask_ = build_mask(n, layout_.n_user, d);
  } else {
    layout_.n_item = n;
  }
  if (layout_.n_user > 0) {
    layout_.segments = {{0, schema_.d_user(), layout_.n_user}, {schema_.d_user(), schema_.d_item(), layout_.n_item}};
  } else {
    layout_.segments = {{0, schema_.d_ns(), n}};
  }

  std::mt19937_64 rng(seed);
  for (const auto& seg : layout_.segments)
    for (std::size_t j = 0; j < seg.heads; ++j)
      split_proj_.push_back(params_.add("split." + std::to_string(split_proj_.size()), xavier(seg.chunk(), d, rng)));
  action_proj_ = params_.add("action_proj", xavier(schema_.action_width(), w, rng));

  const auto ones = [](std::size_t cols) { return Matrix(1, cols, 1.0); };
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    BlockSlots s;
    if (!ab.wo_hm) s.qm_mix_norm = params_.add(key(l, "qm_mix_norm"), ones(d));
    if (ab.hm_to_sa) {
      s.sa_q = params_.add(key(l, "sa_q"), xavier(d, d, rng));
      s.sa_k = params_.add(key(l, "sa_k"), xavier(d, d, rng));
      s.sa_v = params_.add(key(l, "sa_v"), xavier(d, d, rng));
    }
    if (!ab.wo_qm_ffn) {
      s.qm_ffn_norm = params_.add(key(l, "qm_ffn_norm"), ones(d));
      for (std::size_t i = 0; i < n; ++i) s.qm_ffn.push_back(add_ffn(params_, key(l, "qm_ffn", i), d, r * d, rng));
    }
    if (ab.shared_seq_ffn && l > 0) {
      s.seq_norm = blocks_[0].seq_norm;
      s.seq_ffn = blocks_[0].seq_ffn;
    } else {
      s.seq_norm = params_.add(key(l, "seq_norm"), ones(w));
      s.seq_ffn = add_ffn(params_, key(l, "seq_ffn"), w, r * w, rng);
    }
    for (std::size_t i = 0; i < n; ++i) s.key_proj.push_back(params_.add(key(l, "key", i), xavier(d, d, rng)));
    for (std::size_t i = 0; i < n; ++i) s.value_proj.push_back(params_.add(key(l, "value", i), xavier(d, d, rng)));
    s.of_norm = params_.add(key(l, "of_norm"), ones(d));
    if (ab.shared_of_ffn) {
      s.of_ffn.assign(n, add_ffn(params_, key(l, "of_ffn"), d, r * d, rng));
    } else {
      for (std::size_t i = 0; i < n; ++i) s.of_ffn.push_back(add_ffn(params_, key(l, "of_ffn", i), d, r * d, rng));
    }
    blocks_.push_back(std::move(s));
  }

  const std::size_t hidden = cfg_.task_hidden_width();
  for (std::size_t k = 0; k < cfg_.n_tasks; ++k) {
    const std::string p = "task." + schema_.tasks[k];
    TaskSlots ts;
    ts.w1 = params_.add(p + ".w1", xavier(w, hidden, rng));
    ts.b1 = params_.add(p + ".b1", Matrix(1, hidden));
    ts.w2 = params_.add(p + ".w2", xavier(hidden, 1, rng));
    ts.b2 = params_.add(p + ".b2", Matrix(1, 1));
    tasks_.push_back(ts);
  }
  emb_ = EmbeddingSet::random(schema_, rng());
}

// ---- graph pieces ----------------------------------------------------------

Bound Model::bind(Tape& t, bool trainable) {
  Bound b;
  b.trainable = trainable;
  b.dense.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i)
    b.dense.push_back(t.param(params_.value(i), trainable ? &params_.grad(i) : nullptr));
  return b;
}

Var Model::norm(Tape& t, const Bound& b, std::size_t gain, Var x) {
  return cfg_.ablation.post_ln ? ops::layer_norm_rows(t, x, b.dense[gain], cfg_.norm_eps)
                               : ops::rms_norm_rows(t, x, b.dense[gain], cfg_.norm_eps);
}

Var Model::ffn_rows(Tape& t, const Bound& b, std::span<const FfnSlots> ffn, Var x, std::size_t offset,
                    std::size_t period) {
  std::vector<Var> gate, up, down;
  for (std::size_t i = 0; i < period; ++i) {
    const FfnSlots& f = ffn[ffn.size() == 1 ? 0 : offset + i];
    gate.push_back(b.dense[f.gate]);
    up.push_back(b.dense[f.up]);
    down.push_back(b.dense[f.down]);
  }
  const Var g = ops::head_linear(t, x, gate);
  const Var u = ops::head_linear(t, x, up);
  return ops::head_linear(t, ops::swiglu_gate(t, g, u), down);
}

// Pre-norm: FFN(Norm(x)) + x.  Post-norm: Norm(FFN(x) + x).
Var Model::residual_ffn(Tape& t, const Bound& b, std::size_t gain, std::span<const FfnSlots> ffn, Var x,
                        std::size_t offset, std::size_t period) {
  if (cfg_.ablation.post_ln) return norm(t, b, gain, ops::add(t, ffn_rows(t, b, ffn, x, offset, period), x));
  return ops::add(t, ffn_rows(t, b, ffn, norm(t, b, gain, x), offset, period), x);
}

// Query mixer after the mixing term: P = mixed + X, then the per-head FFN.
Var Model::qm_rows(Tape& t, const Bound& b, const BlockSlots& s, Var x, Var mixed, std::size_t offset,
                   std::size_t period, Var* p_out) {
  Var p = x;
  if (mixed.valid()) {
    p = ops::add(t, mixed, x);
    if (cfg_.ablation.post_ln) p = norm(t, b, s.qm_mix_norm, p);
  }
  if (p_out) *p_out = p;
  if (cfg_.ablation.wo_qm_ffn) return p;
  return residual_ffn(t, b, s.qm_ffn_norm, s.qm_ffn, p, offset, period);
}

Var Model::fuse_attention(Tape& t, Var q, const SequenceSide& seq, std::size_t layer, ops::HeadMap map) {
  return ops::add(t, ops::cross_attention(t, q, seq.keys[layer], seq.values[layer], map), q);
}

Var Model::task_heads(Tape& t, const Bound& b, Var flat) {
  auto scope = t.scope(Component::kTaskHeads, Side::kItem);
  std::vector<Var> logits;
  for (const TaskSlots& ts : tasks_) {
    const Var h = ops::swish(t, ops::linear_bias(t, flat, b.dense[ts.w1], b.dense[ts.b1]));
    logits.push_back(ops::linear_bias(t, h, b.dense[ts.w2], b.dense[ts.b2]));
  }
  return logits.size() == 1 ? logits[0] : ops::concat_cols(t, logits);
}

SequenceSide Model::sequence_side(Tape& t, const Bound& b, const Request& r, bool trainable) {
  const std::size_t n = cfg_.n_heads, d = cfg_.head_dim;
  SequenceSide seq;
  seq.steps = r.seq_len(schema_);
  Var s;
  {
    auto scope = t.scope(Component::kSeqFfn, Side::kUser);
    s = ops::linear(t, embed_action_fields(t, emb_, schema_, r, trainable), b.dense[action_proj_]);
  }
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const BlockSlots& bs = blocks_[l];
    Var h;
    {
      // Every layer reads the raw action embedding s, not the previous layer's h.
      auto scope = t.scope(Component::kSeqFfn, Side::kUser);
      h = ops::reshape(t, residual_ffn(t, b, bs.seq_norm, std::span(&bs.seq_ffn, 1), s, 0, 1), seq.steps * n, d);
    }
    auto scope = t.scope(Component::kKvProj, Side::kUser);
    std::vector<Var> kw, vw;
    for (std::size_t i = 0; i < n; ++i) {
      kw.push_back(b.dense[bs.key_proj[i]]);
      vw.push_back(b.dense[bs.value_proj[i]]);
    }
    seq.keys.push_back(ops::head_linear(t, h, kw));
    seq.values.push_back(ops::head_linear(t, h, vw));
  }
  return seq;
}

Var Model::full_logits(Tape& t, const Bound& b, const Request& r, std::span<const std::size_t> candidates,
                       const SequenceSide& seq, bool trainable, std::vector<LayerActivations>* acts) {
  const std::size_t n = cfg_.n_heads, bsz = candidates.size();
  const auto& ab = cfg_.ablation;
  Var x;
  {
    auto scope = t.scope(Component::kSplitHeads, Side::kItem);
    const Var eu = embed_user_fields(t, emb_, schema_, r, bsz, trainable);
    const Var ei = embed_item_fields(t, emb_, schema_, r, candidates, trainable);
    const std::vector<Var> parts{eu, ei};
    std::vector<Var> w;
    for (auto i : split_proj_) w.push_back(b.dense[i]);
    x = ops::split_project(t, ops::concat_cols(t, parts), layout_.segments, w);
  }
  const Matrix* mask = decoupled() ? &mask_ : nullptr;
  if (acts) acts->clear();
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const BlockSlots& s = blocks_[l];
    Var q;
    {
      auto scope = t.scope(Component::kQueryMixer, Side::kItem);
      Var mixed;
      if (!ab.wo_hm) {
        const Var xn = ab.post_ln ? x : norm(t, b, s.qm_mix_norm, x);
        if (ab.hm_to_sa) {
          mixed = ops::block_self_attention(t, ops::linear(t, xn, b.dense[s.sa_q]), ops::linear(t, xn, b.dense[s.sa_k]),
                                            ops::linear(t, xn, b.dense[s.sa_v]), n);
        } else {
          mixed = ops::head_mix(t, xn, n, mask);
        }
      }
      Var p;
      q = qm_rows(t, b, s, x, mixed, 0, n, &p);
      if (acts) acts->push_back({t.value(p), t.value(q), {}, {}});
    }
    Var z;
    {
      auto scope = t.scope(Component::kAttention, Side::kItem);
      z = fuse_attention(t, q, seq, l, {n, 0, n});
    }
    auto scope = t.scope(Component::kOutputFusion, Side::kItem);
    x = residual_ffn(t, b, s.of_norm, s.of_ffn, z, 0, n);
    if (acts) {
      acts->back().z = t.value(z);
      acts->back().o = t.value(x);
    }
  }
  return task_heads(t, b, ops::reshape(t, x, bsz, cfg_.model_width()));
}

Var Model::split_logits(Tape& t, const Bound& b, const Request& r, std::span<const std::size_t> candidates,
                        const SequenceSide& seq, bool trainable) {
  if (!uses_split_route()) throw ConfigError("split route needs decoupling with at least one user head");
  const std::size_t n = cfg_.n_heads, nu = layout_.n_user, ng = layout_.n_item;
  const auto& ab = cfg_.ablation;
  const ops::Segment useg{0, schema_.d_user(), nu};
  const ops::Segment iseg{0, schema_.d_item(), ng};
  std::vector<Var> wu, wi;
  for (std::size_t j = 0; j < n; ++j) (j < nu ? wu : wi).push_back(b.dense[split_proj_[j]]);

  Var xu, xi;
  {
    auto scope = t.scope(Component::kSplitHeads, Side::kUser);
    xu = ops::split_project(t, embed_user_fields(t, emb_, schema_, r, 1, trainable), std::span(&useg, 1), wu);
  }
  {
    auto scope = t.scope(Component::kSplitHeads, Side::kItem);
    xi = ops::split_project(t, embed_item_fields(t, emb_, schema_, r, candidates, trainable), std::span(&iseg, 1), wi);
  }
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const BlockSlots& s = blocks_[l];
    Var src_u = xu, mu, mi;
    if (!ab.wo_hm) {
      {
        auto scope = t.scope(Component::kQueryMixer, Side::kUser);
        if (!ab.post_ln) src_u = norm(t, b, s.qm_mix_norm, xu);
        mu = ops::head_mix_user(t, src_u, n);
      }
      auto scope = t.scope(Component::kQueryMixer, Side::kItem);
      const Var src_i = ab.post_ln ? xi : norm(t, b, s.qm_mix_norm, xi);
      mi = ops::head_mix_item(t, src_u, src_i, n);
    }
    Var qu, qi;
    {
      auto scope = t.scope(Component::kQueryMixer, Side::kUser);
      qu = qm_rows(t, b, s, xu, mu, 0, nu);
    }
    {
      auto scope = t.scope(Component::kQueryMixer, Side::kItem);
      qi = qm_rows(t, b, s, xi, mi, nu, ng);
    }
    Var zu, zi;
    {
      auto scope = t.scope(Component::kAttention, Side::kUser);
      zu = fuse_attention(t, qu, seq, l, {n, 0, nu});
    }
    {
      auto scope = t.scope(Component::kAttention, Side::kItem);
      zi = fuse_attention(t, qi, seq, l, {n, nu, ng});
    }
    {
      auto scope = t.scope(Component::kOutputFusion, Side::kUser);
      xu = residual_ffn(t, b, s.of_norm, s.of_ffn, zu, 0, nu);
    }
    auto scope = t.scope(Component::kOutputFusion, Side::kItem);
    xi = residual_ffn(t, b, s.of_norm, s.of_ffn, zi, nu, ng);
  }
  Var flat;
  {
    auto scope = t.scope(Component::kTaskHeads, Side::kItem);
    flat = ops::assemble_candidates(t, xu, xi, ng);
  }
  return task_heads(t, b, flat);
}

Var Model::request_logits(Tape& t, const Bound& b, const Request& r, std::span<const std::size_t> candidates,
                          const SequenceSide& seq, bool trainable) {
  return uses_split_route() ? split_logits(t, b, r, candidates, seq, trainable)
                            : full_logits(t, b, r, candidates, seq, trainable);
}

// ---- evaluation ------------------------------------------------------------

Matrix Model::forward(const Request& r, std::size_t candidate, std::vector<LayerActivations>* acts) {
  if (candidate >= r.n_candidates(schema_)) throw LookupError("forward: candidate index out of range");
  Tape t(false);
  const Bound b = bind(t, false);
  const SequenceSide seq = sequence_side(t, b, r, false);
  const std::size_t k[1] = {candidate};
  return t.value(full_logits(t, b, r, k, seq, false, acts));
}

Matrix Model::score_request(const Request& r) {
  Tape t(false);
  const Bound b = bind(t, false);
  const SequenceSide seq = sequence_side(t, b, r, false);
  std::vector<std::size_t> all(r.n_candidates(schema_));
  std::iota(all.begin(), all.end(), std::size_t{0});
  return t.value(request_logits(t, b, r, all, seq, false));
}

FlopsTrace Model::trace_request(const Request& r, bool rlb) {
  const std::size_t k = r.n_candidates(schema_);
  if (rlb) {
    Tape t(false);
    const Bound b = bind(t, false);
    const SequenceSide seq = sequence_side(t, b, r, false);
    std::vector<std::size_t> all(k);
    std::iota(all.begin(), all.end(), std::size_t{0});
    request_logits(t, b, r, all, seq, false);
    return t.trace();
  }
  FlopsTrace total;
  for (std::size_t c = 0; c < k; ++c) {
    Tape t(false);
    const Bound b = bind(t, false);
    const SequenceSide seq = sequence_side(t, b, r, false);
    const std::size_t one[1] = {c};
    request_logits(t, b, r, one, seq, false);
    total += t.trace();
  }
  return total;
}

// ---- checkpoint ------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'X', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_matrix(binio::ByteWriter& w, const Matrix& m) { w.put_all<double>(m.flat()); }

void get_matrix(binio::ByteReader& r, Matrix& m) {
  const auto v = r.get_n<double>(m.size());
  std::copy(v.begin(), v.end(), m.flat().begin());
}

}  // namespace

std::string Model::serialize() const {
  binio::ByteWriter w;
  for (char c : kCheckpointMagic) w.put(c);
  w.put(kCheckpointVersion);
  w.put(train_steps);
  w.put_string(cfg_.to_run_config().serialize());
  w.put_string(schema_.to_text());
  w.put(static_cast<std::uint32_t>(params_.size()));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    w.put_string(params_.name(i));
    w.put(static_cast<std::uint32_t>(params_.value(i).rows()));
    w.put(static_cast<std::uint32_t>(params_.value(i).cols()));
    put_matrix(w, params_.value(i));
    put_matrix(w, params_.rms(i));
  }
  for (const auto* group : {&emb_.nonseq, &emb_.action}) {
    w.put(static_cast<std::uint32_t>(group->size()));
    for (const auto& table : *group) {
      w.put(table.vocab());
      w.put(table.dim());
      put_matrix(w, table.values());
      put_matrix(w, table.accumulator());
    }
  }
  return {w.bytes().begin(), w.bytes().end()};
}

Model Model::deserialize(const std::string& bytes) {
  binio::ByteReader r(std::span<const char>(bytes.data(), bytes.size()), "checkpoint");
  for (char c : kCheckpointMagic)
    if (r.get<char>() != c) throw DataError("not a checkpoint file");
  if (r.get<std::uint32_t>() != kCheckpointVersion) throw DataError("unsupported checkpoint version");
  const auto steps = r.get<std::uint64_t>();
  const ModelConfig cfg = ModelConfig::from_run_config(RunConfig::parse(r.get_string()));
  const FeatureSchema schema = FeatureSchema::from_text(r.get_string());
  Model m(cfg, schema, 0);
  m.train_steps = steps;
  if (r.get<std::uint32_t>() != m.params_.size()) throw DataError("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < m.params_.size(); ++i) {
    const std::string name = r.get_string();
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    if (name != m.params_.name(i) || rows != m.params_.value(i).rows() || cols != m.params_.value(i).cols())
      throw DataError("checkpoint parameter " + std::to_string(i) + " (" + name + ") does not match the config");
    get_matrix(r, m.params_.value(i));
    get_matrix(r, m.params_.rms(i));
  }
  for (auto* group : {&m.emb_.nonseq, &m.emb_.action}) {
    if (r.get<std::uint32_t>() != group->size()) throw DataError("checkpoint table count mismatch");
    for (auto& table : *group) {
      const auto vocab = r.get<std::uint32_t>();
      const auto dim = r.get<std::uint32_t>();
      if (vocab != table.vocab() || dim != table.dim()) throw DataError("checkpoint table shape mismatch");
      get_matrix(r, table.values());
      get_matrix(r, table.accumulator());
    }
  }
  if (!r.done()) throw DataError("checkpoint has trailing bytes");
  return m;
}

void Model::save(const std::filesystem::path& p) const {
  const std::string bytes = serialize();
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + p.string());
}

Model Model::load(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

// ---- standalone ops --------------------------------------------------------

Matrix head_mixing(const Matrix& x, std::size_t n_heads) {
  require_shape(x.rows() == n_heads, "head_mixing: expected " + std::to_string(n_heads) + " rows, got " +
                                         x.shape_str());
  Tape t(false);
  return t.value(ops::head_mix(t, t.constant(x), n_heads));
}

Matrix attention_weights(const Matrix& q, const Matrix& keys) {
  const std::size_t n = q.rows(), d = q.cols();
  require_shape(n > 0 && keys.cols() == d && keys.rows() % n == 0, "attention_weights: shapes");
  const std::size_t steps = keys.rows() / n;
  Matrix w(n, steps);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < n && steps > 0; ++i) {
    std::vector<double> s(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      double acc = 0.0;
      for (std::size_t e = 0; e < d; ++e) acc += q(i, e) * keys(t * n + i, e);
      s[t] = acc * inv_sqrt;
    }
    const auto p = softmax(s);
    std::copy(p.begin(), p.end(), w.row(i).begin());
  }
  return w;
}

Matrix cross_attention(const Matrix& q, const Matrix& keys, const Matrix& values) {
  Tape t(false);
  const Var qv = t.constant(q);
  const ops::HeadMap map{q.rows(), 0, q.rows()};
  return t.value(ops::add(t, ops::cross_attention(t, qv, t.constant(keys), t.constant(values), map), qv));
}

}  // namespace mixformer
