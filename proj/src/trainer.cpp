#include "mixformer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include "mixformer/errors.hpp"
#include "mixformer/mathcore.hpp"

namespace mixformer {

// ---- options ---------------------------------------------------------------

TrainOptions TrainOptions::from_run_config(const RunConfig& rc) {
  TrainOptions o;
  o.opt.dense_lr = rc.get_double("train.dense_lr", o.opt.dense_lr);
  o.opt.rms_decay = rc.get_double("train.rms_decay", o.opt.rms_decay);
  o.opt.rms_eps = rc.get_double("train.rms_eps", o.opt.rms_eps);
  o.opt.sparse_lr = rc.get_double("train.sparse_lr", o.opt.sparse_lr);
  o.opt.adagrad_eps = rc.get_double("train.adagrad_eps", o.opt.adagrad_eps);
  o.batch_impressions = rc.get_u64("train.batch", o.batch_impressions);
  o.epochs = rc.get_u64("train.epochs", o.epochs);
  o.seed = rc.get_u64("train.seed", o.seed);
  o.eval_every = rc.get_u64("train.eval_every", o.eval_every);
  o.weighted_uauc = rc.get_bool("train.weighted_uauc", o.weighted_uauc);
  if (o.batch_impressions == 0) throw ConfigError("train.batch must be positive");
  if (o.opt.rms_decay < 0.0 || o.opt.rms_decay >= 1.0) throw ConfigError("train.rms_decay must be in [0, 1)");
  if (o.opt.dense_lr < 0.0 || o.opt.sparse_lr < 0.0) throw ConfigError("learning rates must be non-negative");
  return o;
}

RunConfig TrainOptions::to_run_config() const {
  RunConfig rc;
  const auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  rc.set("train.dense_lr", num(opt.dense_lr));
  rc.set("train.rms_decay", num(opt.rms_decay));
  rc.set("train.rms_eps", num(opt.rms_eps));
  rc.set("train.sparse_lr", num(opt.sparse_lr));
  rc.set("train.adagrad_eps", num(opt.adagrad_eps));
  rc.set("train.batch", std::to_string(batch_impressions));
  rc.set("train.epochs", std::to_string(epochs));
  rc.set("train.seed", std::to_string(seed));
  rc.set("train.eval_every", std::to_string(eval_every));
  rc.set("train.weighted_uauc", weighted_uauc ? "true" : "false");
  return rc;
}

// ---- optimizer -------------------------------------------------------------

void apply_optimizer(ParameterStore& dense, EmbeddingSet& sparse, const OptimizerConfig& opt) {
  for (std::size_t i = 0; i < dense.size(); ++i) {
    auto w = dense.value(i).flat();
    auto g = dense.grad(i).flat();
    auto ms = dense.rms(i).flat();
    for (std::size_t j = 0; j < w.size(); ++j) {
      ms[j] = opt.rms_decay * ms[j] + (1.0 - opt.rms_decay) * g[j] * g[j];
      w[j] -= opt.dense_lr * g[j] / (std::sqrt(ms[j]) + opt.rms_eps);
    }
  }
  dense.zero_grad();

  for (auto* group : {&sparse.nonseq, &sparse.action})
    for (auto& table : *group) {
      for (const std::uint32_t id : table.touched()) {
        auto w = table.values().row(id);
        auto acc = table.accumulator().row(id);
        const auto g = table.grad_row(id);
        for (std::size_t j = 0; j < w.size(); ++j) {
          acc[j] += g[j] * g[j];
          w[j] -= opt.sparse_lr * g[j] / (std::sqrt(acc[j]) + opt.adagrad_eps);
        }
      }
      table.clear_grad();
    }
}

// ---- learners --------------------------------------------------------------

Matrix Learner::score(const Request& r) {
  Tape t(false);
  return t.value(logits(t, r, false));
}

Var ModelLearner::logits(Tape& t, const Request& r, bool trainable) {
  // One bind per call keeps the interface simple; binding is a pointer copy
  // per parameter.
  const Bound b = m_.bind(t, trainable);
  const SequenceSide seq = m_.sequence_side(t, b, r, trainable);
  std::vector<std::size_t> all(r.n_candidates(m_.schema()));
  std::iota(all.begin(), all.end(), std::size_t{0});
  return m_.request_logits(t, b, r, all, seq, trainable);
}

LogisticBaseline::LogisticBaseline(FeatureSchema schema, std::uint64_t seed) : schema_(std::move(schema)) {
  schema_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t width = schema_.d_user() + schema_.d_item() + schema_.action_width();
  Matrix w(width, schema_.n_tasks());
  xavier_uniform(w, width, schema_.n_tasks(), rng);
  params_.add("baseline.w", std::move(w));
  params_.add("baseline.b", Matrix(1, schema_.n_tasks()));
  emb_ = EmbeddingSet::random(schema_, rng());
}

Var LogisticBaseline::logits(Tape& t, const Request& r, bool trainable) {
  const std::size_t k = r.n_candidates(schema_);
  const std::size_t steps = r.seq_len(schema_);
  std::vector<std::size_t> all(k);
  std::iota(all.begin(), all.end(), std::size_t{0});

  const Var user = embed_user_fields(t, emb_, schema_, r, k, trainable);
  const Var items = embed_item_fields(t, emb_, schema_, r, all, trainable);
  Var pooled;
  if (steps > 0) {
    const Var acts = embed_action_fields(t, emb_, schema_, r, trainable);
    pooled = ops::linear(t, t.constant(Matrix(1, steps, 1.0 / static_cast<double>(steps))), acts);
  } else {
    pooled = t.constant(Matrix(1, schema_.action_width()));
  }
  const Var repeated = ops::linear(t, t.constant(Matrix(k, 1, 1.0)), pooled);
  const Var parts[3] = {user, items, repeated};
  const Var x = ops::concat_cols(t, parts);
  const Var w = t.param(params_.value(0), trainable ? &params_.grad(0) : nullptr);
  const Var b = t.param(params_.value(1), trainable ? &params_.grad(1) : nullptr);
  return ops::linear_bias(t, x, w, b);
}

// ---- training --------------------------------------------------------------

namespace {

Matrix label_matrix(const Request& r, const FeatureSchema& s) {
  const std::size_t k = r.n_candidates(s);
  if (r.labels.size() != k * s.n_tasks()) throw DataError("request has no labels");
  Matrix y(k, s.n_tasks());
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < s.n_tasks(); ++j) y(c, j) = r.label(s, c, j) ? 1.0 : 0.0;
  return y;
}

}  // namespace

double train_step(Learner& l, std::span<const Request* const> batch, const OptimizerConfig& opt) {
  if (batch.empty()) throw DataError("train_step: empty batch");
  Tape t(true);
  std::vector<Var> losses;
  std::size_t impressions = 0;
  for (const Request* r : batch) {
    const Var z = l.logits(t, *r, true);
    losses.push_back(ops::bce_with_logits(t, z, label_matrix(*r, l.schema())));
    impressions += r->n_candidates(l.schema());
  }
  Var total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) total = ops::add(t, total, losses[i]);
  const Var loss = ops::scale(t, total, 1.0 / static_cast<double>(impressions));
  const double value = t.value(loss)(0, 0);
  if (!std::isfinite(value)) {
    l.params().zero_grad();
    l.embeddings().clear_grad();
    throw NumericError("non-finite training loss at step " + std::to_string(l.steps()));
  }
  t.backward(loss);
  apply_optimizer(l.params(), l.embeddings(), opt);
  ++l.steps();
  return value;
}

std::vector<std::vector<const Request*>> epoch_batches(const Dataset& d, std::size_t batch_impressions,
                                                       std::uint64_t seed, std::size_t epoch) {
  if (batch_impressions == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(d.requests.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * (epoch + 1)));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<const Request*>> out;
  std::vector<const Request*> cur;
  std::size_t n = 0;
  for (const std::size_t i : order) {
    const Request& r = d.requests[i];
    if (r.n_candidates(d.schema) == 0) continue;
    cur.push_back(&r);
    n += r.n_candidates(d.schema);
    if (n >= batch_impressions) {
      out.push_back(std::move(cur));
      cur.clear();
      n = 0;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<double> train_epoch(Learner& l, const Dataset& d, const TrainOptions& o, std::size_t epoch) {
  std::vector<double> losses;
  for (const auto& b : epoch_batches(d, o.batch_impressions, o.seed, epoch))
    losses.push_back(train_step(l, b, o.opt));
  return losses;
}

std::vector<StepRecord> train(Learner& l, const Dataset& d, const TrainOptions& o, const Dataset* holdout,
                              std::size_t max_steps) {
  std::vector<StepRecord> log;
  std::uint64_t global = 0;
  std::size_t fresh = 0;
  for (std::size_t e = 0; e < o.epochs; ++e) {
    for (const auto& b : epoch_batches(d, o.batch_impressions, o.seed, e)) {
      if (global++ < l.steps()) continue;  // already applied before the checkpoint
      if (max_steps != 0 && fresh == max_steps) return log;
      StepRecord rec;
      rec.loss = train_step(l, b, o.opt);
      rec.step = l.steps();
      ++fresh;
      if (holdout && o.eval_every != 0 && rec.step % o.eval_every == 0)
        rec.holdout_auc = evaluate(l, *holdout, o.weighted_uauc).mean_auc();
      log.push_back(rec);
    }
  }
  if (holdout && !log.empty() && log.back().holdout_auc < 0.0)
    log.back().holdout_auc = evaluate(l, *holdout, o.weighted_uauc).mean_auc();
  return log;
}

// ---- metrics ---------------------------------------------------------------

double MetricSummary::mean_auc() const {
  return auc.empty() ? 0.0 : std::accumulate(auc.begin(), auc.end(), 0.0) / static_cast<double>(auc.size());
}

double MetricSummary::mean_uauc() const {
  return uauc.empty() ? 0.0 : std::accumulate(uauc.begin(), uauc.end(), 0.0) / static_cast<double>(uauc.size());
}

double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: scores and labels differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t m = i; m < j; ++m)
      if (labels[idx[m]]) {
        pos_rank_sum += avg_rank;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw MetricError("auc: need both positive and negative labels");
  const double p = static_cast<double>(pos);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

double uauc(std::span<const double> scores, std::span<const std::uint8_t> labels,
            std::span<const std::uint64_t> user_ids, bool weighted) {
  if (scores.size() != labels.size() || scores.size() != user_ids.size())
    throw ShapeError("uauc: scores, labels and user ids differ in length");
  std::map<std::uint64_t, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < user_ids.size(); ++i) by_user[user_ids[i]].push_back(i);
  double sum = 0.0, weight = 0.0;
  for (const auto& [user, rows] : by_user) {
    std::vector<double> s;
    std::vector<std::uint8_t> y;
    std::size_t pos = 0;
    for (const std::size_t i : rows) {
      s.push_back(scores[i]);
      y.push_back(labels[i]);
      pos += labels[i] ? 1 : 0;
    }
    if (pos == 0 || pos == rows.size()) continue;
    const double w = weighted ? static_cast<double>(rows.size()) : 1.0;
    sum += w * auc(s, y);
    weight += w;
  }
  if (weight == 0.0) throw MetricError("uauc: no user has both positive and negative labels");
  return sum / weight;
}

Matrix score_dataset(Learner& l, const Dataset& d) {
  const FeatureSchema& s = d.schema;
  std::vector<std::size_t> offset(d.requests.size() + 1, 0);
  for (std::size_t i = 0; i < d.requests.size(); ++i) offset[i + 1] = offset[i] + d.requests[i].n_candidates(s);
  Matrix out(offset.back(), s.n_tasks());
  const auto n = static_cast<std::ptrdiff_t>(d.requests.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    const Matrix z = l.score(d.requests[u]);
    for (std::size_t c = 0; c < z.rows(); ++c)
      for (std::size_t j = 0; j < z.cols(); ++j) out(offset[u] + c, j) = z(c, j);
  }
  return out;
}

MetricSummary summarize(const Matrix& logits, const Dataset& d, bool weighted_uauc) {
  const FeatureSchema& s = d.schema;
  if (logits.rows() != d.impressions() || logits.cols() != s.n_tasks())
    throw ShapeError("summarize: logits do not match the dataset");
  std::vector<std::uint64_t> users;
  std::vector<std::vector<std::uint8_t>> labels(s.n_tasks());
  for (const Request& r : d.requests) {
    const std::size_t k = r.n_candidates(s);
    if (r.labels.size() != k * s.n_tasks()) throw DataError("summarize: unlabeled request");
    for (std::size_t c = 0; c < k; ++c) {
      users.push_back(r.user_id);
      for (std::size_t j = 0; j < s.n_tasks(); ++j) labels[j].push_back(r.label(s, c, j) ? 1 : 0);
    }
  }
  MetricSummary m;
  double ll = 0.0;
  for (std::size_t j = 0; j < s.n_tasks(); ++j) {
    std::vector<double> z(logits.rows());
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] = logits(i, j);
      // softplus(z) - y z
      ll += std::max(z[i], 0.0) + std::log1p(std::exp(-std::abs(z[i]))) - (labels[j][i] ? z[i] : 0.0);
    }
    m.auc.push_back(auc(z, labels[j]));
    m.uauc.push_back(uauc(z, labels[j], users, weighted_uauc));
    if (j == 0) {
      std::unordered_map<std::uint64_t, std::uint8_t> seen;  // bit 0: negative, bit 1: positive
      for (std::size_t i = 0; i < users.size(); ++i) seen[users[i]] |= labels[0][i] ? 2 : 1;
      for (const auto& [u, bits] : seen) m.n_users += bits == 3 ? 1 : 0;
    }
  }
  m.logloss = ll / static_cast<double>(logits.rows() * std::max<std::size_t>(s.n_tasks(), 1));
  return m;
}

MetricSummary evaluate(Learner& l, const Dataset& d, bool weighted_uauc) {
  return summarize(score_dataset(l, d), d, weighted_uauc);
}

// ---- ablations -------------------------------------------------------------

std::vector<std::string> config_diff(const ModelConfig& a, const ModelConfig& b) {
  const auto va = a.to_run_config().values();
  const auto vb = b.to_run_config().values();
  std::vector<std::string> keys;
  for (const auto& [k, v] : va) {
    const auto it = vb.find(k);
    if (it == vb.end() || it->second != v) keys.push_back(k);
  }
  for (const auto& [k, v] : vb)
    if (!va.contains(k)) keys.push_back(k);
  return keys;
}

AblationResult run_ablation(const std::string& name, const ModelConfig& base, const MetricSummary& base_metrics,
                            const Dataset& train_data, const Dataset& holdout, const TrainOptions& o,
                            std::uint64_t model_seed) {
  const ModelConfig cfg = apply_ablation(base, name);
  Model m(cfg, train_data.schema, model_seed);
  ModelLearner l(m);
  AblationResult r;
  r.name = name;
  r.changed_keys = config_diff(base, cfg);
  r.params = m.params().count();
  try {
    const auto log = train(l, train_data, o);
    r.final_loss = log.empty() ? 0.0 : log.back().loss;
  } catch (const NumericError&) {
    r.losses_finite = false;
    return r;
  }
  r.metrics = evaluate(l, holdout, o.weighted_uauc);
  r.delta_auc = r.metrics.mean_auc() - base_metrics.mean_auc();
  r.delta_uauc = r.metrics.mean_uauc() - base_metrics.mean_uauc();
  return r;
}

// ---- logs ------------------------------------------------------------------

namespace {

void comment_lines(std::ostream& os, const std::string& header) {
  std::istringstream in(header);
  std::string line;
  while (std::getline(in, line)) os << "# " << line << '\n';
}

}  // namespace

void write_train_log_csv(std::ostream& os, const std::vector<StepRecord>& log, const std::string& header) {
  comment_lines(os, header);
  os << "step,loss,holdout_auc\n";
  os.precision(10);
  for (const auto& r : log) {
    os << r.step << ',' << r.loss << ',';
    if (r.holdout_auc >= 0.0) os << r.holdout_auc;
    os << '\n';
  }
}

void write_ablation_csv(std::ostream& os, const std::vector<AblationResult>& rows, const std::string& header) {
  comment_lines(os, header);
  os << "variant,changed_keys,params,final_loss,finite,auc,uauc,delta_auc,delta_uauc\n";
  os.precision(6);
  for (const auto& r : rows) {
    std::string keys;
    for (const auto& k : r.changed_keys) keys += (keys.empty() ? "" : ";") + k;
    os << r.name << ',' << keys << ',' << r.params << ',' << r.final_loss << ',' << (r.losses_finite ? 1 : 0) << ','
       << r.metrics.mean_auc() << ',' << r.metrics.mean_uauc() << ',' << r.delta_auc << ',' << r.delta_uauc << '\n';
  }
}

}  // namespace mixformer
