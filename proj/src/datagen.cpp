#include "mixformer/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "mixformer/errors.hpp"
#include "mixformer/mathcore.hpp"

namespace mixformer {

// ---- spec ------------------------------------------------------------------

GeneratorSpec GeneratorSpec::from_run_config(const RunConfig& rc) {
  GeneratorSpec g;
  g.n_users = rc.get_u64("gen.users", g.n_users);
  g.n_items = rc.get_u64("gen.items", g.n_items);
  g.n_categories = rc.get_u64("gen.categories", g.n_categories);
  g.latent_dim = rc.get_u64("gen.latent_dim", g.latent_dim);
  g.interests = rc.get_u64("gen.interests", g.interests);
  g.n_requests = rc.get_u64("gen.requests", g.n_requests);
  g.candidates = rc.get_u64("gen.candidates", g.candidates);
  g.min_seq = rc.get_u64("gen.min_seq", g.min_seq);
  g.max_seq = rc.get_u64("gen.max_seq", g.max_seq);
  g.item_spread = rc.get_double("gen.item_spread", g.item_spread);
  g.user_spread = rc.get_double("gen.user_spread", g.user_spread);
  g.beta = rc.get_double("gen.beta", g.beta);
  g.explore = rc.get_double("gen.explore", g.explore);
  g.match_threshold = rc.get_double("gen.match_threshold", g.match_threshold);
  g.match_cap = rc.get_u64("gen.match_cap", g.match_cap);
  g.w_inter = rc.get_double("gen.w_inter", g.w_inter);
  g.w_seq = rc.get_double("gen.w_seq", g.w_seq);
  g.temperature = rc.get_double("gen.temperature", g.temperature);
  g.bias = rc.get_double("gen.bias", g.bias);
  g.holdout_fraction = rc.get_double("gen.holdout_fraction", g.holdout_fraction);
  g.seed = rc.get_u64("gen.seed", g.seed);
  g.validate();
  return g;
}

RunConfig GeneratorSpec::to_run_config() const {
  RunConfig rc;
  const auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  const auto u = [](std::uint64_t v) { return std::to_string(v); };
  rc.set("gen.users", u(n_users));
  rc.set("gen.items", u(n_items));
  rc.set("gen.categories", u(n_categories));
  rc.set("gen.latent_dim", u(latent_dim));
  rc.set("gen.interests", u(interests));
  rc.set("gen.requests", u(n_requests));
  rc.set("gen.candidates", u(candidates));
  rc.set("gen.min_seq", u(min_seq));
  rc.set("gen.max_seq", u(max_seq));
  rc.set("gen.item_spread", num(item_spread));
  rc.set("gen.user_spread", num(user_spread));
  rc.set("gen.beta", num(beta));
  rc.set("gen.explore", num(explore));
  rc.set("gen.match_threshold", num(match_threshold));
  rc.set("gen.match_cap", u(match_cap));
  rc.set("gen.w_inter", num(w_inter));
  rc.set("gen.w_seq", num(w_seq));
  rc.set("gen.temperature", num(temperature));
  rc.set("gen.bias", num(bias));
  rc.set("gen.holdout_fraction", num(holdout_fraction));
  rc.set("gen.seed", u(seed));
  return rc;
}

void GeneratorSpec::validate() const {
  const auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("generator: ") + what);
  };
  need(n_users > 0 && n_items > 0 && n_categories > 0 && latent_dim > 0, "sizes must be positive");
  need(n_categories <= n_items, "more categories than items");
  need(interests >= 1 && interests <= n_categories, "interests must be in [1, categories]");
  need(candidates > 0, "candidates must be positive");
  need(min_seq <= max_seq, "min_seq > max_seq");
  need(n_items <= 0xffffffffULL && n_users <= 0xffffffffULL, "vocabulary too large");
  for (double v : {item_spread, user_spread, beta, explore, match_threshold, w_inter, w_seq, temperature, bias,
                   holdout_fraction})
    need(std::isfinite(v), "weights must be finite");
  need(temperature > 0.0, "temperature must be positive");
  need(explore >= 0.0 && explore <= 1.0, "explore must be in [0, 1]");
  need(holdout_fraction >= 0.0 && holdout_fraction < 1.0, "holdout_fraction must be in [0, 1)");
}

FeatureSchema GeneratorSpec::schema() const {
  const auto cat = static_cast<std::uint32_t>(n_categories);
  const auto items = static_cast<std::uint32_t>(n_items);
  FeatureSchema s;
  s.nonseq = {
      {"user_id", static_cast<std::uint32_t>(n_users), 8, FieldSide::kUser},
      {"user_segment", cat, 8, FieldSide::kUser},
      {"hour", 24, 4, FieldSide::kContext},
      {"item_id", items, 16, FieldSide::kItem},
      {"item_category", cat, 8, FieldSide::kItem},
  };
  s.action = {
      {"seq_item_id", items, 16, FieldSide::kItem},
      {"seq_category", cat, 8, FieldSide::kItem},
      {"action_type", 3, 4, FieldSide::kItem},
      {"recency", 32, 4, FieldSide::kItem},
  };
  s.max_seq_len = static_cast<std::uint32_t>(max_seq);
  s.tasks = {"finish", "skip"};
  return s;
}

// ---- generation ------------------------------------------------------------

namespace {

constexpr std::size_t kTasks = 2;

/// Independent stream per (purpose, index).
std::mt19937_64 stream(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

void normalize(std::span<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0.0)
    for (double& x : v) x /= n;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Label-free draw: features, the signal of every candidate and the uniforms
/// that turn probabilities into labels. Temperature and bias only enter
/// later, so calibration reuses one draft.
struct Draft {
  FeatureSchema schema;
  std::vector<Request> train, holdout;
  std::vector<double> train_signal, holdout_signal;    // per impression
  std::vector<double> train_uniform, holdout_uniform;  // per impression and task
};

struct UserDraft {
  std::vector<Request> requests;
  std::vector<std::uint8_t> is_holdout;
  std::vector<double> signal, uniform;  // request-major
};

Draft draft(const GeneratorSpec& g) {
  g.validate();
  const std::size_t dim = g.latent_dim;
  std::mt19937_64 world = stream(g.seed, 0, 0);
  std::normal_distribution<double> normal(0.0, 1.0);

  Matrix centres(g.n_categories, dim);
  for (std::size_t c = 0; c < g.n_categories; ++c) {
    for (double& x : centres.row(c)) x = normal(world);
    normalize(centres.row(c));
  }
  std::vector<std::uint32_t> item_cat(g.n_items);
  Matrix items(g.n_items, dim);
  for (std::size_t i = 0; i < g.n_items; ++i) {
    // every category gets items; the rest are assigned at random
    item_cat[i] = static_cast<std::uint32_t>(i < g.n_categories ? i : world() % g.n_categories);
    auto v = items.row(i);
    const auto c = centres.row(item_cat[i]);
    for (std::size_t j = 0; j < dim; ++j) v[j] = c[j] + g.item_spread * normal(world);
    normalize(v);
  }

  Draft d;
  d.schema = g.schema();
  const std::size_t k = g.candidates;
  std::vector<UserDraft> users(g.n_users);

#pragma omp parallel for schedule(dynamic, 64)
  for (std::ptrdiff_t ui = 0; ui < static_cast<std::ptrdiff_t>(g.n_users); ++ui) {
    const auto user = static_cast<std::uint64_t>(ui);
    const std::uint64_t n_req = g.n_requests / g.n_users + (user < g.n_requests % g.n_users ? 1 : 0);
    if (n_req == 0) continue;
    std::mt19937_64 rng = stream(g.seed, 1, user);
    std::mt19937_64 coin = stream(g.seed, 2, user);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<std::uint32_t> interests;
    while (interests.size() < g.interests) {
      const auto c = static_cast<std::uint32_t>(rng() % g.n_categories);
      if (std::find(interests.begin(), interests.end(), c) == interests.end()) interests.push_back(c);
    }
    std::vector<double> u(dim, 0.0);
    for (auto c : interests)
      for (std::size_t j = 0; j < dim; ++j) u[j] += centres(c, j);
    for (std::size_t j = 0; j < dim; ++j) u[j] += g.user_spread * gauss(rng);
    normalize(u);

    std::vector<double> affinity(g.n_items);
    for (std::size_t i = 0; i < g.n_items; ++i) affinity[i] = dot(u, items.row(i));
    std::vector<double> weight(g.n_items);
    const double top = *std::max_element(affinity.begin(), affinity.end());
    for (std::size_t i = 0; i < g.n_items; ++i) weight[i] = std::exp(g.beta * (affinity[i] - top));
    std::discrete_distribution<std::uint32_t> by_affinity(weight.begin(), weight.end());

    UserDraft& out = users[user];
    for (std::uint64_t q = 0; q < n_req; ++q) {
      Request r;
      r.user_id = user;
      r.user_ids = {static_cast<std::uint32_t>(user), interests[0], static_cast<std::uint32_t>(rng() % 24)};
      const std::uint64_t steps = g.min_seq + rng() % (g.max_seq - g.min_seq + 1);
      std::vector<std::uint32_t> seq_items(steps);
      std::vector<std::uint64_t> age(steps);
      double clock = 0.0;
      for (std::uint64_t t = steps; t-- > 0;) {  // oldest first, so accumulate ages backwards
        clock += -3600.0 * std::log(1.0 - unit(rng));
        age[t] = static_cast<std::uint64_t>(clock);
      }
      for (std::uint64_t t = 0; t < steps; ++t) {
        seq_items[t] = by_affinity(rng);
        r.sequence.insert(r.sequence.end(), {seq_items[t], item_cat[seq_items[t]],
                                             static_cast<std::uint32_t>(rng() % 3), recency_bucket(age[t])});
      }
      for (std::size_t c = 0; c < k; ++c) {
        const std::uint32_t item = unit(rng) < g.explore ? static_cast<std::uint32_t>(rng() % g.n_items)
                                                        : by_affinity(rng);
        r.candidates.insert(r.candidates.end(), {item, item_cat[item]});
        std::uint64_t match = 0;
        for (auto s : seq_items)
          if (dot(items.row(s), items.row(item)) > g.match_threshold) ++match;
        match = std::min(match, g.match_cap);
        out.signal.push_back(g.w_inter * affinity[item] + g.w_seq * static_cast<double>(match));
        for (std::size_t j = 0; j < kTasks; ++j) out.uniform.push_back(unit(coin));
      }
      out.is_holdout.push_back(unit(rng) < g.holdout_fraction ? 1 : 0);
      out.requests.push_back(std::move(r));
    }
  }

  for (auto& ud : users)
    for (std::size_t q = 0; q < ud.requests.size(); ++q) {
      const bool h = ud.is_holdout[q] != 0;
      auto& sig = h ? d.holdout_signal : d.train_signal;
      auto& uni = h ? d.holdout_uniform : d.train_uniform;
      sig.insert(sig.end(), ud.signal.begin() + static_cast<std::ptrdiff_t>(q * k),
                 ud.signal.begin() + static_cast<std::ptrdiff_t>((q + 1) * k));
      uni.insert(uni.end(), ud.uniform.begin() + static_cast<std::ptrdiff_t>(q * k * kTasks),
                 ud.uniform.begin() + static_cast<std::ptrdiff_t>((q + 1) * k * kTasks));
      (h ? d.holdout : d.train).push_back(std::move(ud.requests[q]));
    }
  return d;
}

double mean_signal(const Draft& d) {
  double s = 0.0;
  for (double x : d.train_signal) s += x;
  for (double x : d.holdout_signal) s += x;
  const std::size_t n = d.train_signal.size() + d.holdout_signal.size();
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

/// Fills labels and returns the oracle probabilities.
Matrix label(std::vector<Request>& reqs, const std::vector<double>& signal, const std::vector<double>& uniform,
             double centre, double temperature, double bias, std::size_t k) {
  Matrix p(signal.size(), kTasks);
  for (std::size_t i = 0; i < signal.size(); ++i) {
    const double z = (signal[i] - centre) / temperature;
    p(i, 0) = sigmoid(z + bias);
    p(i, 1) = sigmoid(-z + bias);
  }
  for (std::size_t q = 0; q < reqs.size(); ++q) {
    auto& r = reqs[q];
    r.labels.assign(k * kTasks, 0);
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t j = 0; j < kTasks; ++j) {
        const std::size_t i = q * k + c;
        r.labels[c * kTasks + j] = uniform[i * kTasks + j] < p(i, j) ? 1 : 0;
      }
  }
  return p;
}

GeneratedData finish(Draft d, const GeneratorSpec& g) {
  const double centre = mean_signal(d);
  GeneratedData out;
  out.train_oracle = label(d.train, d.train_signal, d.train_uniform, centre, g.temperature, g.bias, g.candidates);
  out.holdout_oracle =
      label(d.holdout, d.holdout_signal, d.holdout_uniform, centre, g.temperature, g.bias, g.candidates);
  out.train = Dataset{d.schema, std::move(d.train)};
  out.holdout = Dataset{d.schema, std::move(d.holdout)};
  return out;
}

/// Oracle AUC over train and holdout together.
double pooled_oracle_auc(const GeneratedData& gd) {
  double sum = 0.0;
  for (std::size_t j = 0; j < kTasks; ++j) {
    std::vector<double> s;
    std::vector<std::uint8_t> y;
    for (const auto* part : {&gd.train, &gd.holdout}) {
      const Matrix& p = part == &gd.train ? gd.train_oracle : gd.holdout_oracle;
      std::size_t i = 0;
      for (const auto& r : part->requests)
        for (std::size_t c = 0; c < r.n_candidates(part->schema); ++c, ++i) {
          s.push_back(p(i, j));
          y.push_back(r.label(part->schema, c, j) ? 1 : 0);
        }
    }
    sum += auc(s, y);
  }
  return sum / kTasks;
}

}  // namespace

GeneratedData generate(const GeneratorSpec& spec) { return finish(draft(spec), spec); }

double oracle_auc(const Matrix& probs, const Dataset& d) { return summarize(probs, d).mean_auc(); }

GeneratorSpec calibrate_temperature(GeneratorSpec spec, double lo, double hi) {
  const Draft base = draft(spec);
  const auto probe = [&](double log_tau) {
    spec.temperature = std::exp(log_tau);
    return pooled_oracle_auc(finish(base, spec));
  };
  // AUC falls as the temperature rises.
  double a = std::log(1e-4), b = std::log(1e4);
  if (probe(a) < lo || probe(b) > hi)
    throw ConfigError("generator signal cannot reach oracle AUC in [" + std::to_string(lo) + ", " +
                      std::to_string(hi) + "]");
  for (int it = 0; it < 100; ++it) {
    const double m = 0.5 * (a + b);
    const double v = probe(m);
    if (v >= lo && v <= hi) return spec;
    (v > hi ? a : b) = m;
  }
  throw ConfigError("temperature bisection did not converge");
}

// ---- files -----------------------------------------------------------------

void write_oracle_csv(const std::filesystem::path& p, const Matrix& probs, const FeatureSchema& s,
                      const std::string& header) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write oracle file " + p.string());
  std::istringstream in(header);
  std::string line;
  while (std::getline(in, line)) out << "# " << line << '\n';
  out << "impression";
  for (const auto& t : s.tasks) out << ",p_" << t;
  out << '\n';
  out.precision(17);
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    out << i;
    for (std::size_t j = 0; j < probs.cols(); ++j) out << ',' << probs(i, j);
    out << '\n';
  }
  if (!out) throw DataError("failed writing oracle file " + p.string());
}

Matrix read_oracle_csv(const std::filesystem::path& p, std::size_t n_tasks) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot read oracle file " + p.string());
  std::string line;
  std::vector<double> vals;
  bool header = false;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    std::istringstream row(line);
    std::string cell;
    std::getline(row, cell, ',');
    if (std::stoull(cell) != rows) throw DataError("oracle file: impressions out of order");
    for (std::size_t j = 0; j < n_tasks; ++j) {
      if (!std::getline(row, cell, ',')) throw DataError("oracle file: short row");
      vals.push_back(std::stod(cell));
    }
    ++rows;
  }
  return Matrix(rows, n_tasks, std::move(vals));
}

MetricSummary baseline_score(const Dataset& train_data, const Dataset& holdout, const TrainOptions& o,
                             std::uint64_t seed) {
  LogisticBaseline l(train_data.schema, seed);
  train(l, train_data, o);
  return evaluate(l, holdout, o.weighted_uauc);
}

}  // namespace mixformer
