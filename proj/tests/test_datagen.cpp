#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "mixformer/datagen.hpp"

using namespace mixformer;

namespace {

GeneratorSpec small_spec() {
  GeneratorSpec g;
  g.n_users = 300;
  g.n_items = 400;
  g.n_requests = 600;
  g.max_seq = 32;
  return g;
}

}  // namespace

TEST_CASE("generated data is valid and sized by the spec") {
  const GeneratorSpec g = small_spec();
  const GeneratedData gd = generate(g);
  const auto s = g.schema();
  CHECK(gd.train.requests.size() + gd.holdout.requests.size() == g.n_requests);
  CHECK(gd.train_oracle.rows() == gd.train.impressions());
  CHECK(gd.holdout_oracle.cols() == 2);
  const double share = static_cast<double>(gd.holdout.requests.size()) / g.n_requests;
  CHECK(std::abs(share - g.holdout_fraction) < 0.06);
  for (const auto* d : {&gd.train, &gd.holdout})
    for (const auto& r : d->requests) {
      r.validate(s);
      CHECK(r.n_candidates(s) == g.candidates);
      CHECK(r.seq_len(s) >= g.min_seq);
      CHECK(r.seq_len(s) <= g.max_seq);
    }
}

TEST_CASE("zero signal gives chance-level oracle and baseline") {
  GeneratorSpec g = small_spec();
  g.n_requests = 2000;
  g.w_inter = 0.0;
  g.w_seq = 0.0;
  g.bias = 0.5;
  g.holdout_fraction = 0.5;
  const GeneratedData gd = generate(g);
  CHECK(oracle_auc(gd.holdout_oracle, gd.holdout) == 0.5);

  // Label marginal within 4 binomial standard errors of sigmoid(bias).
  double pos = 0.0, n = 0.0;
  for (const auto& r : gd.train.requests)
    for (auto y : r.labels) {
      pos += y;
      n += 1;
    }
  const double p = 1.0 / (1.0 + std::exp(-0.5));
  CHECK(std::abs(pos / n - p) < 4.0 * std::sqrt(p * (1 - p) / n));

  TrainOptions o;
  o.opt.dense_lr = 1e-3;
  const double base = baseline_score(gd.train, gd.holdout, o, 1).mean_auc();
  CHECK(base >= 0.48);
  CHECK(base <= 0.52);
}

TEST_CASE("same seed gives identical data, different seed does not") {
  const GeneratorSpec g = small_spec();
  const GeneratedData a = generate(g), b = generate(g);
  CHECK(a.train == b.train);
  CHECK(a.holdout_oracle == b.holdout_oracle);
  GeneratorSpec h = g;
  h.seed = 2;
  CHECK(!(generate(h).train == a.train));
}

TEST_CASE("temperature calibration lands in the oracle band") {
  const GeneratorSpec g = calibrate_temperature(small_spec());
  const GeneratedData gd = generate(g);
  const double pooled = [&] {
    Dataset all = gd.train;
    all.requests.insert(all.requests.end(), gd.holdout.requests.begin(), gd.holdout.requests.end());
    Matrix probs(gd.train_oracle.rows() + gd.holdout_oracle.rows(), 2);
    std::copy(gd.train_oracle.flat().begin(), gd.train_oracle.flat().end(), probs.flat().begin());
    std::copy(gd.holdout_oracle.flat().begin(), gd.holdout_oracle.flat().end(),
              probs.flat().begin() + gd.train_oracle.size());
    return oracle_auc(probs, all);
  }();
  CHECK(pooled >= 0.84);
  CHECK(pooled <= 0.86);

  GeneratorSpec flat = small_spec();
  flat.w_inter = flat.w_seq = 0.0;
  CHECK_THROWS_AS(calibrate_temperature(flat), ConfigError);
}

TEST_CASE("oracle csv round-trip") {
  const GeneratorSpec g = small_spec();
  const GeneratedData gd = generate(g);
  const auto p = std::filesystem::temp_directory_path() / "mixformer_test_oracle.csv";
  write_oracle_csv(p, gd.holdout_oracle, gd.holdout.schema, "seed = 1");
  const Matrix back = read_oracle_csv(p, 2);
  CHECK(max_abs_diff(back, gd.holdout_oracle) < 1e-15);
}

TEST_CASE("spec keys round-trip and validate") {
  GeneratorSpec g = small_spec();
  g.w_seq = 1.5;
  g.temperature = 0.25;
  const GeneratorSpec back = GeneratorSpec::from_run_config(g.to_run_config());
  CHECK(back.w_seq == 1.5);
  CHECK(back.temperature == 0.25);
  CHECK(back.n_users == g.n_users);
  GeneratorSpec bad = g;
  bad.min_seq = 40;
  bad.max_seq = 10;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = g;
  bad.w_inter = std::nan("");
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
