#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "mixformer/mathcore.hpp"
#include "mixformer/model.hpp"
#include "support.hpp"

using namespace mixformer;
using doctest::Approx;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix m(r, c);
  for (double& x : m.flat()) x = u(rng);
  return m;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Split-head input X of the plain (one-segment) model for one candidate.
Matrix split_input(const Model& m, const Request& r, std::size_t c) {
  std::vector<Matrix> w;
  for (auto i : m.split_proj()) w.push_back(m.params().value(i));
  return split_heads(embed_nonseq(r, c, m.embeddings(), m.schema()), w);
}

}  // namespace

TEST_CASE("head_mixing hand case") {
  const Matrix x = Matrix::from_rows({{1, 2, 3, 4}, {5, 6, 7, 8}});
  CHECK(head_mixing(x, 2) == Matrix::from_rows({{1, 2, 5, 6}, {3, 4, 7, 8}}));
  CHECK_THROWS_AS(head_mixing(Matrix(2, 5), 2), ShapeError);
  CHECK_THROWS_AS(head_mixing(Matrix(3, 4), 2), ShapeError);
}

TEST_CASE("head_mixing is an entry permutation and an involution") {
  std::mt19937_64 rng(1);
  for (auto [n, d] : {std::pair<std::size_t, std::size_t>{2, 4}, {4, 8}, {4, 32}, {8, 16}, {16, 32}}) {
    const Matrix x = random_matrix(n, d, rng);
    const Matrix y = head_mixing(x, n);
    CHECK(head_mixing(y, n) == x);
    CHECK(y.frobenius_norm() == Approx(x.frobenius_norm()).epsilon(1e-14));
    auto a = std::vector<double>(x.flat().begin(), x.flat().end());
    auto b = std::vector<double>(y.flat().begin(), y.flat().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);

    // Fixed points are the block-symmetric matrices: chunk j of row i equals chunk i of row j.
    const std::size_t w = d / n;
    Matrix sym(n, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j)
        for (std::size_t e = 0; e < w; ++e) sym(i, j * w + e) = sym(j, i * w + e) = x(i, j * w + e);
    CHECK(head_mixing(sym, n) == sym);
  }
}

TEST_CASE("identical rows are not a fixed point in general") {
  const Matrix x = Matrix::from_rows({{1, 2, 3, 4}, {1, 2, 3, 4}});
  CHECK(head_mixing(x, 2) == Matrix::from_rows({{1, 2, 1, 2}, {3, 4, 3, 4}}));
  const Matrix c = Matrix::from_rows({{1, 2, 1, 2}, {1, 2, 1, 2}});
  CHECK(head_mixing(c, 2) == c);  // identical rows with identical chunks are
}

TEST_CASE("query mixer mixing term composes rms_norm and head_mixing") {
  Tape t(false);
  const Matrix x = Matrix::from_rows({{1, 2, 3, 4}, {5, 6, 7, 8}});
  const Var vx = t.constant(x);
  const Var p = ops::add(t, ops::head_mix(t, ops::rms_norm_rows(t, vx, t.constant(Matrix(1, 4, 1.0)), 1e-300), 2), vx);
  const double r0 = std::sqrt(7.5), r1 = std::sqrt(43.5);
  const Matrix want = Matrix::from_rows({{1 / r0 + 1, 2 / r0 + 2, 5 / r1 + 3, 6 / r1 + 4},
                                         {3 / r0 + 5, 4 / r0 + 6, 7 / r1 + 7, 8 / r1 + 8}});
  CHECK(max_abs_diff(t.value(p), want) < 1e-14);
}

TEST_CASE("cross_attention hand case") {
  const double d = 1.0;
  const Matrix q = Matrix::from_rows({{1}});
  const Matrix k = Matrix::from_rows({{std::log(2.0) * std::sqrt(d)}, {0}});
  const Matrix v = Matrix::from_rows({{3}, {0}});
  CHECK(cross_attention(q, k, v)(0, 0) == Approx(3.0).epsilon(1e-14));
  const Matrix w = attention_weights(q, k);
  CHECK(w(0, 0) == Approx(2.0 / 3.0));
  CHECK(w(0, 1) == Approx(1.0 / 3.0));
}

TEST_CASE("cross_attention boundaries") {
  std::mt19937_64 rng(2);
  const std::size_t n = 3, d = 4, steps = 5;
  const Matrix q = random_matrix(n, d, rng);
  CHECK(cross_attention(q, Matrix(0, d), Matrix(0, d)) == q);

  // Equal keys per head: uniform weights, z = mean(v) + q.
  Matrix k(steps * n, d), v = random_matrix(steps * n, d, rng);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t e = 0; e < d; ++e) k(t * n + i, e) = 0.1 * static_cast<double>(i + e);
  const Matrix z = cross_attention(q, k, v);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t e = 0; e < d; ++e) {
      double mean = 0.0;
      for (std::size_t t = 0; t < steps; ++t) mean += v(t * n + i, e) / steps;
      CHECK(z(i, e) == Approx(mean + q(i, e)).epsilon(1e-13));
    }
}

TEST_CASE("zero params give zero logits") {
  const auto s = testing::small_schema();
  Model m(testing::tiny_config(), s, 1);
  for (std::size_t i = 0; i < m.params().size(); ++i) m.params().value(i).fill(0.0);
  std::mt19937_64 rng(3);
  const Request r = testing::random_request(s, 3, 5, rng);
  CHECK(m.score_request(r).max_abs() == 0.0);
}

TEST_CASE("zero FFNs and key/value projections make each block the identity") {
  const auto s = testing::small_schema();
  Model m(testing::tiny_config(), s, 2);
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& name = m.params().name(i);
    if (ends_with(name, ".down") || name.find(".key.") != std::string::npos ||
        name.find(".value.") != std::string::npos || ends_with(name, "qm_mix_norm"))
      m.params().value(i).fill(0.0);
  }
  std::mt19937_64 rng(4);
  const Request r = testing::random_request(s, 2, 6, rng);
  std::vector<LayerActivations> acts;
  m.forward(r, 1, &acts);
  const Matrix x = split_input(m, r, 1);
  REQUIRE(acts.size() == 2);
  for (const auto& a : acts) {
    CHECK(a.p == x);
    CHECK(a.q == x);
    CHECK(a.z == x);
    CHECK(a.o == x);
  }
}

TEST_CASE("query mixer is the identity without HeadMixing and FFN") {
  const auto s = testing::small_schema();
  auto cfg = testing::tiny_config();
  cfg.ablation.wo_hm = true;
  cfg.ablation.wo_qm_ffn = true;
  Model m(cfg, s, 3);
  std::mt19937_64 rng(5);
  const Request r = testing::random_request(s, 1, 4, rng);
  std::vector<LayerActivations> acts;
  m.forward(r, 0, &acts);
  CHECK(acts[0].q == split_input(m, r, 0));
  CHECK(acts[1].q == acts[0].o);
}

TEST_CASE("empty sequence leaves only the query mixer and output fusion") {
  const auto s = testing::small_schema();
  Model m(testing::tiny_config(), s, 4);
  std::mt19937_64 rng(6);
  const Request r = testing::random_request(s, 2, 0, rng);
  std::vector<LayerActivations> acts;
  const Matrix y = m.forward(r, 0, &acts);
  CHECK(y.all_finite());
  for (const auto& a : acts) CHECK(a.z == a.q);
}

TEST_CASE("model determinism and candidate symmetry") {
  const auto s = testing::small_schema();
  Model a(testing::tiny_config(), s, 7), b(testing::tiny_config(), s, 7);
  std::mt19937_64 rng(8);
  Request r = testing::random_request(s, 3, 5, rng);
  std::copy_n(r.candidate(s, 0).begin(), 2, r.candidates.begin() + 2);  // candidate 1 := candidate 0
  const Matrix ya = a.score_request(r);
  CHECK(ya == b.score_request(r));
  CHECK(ya(0, 0) == ya(1, 0));
  CHECK(ya(0, 1) == ya(1, 1));
  CHECK(ya(0, 0) != ya(2, 0));
}

TEST_CASE("sequence order only matters through attention weights") {
  const auto s = testing::small_schema();
  Model m(testing::tiny_config(), s, 9);
  std::mt19937_64 rng(10);
  Request r = testing::random_request(s, 2, 6, rng);
  const Matrix before = m.score_request(r);
  const std::size_t w = s.action.size();
  std::swap_ranges(r.sequence.begin(), r.sequence.begin() + w, r.sequence.begin() + 4 * w);
  CHECK(max_abs_diff(before, m.score_request(r)) < 1e-12);
}

TEST_CASE("shared-parameter ablations reuse slots") {
  const auto s = testing::small_schema();
  auto cfg = testing::tiny_config(4, 3);
  cfg.ablation.shared_seq_ffn = true;
  Model seq(cfg, s, 1);
  for (const auto& b : seq.blocks()) {
    CHECK(b.seq_ffn.gate == seq.blocks()[0].seq_ffn.gate);
    CHECK(b.seq_ffn.down == seq.blocks()[0].seq_ffn.down);
  }
  cfg = testing::tiny_config();
  cfg.ablation.shared_of_ffn = true;
  Model of(cfg, s, 1);
  for (const auto& f : of.blocks()[0].of_ffn) CHECK(f.up == of.blocks()[0].of_ffn[0].up);
  CHECK(of.params().count() < Model(testing::tiny_config(), s, 1).params().count());
}

TEST_CASE("gradients match finite differences on the tiny config") {
  const auto s = testing::small_schema(3);
  std::vector<ModelConfig> cfgs;
  cfgs.push_back(testing::tiny_config(2, 2, 4));
  cfgs.push_back(testing::decoupled(testing::tiny_config(2, 2, 4)));
  for (const auto& name : ablation_names()) cfgs.push_back(apply_ablation(testing::tiny_config(2, 2, 4), name));
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    CAPTURE(i);
    Model m(cfgs[i], s, 20 + i);
    std::mt19937_64 rng(30 + i);
    const Request r = testing::random_request(s, 3, 3, rng);
    CHECK(testing::model_grad_check(m, r) < 1e-4);
  }
}

TEST_CASE("checkpoint round-trip") {
  const auto s = testing::small_schema();
  Model m(testing::decoupled(testing::tiny_config()), s, 11);
  m.train_steps = 42;
  m.params().rms(0).fill(0.5);
  const auto p = std::filesystem::temp_directory_path() / "mixformer_test_ckpt.bin";
  m.save(p);
  Model back = Model::load(p);
  CHECK(back.config() == m.config());
  CHECK(back.schema() == m.schema());
  CHECK(back.train_steps == 42);
  CHECK(back.serialize() == m.serialize());
  std::mt19937_64 rng(12);
  const Request r = testing::random_request(s, 4, 5, rng);
  CHECK(back.score_request(r) == m.score_request(r));

  std::string bytes = m.serialize();
  bytes[0] = 'X';
  CHECK_THROWS_AS(Model::deserialize(bytes), DataError);
  CHECK_THROWS_AS(Model::deserialize(m.serialize().substr(0, 100)), DataError);
}

TEST_CASE("config validation") {
  const auto s = testing::small_schema();
  auto bad = testing::tiny_config(3, 2, 8);
  CHECK_THROWS_AS(Model(bad, s, 1), ConfigError);
  CHECK_THROWS_AS(preset("paper-small").validate(), ConfigError);
  CHECK_NOTHROW(preset("paper-small-corrected").validate());
  CHECK_THROWS_AS(preset("nope"), ConfigError);
  auto tasks = testing::tiny_config();
  tasks.n_tasks = 3;
  CHECK_THROWS_AS(Model(tasks, s, 1), ConfigError);
}
