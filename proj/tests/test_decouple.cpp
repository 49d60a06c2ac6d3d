#include <random>

#include "doctest.h"
#include "mixformer/decouple.hpp"
#include "support.hpp"

using namespace mixformer;

namespace {

double max_rows_diff(const Matrix& a, const Matrix& b, std::size_t from, std::size_t to) {
  double worst = 0.0;
  for (std::size_t r = from; r < to; ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) worst = std::max(worst, std::abs(a(r, c) - b(r, c)));
  return worst;
}

}  // namespace

TEST_CASE("allocate_heads") {
  CHECK(allocate_heads(60, 40, 16) == HeadAllocation{10, 6});
  CHECK(allocate_heads(500, 500, 16) == HeadAllocation{8, 8});
  CHECK(allocate_heads(64, 64, 4) == HeadAllocation{2, 2});
  CHECK(allocate_heads(999, 1, 4) == HeadAllocation{3, 1});
  CHECK(allocate_heads(1, 999, 4) == HeadAllocation{1, 3});
  CHECK_THROWS_AS(allocate_heads(10, 10, 1), ConfigError);
}

TEST_CASE("build_mask hand case and degenerate counts") {
  const Matrix m = build_mask(4, 2, 8);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 8; ++j) CHECK(m(i, j) == (i < 2 && j >= 4 ? 0.0 : 1.0));
  CHECK(build_mask(4, 0, 8) == Matrix(4, 8, 1.0));
  CHECK(build_mask(4, 4, 8) == Matrix(4, 8, 1.0));
  CHECK_THROWS_AS(build_mask(3, 1, 8), ShapeError);
  CHECK_THROWS_AS(build_mask(4, 5, 8), ShapeError);
}

TEST_CASE("masked head mixing") {
  const Matrix x = Matrix::from_rows({{1, 2, 3, 4}, {5, 6, 7, 8}});
  CHECK(head_mixing_masked(x, build_mask(2, 1, 4)) == Matrix::from_rows({{1, 2, 0, 0}, {3, 4, 7, 8}}));
  CHECK(head_mixing_masked(x, Matrix(2, 4, 1.0)) == head_mixing(x, 2));
  CHECK(head_mixing_masked(Matrix(2, 4), build_mask(2, 1, 4)).max_abs() == 0.0);
}

TEST_CASE("user heads ignore item features at every layer") {
  const auto s = testing::small_schema();
  Model m(testing::decoupled(testing::tiny_config()), s, 3);
  const std::size_t nu = m.layout().n_user;
  REQUIRE(nu > 0);
  std::mt19937_64 rng(4);
  const Request r = testing::random_request(s, 2, 5, rng);
  std::vector<LayerActivations> a, b;
  forward_decoupled(m, r, 1, &a);
  const auto item = s.item_fields();
  for (double& v : m.embeddings().nonseq[item[0]].values().row(r.candidate(s, 1)[0])) v += 0.7;
  forward_decoupled(m, r, 1, &b);
  for (std::size_t l = 0; l < a.size(); ++l) {
    CHECK(max_rows_diff(a[l].p, b[l].p, 0, nu) == 0.0);
    CHECK(max_rows_diff(a[l].o, b[l].o, 0, nu) == 0.0);
    CHECK(max_rows_diff(a[l].o, b[l].o, nu, 4) > 0.0);
  }
}

TEST_CASE("item heads still see user features") {
  const auto s = testing::small_schema();
  Model m(testing::decoupled(testing::tiny_config()), s, 5);
  const std::size_t nu = m.layout().n_user;
  std::mt19937_64 rng(6);
  Request r = testing::random_request(s, 1, 4, rng);
  std::vector<LayerActivations> a, b;
  forward_decoupled(m, r, 0, &a);
  r.user_ids[0] = (r.user_ids[0] + 1) % s.nonseq[0].vocab;
  forward_decoupled(m, r, 0, &b);
  CHECK(max_rows_diff(a.back().o, b.back().o, nu, 4) > 1e-6);
}

TEST_CASE("candidates of one request share the user-head state") {
  const auto s = testing::small_schema();
  Model m(testing::decoupled(testing::tiny_config()), s, 6);
  const std::size_t nu = m.layout().n_user;
  std::mt19937_64 rng(7);
  const Request r = testing::random_request(s, 3, 5, rng);
  std::vector<LayerActivations> a, b;
  forward_decoupled(m, r, 0, &a);
  forward_decoupled(m, r, 2, &b);
  for (std::size_t l = 0; l < a.size(); ++l) CHECK(max_rows_diff(a[l].o, b[l].o, 0, nu) == 0.0);
}

TEST_CASE("rlb_forward matches per-candidate forward_decoupled") {
  const auto s = testing::small_schema();
  for (std::size_t k : {1, 2, 8}) {
    Model m(testing::decoupled(testing::tiny_config()), s, 10 + k);
    std::mt19937_64 rng(k);
    const Request r = testing::random_request(s, k, 7, rng);
    const Matrix batched = rlb_forward(m, r);
    REQUIRE(batched.rows() == k);
    for (std::size_t c = 0; c < k; ++c) {
      const Matrix one = forward_decoupled(m, r, c);
      for (std::size_t j = 0; j < one.cols(); ++j)
        CHECK(std::abs(batched(c, j) - one(0, j)) <= 1e-9 * std::max(1.0, std::abs(one(0, j))));
    }
    const auto shared = m.trace_request(r, true).total(), separate = m.trace_request(r, false).total();
    if (k == 1) CHECK(shared == separate);
    else CHECK(shared < separate);
  }
}

TEST_CASE("zero user heads reproduce the base model bit-identically") {
  const auto s = testing::small_schema();
  Model base(testing::tiny_config(), s, 8);
  Model dec(testing::decoupled(testing::tiny_config(), 0), s, 8);
  CHECK(dec.mask() == Matrix(4, 8, 1.0));
  std::mt19937_64 rng(9);
  const Request r = testing::random_request(s, 4, 6, rng);
  for (std::size_t c = 0; c < 4; ++c) CHECK(forward_decoupled(dec, r, c) == base.forward(r, c));
  CHECK(rlb_forward(dec, r) == base.score_request(r));
}

TEST_CASE("decoupled entry points require decoupling") {
  const auto s = testing::small_schema();
  Model m(testing::tiny_config(), s, 1);
  std::mt19937_64 rng(1);
  const Request r = testing::random_request(s, 2, 3, rng);
  CHECK_THROWS_AS(rlb_forward(m, r), ConfigError);
  CHECK_THROWS_AS(forward_decoupled(m, r, 0), ConfigError);
}
