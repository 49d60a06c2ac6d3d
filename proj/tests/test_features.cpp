#include <filesystem>
#include <random>

#include "doctest.h"
#include "mixformer/features.hpp"
#include "mixformer/mathcore.hpp"
#include "support.hpp"

using namespace mixformer;

namespace {

FeatureSchema one_field_schema(std::uint32_t dim) {
  FeatureSchema s;
  s.nonseq = {{"user_id", 4, dim, FieldSide::kUser}, {"item_id", 4, 1, FieldSide::kItem}};
  s.action = {{"a", 4, 2, FieldSide::kItem}};
  s.max_seq_len = 8;
  s.tasks = {"click"};
  return s;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mixformer_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("embed_nonseq looks up rows in field order") {
  FeatureSchema s = one_field_schema(3);
  EmbeddingSet emb = EmbeddingSet::zeros(s);
  emb.nonseq[0].values()(0, 0) = 1;
  emb.nonseq[0].values()(0, 1) = 2;
  emb.nonseq[0].values()(0, 2) = 3;
  emb.nonseq[1].values()(2, 0) = 9;
  Request r;
  r.user_ids = {0};
  r.candidates = {2};
  CHECK(embed_nonseq(r, 0, emb, s) == std::vector<double>{1, 2, 3, 9});

  // Two user fields of width 2: the first occupies positions 0..1.
  FeatureSchema two = s;
  two.nonseq = {{"u", 3, 2, FieldSide::kUser}, {"v", 3, 2, FieldSide::kUser}, {"item_id", 4, 1, FieldSide::kItem}};
  EmbeddingSet e2 = EmbeddingSet::zeros(two);
  e2.nonseq[0].values()(1, 0) = 5;
  e2.nonseq[0].values()(1, 1) = 6;
  r.user_ids = {1, 0};
  const auto v = embed_nonseq(r, 0, e2, two);
  REQUIRE(v.size() == two.d_ns());
  CHECK(v[0] == 5);
  CHECK(v[1] == 6);
  CHECK(v[2] == 0);
}

TEST_CASE("item fields follow user and context fields regardless of schema order") {
  FeatureSchema s;
  s.nonseq = {{"item_id", 4, 1, FieldSide::kItem}, {"hour", 24, 1, FieldSide::kContext},
              {"user_id", 4, 1, FieldSide::kUser}};
  s.tasks = {"t"};
  CHECK(s.user_fields() == std::vector<std::size_t>{1, 2});
  CHECK(s.item_fields() == std::vector<std::size_t>{0});
  CHECK(s.d_user() == 2);
  CHECK(s.d_item() == 1);
}

TEST_CASE("zero tables give a zero vector") {
  const auto s = testing::small_schema();
  const auto emb = EmbeddingSet::zeros(s);
  std::mt19937_64 rng(1);
  const Request r = testing::random_request(s, 2, 3, rng);
  const auto v = embed_nonseq(r, 1, emb, s);
  CHECK(v.size() == s.d_ns());
  for (double x : v) CHECK(x == 0.0);
  const Matrix seq = embed_sequence(r, emb, s, Matrix(s.action_width(), 12, 1.0));
  CHECK(seq.rows() == 3);
  CHECK(seq.max_abs() == 0.0);
}

TEST_CASE("split_heads hand case") {
  const std::vector<Matrix> w{Matrix::from_rows({{1, 0}}), Matrix::from_rows({{0, 1}})};
  const Matrix h = split_heads(std::vector<double>{5, 7}, w);
  CHECK(h == Matrix::from_rows({{5, 0}, {0, 7}}));
  CHECK(split_heads(std::vector<double>{0, 0}, w).max_abs() == 0.0);
  CHECK_THROWS_AS(split_heads(std::vector<double>{1, 2, 3, 4}, w), ShapeError);
}

TEST_CASE("split_heads shape with 16 heads") {
  std::mt19937_64 rng(2);
  std::vector<Matrix> w(16, Matrix(16, 24));
  for (auto& m : w) xavier_uniform(m, 16, 24, rng);
  const Matrix h = split_heads(std::vector<double>(256, 0.5), w);
  CHECK(h.rows() == 16);
  CHECK(h.cols() == 24);
}

TEST_CASE("action embedding and sequence") {
  FeatureSchema s = one_field_schema(1);
  s.action = {{"a", 4, 4, FieldSide::kItem}};
  EmbeddingSet emb = EmbeddingSet::random(s, 3);
  Matrix eye(4, 4);
  for (int i = 0; i < 4; ++i) eye(i, i) = 1.0;
  const auto row = embed_action(std::vector<std::uint32_t>{2}, emb, eye);
  const auto raw = emb.action[0].lookup(2);
  CHECK(std::equal(row.begin(), row.end(), raw.begin()));

  Request r;
  r.user_ids = {0};
  r.candidates = {0};
  CHECK(embed_sequence(r, emb, s, eye).rows() == 0);
  r.sequence = {1, 3, 1};
  const Matrix seq = embed_sequence(r, emb, s, eye);
  REQUIRE(seq.rows() == 3);
  CHECK(seq(0, 0) == emb.action[0].lookup(1)[0]);
  CHECK(seq(1, 0) == emb.action[0].lookup(3)[0]);
  CHECK(std::equal(seq.row(0).begin(), seq.row(0).end(), seq.row(2).begin()));

  CHECK_THROWS_AS(embed_action(std::vector<std::uint32_t>{4}, emb, eye), LookupError);
}

TEST_CASE("action projection flops") {
  const auto s = testing::small_schema();
  EmbeddingSet emb = EmbeddingSet::random(s, 1);
  std::mt19937_64 rng(4);
  const Request r = testing::random_request(s, 1, 5, rng);
  const Matrix proj(s.action_width(), 32, 0.1);
  Tape t(false);
  const Var a = embed_action_fields(t, emb, s, r, false);
  const auto before = t.trace().total();
  ops::linear(t, a, t.param(proj, nullptr));
  CHECK(t.trace().total() - before == 2 * 5 * s.action_width() * 32);
}

TEST_CASE("out-of-vocab ids are lookup errors") {
  const auto s = testing::small_schema();
  const auto emb = EmbeddingSet::random(s, 1);
  std::mt19937_64 rng(1);
  Request r = testing::random_request(s, 1, 2, rng);
  r.user_ids[0] = 50;
  CHECK_THROWS_AS(embed_nonseq(r, 0, emb, s), LookupError);
  CHECK_THROWS_AS(r.validate(s), LookupError);
}

TEST_CASE("schema text round-trip") {
  const auto s = testing::small_schema(32);
  CHECK(FeatureSchema::from_text(s.to_text()) == s);
  CHECK_THROWS_AS(FeatureSchema::from_text("nonsense line\n"), ConfigError);
}

TEST_CASE("dataset file round-trip") {
  const auto s = testing::small_schema();
  std::mt19937_64 rng(9);
  Dataset d{s, {}};
  for (int i = 0; i < 20; ++i) d.requests.push_back(testing::random_request(s, 1 + i % 4, i % 7, rng));
  const auto dir = scratch("dataset");
  write_dataset(dir / "d.bin", d);
  CHECK(read_dataset(dir / "d.bin", s) == d);

  auto other = s;
  other.action.pop_back();
  CHECK_THROWS_AS(read_dataset(dir / "d.bin", other), DataError);
  CHECK_THROWS_AS(read_dataset(dir / "missing.bin", s), DataError);
}

TEST_CASE("recency buckets are log spaced") {
  CHECK(recency_bucket(0) == 0);
  CHECK(recency_bucket(1) == 1);
  CHECK(recency_bucket(2) == 1);
  CHECK(recency_bucket(3) == 2);
  CHECK(recency_bucket(1023) == 10);
  CHECK(recency_bucket(~0ull >> 1) == 31);
  CHECK(recency_bucket(1000, 4) == 3);
}
