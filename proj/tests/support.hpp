#pragma once

// Small fixtures shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "mixformer/config.hpp"
#include "mixformer/features.hpp"
#include "mixformer/model.hpp"
#include "mixformer/trainer.hpp"

namespace mixformer::testing {

/// Two user fields, one context field, two item fields, three action fields.
inline FeatureSchema small_schema(std::uint32_t max_seq_len = 16) {
  FeatureSchema s;
  s.nonseq = {{"user_id", 50, 8, FieldSide::kUser},
              {"user_segment", 6, 4, FieldSide::kUser},
              {"hour", 24, 4, FieldSide::kContext},
              {"item_id", 80, 8, FieldSide::kItem},
              {"item_category", 10, 8, FieldSide::kItem}};
  s.action = {{"item_id", 80, 8, FieldSide::kItem}, {"category", 10, 4, FieldSide::kItem},
              {"action_type", 3, 2, FieldSide::kItem}};
  s.max_seq_len = max_seq_len;
  s.tasks = {"finish", "skip"};
  return s;
}

inline Request random_request(const FeatureSchema& s, std::size_t k, std::size_t steps, std::mt19937_64& rng,
                              bool labels = true) {
  auto id = [&](std::uint32_t vocab) { return static_cast<std::uint32_t>(rng() % vocab); };
  Request r;
  r.user_id = rng();
  for (auto f : s.user_fields()) r.user_ids.push_back(id(s.nonseq[f].vocab));
  for (std::size_t t = 0; t < steps; ++t)
    for (const auto& f : s.action) r.sequence.push_back(id(f.vocab));
  for (std::size_t c = 0; c < k; ++c)
    for (auto f : s.item_fields()) r.candidates.push_back(id(s.nonseq[f].vocab));
  if (labels)
    for (std::size_t i = 0; i < k * s.n_tasks(); ++i) r.labels.push_back(static_cast<std::uint8_t>(rng() % 2));
  return r;
}

/// N=4, L=2, D=8 unless overridden.
inline ModelConfig tiny_config(std::size_t heads = 4, std::size_t layers = 2, std::size_t head_dim = 8) {
  ModelConfig c;
  c.n_heads = heads;
  c.n_layers = layers;
  c.head_dim = head_dim;
  c.max_seq_len = 16;
  return c;
}

inline ModelConfig decoupled(ModelConfig c, std::optional<std::size_t> user_heads = std::nullopt) {
  c.decoupling.enabled = true;
  c.decoupling.user_heads = user_heads;
  return c;
}

/// Summed BCE of every candidate of r; fills parameter gradients when `grad`.
inline double request_loss(Model& m, const Request& r, bool grad) {
  ModelLearner l(m);
  Tape t(grad);
  const Var z = l.logits(t, r, grad);
  Matrix y(t.value(z).rows(), t.value(z).cols());
  for (std::size_t c = 0; c < y.rows(); ++c)
    for (std::size_t j = 0; j < y.cols(); ++j) y(c, j) = r.label(m.schema(), c, j) ? 1.0 : 0.0;
  const Var loss = ops::bce_with_logits(t, z, y);
  if (grad) t.backward(loss);
  return t.value(loss)(0, 0);
}

/// Worst |num - an| / max(floor, |num| + |an|) over every scalar in `w`,
/// with central differences of the given step.
inline double grad_check(Matrix& w, const Matrix& analytic, const std::function<double()>& f, double step = 1e-5,
                         double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double orig = w.flat()[i];
    w.flat()[i] = orig + step;
    const double up = f();
    w.flat()[i] = orig - step;
    const double down = f();
    w.flat()[i] = orig;
    const double num = (up - down) / (2.0 * step), an = analytic.flat()[i];
    worst = std::max(worst, std::abs(num - an) / std::max(floor, std::abs(num) + std::abs(an)));
  }
  return worst;
}

/// grad_check over every dense parameter of m on one request.
inline double model_grad_check(Model& m, const Request& r) {
  m.params().zero_grad();
  m.embeddings().clear_grad();
  request_loss(m, r, true);
  double worst = 0.0;
  for (std::size_t p = 0; p < m.params().size(); ++p) {
    const Matrix g = m.params().grad(p);
    worst = std::max(worst, grad_check(m.params().value(p), g, [&] { return request_loss(m, r, false); }));
  }
  m.params().zero_grad();
  m.embeddings().clear_grad();
  return worst;
}

}  // namespace mixformer::testing
