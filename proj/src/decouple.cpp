#include "mixformer/decouple.hpp"

namespace mixformer {

HeadAllocation allocate_heads(std::size_t d_user, std::size_t d_item, std::size_t n_heads) {
  if (n_heads < 2) throw ConfigError("allocate_heads: decoupling needs at least 2 heads");
  const std::size_t d_ns = d_user + d_item;
  if (d_ns == 0) throw ConfigError("allocate_heads: empty non-sequential embedding");
  HeadAllocation a;
  a.n_item = d_item * n_heads / d_ns;
  // Clamp so that both sides keep at least one head.
  a.n_item = std::clamp<std::size_t>(a.n_item, 1, n_heads - 1);
  a.n_user = n_heads - a.n_item;
  return a;
}

Matrix build_mask(std::size_t n_heads, std::size_t n_user, std::size_t head_dim) {
  if (n_heads == 0 || head_dim % n_heads != 0)
    throw ShapeError("build_mask: head_dim " + std::to_string(head_dim) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  if (n_user > n_heads) throw ShapeError("build_mask: more user heads than heads");
  Matrix m(n_heads, head_dim, 1.0);
  const std::size_t cut = n_user * (head_dim / n_heads);
  for (std::size_t i = 0; i < n_user; ++i)
    for (std::size_t j = cut; j < head_dim; ++j) m(i, j) = 0.0;
  return m;
}

Matrix head_mixing_masked(const Matrix& x, const Matrix& mask) {
  require_shape(x.same_shape(mask), "head_mixing_masked: x " + x.shape_str() + " vs mask " + mask.shape_str());
  Tape t(false);
  return t.value(ops::head_mix(t, t.constant(x), x.rows(), &mask));
}

Matrix forward_decoupled(Model& m, const Request& r, std::size_t candidate, std::vector<LayerActivations>* acts) {
  if (!m.decoupled()) throw ConfigError("forward_decoupled: decoupling is disabled");
  return m.forward(r, candidate, acts);
}

Matrix rlb_forward(Model& m, const Request& r) {
  if (!m.decoupled()) throw ConfigError("rlb_forward: decoupling is disabled");
  return m.score_request(r);
}

}  // namespace mixformer
