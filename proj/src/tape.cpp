#include "mixformer/tape.hpp"

namespace mixformer {

std::string_view component_name(Component c) {
  switch (c) {
    case Component::kSplitHeads: return "split_heads";
    case Component::kQueryMixer: return "query_mixer";
    case Component::kSeqFfn: return "seq_ffn";
    case Component::kKvProj: return "kv_proj";
    case Component::kAttention: return "attention";
    case Component::kOutputFusion: return "output_fusion";
    case Component::kTaskHeads: return "task_heads";
    case Component::kCount: break;
  }
  return "?";
}

std::string_view side_name(Side s) {
  switch (s) {
    case Side::kUser: return "user";
    case Side::kItem: return "item";
    case Side::kCount: break;
  }
  return "?";
}

std::uint64_t FlopsTrace::component_total(Component c) const {
  std::uint64_t t = 0;
  for (auto v : counts[static_cast<std::size_t>(c)]) t += v;
  return t;
}

std::uint64_t FlopsTrace::side_total(Side s) const {
  std::uint64_t t = 0;
  for (const auto& row : counts) t += row[static_cast<std::size_t>(s)];
  return t;
}

std::uint64_t FlopsTrace::total() const {
  std::uint64_t t = 0;
  for (const auto& row : counts)
    for (auto v : row) t += v;
  return t;
}

FlopsTrace& FlopsTrace::operator+=(const FlopsTrace& o) {
  for (std::size_t c = 0; c < kNumComponents; ++c)
    for (std::size_t s = 0; s < kNumSides; ++s) counts[c][s] += o.counts[c][s];
  return *this;
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), nullptr, {}, nullptr, false, {}});
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Tape::input(Matrix value) {
  nodes_.push_back(Node{std::move(value), nullptr, {}, nullptr, record_grad_, {}});
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(const Matrix& value, Matrix* grad_sink) {
  const bool ng = record_grad_ && grad_sink != nullptr;
  nodes_.push_back(Node{{}, &value, {}, ng ? grad_sink : nullptr, ng, {}});
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Tape::push(Matrix value, bool needs_grad, BackwardFn backward, std::uint64_t flops) {
  charge(flops);
  const bool ng = record_grad_ && needs_grad;
  nodes_.push_back(Node{std::move(value), nullptr, {}, nullptr, ng, ng ? std::move(backward) : BackwardFn{}});
  return Var{static_cast<int>(nodes_.size() - 1)};
}

const Matrix& Tape::value(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  return n.ext ? *n.ext : n.own;
}

Matrix& Tape::grad(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.empty()) {
    const Matrix& val = n.ext ? *n.ext : n.own;
    n.grad = Matrix(val.rows(), val.cols());
  }
  return n.grad;
}

void Tape::backward(Var out) {
  const Matrix& v = value(out);
  backward(out, Matrix(v.rows(), v.cols(), 1.0));
}

void Tape::backward(Var out, const Matrix& cotangent) {
  if (!record_grad_) throw ConfigError("Tape::backward on a tape that does not record gradients");
  require_shape(cotangent.same_shape(value(out)), "Tape::backward: cotangent shape");
  Matrix& g = grad(out);
  for (std::size_t i = 0; i < g.size(); ++i) g.flat()[i] += cotangent.flat()[i];
  // Only nodes up to and including `out` can contribute.
  const std::size_t last = static_cast<std::size_t>(out.id);
  for (std::size_t i = last + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, Var{static_cast<int>(i)});
    if (n.sink) {
      require_shape(n.sink->same_shape(n.grad), "Tape::backward: grad sink shape");
      for (std::size_t k = 0; k < n.grad.size(); ++k) n.sink->flat()[k] += n.grad.flat()[k];
    }
  }
}

}  // namespace mixformer
