#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "mixformer/matrix.hpp"

namespace mixformer {

/// Sub-module a piece of work belongs to, for FLOPs attribution.
enum class Component : std::uint8_t {
  kSplitHeads,
  kQueryMixer,
  kSeqFfn,
  kKvProj,
  kAttention,
  kOutputFusion,
  kTaskHeads,
  kCount
};

/// Whether work can be shared across the candidates of a request.
enum class Side : std::uint8_t { kUser, kItem, kCount };

inline constexpr std::size_t kNumComponents = static_cast<std::size_t>(Component::kCount);
inline constexpr std::size_t kNumSides = static_cast<std::size_t>(Side::kCount);

std::string_view component_name(Component c);
std::string_view side_name(Side s);

/// Multiply-add counts bucketed by (component, side).
struct FlopsTrace {
  std::array<std::array<std::uint64_t, kNumSides>, kNumComponents> counts{};

  void add(Component c, Side s, std::uint64_t n) {
    counts[static_cast<std::size_t>(c)][static_cast<std::size_t>(s)] += n;
  }
  std::uint64_t at(Component c, Side s) const {
    return counts[static_cast<std::size_t>(c)][static_cast<std::size_t>(s)];
  }
  std::uint64_t component_total(Component c) const;
  std::uint64_t side_total(Side s) const;
  std::uint64_t total() const;

  FlopsTrace& operator+=(const FlopsTrace& o);
  friend bool operator==(const FlopsTrace&, const FlopsTrace&) = default;
};

/// Handle to a value recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape;

/// Backward rule: reads the gradient of `self` and accumulates into its parents.
using BackwardFn = std::function<void(Tape&, Var self)>;

/// Reverse-mode recording of matrix operations.
///
/// Each recorded op is a differentiable op: a forward value, an optional
/// backward rule, and an analytic multiply-add count charged to the current
/// (component, side) scope. A Tape built with record_grad = false keeps the
/// values and flop trace but drops every backward rule.
class Tape {
 public:
  explicit Tape(bool record_grad = true) : record_grad_(record_grad) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool records_grad() const { return record_grad_; }

  /// Value with no gradient.
  Var constant(Matrix value);
  /// Leaf whose gradient is available after backward().
  Var input(Matrix value);
  /// Leaf that aliases an external matrix (not copied). Its gradient is added
  /// into *grad_sink at the end of backward() when grad_sink is non-null.
  Var param(const Matrix& value, Matrix* grad_sink);

  /// Records an op. `needs_grad` says whether the backward rule has anything
  /// to propagate into (typically: any parent needs grad).
  Var push(Matrix value, bool needs_grad, BackwardFn backward, std::uint64_t flops);

  const Matrix& value(Var v) const;
  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }
  /// Gradient slot of v, allocated (zero) on first access.
  Matrix& grad(Var v);

  /// Seeds d(out) with `cotangent` (defaults to ones) and sweeps backwards.
  void backward(Var out);
  void backward(Var out, const Matrix& cotangent);

  std::size_t size() const { return nodes_.size(); }

  const FlopsTrace& trace() const { return trace_; }
  void charge(std::uint64_t flops) { trace_.add(component_, side_, flops); }

  /// RAII guard that attributes flops recorded in its lifetime.
  class Scope {
   public:
    Scope(Tape& t, Component c, Side s) : tape_(t), prev_c_(t.component_), prev_s_(t.side_) {
      t.component_ = c;
      t.side_ = s;
    }
    ~Scope() {
      tape_.component_ = prev_c_;
      tape_.side_ = prev_s_;
    }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape& tape_;
    Component prev_c_;
    Side prev_s_;
  };
  Scope scope(Component c, Side s) { return Scope(*this, c, s); }
  Side current_side() const { return side_; }

 private:
  struct Node {
    Matrix own;
    const Matrix* ext = nullptr;
    Matrix grad;
    Matrix* sink = nullptr;
    bool needs_grad = false;
    BackwardFn backward;
  };

  bool record_grad_;
  std::vector<Node> nodes_;
  FlopsTrace trace_;
  Component component_ = Component::kQueryMixer;
  Side side_ = Side::kItem;
};

}  // namespace mixformer
