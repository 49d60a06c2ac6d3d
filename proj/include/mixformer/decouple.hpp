#pragma once

#include <cstddef>
#include <vector>

#include "mixformer/features.hpp"
#include "mixformer/matrix.hpp"
#include "mixformer/model.hpp"

// User-item decoupling: head allocation, the unidirectional HeadMixing mask,
// and request-level batching (RLB).

namespace mixformer {

struct HeadAllocation {
  std::size_t n_user = 0;  ///< N_U
  std::size_t n_item = 0;  ///< N_G
  friend bool operator==(const HeadAllocation&, const HeadAllocation&) = default;
};

/// N_G = floor(d_item * N / (d_user + d_item)), N_U = N - N_G; a side that
/// comes out empty is given one head taken from the other.
HeadAllocation allocate_heads(std::size_t d_user, std::size_t d_item, std::size_t n_heads);

/// N x D mask: zero where row i < N_U and column j >= N_U * D / N, one elsewhere.
Matrix build_mask(std::size_t n_heads, std::size_t n_user, std::size_t head_dim);

/// mask (elementwise) HeadMixing(x).
Matrix head_mixing_masked(const Matrix& x, const Matrix& mask);

/// Logits (1 x n_tasks) of one candidate through the masked full route.
/// Throws ConfigError unless the model is decoupled.
Matrix forward_decoupled(Model& m, const Request& r, std::size_t candidate,
                         std::vector<LayerActivations>* acts = nullptr);

/// K x n_tasks logits with user heads and the sequence side computed once.
/// Throws ConfigError unless the model is decoupled.
Matrix rlb_forward(Model& m, const Request& r);

}  // namespace mixformer
