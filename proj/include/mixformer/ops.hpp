#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mixformer/tape.hpp"

// Differentiable matrix ops recorded on a Tape.
//
// Head-structured activations are stored as matrices with one row per
// (example, head): row b*H + h holds head h of example b, H heads per example.

namespace mixformer::ops {

Var add(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double c);
Var sum_all(Tape& t, Var a);

/// x (m x in) * w (in x out).
Var linear(Tape& t, Var x, Var w);
/// x * w + b, b is 1 x out broadcast over rows.
Var linear_bias(Tape& t, Var x, Var w, Var b);
/// Row r is multiplied by w[r % w.size()]. All weights share one shape.
Var head_linear(Tape& t, Var x, std::span<const Var> w);

Var swish(Tape& t, Var x);
/// swish(g) * u elementwise.
Var swiglu_gate(Tape& t, Var g, Var u);

/// Per-row RMSNorm with a shared 1 x cols gain.
Var rms_norm_rows(Tape& t, Var x, Var gain, double eps);
/// Per-row LayerNorm with a shared 1 x cols gain (no bias).
Var layer_norm_rows(Tape& t, Var x, Var gain, double eps);

/// HeadMixing on every block of n_heads rows: out[i] chunk j = in[j] chunk i,
/// chunk width cols / n_heads. If mask (n_heads x cols) is given the output
/// is multiplied by it elementwise.
Var head_mix(Tape& t, Var x, std::size_t n_heads, const Matrix* mask = nullptr);
/// Masked HeadMixing restricted to the user rows: `user` holds heads
/// 0..U-1 of one example; chunks from item heads are zero.
Var head_mix_user(Tape& t, Var user, std::size_t n_heads);
/// Masked HeadMixing output rows for item heads U..N-1 of B examples that
/// share the same user rows. `items` holds B*(N-U) rows.
Var head_mix_item(Tape& t, Var user, Var items, std::size_t n_heads);

/// Maps query rows to attention heads: head(r) = offset + r % period.
struct HeadMap {
  std::size_t n_heads = 1;  ///< heads interleaved in the key/value rows
  std::size_t offset = 0;
  std::size_t period = 1;
};

/// Per-head softmax attention of each query row over the sequence:
///   out_r = sum_t softmax_t(q_r . k_t^h / sqrt(D)) v_t^h, h = head(r).
/// keys/values hold T*n_heads rows (row t*n_heads + h). Returns the
/// attention term only (no residual); T = 0 gives zeros.
Var cross_attention(Tape& t, Var q, Var keys, Var values, HeadMap map);
/// Softmax self-attention among the rows of each block of `block` rows.
Var block_self_attention(Tape& t, Var q, Var k, Var v, std::size_t block);

Var reshape(Tape& t, Var x, std::size_t rows, std::size_t cols);
Var concat_cols(Tape& t, std::span<const Var> parts);
/// Row b = [flatten(user) | flatten(items rows b*n_item .. b*n_item+n_item-1)].
Var assemble_candidates(Tape& t, Var user, Var items, std::size_t n_item);

/// Contiguous slice of the input vector that feeds a group of heads.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
  std::size_t heads = 0;
  /// Width of every chunk after zero padding to a multiple of `heads`.
  std::size_t chunk() const { return heads == 0 ? 0 : (length + heads - 1) / heads; }
};

/// Splits each row of e (B x D_ns) into per-head chunks (segment by segment,
/// zero padded) and projects chunk j with w[j] (chunk x D). Output has
/// B * total_heads rows.
Var split_project(Tape& t, Var e, std::span<const Segment> segments, std::span<const Var> w);

/// Sum over all entries of softplus(z) - y*z (binary cross-entropy with logits).
Var bce_with_logits(Tape& t, Var logits, const Matrix& labels);

}  // namespace mixformer::ops
