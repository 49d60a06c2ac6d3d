#include "mixformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mixformer/kernels.hpp"
#include "mixformer/mathcore.hpp"

namespace mixformer::ops {
namespace {

namespace kp = kernels::par;

bool any_grad(const Tape& t, std::initializer_list<Var> vs) {
  for (Var v : vs)
    if (t.needs_grad(v)) return true;
  return false;
}

void axpy(std::span<double> y, double a, std::span<const double> x) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

Var add(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require_shape(av.same_shape(bv), "add: " + av.shape_str() + " vs " + bv.shape_str());
  Matrix out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.flat()[i] += bv.flat()[i];
  return t.push(std::move(out), any_grad(t, {a, b}), [a, b](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    for (Var p : {a, b}) {
      if (!tp.needs_grad(p)) continue;
      Matrix& pg = tp.grad(p);
      for (std::size_t i = 0; i < g.size(); ++i) pg.flat()[i] += g.flat()[i];
    }
  }, 0);
}

Var scale(Tape& t, Var a, double c) {
  Matrix out = t.value(a);
  for (double& v : out.flat()) v *= c;
  return t.push(std::move(out), t.needs_grad(a), [a, c](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    Matrix& pg = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) pg.flat()[i] += c * g.flat()[i];
  }, 0);
}

Var sum_all(Tape& t, Var a) {
  double s = 0.0;
  for (double v : t.value(a).flat()) s += v;
  return t.push(Matrix(1, 1, s), t.needs_grad(a), [a](Tape& tp, Var self) {
    const double g = tp.grad(self)(0, 0);
    for (double& v : tp.grad(a).flat()) v += g;
  }, 0);
}

Var linear(Tape& t, Var x, Var w) {
  const Matrix& xv = t.value(x);
  const Matrix& wv = t.value(w);
  Matrix out(xv.rows(), wv.cols());
  kp::matmul(xv, wv, out);
  const auto fl = flops::matmul(xv.rows(), xv.cols(), wv.cols());
  return t.push(std::move(out), any_grad(t, {x, w}), [x, w](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(x)) kp::matmul_bt_accum(g, tp.value(w), tp.grad(x));
    if (tp.needs_grad(w)) kp::matmul_at_accum(tp.value(x), g, tp.grad(w));
  }, fl);
}

Var linear_bias(Tape& t, Var x, Var w, Var b) {
  const Matrix& xv = t.value(x);
  const Matrix& wv = t.value(w);
  const Matrix& bv = t.value(b);
  require_shape(bv.rows() == 1 && bv.cols() == wv.cols(), "linear_bias: bias shape " + bv.shape_str());
  Matrix out(xv.rows(), wv.cols());
  kp::matmul(xv, wv, out);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv(0, c);
  const auto fl = flops::matmul(xv.rows(), xv.cols(), wv.cols());
  return t.push(std::move(out), any_grad(t, {x, w, b}), [x, w, b](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(x)) kp::matmul_bt_accum(g, tp.value(w), tp.grad(x));
    if (tp.needs_grad(w)) kp::matmul_at_accum(tp.value(x), g, tp.grad(w));
    if (tp.needs_grad(b)) {
      Matrix& bg = tp.grad(b);
      for (std::size_t r = 0; r < g.rows(); ++r) axpy(bg.row(0), 1.0, g.row(r));
    }
  }, fl);
}

Var head_linear(Tape& t, Var x, std::span<const Var> w) {
  require_shape(!w.empty(), "head_linear: no weights");
  const Matrix& xv = t.value(x);
  const Matrix& w0 = t.value(w[0]);
  for (Var wi : w) require_shape(t.value(wi).same_shape(w0), "head_linear: weights differ in shape");
  const std::size_t period = w.size();
  require_shape(xv.rows() % period == 0, "head_linear: rows not a multiple of heads");
  Matrix out(xv.rows(), w0.cols());
  for (std::size_t h = 0; h < period; ++h) kp::matmul(xv, t.value(w[h]), out, {h, period});
  const auto fl = flops::matmul(xv.rows(), xv.cols(), w0.cols());
  bool ng = t.needs_grad(x);
  for (Var wi : w) ng = ng || t.needs_grad(wi);
  std::vector<Var> ws(w.begin(), w.end());
  return t.push(std::move(out), ng, [x, ws = std::move(ws)](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    const std::size_t period = ws.size();
    for (std::size_t h = 0; h < period; ++h) {
      if (tp.needs_grad(x)) kp::matmul_bt_accum(g, tp.value(ws[h]), tp.grad(x), {h, period});
      if (tp.needs_grad(ws[h])) kp::matmul_at_accum(tp.value(x), g, tp.grad(ws[h]), {h, period});
    }
  }, fl);
}

Var swish(Tape& t, Var x) {
  Matrix out = t.value(x);
  for (double& v : out.flat()) v = mixformer::swish(v);
  return t.push(std::move(out), t.needs_grad(x), [x](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    const Matrix& xv = tp.value(x);
    Matrix& xg = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) xg.flat()[i] += g.flat()[i] * swish_grad(xv.flat()[i]);
  }, 0);
}

Var swiglu_gate(Tape& t, Var g, Var u) {
  const Matrix& gv = t.value(g);
  const Matrix& uv = t.value(u);
  require_shape(gv.same_shape(uv), "swiglu_gate: gate/up shapes differ");
  Matrix out(gv.rows(), gv.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out.flat()[i] = mixformer::swish(gv.flat()[i]) * uv.flat()[i];
  return t.push(std::move(out), any_grad(t, {g, u}), [g, u](Tape& tp, Var self) {
    const Matrix& dy = tp.grad(self);
    const Matrix& gv = tp.value(g);
    const Matrix& uv = tp.value(u);
    if (tp.needs_grad(g)) {
      Matrix& gg = tp.grad(g);
      for (std::size_t i = 0; i < dy.size(); ++i)
        gg.flat()[i] += dy.flat()[i] * uv.flat()[i] * swish_grad(gv.flat()[i]);
    }
    if (tp.needs_grad(u)) {
      Matrix& ug = tp.grad(u);
      for (std::size_t i = 0; i < dy.size(); ++i) ug.flat()[i] += dy.flat()[i] * mixformer::swish(gv.flat()[i]);
    }
  }, 0);
}

Var rms_norm_rows(Tape& t, Var x, Var gain, double eps) {
  if (!(eps > 0.0)) throw ConfigError("rms_norm_rows: eps must be positive");
  const Matrix& xv = t.value(x);
  const Matrix& gv = t.value(gain);
  require_shape(gv.rows() == 1 && gv.cols() == xv.cols(), "rms_norm_rows: gain shape " + gv.shape_str());
  if (!xv.all_finite()) throw NumericError("rms_norm_rows: non-finite input");
  const std::size_t cols = xv.cols();
  Matrix out(xv.rows(), cols);
  std::vector<double> inv(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const auto xr = xv.row(r);
    inv[r] = 1.0 / std::sqrt(dot(xr, xr) / static_cast<double>(cols) + eps);
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = gv(0, c) * xr[c] * inv[r];
  }
  const auto fl = flops::kPerNormalizedElement * xv.size();
  return t.push(std::move(out), any_grad(t, {x, gain}), [x, gain, inv = std::move(inv)](Tape& tp, Var self) {
    const Matrix& dy = tp.grad(self);
    const Matrix& xv = tp.value(x);
    const Matrix& gv = tp.value(gain);
    const std::size_t cols = xv.cols();
    std::vector<double> xhat(cols), gh(cols);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        xhat[c] = xv(r, c) * inv[r];
        gh[c] = dy(r, c) * gv(0, c);
      }
      if (tp.needs_grad(gain)) {
        Matrix& gg = tp.grad(gain);
        for (std::size_t c = 0; c < cols; ++c) gg(0, c) += dy(r, c) * xhat[c];
      }
      if (tp.needs_grad(x)) {
        const double m = dot(gh, xhat) / static_cast<double>(cols);
        auto xg = tp.grad(x).row(r);
        for (std::size_t c = 0; c < cols; ++c) xg[c] += inv[r] * (gh[c] - xhat[c] * m);
      }
    }
  }, fl);
}

Var layer_norm_rows(Tape& t, Var x, Var gain, double eps) {
  if (!(eps > 0.0)) throw ConfigError("layer_norm_rows: eps must be positive");
  const Matrix& xv = t.value(x);
  const Matrix& gv = t.value(gain);
  require_shape(gv.rows() == 1 && gv.cols() == xv.cols(), "layer_norm_rows: gain shape " + gv.shape_str());
  if (!xv.all_finite()) throw NumericError("layer_norm_rows: non-finite input");
  const std::size_t cols = xv.cols();
  const double n = static_cast<double>(cols);
  Matrix xhat(xv.rows(), cols);
  Matrix out(xv.rows(), cols);
  std::vector<double> inv(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const auto xr = xv.row(r);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= n;
    inv[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat(r, c) = (xr[c] - mean) * inv[r];
      out(r, c) = gv(0, c) * xhat(r, c);
    }
  }
  const auto fl = flops::kPerNormalizedElement * xv.size();
  return t.push(std::move(out), any_grad(t, {x, gain}),
                [x, gain, inv = std::move(inv), xhat = std::move(xhat)](Tape& tp, Var self) {
    const Matrix& dy = tp.grad(self);
    const Matrix& gv = tp.value(gain);
    const std::size_t cols = xhat.cols();
    const double n = static_cast<double>(cols);
    std::vector<double> gh(cols);
    for (std::size_t r = 0; r < xhat.rows(); ++r) {
      for (std::size_t c = 0; c < cols; ++c) gh[c] = dy(r, c) * gv(0, c);
      if (tp.needs_grad(gain)) {
        Matrix& gg = tp.grad(gain);
        for (std::size_t c = 0; c < cols; ++c) gg(0, c) += dy(r, c) * xhat(r, c);
      }
      if (tp.needs_grad(x)) {
        double mg = 0.0;
        for (double v : gh) mg += v;
        mg /= n;
        const double mgx = dot(gh, xhat.row(r)) / n;
        auto xg = tp.grad(x).row(r);
        for (std::size_t c = 0; c < cols; ++c) xg[c] += inv[r] * (gh[c] - mg - xhat(r, c) * mgx);
      }
    }
  }, fl);
}

Var head_mix(Tape& t, Var x, std::size_t n_heads, const Matrix* mask) {
  const Matrix& xv = t.value(x);
  require_shape(n_heads > 0 && xv.cols() % n_heads == 0, "head_mix: head dim not divisible by heads");
  require_shape(xv.rows() % n_heads == 0, "head_mix: rows not a multiple of heads");
  if (mask) require_shape(mask->rows() == n_heads && mask->cols() == xv.cols(), "head_mix: mask shape");
  const std::size_t c = xv.cols() / n_heads;
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t b = 0; b < xv.rows() / n_heads; ++b)
    for (std::size_t i = 0; i < n_heads; ++i)
      for (std::size_t j = 0; j < n_heads; ++j)
        for (std::size_t e = 0; e < c; ++e) {
          const double m = mask ? (*mask)(i, j * c + e) : 1.0;
          out(b * n_heads + i, j * c + e) = m * xv(b * n_heads + j, i * c + e);
        }
  Matrix mask_copy = mask ? *mask : Matrix();
  return t.push(std::move(out), t.needs_grad(x), [x, n_heads, mask_copy = std::move(mask_copy)](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    Matrix& xg = tp.grad(x);
    const std::size_t c = g.cols() / n_heads;
    for (std::size_t b = 0; b < g.rows() / n_heads; ++b)
      for (std::size_t i = 0; i < n_heads; ++i)
        for (std::size_t j = 0; j < n_heads; ++j)
          for (std::size_t e = 0; e < c; ++e) {
            const double m = mask_copy.empty() ? 1.0 : mask_copy(i, j * c + e);
            xg(b * n_heads + j, i * c + e) += m * g(b * n_heads + i, j * c + e);
          }
  }, 0);
}

Var head_mix_user(Tape& t, Var user, std::size_t n_heads) {
  const Matrix& uv = t.value(user);
  const std::size_t n_user = uv.rows();
  require_shape(n_heads > 0 && uv.cols() % n_heads == 0, "head_mix_user: head dim not divisible by heads");
  require_shape(n_user <= n_heads, "head_mix_user: more user rows than heads");
  const std::size_t c = uv.cols() / n_heads;
  Matrix out(n_user, uv.cols());
  for (std::size_t i = 0; i < n_user; ++i)
    for (std::size_t j = 0; j < n_user; ++j)
      for (std::size_t e = 0; e < c; ++e) out(i, j * c + e) = uv(j, i * c + e);
  return t.push(std::move(out), t.needs_grad(user), [user, n_heads](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    Matrix& ug = tp.grad(user);
    const std::size_t c = g.cols() / n_heads;
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.rows(); ++j)
        for (std::size_t e = 0; e < c; ++e) ug(j, i * c + e) += g(i, j * c + e);
  }, 0);
}

Var head_mix_item(Tape& t, Var user, Var items, std::size_t n_heads) {
  const Matrix& uv = t.value(user);
  const Matrix& iv = t.value(items);
  const std::size_t n_user = uv.rows();
  require_shape(n_user < n_heads, "head_mix_item: no item heads");
  const std::size_t n_item = n_heads - n_user;
  require_shape(uv.cols() % n_heads == 0 && iv.cols() == uv.cols(), "head_mix_item: column mismatch");
  require_shape(iv.rows() % n_item == 0, "head_mix_item: item rows not a multiple of item heads");
  const std::size_t c = uv.cols() / n_heads;
  const std::size_t batch = iv.rows() / n_item;
  Matrix out(iv.rows(), iv.cols());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t g = 0; g < n_item; ++g) {
      const std::size_t i = n_user + g;
      for (std::size_t j = 0; j < n_heads; ++j) {
        const double* src = j < n_user ? uv.row(j).data() + i * c : iv.row(b * n_item + (j - n_user)).data() + i * c;
        for (std::size_t e = 0; e < c; ++e) out(b * n_item + g, j * c + e) = src[e];
      }
    }
  return t.push(std::move(out), any_grad(t, {user, items}), [user, items, n_heads](Tape& tp, Var self) {
    const Matrix& gr = tp.grad(self);
    const std::size_t n_user = tp.value(user).rows();
    const std::size_t n_item = n_heads - n_user;
    const std::size_t c = gr.cols() / n_heads;
    const std::size_t batch = gr.rows() / n_item;
    const bool gu = tp.needs_grad(user);
    const bool gi = tp.needs_grad(items);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t g = 0; g < n_item; ++g) {
        const std::size_t i = n_user + g;
        for (std::size_t j = 0; j < n_heads; ++j) {
          double* dst = nullptr;
          if (j < n_user) {
            if (gu) dst = &tp.grad(user)(j, i * c);
          } else if (gi) {
            dst = &tp.grad(items)(b * n_item + (j - n_user), i * c);
          }
          if (!dst) continue;
          for (std::size_t e = 0; e < c; ++e) dst[e] += gr(b * n_item + g, j * c + e);
        }
      }
  }, 0);
}

Var cross_attention(Tape& t, Var q, Var keys, Var values, HeadMap map) {
  const Matrix& qv = t.value(q);
  const Matrix& kv = t.value(keys);
  const Matrix& vv = t.value(values);
  require_shape(kv.same_shape(vv), "cross_attention: keys/values shapes differ");
  require_shape(kv.cols() == qv.cols(), "cross_attention: key width != query width");
  require_shape(map.n_heads > 0 && kv.rows() % map.n_heads == 0, "cross_attention: key rows not a multiple of heads");
  require_shape(map.period > 0 && qv.rows() % map.period == 0, "cross_attention: query rows not a multiple of period");
  require_shape(map.offset + map.period <= map.n_heads, "cross_attention: head map out of range");
  const std::size_t dim = qv.cols();
  const std::size_t steps = kv.rows() / map.n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dim));
  Matrix out(qv.rows(), dim);
  Matrix weights(qv.rows(), steps);
  std::vector<double> scores(steps);
  for (std::size_t r = 0; r < qv.rows() && steps > 0; ++r) {
    const std::size_t h = map.offset + r % map.period;
    const auto qr = qv.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < steps; ++s) {
      scores[s] = dot(qr, kv.row(s * map.n_heads + h)) * inv_sqrt;
      mx = std::max(mx, scores[s]);
    }
    double sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      weights(r, s) = std::exp(scores[s] - mx);
      sum += weights(r, s);
    }
    auto orow = out.row(r);
    for (std::size_t s = 0; s < steps; ++s) {
      weights(r, s) /= sum;
      axpy(orow, weights(r, s), vv.row(s * map.n_heads + h));
    }
  }
  const std::uint64_t fl = qv.rows() * (flops::matmul(1, dim, steps) * 2 + flops::kPerNormalizedElement * steps);
  return t.push(std::move(out), any_grad(t, {q, keys, values}),
                [q, keys, values, map, inv_sqrt, weights = std::move(weights)](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    const Matrix& qv = tp.value(q);
    const Matrix& kv = tp.value(keys);
    const Matrix& vv = tp.value(values);
    const std::size_t steps = weights.cols();
    const bool gq = tp.needs_grad(q), gk = tp.needs_grad(keys), gv = tp.needs_grad(values);
    std::vector<double> dw(steps);
    for (std::size_t r = 0; r < qv.rows() && steps > 0; ++r) {
      const std::size_t h = map.offset + r % map.period;
      const auto gr = g.row(r);
      double acc = 0.0;
      for (std::size_t s = 0; s < steps; ++s) {
        dw[s] = dot(gr, vv.row(s * map.n_heads + h));
        acc += weights(r, s) * dw[s];
        if (gv) axpy(tp.grad(values).row(s * map.n_heads + h), weights(r, s), gr);
      }
      for (std::size_t s = 0; s < steps; ++s) {
        const double ds = weights(r, s) * (dw[s] - acc) * inv_sqrt;
        if (gq) axpy(tp.grad(q).row(r), ds, kv.row(s * map.n_heads + h));
        if (gk) axpy(tp.grad(keys).row(s * map.n_heads + h), ds, qv.row(r));
      }
    }
  }, fl);
}

Var block_self_attention(Tape& t, Var q, Var k, Var v, std::size_t block) {
  const Matrix& qv = t.value(q);
  const Matrix& kv = t.value(k);
  const Matrix& vv = t.value(v);
  require_shape(qv.same_shape(kv) && qv.same_shape(vv), "block_self_attention: q/k/v shapes differ");
  require_shape(block > 0 && qv.rows() % block == 0, "block_self_attention: rows not a multiple of block");
  const std::size_t dim = qv.cols();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dim));
  Matrix out(qv.rows(), dim);
  Matrix weights(qv.rows(), block);
  for (std::size_t r = 0; r < qv.rows(); ++r) {
    const std::size_t base = (r / block) * block;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < block; ++j) {
      weights(r, j) = dot(qv.row(r), kv.row(base + j)) * inv_sqrt;
      mx = std::max(mx, weights(r, j));
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < block; ++j) {
      weights(r, j) = std::exp(weights(r, j) - mx);
      sum += weights(r, j);
    }
    for (std::size_t j = 0; j < block; ++j) {
      weights(r, j) /= sum;
      axpy(out.row(r), weights(r, j), vv.row(base + j));
    }
  }
  const std::uint64_t fl = qv.rows() * (flops::matmul(1, dim, block) * 2 + flops::kPerNormalizedElement * block);
  return t.push(std::move(out), any_grad(t, {q, k, v}),
                [q, k, v, block, inv_sqrt, weights = std::move(weights)](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    const Matrix& qv = tp.value(q);
    const Matrix& kv = tp.value(k);
    const Matrix& vv = tp.value(v);
    const bool gq = tp.needs_grad(q), gk = tp.needs_grad(k), gv = tp.needs_grad(v);
    std::vector<double> dw(block);
    for (std::size_t r = 0; r < qv.rows(); ++r) {
      const std::size_t base = (r / block) * block;
      double acc = 0.0;
      for (std::size_t j = 0; j < block; ++j) {
        dw[j] = dot(g.row(r), vv.row(base + j));
        acc += weights(r, j) * dw[j];
        if (gv) axpy(tp.grad(v).row(base + j), weights(r, j), g.row(r));
      }
      for (std::size_t j = 0; j < block; ++j) {
        const double ds = weights(r, j) * (dw[j] - acc) * inv_sqrt;
        if (gq) axpy(tp.grad(q).row(r), ds, kv.row(base + j));
        if (gk) axpy(tp.grad(k).row(base + j), ds, qv.row(r));
      }
    }
  }, fl);
}

Var reshape(Tape& t, Var x, std::size_t rows, std::size_t cols) {
  Matrix out = t.value(x);
  out.reshape(rows, cols);
  return t.push(std::move(out), t.needs_grad(x), [x](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    Matrix& xg = tp.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) xg.flat()[i] += g.flat()[i];
  }, 0);
}

Var concat_cols(Tape& t, std::span<const Var> parts) {
  require_shape(!parts.empty(), "concat_cols: no parts");
  const std::size_t rows = t.value(parts[0]).rows();
  std::size_t cols = 0;
  bool ng = false;
  for (Var p : parts) {
    require_shape(t.value(p).rows() == rows, "concat_cols: row counts differ");
    cols += t.value(p).cols();
    ng = ng || t.needs_grad(p);
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (Var p : parts) {
    const Matrix& pv = t.value(p);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(pv.row(r).begin(), pv.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(off));
    off += pv.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.push(std::move(out), ng, [ps = std::move(ps)](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    std::size_t off = 0;
    for (Var p : ps) {
      const std::size_t w = tp.value(p).cols();
      if (tp.needs_grad(p)) {
        Matrix& pg = tp.grad(p);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) pg(r, c) += g(r, off + c);
      }
      off += w;
    }
  }, 0);
}

Var assemble_candidates(Tape& t, Var user, Var items, std::size_t n_item) {
  const Matrix& uv = t.value(user);
  const Matrix& iv = t.value(items);
  require_shape(n_item > 0 && iv.rows() % n_item == 0, "assemble_candidates: item rows");
  require_shape(uv.empty() || uv.cols() == iv.cols(), "assemble_candidates: widths differ");
  const std::size_t dim = iv.cols();
  const std::size_t batch = iv.rows() / n_item;
  const std::size_t user_width = uv.size();
  Matrix out(batch, user_width + n_item * dim);
  for (std::size_t b = 0; b < batch; ++b) {
    auto row = out.row(b);
    std::copy(uv.flat().begin(), uv.flat().end(), row.begin());
    const double* src = iv.row(b * n_item).data();
    std::copy(src, src + n_item * dim, row.begin() + static_cast<std::ptrdiff_t>(user_width));
  }
  return t.push(std::move(out), any_grad(t, {user, items}), [user, items, n_item](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    const std::size_t user_width = tp.value(user).size();
    const std::size_t dim = tp.value(items).cols();
    for (std::size_t b = 0; b < g.rows(); ++b) {
      const auto row = g.row(b);
      if (tp.needs_grad(user)) {
        auto ug = tp.grad(user).flat();
        for (std::size_t i = 0; i < user_width; ++i) ug[i] += row[i];
      }
      if (tp.needs_grad(items)) {
        double* dst = &tp.grad(items)(b * n_item, 0);
        for (std::size_t i = 0; i < n_item * dim; ++i) dst[i] += row[user_width + i];
      }
    }
  }, 0);
}

Var split_project(Tape& t, Var e, std::span<const Segment> segments, std::span<const Var> w) {
  const Matrix& ev = t.value(e);
  std::size_t total_heads = 0;
  for (const Segment& s : segments) {
    require_shape(s.heads > 0, "split_project: segment without heads");
    require_shape(s.offset + s.length <= ev.cols(), "split_project: segment exceeds input width");
    total_heads += s.heads;
  }
  require_shape(w.size() == total_heads, "split_project: one projection per head required");
  const std::size_t dim = t.value(w[0]).cols();
  Matrix out(ev.rows() * total_heads, dim);
  std::uint64_t fl = 0;
  std::size_t head = 0;
  std::vector<double> chunk;
  for (const Segment& s : segments) {
    const std::size_t d = s.chunk();
    chunk.assign(d, 0.0);
    for (std::size_t j = 0; j < s.heads; ++j, ++head) {
      const Matrix& wj = t.value(w[head]);
      require_shape(wj.rows() == d && wj.cols() == dim, "split_project: projection " + std::to_string(head) +
                                                            " has shape " + wj.shape_str());
      const std::size_t lo = s.offset + j * d;
      const std::size_t hi = std::min(lo + d, s.offset + s.length);
      for (std::size_t b = 0; b < ev.rows(); ++b) {
        std::fill(chunk.begin(), chunk.end(), 0.0);
        for (std::size_t c = lo; c < hi; ++c) chunk[c - lo] = ev(b, c);
        auto orow = out.row(b * total_heads + head);
        for (std::size_t k = 0; k < d; ++k) axpy(orow, chunk[k], wj.row(k));
      }
      fl += ev.rows() * flops::matmul(1, d, dim);
    }
  }
  bool ng = t.needs_grad(e);
  for (Var wi : w) ng = ng || t.needs_grad(wi);
  std::vector<Segment> segs(segments.begin(), segments.end());
  std::vector<Var> ws(w.begin(), w.end());
  return t.push(std::move(out), ng, [e, segs = std::move(segs), ws = std::move(ws), total_heads](Tape& tp, Var self) {
    const Matrix& g = tp.grad(self);
    const Matrix& ev = tp.value(e);
    std::size_t head = 0;
    for (const Segment& s : segs) {
      const std::size_t d = s.chunk();
      for (std::size_t j = 0; j < s.heads; ++j, ++head) {
        const Matrix& wj = tp.value(ws[head]);
        const std::size_t lo = s.offset + j * d;
        const std::size_t hi = std::min(lo + d, s.offset + s.length);
        for (std::size_t b = 0; b < ev.rows(); ++b) {
          const auto gr = g.row(b * total_heads + head);
          if (tp.needs_grad(ws[head])) {
            Matrix& wg = tp.grad(ws[head]);
            for (std::size_t c = lo; c < hi; ++c) axpy(wg.row(c - lo), ev(b, c), gr);
          }
          if (tp.needs_grad(e)) {
            Matrix& eg = tp.grad(e);
            for (std::size_t c = lo; c < hi; ++c) eg(b, c) += dot(gr, wj.row(c - lo));
          }
        }
      }
    }
  }, fl);
}

Var bce_with_logits(Tape& t, Var logits, const Matrix& labels) {
  const Matrix& z = t.value(logits);
  require_shape(z.same_shape(labels), "bce_with_logits: labels shape " + labels.shape_str());
  double loss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double zi = z.flat()[i];
    // softplus(z) = max(z, 0) + log1p(exp(-|z|))
    loss += std::max(zi, 0.0) + std::log1p(std::exp(-std::abs(zi))) - labels.flat()[i] * zi;
  }
  if (!std::isfinite(loss)) throw NumericError("bce_with_logits: non-finite loss");
  return t.push(Matrix(1, 1, loss), t.needs_grad(logits), [logits, labels](Tape& tp, Var self) {
    const double g = tp.grad(self)(0, 0);
    const Matrix& z = tp.value(logits);
    Matrix& zg = tp.grad(logits);
    for (std::size_t i = 0; i < z.size(); ++i) zg.flat()[i] += g * (sigmoid(z.flat()[i]) - labels.flat()[i]);
  }, 0);
}

}  // namespace mixformer::ops
