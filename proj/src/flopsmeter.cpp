#include "mixformer/flopsmeter.hpp"

#include <sstream>

#include "mixformer/decouple.hpp"
#include "mixformer/mathcore.hpp"

namespace mixformer {
namespace {

using U = std::uint64_t;

constexpr U kNorm = flops::kPerNormalizedElement;

U ceil_div(U a, U b) { return b == 0 ? 0 : (a + b - 1) / b; }

/// Shape facts both the counter and the parameter count need.
struct Shape {
  U n, d, l, w, hq, hs, ht, tasks;
  U n_user, n_item;
  bool split_route;

  Shape(const ModelConfig& c, const InputDims& in) {
    c.validate();
    n = c.n_heads;
    d = c.head_dim;
    l = c.n_layers;
    w = c.model_width();
    hq = c.expansion_ratio * d;
    hs = c.expansion_ratio * w;
    ht = c.task_hidden_width();
    tasks = c.n_tasks;
    n_user = 0;
    if (c.decoupling.enabled)
      n_user = c.decoupling.user_heads ? *c.decoupling.user_heads : allocate_heads(in.d_user, in.d_item, n).n_user;
    n_item = n - n_user;
    split_route = c.decoupling.enabled && n_user > 0;
  }
};

/// Per-request flops of one route, by component and side.
class Walker {
 public:
  Walker(const ModelConfig& c, const InputDims& in, U steps) : c_(c), in_(in), s_(c, in), t_(steps) {}

  void sequence(FlopsTrace& f) const {
    f.add(Component::kSeqFfn, Side::kUser, flops::matmul(t_, in_.action_width, s_.w));
    for (U layer = 0; layer < s_.l; ++layer) {
      f.add(Component::kSeqFfn, Side::kUser, kNorm * t_ * s_.w + ffn(t_, s_.w, s_.hs));
      f.add(Component::kKvProj, Side::kUser, 2 * flops::matmul(t_ * s_.n, s_.d, s_.d));
    }
  }

  /// B candidates through the route that the model uses for this config.
  void candidates(FlopsTrace& f, U b) const {
    if (s_.split_route) {
      f.add(Component::kSplitHeads, Side::kUser, split(1, in_.d_user, s_.n_user));
      f.add(Component::kSplitHeads, Side::kItem, split(b, in_.d_item, s_.n_item));
      for (U layer = 0; layer < s_.l; ++layer) {
        rows(f, Side::kUser, s_.n_user);
        rows(f, Side::kItem, b * s_.n_item);
      }
    } else {
      f.add(Component::kSplitHeads, Side::kItem, split(b, in_.d_user + in_.d_item, s_.n));
      for (U layer = 0; layer < s_.l; ++layer) rows(f, Side::kItem, b * s_.n);
    }
    f.add(Component::kTaskHeads, Side::kItem, s_.tasks * (flops::matmul(b, s_.w, s_.ht) + flops::matmul(b, s_.ht, 1)));
  }

 private:
  static U ffn(U rows, U in, U hidden) { return 2 * flops::matmul(rows, in, hidden) + flops::matmul(rows, hidden, in); }

  U split(U rows, U width, U heads) const { return rows * heads * flops::matmul(1, ceil_div(width, heads), s_.d); }

  /// One block applied to `r` head rows.
  void rows(FlopsTrace& f, Side side, U r) const {
    const auto& ab = c_.ablation;
    U qm = 0;
    if (!ab.wo_hm) {
      qm += kNorm * r * s_.d;
      if (ab.hm_to_sa) qm += 3 * flops::matmul(r, s_.d, s_.d) + r * (2 * flops::matmul(1, s_.d, s_.n) + kNorm * s_.n);
    }
    if (!ab.wo_qm_ffn) qm += kNorm * r * s_.d + ffn(r, s_.d, s_.hq);
    f.add(Component::kQueryMixer, side, qm);
    f.add(Component::kAttention, side, r * (2 * flops::matmul(1, s_.d, t_) + kNorm * t_));
    f.add(Component::kOutputFusion, side, kNorm * r * s_.d + ffn(r, s_.d, s_.hq));
  }

  const ModelConfig& c_;
  InputDims in_;
  Shape s_;
  U t_;
};

}  // namespace

std::uint64_t count_params(const ModelConfig& cfg, const InputDims& in) {
  const Shape s(cfg, in);
  const auto& ab = cfg.ablation;
  U p = 0;
  if (s.n_user > 0) {
    p += s.n_user * ceil_div(in.d_user, s.n_user) * s.d + s.n_item * ceil_div(in.d_item, s.n_item) * s.d;
  } else {
    p += s.n * ceil_div(in.d_user + in.d_item, s.n) * s.d;
  }
  p += in.action_width * s.w;
  const U ffn_d = 3 * s.d * s.hq;
  for (U layer = 0; layer < s.l; ++layer) {
    if (!ab.wo_hm) p += s.d;
    if (ab.hm_to_sa) p += 3 * s.d * s.d;
    if (!ab.wo_qm_ffn) p += s.d + s.n * ffn_d;
    if (layer == 0 || !ab.shared_seq_ffn) p += s.w + 3 * s.w * s.hs;
    p += 2 * s.n * s.d * s.d;
    p += s.d + (ab.shared_of_ffn ? 1 : s.n) * ffn_d;
  }
  p += s.tasks * (s.w * s.ht + s.ht + s.ht + 1);
  return p;
}

FlopsReport count_flops(const ModelConfig& cfg, const InputDims& in, std::size_t steps, std::size_t k,
                        std::size_t batch, bool rlb) {
  if (k == 0 || batch == 0 || batch % k != 0)
    throw ConfigError("count_flops: batch (" + std::to_string(batch) + ") must be a positive multiple of K (" +
                      std::to_string(k) + ")");
  const Walker walk(cfg, in, steps);
  FlopsTrace per_request;
  if (rlb) {
    walk.sequence(per_request);
    walk.candidates(per_request, k);
  } else {
    FlopsTrace one;
    walk.sequence(one);
    walk.candidates(one, 1);
    for (std::size_t c = 0; c < k; ++c) per_request += one;
  }
  FlopsReport r;
  for (std::size_t i = 0; i < batch / k; ++i) r.counts += per_request;
  r.params = count_params(cfg, in);
  return r;
}

double rlb_savings(const ModelConfig& cfg, const InputDims& in, std::size_t steps, std::size_t k) {
  if (!cfg.decoupling.enabled) throw ConfigError("rlb_savings: decoupling is disabled");
  const double with = static_cast<double>(count_flops(cfg, in, steps, k, k, true).total());
  const double without = static_cast<double>(count_flops(cfg, in, steps, k, k, false).total());
  return 1.0 - with / without;
}

std::vector<ScalingRow> scaling_report(const ModelConfig& base, const InputDims& in, ScalingAxis axis,
                                       const std::vector<std::size_t>& points, std::size_t k, std::size_t batch,
                                       bool rlb) {
  if (points.empty()) throw ConfigError("scaling_report: no points");
  std::vector<ScalingRow> rows;
  for (const std::size_t pt : points) {
    ModelConfig c = base;
    std::size_t steps = 512;
    if (axis == ScalingAxis::kDense) {
      c.head_dim = pt;
    } else {
      steps = pt;
    }
    const FlopsReport r = count_flops(c, in, steps, k, batch, rlb);
    rows.push_back({c.n_heads, c.n_layers, c.head_dim, steps, r.params, r.total()});
  }
  return rows;
}

namespace {

void comment_lines(std::ostream& os, const std::string& header) {
  std::istringstream in(header);
  std::string line;
  while (std::getline(in, line)) os << "# " << line << '\n';
}

}  // namespace

void write_report_csv(std::ostream& os, const FlopsReport& r, const std::string& header) {
  comment_lines(os, header);
  os << "component,side,flops\n";
  for (std::size_t c = 0; c < kNumComponents; ++c)
    for (std::size_t s = 0; s < kNumSides; ++s) {
      const auto comp = static_cast<Component>(c);
      const auto side = static_cast<Side>(s);
      os << component_name(comp) << ',' << side_name(side) << ',' << r.counts.at(comp, side) << '\n';
    }
  os << "total,all," << r.total() << '\n';
  os << "params,all," << r.params << '\n';
}

void write_scaling_csv(std::ostream& os, const std::vector<ScalingRow>& rows, const std::string& header) {
  comment_lines(os, header);
  os << "heads,layers,head_dim,seq_len,params,flops\n";
  for (const auto& r : rows)
    os << r.heads << ',' << r.layers << ',' << r.head_dim << ',' << r.steps << ',' << r.params << ',' << r.flops
       << '\n';
}

}  // namespace mixformer
