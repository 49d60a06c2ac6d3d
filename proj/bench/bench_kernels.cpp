// Serial reference kernels vs the OpenMP kernels the model uses.
#include <chrono>
#include <cstdio>
#include <random>

#include "mixformer/kernels.hpp"

using namespace mixformer;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix m(r, c);
  for (double& x : m.flat()) x = u(rng);
  return m;
}

template <class F>
double best_of(int reps, F&& f) {
  double best = 1e300;
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

}  // namespace

int main() {
  std::mt19937_64 rng(1);
  std::printf("threads %d\n", kernels::max_threads());
  std::printf("%-14s %6s %6s %6s %12s %12s %8s %10s\n", "kernel", "m", "k", "n", "ref_ms", "par_ms", "speedup", "max_diff");
  // (rows, in, out): a sequence FFN layer at T = 64 / 512 and a per-head block at K = 32.
  for (auto [m, k, n] : {std::array<std::size_t, 3>{64, 128, 256}, {512, 128, 256}, {512, 768, 1536}, {128, 32, 64}}) {
    const Matrix a = random_matrix(m, k, rng);
    const Matrix b = random_matrix(k, n, rng);
    Matrix r(m, n), p(m, n);
    const double tr = best_of(3, [&] { kernels::ref::matmul(a, b, r); });
    const double tp = best_of(3, [&] { kernels::par::matmul(a, b, p); });
    std::printf("%-14s %6zu %6zu %6zu %12.3f %12.3f %8.2f %10.2e\n", "matmul", m, k, n, tr * 1e3, tp * 1e3, tr / tp,
                max_abs_diff(r, p));

    const Matrix g = random_matrix(m, n, rng);
    Matrix rw(k, n), pw(k, n);
    const double ta = best_of(3, [&] { rw.fill(0.0); kernels::ref::matmul_at_accum(a, g, rw); });
    const double tb = best_of(3, [&] { pw.fill(0.0); kernels::par::matmul_at_accum(a, g, pw); });
    std::printf("%-14s %6zu %6zu %6zu %12.3f %12.3f %8.2f %10.2e\n", "matmul_at", m, k, n, ta * 1e3, tb * 1e3, ta / tb,
                max_abs_diff(rw, pw));

    Matrix rx(m, k), px(m, k);
    const double tc = best_of(3, [&] { rx.fill(0.0); kernels::ref::matmul_bt_accum(g, b, rx); });
    const double td = best_of(3, [&] { px.fill(0.0); kernels::par::matmul_bt_accum(g, b, px); });
    std::printf("%-14s %6zu %6zu %6zu %12.3f %12.3f %8.2f %10.2e\n", "matmul_bt", m, k, n, tc * 1e3, td * 1e3, tc / td,
                max_abs_diff(rx, px));
  }
}
