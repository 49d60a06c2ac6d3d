#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "mixformer/kernels.hpp"
#include "mixformer/mathcore.hpp"
#include "mixformer/ops.hpp"
#include "support.hpp"

using namespace mixformer;
using doctest::Approx;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double a = 1.0) {
  std::uniform_real_distribution<double> u(-a, a);
  Matrix m(r, c);
  for (double& x : m.flat()) x = u(rng);
  return m;
}

FfnParams scalar_ffn(double g, double u, double d) {
  return {Matrix(1, 1, g), Matrix(1, 1, u), Matrix(1, 1, d)};
}

}  // namespace

TEST_CASE("rms_norm hand values") {
  const std::vector<double> x{3.0, 4.0};
  const auto y = rms_norm(x, NormParams::unit(2, 0.0));
  CHECK(y[0] == Approx(3.0 / std::sqrt(12.5)));
  CHECK(y[1] == Approx(4.0 / std::sqrt(12.5)));
  CHECK(y[0] == Approx(0.84853).epsilon(1e-5));
  CHECK(y[1] == Approx(1.13137).epsilon(1e-5));

  const auto z = rms_norm(std::vector<double>{0.0, 0.0}, NormParams::unit(2));
  CHECK(z[0] == 0.0);
  CHECK(z[1] == 0.0);

  for (double c : {0.5, 3.0, 1e4}) {
    const auto ones = rms_norm(std::vector<double>(7, c), NormParams::unit(7, 0.0));
    for (double v : ones) CHECK(v == Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("rms_norm output has unit rms") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(1.0, 10.0);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> x(16);
    for (auto& v : x) v = (rng() % 2 ? 1 : -1) * u(rng);
    const auto y = rms_norm(x, NormParams::unit(16));
    double ms = 0.0;
    for (double v : y) ms += v * v;
    CHECK(std::sqrt(ms / 16) == Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("rms_norm errors") {
  CHECK_THROWS_AS(rms_norm(std::vector<double>{1, 2, 3}, NormParams::unit(2)), ShapeError);
  CHECK_THROWS_AS(rms_norm(std::vector<double>{1, std::numeric_limits<double>::quiet_NaN()}, NormParams::unit(2)),
                  NumericError);
}

TEST_CASE("layer_norm hand values") {
  auto y = layer_norm(std::vector<double>{2.0, 4.0}, NormParams::unit(2, 0.0));
  CHECK(y[0] == Approx(-1.0));
  CHECK(y[1] == Approx(1.0));
  y = layer_norm(std::vector<double>{-1.0, 1.0}, NormParams::unit(2, 0.0));
  CHECK(y[0] == Approx(-1.0));
  CHECK(y[1] == Approx(1.0));
  y = layer_norm(std::vector<double>{1.0, 1.0}, NormParams::unit(2));
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 0.0);
}

TEST_CASE("swiglu_ffn") {
  const auto y = swiglu_ffn(std::vector<double>{1.0}, scalar_ffn(2, 1, 1));
  CHECK(y[0] == Approx(2.0 * sigmoid(2.0)));
  CHECK(y[0] == Approx(1.76159).epsilon(1e-5));

  std::mt19937_64 rng(7);
  FfnParams p{random_matrix(3, 6, rng), random_matrix(3, 6, rng), random_matrix(6, 3, rng)};
  const auto zero = swiglu_ffn(std::vector<double>(3, 0.0), p);
  for (double v : zero) CHECK(v == 0.0);

  const std::vector<double> x{0.3, -0.7, 1.1};
  const auto a = swiglu_ffn(x, p);
  for (double& v : p.down.flat()) v *= 2.0;
  const auto b = swiglu_ffn(x, p);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == Approx(2.0 * a[i]));

  CHECK_THROWS_AS(swiglu_ffn(std::vector<double>{1.0, 2.0}, p), ShapeError);
}

TEST_CASE("softmax") {
  auto p = softmax(std::vector<double>{0, 0, 0});
  for (double v : p) CHECK(v == Approx(1.0 / 3.0));
  p = softmax(std::vector<double>{1000.0, 1000.0});
  CHECK(p[0] == 0.5);
  CHECK(p[1] == 0.5);
  p = softmax(std::vector<double>{std::log(2.0), 0.0});
  CHECK(p[0] == Approx(2.0 / 3.0));
  CHECK(p[1] == Approx(1.0 / 3.0));
  CHECK_THROWS_AS(softmax(std::vector<double>{}), ShapeError);
}

TEST_CASE("sigmoid is stable at extremes") {
  CHECK(sigmoid(800.0) == 1.0);
  CHECK(sigmoid(-800.0) == 0.0);
  CHECK(sigmoid(0.0) == 0.5);
  for (double z : {-3.0, -0.2, 0.0, 1.5, 4.0}) {
    const double h = 1e-6;
    CHECK(swish_grad(z) == Approx((swish(z + h) - swish(z - h)) / (2 * h)).epsilon(1e-7));
  }
}

TEST_CASE("tape gradient of identity and swiglu matches finite differences") {
  std::mt19937_64 rng(11);
  Matrix x = random_matrix(3, 4, rng);
  Matrix gate = random_matrix(4, 8, rng, 0.5), up = random_matrix(4, 8, rng, 0.5), down = random_matrix(8, 4, rng, 0.5);
  Matrix gain = random_matrix(1, 4, rng);
  Matrix gx(3, 4), gg(4, 8), gu(4, 8), gd(8, 4), gn(1, 4);
  const Matrix w = random_matrix(3, 4, rng);  // fixed cotangent

  auto run = [&](bool grad) {
    Tape t(grad);
    const Var vx = t.param(x, grad ? &gx : nullptr);
    const Var vn = ops::rms_norm_rows(t, vx, t.param(gain, grad ? &gn : nullptr), 1e-6);
    const Var h = ops::swiglu_gate(t, ops::linear(t, vn, t.param(gate, grad ? &gg : nullptr)),
                                   ops::linear(t, vn, t.param(up, grad ? &gu : nullptr)));
    const Var y = ops::add(t, ops::linear(t, h, t.param(down, grad ? &gd : nullptr)), vx);
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w.flat()[i] * t.value(y).flat()[i];
    if (grad) t.backward(y, w);
    return s;
  };
  run(true);
  for (auto [m, g] : {std::pair{&x, &gx}, {&gate, &gg}, {&up, &gu}, {&down, &gd}, {&gain, &gn}})
    CHECK(testing::grad_check(*m, *g, [&] { return run(false); }) < 1e-4);

  // Identity op: d(sum w*x)/dx = w exactly.
  Tape t;
  Matrix gi(3, 4);
  const Var vi = t.param(x, &gi);
  t.backward(ops::scale(t, vi, 1.0), w);
  CHECK(max_abs_diff(gi, w) == 0.0);
}

TEST_CASE("par kernels agree with the serial reference") {
  std::mt19937_64 rng(5);
  for (auto [m, k, n] : {std::array<std::size_t, 3>{1, 1, 1}, {7, 3, 5}, {33, 17, 9}, {64, 64, 64}}) {
    const Matrix a = random_matrix(m, k, rng), b = random_matrix(k, n, rng);
    Matrix r(m, n), p(m, n);
    kernels::ref::matmul(a, b, r);
    kernels::par::matmul(a, b, p);
    CHECK(max_abs_diff(r, p) < 1e-12);

    const Matrix g = random_matrix(m, n, rng);
    Matrix ra(k, n), pa(k, n), rb(m, k), pb(m, k);
    kernels::ref::matmul_at_accum(a, g, ra);
    kernels::par::matmul_at_accum(a, g, pa);
    CHECK(max_abs_diff(ra, pa) < 1e-12);
    kernels::ref::matmul_bt_accum(g, b, rb);
    kernels::par::matmul_bt_accum(g, b, pb);
    CHECK(max_abs_diff(rb, pb) < 1e-12);

    if (m >= 3) {
      const kernels::RowSet rows{1, 3};
      Matrix rs(m, n, 9.0), ps(m, n, 9.0);
      kernels::ref::matmul(a, b, rs, rows);
      kernels::par::matmul(a, b, ps, rows);
      CHECK(max_abs_diff(rs, ps) < 1e-12);
      CHECK(rs(0, 0) == 9.0);  // rows outside the set untouched
    }
  }
}

TEST_CASE("matrix basics") {
  const Matrix m = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
  CHECK(m.transposed() == Matrix::from_rows({{1, 4}, {2, 5}, {3, 6}}));
  CHECK(m.frobenius_norm() == Approx(std::sqrt(91.0)));
  CHECK(m.max_abs() == 6.0);
  CHECK_THROWS_AS(Matrix::from_rows({{1, 2}, {3}}), ShapeError);
  CHECK_THROWS_AS(max_abs_diff(m, m.transposed()), ShapeError);
}
