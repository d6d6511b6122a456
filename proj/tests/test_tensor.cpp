#include <cmath>
#include <vector>

#include "doctest.h"
#include "sesim/tensor.hpp"

using namespace sesim;

namespace {

// Direct convolution, quadruple loop over output channels / positions /
// input channels / kernel taps. Deliberately shares no code with im2col.
Tensord reference_conv(const Tensord& input, const ConvSpec<double>& spec) {
  const Index pad = spec.pad();
  const auto [oh, ow] = spec.out_extents(input.height(), input.width());
  Tensord out(input.batch(), spec.out_channels(), oh, ow);
  for (Index n = 0; n < input.batch(); ++n)
    for (Index co = 0; co < spec.out_channels(); ++co)
      for (Index r = 0; r < oh; ++r)
        for (Index c = 0; c < ow; ++c) {
          double acc = spec.bias[co];
          for (Index ci = 0; ci < input.channels(); ++ci)
            for (Index ki = 0; ki < spec.kernel_h(); ++ki)
              for (Index kj = 0; kj < spec.kernel_w(); ++kj) {
                const Index sr = r * spec.stride - pad + ki;
                const Index sc = c * spec.stride - pad + kj;
                if (sr < 0 || sr >= input.height() || sc < 0 || sc >= input.width())
                  continue;
                acc += spec.weights(co, ci, ki, kj) * input(0 + n, ci, sr, sc);
              }
          out(n, co, r, c) = acc;
        }
  return out;
}

double max_rel_diff(const Tensord& a, const Tensord& b) {
  REQUIRE(a.same_shape(b));
  double worst = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const double denom = std::max(1.0, std::abs(b.data()[i]));
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]) / denom);
  }
  return worst;
}

// Central difference of a scalar functional in one coordinate.
template <class F>
double fd(F&& eval, double* data, Index i, double eps = 1e-5) {
  const double saved = data[i];
  data[i] = saved + eps;
  const double up = eval();
  data[i] = saved - eps;
  const double down = eval();
  data[i] = saved;
  return (up - down) / (2 * eps);
}

template <class F>
double worst_fd_err(F&& eval, double* data, Index n, const double* analytic) {
  double worst = 0;
  for (Index i = 0; i < n; ++i) {
    const double num = fd(eval, data, i);
    worst = std::max(worst,
                     std::abs(analytic[i] - num) / std::max(1.0, std::abs(num)));
  }
  return worst;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("conv2d matches a direct quadruple-loop reference") {
  Rng rng(101);
  struct Case {
    Index cin, cout, k, h, w;
    int stride;
    Padding pad;
  };
  const std::vector<Case> cases = {
      {3, 4, 3, 10, 10, 1, Padding::zero}, {3, 4, 3, 10, 10, 1, Padding::none},
      {2, 5, 3, 9, 11, 2, Padding::zero},  {4, 2, 5, 12, 12, 1, Padding::none},
      {1, 1, 1, 6, 6, 1, Padding::zero},
  };
  for (const auto& cs : cases) {
    Tensord x = random_normal<double>(1, cs.cin, cs.h, cs.w, rng);
    ConvSpec<double> spec{random_normal<double>(cs.cout, cs.cin, cs.k, cs.k, rng),
                          VectorX<double>(cs.cout), cs.stride, cs.pad};
    for (Index i = 0; i < cs.cout; ++i) spec.bias[i] = rng.normal() * 0.1;
    CHECK(max_rel_diff(conv2d_forward(x, spec), reference_conv(x, spec)) <= 1e-12);
  }
}

TEST_CASE("conv2d 1x1 identity kernel preserves the input") {
  Rng rng(5);
  const Index C = 3;
  Tensord x = random_normal<double>(2, C, 7, 7, rng);
  ConvSpec<double> spec{Tensord::zeros(C, C, 1, 1), VectorX<double>::Zero(C), 1,
                        Padding::none};
  for (Index c = 0; c < C; ++c) spec.weights(c, c, 0, 0) = 1.0;
  const Tensord y = conv2d_forward(x, spec);
  CHECK((y.array() == x.array()).all());
}

TEST_CASE("conv2d all-ones 3x3 kernel on a constant input gives 9c") {
  const double c = 0.5;  // exact in binary, so the sum of nine is exact too
  Tensord x = Tensord::constant(1, 1, 8, 8, c);
  ConvSpec<double> spec{Tensord::constant(1, 1, 3, 3, 1.0), VectorX<double>::Zero(1),
                        1, Padding::none};
  const Tensord y = conv2d_forward(x, spec);
  CHECK(y.height() == 6);
  CHECK(y.width() == 6);
  CHECK((y.array() == 9 * c).all());
}

TEST_CASE("conv2d is linear in its input when the bias is zero") {
  Rng rng(17);
  Tensord x = random_normal<double>(1, 2, 8, 8, rng);
  Tensord y = random_normal<double>(1, 2, 8, 8, rng);
  ConvSpec<double> spec{random_normal<double>(3, 2, 3, 3, rng),
                        VectorX<double>::Zero(3), 1, Padding::zero};
  Tensord mix(1, 2, 8, 8);
  mix.array() = 1.75 * x.array() - 0.5 * y.array();
  Tensord expect = conv2d_forward(x, spec);
  expect.array() = 1.75 * expect.array() - 0.5 * conv2d_forward(y, spec).array();
  CHECK(max_rel_diff(conv2d_forward(mix, spec), expect) <= 1e-10);
}

TEST_CASE("conv2d rejects mismatched channel counts and empty outputs") {
  Rng rng(1);
  ConvSpec<double> spec{random_normal<double>(2, 3, 3, 3, rng),
                        VectorX<double>::Zero(2), 1, Padding::none};
  Tensord wrong = random_normal<double>(1, 4, 8, 8, rng);
  CHECK_THROWS_AS(conv2d_forward(wrong, spec), std::invalid_argument);
  Tensord tiny = random_normal<double>(1, 3, 2, 2, rng);  // 3x3 kernel cannot fit
  CHECK_THROWS_AS(conv2d_forward(tiny, spec), std::invalid_argument);
}

TEST_CASE("conv2d backward: zero grad_out gives zero gradients") {
  Rng rng(23);
  Tensord x = random_normal<double>(1, 2, 6, 6, rng);
  ConvSpec<double> spec{random_normal<double>(3, 2, 3, 3, rng),
                        VectorX<double>::Zero(3), 1, Padding::zero};
  const auto g = conv2d_backward(x, spec, Tensord::zeros(1, 3, 6, 6));
  CHECK((g.input.array() == 0).all());
  CHECK((g.weights.array() == 0).all());
  CHECK((g.bias.array() == 0).all());
}

TEST_CASE("conv2d backward: 1x1 identity kernel passes the gradient through") {
  Rng rng(29);
  const Index C = 2;
  Tensord x = random_normal<double>(1, C, 5, 5, rng);
  ConvSpec<double> spec{Tensord::zeros(C, C, 1, 1), VectorX<double>::Zero(C), 1,
                        Padding::none};
  for (Index c = 0; c < C; ++c) spec.weights(c, c, 0, 0) = 1.0;
  const Tensord gout = random_normal<double>(1, C, 5, 5, rng);
  const auto g = conv2d_backward(x, spec, gout);
  CHECK((g.input.array() == gout.array()).all());
}

TEST_CASE("conv2d backward matches central finite differences") {
  Rng rng(31);
  Tensord x = random_normal<double>(1, 2, 6, 6, rng);
  ConvSpec<double> spec{random_normal<double>(3, 2, 3, 3, rng),
                        VectorX<double>(3), 1, Padding::zero};
  for (Index i = 0; i < 3; ++i) spec.bias[i] = rng.normal() * 0.1;
  const Tensord r = random_normal<double>(1, 3, 6, 6, rng);
  auto eval = [&] { return (conv2d_forward(x, spec).array() * r.array()).sum(); };
  const auto g = conv2d_backward(x, spec, r);
  CHECK(worst_fd_err(eval, x.data(), x.size(), g.input.data()) <= 1e-6);
  CHECK(worst_fd_err(eval, spec.weights.data(), spec.weights.size(),
                     g.weights.data()) <= 1e-6);
  CHECK(worst_fd_err(eval, spec.bias.data(), spec.bias.size(), g.bias.data()) <= 1e-6);
}

TEST_CASE("relu clamps negatives and keeps positives") {
  Tensord x(1, 1, 1, 3);
  x(0, 0, 0, 0) = -1.0;
  x(0, 0, 0, 1) = 2.0;
  x(0, 0, 0, 2) = 0.0;
  const Tensord y = relu_forward(x);
  CHECK(y(0, 0, 0, 0) == 0.0);
  CHECK(y(0, 0, 0, 1) == 2.0);
  CHECK(y(0, 0, 0, 2) == 0.0);
}

TEST_CASE("relu on an all-negative tensor is zero in both directions") {
  Rng rng(37);
  Tensord x(1, 2, 4, 4);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = -0.1 - std::abs(rng.normal());
  const Tensord gout = random_normal<double>(1, 2, 4, 4, rng);
  CHECK((relu_forward(x).array() == 0).all());
  CHECK((relu_backward(x, gout).array() == 0).all());
}

TEST_CASE("relu backward matches finite differences away from the kink") {
  Rng rng(41);
  Tensord x(1, 2, 5, 5);
  for (Index i = 0; i < x.size(); ++i) {
    const double n = rng.normal();
    x.data()[i] = (n >= 0 ? 1.0 : -1.0) * (0.05 + std::abs(n));
  }
  const Tensord r = random_normal<double>(1, 2, 5, 5, rng);
  auto eval = [&] { return (relu_forward(x).array() * r.array()).sum(); };
  const Tensord g = relu_backward(x, r);
  CHECK(worst_fd_err(eval, x.data(), x.size(), g.data()) <= 1e-6);
}

TEST_CASE("maxpool picks the window maximum") {
  Tensord x(1, 1, 2, 2);
  x(0, 0, 0, 0) = 1;
  x(0, 0, 0, 1) = 2;
  x(0, 0, 1, 0) = 3;
  x(0, 0, 1, 1) = 4;
  const auto res = maxpool2_forward(x);
  CHECK(res.output.size() == 1);
  CHECK(res.output(0, 0, 0, 0) == 4.0);
  CHECK(res.argmax[0] == x.flat(0, 0, 1, 1));
}

TEST_CASE("maxpool ties break to the first window element") {
  const Tensord x = Tensord::constant(1, 2, 4, 4, 0.25);
  const auto res = maxpool2_forward(x);
  CHECK((res.output.array() == 0.25).all());
  std::size_t k = 0;
  for (Index c = 0; c < 2; ++c)
    for (Index r = 0; r < 4; r += 2)
      for (Index w = 0; w < 4; w += 2)
        CHECK(res.argmax[k++] == x.flat(0, c, r, w));
}

TEST_CASE("maxpool rejects odd spatial extents") {
  CHECK_THROWS_AS(maxpool2_forward(Tensord::zeros(1, 1, 3, 4)), std::invalid_argument);
  CHECK_THROWS_AS(maxpool2_forward(Tensord::zeros(1, 1, 4, 5)), std::invalid_argument);
}

TEST_CASE("maxpool backward scatters onto the recorded argmax") {
  Tensord x(1, 1, 2, 2);
  x(0, 0, 0, 0) = 5;
  x(0, 0, 0, 1) = 1;
  x(0, 0, 1, 0) = 2;
  x(0, 0, 1, 1) = 3;
  const auto res = maxpool2_forward(x);
  Tensord gout(1, 1, 1, 1);
  gout(0, 0, 0, 0) = 7.0;
  const Tensord gin = maxpool2_backward(res.argmax, gout, x.shape());
  CHECK(gin(0, 0, 0, 0) == 7.0);
  CHECK(gin(0, 0, 0, 1) == 0.0);
  CHECK(gin(0, 0, 1, 0) == 0.0);
  CHECK(gin(0, 0, 1, 1) == 0.0);
}

TEST_CASE("bilinear resize to the same size is the identity") {
  Rng rng(43);
  const Tensord x = random_normal<double>(1, 3, 6, 7, rng);
  const Tensord y = bilinear_resize(x, 6, 7);
  CHECK((y.array() == x.array()).all());
}

TEST_CASE("bilinear resize of a constant stays constant") {
  const Tensord x = Tensord::constant(1, 2, 3, 3, 0.375);
  const Tensord y = bilinear_resize(x, 7, 5);
  CHECK((y.array() == 0.375).all());
}

TEST_CASE("bilinear doubling of a [0,1] row hits the documented sample points") {
  // src_j = (j + 0.5) / 2 - 0.5 clamped: -0.25->0, 0.25, 0.75, 1.25->1
  Tensord x(1, 1, 1, 2);
  x(0, 0, 0, 0) = 0.0;
  x(0, 0, 0, 1) = 1.0;
  const Tensord y = bilinear_resize(x, 1, 4);
  CHECK(y(0, 0, 0, 0) == 0.0);
  CHECK(y(0, 0, 0, 1) == 0.25);
  CHECK(y(0, 0, 0, 2) == 0.75);
  CHECK(y(0, 0, 0, 3) == 1.0);
}

TEST_CASE("seeded fills are deterministic and seed-sensitive") {
  Rng a(99), b(99), c(100);
  const Tensord ta = random_normal<double>(1, 2, 4, 4, a);
  const Tensord tb = random_normal<double>(1, 2, 4, 4, b);
  const Tensord tc = random_normal<double>(1, 2, 4, 4, c);
  CHECK((ta.array() == tb.array()).all());
  CHECK((ta.array() != tc.array()).any());
}

}  // TEST_SUITE
