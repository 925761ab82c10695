#include <doctest.h>

#include <cmath>
#include <random>

#include "pseq/gradcheck.hpp"
#include "pseq/ops.hpp"
#include "pseq/tensor.hpp"

using namespace pseq;

namespace {

// Independent sliding-window convolution oracle. Recomputes the same-padding
// geometry from scratch; used to pin conv2d down.
Tensord conv2d_oracle(const Tensord& x, const Tensord& k, const Tensord& bias, int stride, bool same) {
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
  const int KH = k.dim(0), KW = k.dim(1), Cout = k.dim(3);
  int oh, ow, ph, pw;
  if (same) {
    oh = (H + stride - 1) / stride;
    ow = (W + stride - 1) / stride;
    ph = std::max((oh - 1) * stride + KH - H, 0) / 2;
    pw = std::max((ow - 1) * stride + KW - W, 0) / 2;
  } else {
    oh = (H - KH) / stride + 1;
    ow = (W - KW) / stride + 1;
    ph = pw = 0;
  }
  Tensord out({B, oh, ow, Cout});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j)
        for (int co = 0; co < Cout; ++co) {
          double acc = bias.empty() ? 0.0 : bias[co];
          for (int di = 0; di < KH; ++di)
            for (int dj = 0; dj < KW; ++dj)
              for (int ci = 0; ci < Cin; ++ci) {
                const int ii = i * stride + di - ph;
                const int jj = j * stride + dj - pw;
                if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                acc += x(b, ii, jj, ci) * k(di, dj, ci, co);
              }
          out(b, i, j, co) = acc;
        }
  return out;
}

double dot(const Tensord& a, const Tensord& b) {
  double s = 0;
  for (int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("conv2d: 1x1 kernel is a scalar multiply") {
  Tensord x = Tensord::full({1, 1, 1, 1}, 2.0);
  Tensord k = Tensord::full({1, 1, 1, 1}, 3.0);
  Tensord b({1});
  Tensord y = conv2d(x, k, b, 1);
  CHECK(y.size() == 1);
  CHECK(y[0] == doctest::Approx(6.0));
}

TEST_CASE("conv2d: identity kernel with same padding returns the input") {
  std::mt19937_64 rng(7);
  Tensord x = Tensord::uniform({1, 5, 6, 3}, rng);
  Tensord k({3, 3, 3, 3});
  for (int c = 0; c < 3; ++c) k(1, 1, c, c) = 1.0;
  Tensord y = conv2d(x, k, Tensord{}, 1);
  REQUIRE(y.same_shape(x));
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-12));
}

TEST_CASE("conv2d: matches the sliding-window oracle") {
  std::mt19937_64 rng(11);
  for (int stride : {1, 2}) {
    Tensord x = Tensord::uniform({1, 8, 8, 3}, rng);
    Tensord k = Tensord::uniform({3, 3, 3, 5}, rng);
    Tensord b = Tensord::uniform({5}, rng);
    Tensord got = conv2d(x, k, b, stride);
    Tensord want = conv2d_oracle(x, k, b, stride, true);
    REQUIRE(got.same_shape(want));
    for (int64_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-6);
  }
}

TEST_CASE("conv2d: rejects channel mismatch") {
  Tensord x({1, 4, 4, 3});
  Tensord k({3, 3, 2, 4});
  CHECK_THROWS_AS(conv2d(x, k, Tensord{}, 1), std::invalid_argument);
}

TEST_CASE("conv2d is linear in its input") {
  std::mt19937_64 rng(3);
  Tensord x = Tensord::uniform({1, 6, 6, 2}, rng);
  Tensord y = Tensord::uniform({1, 6, 6, 2}, rng);
  Tensord k = Tensord::uniform({3, 3, 2, 4}, rng);
  const double alpha = 1.7, beta = -0.4;
  Tensord mix(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) mix[i] = alpha * x[i] + beta * y[i];
  Tensord lhs = conv2d(mix, k, Tensord{}, 1);
  Tensord ca = conv2d(x, k, Tensord{}, 1);
  Tensord cb = conv2d(y, k, Tensord{}, 1);
  for (int64_t i = 0; i < lhs.size(); ++i)
    CHECK(std::abs(lhs[i] - (alpha * ca[i] + beta * cb[i])) < 1e-6);
}

TEST_CASE("conv2d_transpose: stride 1 with a 1x1 kernel scales the input") {
  std::mt19937_64 rng(5);
  Tensord x = Tensord::uniform({1, 4, 4, 1}, rng);
  Tensord k = Tensord::full({1, 1, 1, 1}, 2.5);
  Tensord y = conv2d_transpose(x, k, Tensord{}, 1);
  REQUIRE(y.same_shape(x));
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(2.5 * x[i]));
}

TEST_CASE("conv2d_transpose: delta input stamps the kernel") {
  Tensord x({1, 4, 4, 1});
  x(0, 1, 2, 0) = 1.0;
  std::mt19937_64 rng(9);
  Tensord k = Tensord::uniform({3, 3, 2, 1}, rng);
  Tensord y = conv2d_transpose(x, k, Tensord{}, 2);
  REQUIRE(y.shape() == std::vector<int>({1, 8, 8, 2}));
  // output n = 2*i + d - pad0 with pad_total = max(3-2, 0) = 1, pad0 = 0
  for (int q = 0; q < 2; ++q)
    for (int dh = 0; dh < 3; ++dh)
      for (int dw = 0; dw < 3; ++dw) CHECK(y(0, 2 + dh, 4 + dw, q) == doctest::Approx(k(dh, dw, q, 0)));
  double total = 0, expected = 0;
  for (int64_t i = 0; i < y.size(); ++i) total += std::abs(y[i]);
  for (int64_t i = 0; i < k.size(); ++i) expected += std::abs(k[i]);
  CHECK(total == doctest::Approx(expected));  // nothing stamped elsewhere
}

TEST_CASE("conv2d / conv2d_transpose adjoint identity") {
  std::mt19937_64 rng(13);
  for (int stride : {1, 2}) {
    for (int trial = 0; trial < 10; ++trial) {
      Tensord x = Tensord::uniform({1, 8, 8, 3}, rng);
      Tensord k = Tensord::uniform({3, 3, 3, 4}, rng);
      Tensord y = Tensord::uniform({1, 8 / stride, 8 / stride, 4}, rng);
      const double lhs = dot(conv2d(x, k, Tensord{}, stride), y);
      const double rhs = dot(x, conv2d_transpose(y, k, Tensord{}, stride));
      CHECK(std::abs(lhs - rhs) / std::max({1.0, std::abs(lhs), std::abs(rhs)}) < 1e-10);
    }
  }
}

TEST_CASE("batchnorm: constant input maps to zero in train mode") {
  Tensord x = Tensord::full({8, 3}, 4.2);
  Tensord gamma = Tensord::full({3}, 1.0);
  Tensord beta({3});
  Tensord rm({3}), rv = Tensord::full({3}, 1.0);
  Tensord y = batchnorm(x, gamma, beta, rm, rv, true, 1e-5);
  for (int64_t i = 0; i < y.size(); ++i) CHECK(std::abs(y[i]) < 1e-9);
}

TEST_CASE("batchnorm: scale and shift set the output moments") {
  std::mt19937_64 rng(21);
  Tensord x = Tensord::uniform({512, 2}, rng);
  Tensord gamma = Tensord::full({2}, 2.0);
  Tensord beta = Tensord::full({2}, 5.0);
  Tensord rm({2}), rv = Tensord::full({2}, 1.0);
  Tensord y = batchnorm(x, gamma, beta, rm, rv, true, 1e-12);
  for (int c = 0; c < 2; ++c) {
    double mean = 0, var = 0;
    for (int i = 0; i < 512; ++i) mean += y(i, c);
    mean /= 512;
    for (int i = 0; i < 512; ++i) var += (y(i, c) - mean) * (y(i, c) - mean);
    var /= 512;
    CHECK(mean == doctest::Approx(5.0).epsilon(1e-6));
    CHECK(std::sqrt(var) == doctest::Approx(2.0).epsilon(1e-5));
  }
}

TEST_CASE("batchnorm: rejects a zero-element batch") {
  Tensord x({0, 3});
  Tensord gamma = Tensord::full({3}, 1.0), beta({3}), rm({3}), rv = Tensord::full({3}, 1.0);
  CHECK_THROWS_AS(batchnorm(x, gamma, beta, rm, rv, true, 1e-5), std::invalid_argument);
}

TEST_CASE("batchnorm: infer mode uses running statistics") {
  Tensord x = Tensord::from_values({2, 1}, {3.0, 5.0});
  Tensord gamma = Tensord::full({1}, 1.0), beta({1});
  Tensord rm = Tensord::full({1}, 1.0), rv = Tensord::full({1}, 4.0);
  Tensord y = batchnorm(x, gamma, beta, rm, rv, false, 0.0);
  CHECK(y(0, 0) == doctest::Approx(1.0));
  CHECK(y(1, 0) == doctest::Approx(2.0));
}

TEST_CASE("activations: relu, softmax identities") {
  Tensord x = Tensord::from_values({1, 3}, {-3.2, 0.0, 1.5});
  Tensord r = activation(x, Act::kRelu);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == doctest::Approx(1.5));

  Tensord logits = Tensord::from_values({1, 3}, {std::log(0.7), std::log(0.2), std::log(0.1)});
  Tensord p = activation(logits, Act::kSoftmaxChannels);
  CHECK(p[0] == doctest::Approx(0.7).epsilon(1e-9));
  CHECK(p[1] == doctest::Approx(0.2).epsilon(1e-9));
  CHECK(p[2] == doctest::Approx(0.1).epsilon(1e-9));
}

TEST_CASE("softmax output is a distribution per cell") {
  std::mt19937_64 rng(31);
  Tensord x = Tensord::uniform({2, 4, 4, 5}, rng, -4.0, 4.0);
  Tensord p = activation(x, Act::kSoftmaxChannels);
  for (int64_t row = 0; row < p.size() / 5; ++row) {
    double sum = 0;
    for (int c = 0; c < 5; ++c) {
      CHECK(p[row * 5 + c] >= 0.0);
      sum += p[row * 5 + c];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("scatter_max: single point lands in its cell") {
  Tensord f = Tensord::from_values({1, 2}, {1.5, -2.0});
  std::vector<int64_t> cell = {3 * 8 + 4};
  Tensord out = scatter_max(f, cell, 16, 8);
  CHECK(out(3, 4, 0) == doctest::Approx(1.5));
  CHECK(out(3, 4, 1) == doctest::Approx(-2.0));
  double total = 0;
  for (int64_t i = 0; i < out.size(); ++i) total += std::abs(out[i]);
  CHECK(total == doctest::Approx(3.5));
}

TEST_CASE("scatter_max: per-channel max of two points in one cell") {
  Tensord f = Tensord::from_values({2, 2}, {1, 9, 5, 2});
  std::vector<int64_t> cell = {0, 0};
  Tensord out = scatter_max(f, cell, 1, 1);
  CHECK(out(0, 0, 0) == doctest::Approx(5));
  CHECK(out(0, 0, 1) == doctest::Approx(9));
}

TEST_CASE("scatter_max: equals the brute-force oracle; backward conserves mass") {
  std::mt19937_64 rng(41);
  const int n = 1000, rows = 16, cols = 16, c = 3;
  Tensord f = Tensord::uniform({n, c}, rng, -2.0, 2.0);
  std::vector<int64_t> cell(n);
  std::uniform_int_distribution<int64_t> pick(-1, rows * cols - 1);  // -1 = dropped
  for (auto& id : cell) id = pick(rng);

  Tensord got = scatter_max(f, cell, rows, cols);
  // oracle: group points per cell, take the max per channel
  Tensord want({rows, cols, c});
  std::vector<char> seen(rows * cols, 0);
  for (int i = 0; i < n; ++i) {
    if (cell[size_t(i)] < 0) continue;
    const auto id = cell[size_t(i)];
    const int r = int(id / cols), q = int(id % cols);
    for (int ch = 0; ch < c; ++ch) {
      if (!seen[size_t(id)])
        want(r, q, ch) = f(i, ch);
      else
        want(r, q, ch) = std::max(want(r, q, ch), f(i, ch));
    }
    seen[size_t(id)] = 1;
  }
  for (int64_t i = 0; i < got.size(); ++i) CHECK(got[i] == want[i]);  // exact

  Tensord dy = Tensord::uniform({rows, cols, c}, rng);
  Tensord dx = scatter_max_backward(f, cell, rows, cols, dy);
  double dx_mass = 0, dy_mass = 0;
  for (int64_t i = 0; i < dx.size(); ++i) dx_mass += dx[i];
  for (int64_t id = 0; id < rows * cols; ++id) {
    if (!seen[size_t(id)]) continue;
    for (int ch = 0; ch < c; ++ch) dy_mass += dy[id * c + ch];
  }
  CHECK(dx_mass == doctest::Approx(dy_mass).epsilon(1e-9));
}

TEST_CASE("scatter_max: first point wins gradient on exact ties") {
  Tensord f = Tensord::from_values({2, 1}, {3.0, 3.0});
  std::vector<int64_t> cell = {0, 0};
  Tensord dy = Tensord::full({1, 1, 1}, 1.0);
  Tensord dx = scatter_max_backward(f, cell, 1, 1, dy);
  CHECK(dx(0, 0) == 1.0);
  CHECK(dx(1, 0) == 0.0);
}

TEST_CASE("scatter_max: rejects out-of-grid indices") {
  Tensord f({1, 1});
  std::vector<int64_t> cell = {99};
  CHECK_THROWS_AS(scatter_max(f, cell, 4, 4), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// finite-difference gradient checks (64-bit)
// ---------------------------------------------------------------------------

TEST_CASE("grad_check: conv2d") {
  std::mt19937_64 rng(101);
  Tensord x = Tensord::uniform({1, 6, 6, 2}, rng);
  Tensord k = Tensord::uniform({3, 3, 2, 3}, rng);
  Tensord b = Tensord::uniform({3}, rng);
  Tensord w = Tensord::uniform({1, 3, 3, 3}, rng);
  auto loss = [&] { return gradcheck::weighted_sum(conv2d(x, k, b, 2), w); };
  auto grad = [&] {
    auto g = conv2d_backward(x, k, 2, Padding::kSame, w);
    x.accumulate_grad(g.dx);
    k.accumulate_grad(g.dkernel);
    b.accumulate_grad(g.dbias);
  };
  auto res = gradcheck::check(loss, grad, {&x, &k, &b});
  CHECK(res.passed(1e-4));
}

TEST_CASE("grad_check: conv2d_transpose") {
  std::mt19937_64 rng(103);
  Tensord x = Tensord::uniform({1, 3, 3, 2}, rng);
  Tensord k = Tensord::uniform({4, 4, 3, 2}, rng);
  Tensord b = Tensord::uniform({3}, rng);
  Tensord w = Tensord::uniform({1, 6, 6, 3}, rng);
  auto loss = [&] { return gradcheck::weighted_sum(conv2d_transpose(x, k, b, 2), w); };
  auto grad = [&] {
    auto g = conv2d_transpose_backward(x, k, 2, w);
    x.accumulate_grad(g.dx);
    k.accumulate_grad(g.dkernel);
    b.accumulate_grad(g.dbias);
  };
  auto res = gradcheck::check(loss, grad, {&x, &k, &b});
  CHECK(res.passed(1e-4));
}

TEST_CASE("grad_check: linear layer at tight tolerance") {
  std::mt19937_64 rng(105);
  Tensord x = Tensord::uniform({7, 4}, rng);
  Tensord wgt = Tensord::uniform({4, 3}, rng);
  Tensord b = Tensord::uniform({3}, rng);
  Tensord w = Tensord::uniform({7, 3}, rng);
  auto loss = [&] { return gradcheck::weighted_sum(linear(x, wgt, b), w); };
  auto grad = [&] {
    auto g = linear_backward(x, wgt, w);
    x.accumulate_grad(g.dx);
    wgt.accumulate_grad(g.dw);
    b.accumulate_grad(g.dbias);
  };
  auto res = gradcheck::check(loss, grad, {&x, &wgt, &b});
  CHECK(res.passed(1e-6));
}

TEST_CASE("grad_check: batchnorm train mode") {
  std::mt19937_64 rng(107);
  Tensord x = Tensord::uniform({12, 3}, rng);
  Tensord gamma = Tensord::uniform({3}, rng, 0.5, 1.5);
  Tensord beta = Tensord::uniform({3}, rng);
  Tensord w = Tensord::uniform({12, 3}, rng);
  Tensord rm({3}), rv = Tensord::full({3}, 1.0);
  auto loss = [&] {
    Tensord rm2 = rm, rv2 = rv;
    return gradcheck::weighted_sum(batchnorm(x, gamma, beta, rm2, rv2, true, 1e-5), w);
  };
  auto grad = [&] {
    Tensord rm2 = rm, rv2 = rv;
    BatchNormCache<double> cache;
    batchnorm(x, gamma, beta, rm2, rv2, true, 1e-5, 0.1, &cache);
    auto g = batchnorm_backward(cache, gamma, w);
    x.accumulate_grad(g.dx);
    gamma.accumulate_grad(g.dgamma);
    beta.accumulate_grad(g.dbeta);
  };
  auto res = gradcheck::check(loss, grad, {&x, &gamma, &beta});
  CHECK(res.passed(1e-4));
}

TEST_CASE("grad_check: tanh at tight tolerance") {
  std::mt19937_64 rng(109);
  Tensord x = Tensord::uniform({4, 5}, rng, -2.0, 2.0);
  Tensord w = Tensord::uniform({4, 5}, rng);
  auto loss = [&] { return gradcheck::weighted_sum(activation(x, Act::kTanh), w); };
  auto grad = [&] {
    Tensord y = activation(x, Act::kTanh);
    x.accumulate_grad(activation_backward(y, Act::kTanh, w));
  };
  auto res = gradcheck::check(loss, grad, {&x});
  CHECK(res.passed(1e-6));
}

TEST_CASE("grad_check: softmax over channels") {
  std::mt19937_64 rng(111);
  Tensord x = Tensord::uniform({3, 4}, rng, -2.0, 2.0);
  Tensord w = Tensord::uniform({3, 4}, rng);
  auto loss = [&] { return gradcheck::weighted_sum(activation(x, Act::kSoftmaxChannels), w); };
  auto grad = [&] {
    Tensord y = activation(x, Act::kSoftmaxChannels);
    x.accumulate_grad(activation_backward(y, Act::kSoftmaxChannels, w));
  };
  auto res = gradcheck::check(loss, grad, {&x});
  CHECK(res.passed(1e-6));
}

TEST_CASE("grad_check: scatter_max routes gradient to the argmax point") {
  std::mt19937_64 rng(113);
  Tensord f = Tensord::uniform({20, 2}, rng, -1.0, 1.0);
  std::vector<int64_t> cell(20);
  std::uniform_int_distribution<int64_t> pick(0, 8);
  for (auto& id : cell) id = pick(rng);
  Tensord w = Tensord::uniform({3, 3, 2}, rng);
  auto loss = [&] { return gradcheck::weighted_sum(scatter_max(f, cell, 3, 3), w); };
  auto grad = [&] { f.accumulate_grad(scatter_max_backward(f, cell, 3, 3, w)); };
  auto res = gradcheck::check(loss, grad, {&f});
  CHECK(res.passed(1e-4));
}
