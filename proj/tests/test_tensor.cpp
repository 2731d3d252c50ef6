#include <cmath>

#include "doctest.h"
#include "seibw/rng.hpp"
#include "seibw/tensor.hpp"

using namespace seibw;

namespace {

// Independent triple-loop product used as the matmul oracle; accumulates in
// double so it serves as the reference for both precisions.
template <class T>
TensorT<double> matmul_oracle(const TensorT<T>& a, const TensorT<T>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<double> out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j)
        out[i * n + j] += double(a[i * k + p]) * double(b[p * n + j]);
  return out;
}

// Direct nested-loop cross-correlation oracle, padding handled by bounds;
// double accumulation for the same reason as matmul_oracle.
template <class T>
TensorT<double> conv2d_oracle(const TensorT<T>& x, const TensorT<T>& k, std::size_t stride,
                              std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
  TensorT<double> y({B, O, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double acc = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long iy = long(oy * stride + ky) - long(pad);
                const long ix = long(ox * stride + kx) - long(pad);
                if (iy < 0 || iy >= long(H) || ix < 0 || ix >= long(W)) continue;
                acc += double(x[((b * C + c) * H + iy) * W + ix]) *
                       double(k[((o * C + c) * kh + ky) * kw + kx]);
              }
          y[((b * O + o) * Ho + oy) * Wo + ox] = acc;
        }
  return y;
}

template <class T>
void fill_uniform(TensorT<T>& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
}

double rel_err(double a, double b) {
  const double d = std::abs(a - b);
  const double m = std::max({std::abs(a), std::abs(b), 1e-12});
  return d / m;
}

}  // namespace

TEST_CASE("matmul identity cases") {
  auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto r = matmul(a, eye);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r[i] == a[i]);

  auto col = Tensor::from_data({2, 1}, {5, 7});
  auto r2 = matmul(eye, col);
  CHECK(r2[0] == 5);
  CHECK(r2[1] == 7);
}

TEST_CASE("matmul shape mismatch throws dimension error") {
  Tensor a({2, 3}), b({4, 2});
  CHECK_THROWS_AS(matmul(a, b), DimError);
}

TEST_CASE("matmul matches triple-loop oracle on 200 random instances") {
  Rng rng(42);
  for (int iter = 0; iter < 200; ++iter) {
    const std::size_t m = 1 + rng.uniform_index(8);
    const std::size_t k = 1 + rng.uniform_index(8);
    const std::size_t n = 1 + rng.uniform_index(8);
    Tensor a({m, k}), b({k, n});
    fill_uniform(a, rng);
    fill_uniform(b, rng);
    auto got = matmul(a, b);
    auto want = matmul_oracle(a, b);
    for (std::size_t i = 0; i < got.numel(); ++i)
      CHECK(rel_err(got[i], want[i]) < 1e-6);
  }

  // Double precision against a double oracle.
  DTensor a({8, 8}), b({8, 8});
  fill_uniform(a, rng);
  fill_uniform(b, rng);
  auto got = matmul(a, b);
  auto want = matmul_oracle(a, b);
  for (std::size_t i = 0; i < got.numel(); ++i) CHECK(rel_err(got[i], want[i]) < 1e-12);
}

TEST_CASE("matmul is bitwise repeatable") {
  Rng rng(7);
  Tensor a({17, 9}), b({9, 13});
  fill_uniform(a, rng);
  fill_uniform(b, rng);
  auto r1 = matmul(a, b);
  auto r2 = matmul(a, b);
  for (std::size_t i = 0; i < r1.numel(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("conv2d 1x1 unit kernel is identity") {
  Rng rng(3);
  Tensor x({2, 1, 5, 5});
  fill_uniform(x, rng);
  auto k = Tensor::from_data({1, 1, 1, 1}, {1});
  auto y = conv2d(x, k, 1, 0);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("conv2d all-zero kernel gives all-zero output") {
  Rng rng(4);
  Tensor x({1, 3, 6, 6});
  fill_uniform(x, rng);
  Tensor k({2, 3, 3, 3});
  auto y = conv2d(x, k, 1, 1);
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.0f);
}

TEST_CASE("conv2d matches nested-loop oracle") {
  Rng rng(11);
  SUBCASE("the 1x2x5x5 by 3x2x3x3 case") {
    Tensor x({1, 2, 5, 5}), k({3, 2, 3, 3});
    fill_uniform(x, rng);
    fill_uniform(k, rng);
    for (std::size_t pad : {0u, 1u}) {
      auto got = conv2d(x, k, 1, pad);
      auto want = conv2d_oracle(x, k, 1, pad);
      REQUIRE(got.shape() == want.shape());
      for (std::size_t i = 0; i < got.numel(); ++i) CHECK(rel_err(got[i], want[i]) < 1e-6);
    }
  }
  SUBCASE("random shapes, strides and paddings") {
    for (int iter = 0; iter < 40; ++iter) {
      const std::size_t B = 1 + rng.uniform_index(2);
      const std::size_t C = 1 + rng.uniform_index(3);
      const std::size_t O = 1 + rng.uniform_index(3);
      const std::size_t H = 4 + rng.uniform_index(5);
      const std::size_t kk = 1 + 2 * rng.uniform_index(2);  // 1 or 3
      const std::size_t stride = 1 + rng.uniform_index(2);
      const std::size_t pad = rng.uniform_index(2);
      Tensor x({B, C, H, H}), k({O, C, kk, kk});
      fill_uniform(x, rng);
      fill_uniform(k, rng);
      auto got = conv2d(x, k, stride, pad);
      auto want = conv2d_oracle(x, k, stride, pad);
      REQUIRE(got.shape() == want.shape());
      for (std::size_t i = 0; i < got.numel(); ++i) CHECK(rel_err(got[i], want[i]) < 1e-6);
    }
  }
}

TEST_CASE("conv2d invalid geometry throws dimension error") {
  Tensor x({1, 1, 2, 2}), k({1, 1, 5, 5});
  CHECK_THROWS_AS(conv2d(x, k, 1, 0), DimError);
  Tensor k2({1, 2, 2, 2});
  CHECK_THROWS_AS(conv2d(x, k2, 1, 0), DimError);
}

TEST_CASE("avg_pool2d constant input stays constant") {
  Tensor x({1, 2, 6, 6}, 3.25f);
  auto y = avg_pool2d(x, 2, 2);
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(3.25f));
}

TEST_CASE("avg_pool2d 2x2 window mean") {
  auto x = Tensor::from_data({1, 1, 2, 2}, {1, 3, 5, 7});
  auto y = avg_pool2d(x, 2, 2);
  REQUIRE(y.numel() == 1);
  CHECK(y[0] == doctest::Approx(4.0f));
}

TEST_CASE("avg_pool2d matches loop oracle") {
  Rng rng(5);
  Tensor x({2, 3, 7, 7});
  fill_uniform(x, rng);
  for (std::size_t window : {2u, 3u}) {
    auto y = avg_pool2d(x, window, window);
    const std::size_t Ho = (7 - window) / window + 1;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Ho; ++ox) {
            double acc = 0;
            for (std::size_t wy = 0; wy < window; ++wy)
              for (std::size_t wx = 0; wx < window; ++wx)
                acc += x[((b * 3 + c) * 7 + oy * window + wy) * 7 + ox * window + wx];
            acc /= double(window * window);
            CHECK(rel_err(y[((b * 3 + c) * Ho + oy) * Ho + ox], acc) < 1e-6);
          }
  }
}

TEST_CASE("softmax symmetry and overflow safety") {
  auto s = softmax(Tensor::from_data({2}, {0, 0}));
  CHECK(s[0] == doctest::Approx(0.5));
  CHECK(s[1] == doctest::Approx(0.5));

  auto big = softmax(Tensor::from_data({2}, {1000, 0}));
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] == doctest::Approx(0.0));
}

TEST_CASE("softmax rows sum to 1") {
  Rng rng(9);
  DTensor x({10, 7});
  fill_uniform(x, rng, -30.0, 30.0);
  auto s = softmax(x);
  for (std::size_t r = 0; r < 10; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 7; ++c) total += s[r * 7 + c];
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  Tensor xf({10, 7});
  fill_uniform(xf, rng, -30.0, 30.0);
  auto sf = softmax(xf);
  for (std::size_t r = 0; r < 10; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 7; ++c) total += sf[r * 7 + c];
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("rng streams reproduce exactly") {
  Rng a(123), b(123);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng c(123, 500);  // resume from a counter
  Rng d(123);
  for (int i = 0; i < 500; ++i) d.next_u64();
  for (int i = 0; i < 100; ++i) CHECK(c.next_u64() == d.next_u64());
}

TEST_CASE("tensor reshape copies and validates") {
  auto a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = a.reshaped({3, 2});
  CHECK(b.dim(0) == 3);
  CHECK(b[5] == 6);
  CHECK_THROWS_AS(a.reshaped({4, 2}), DimError);
}

TEST_CASE("slice and set step round-trip") {
  Rng rng(17);
  Tensor seq({3, 2, 4});
  fill_uniform(seq, rng);
  auto s2 = slice_step(seq, 2);
  CHECK(s2.shape() == std::vector<std::size_t>{2, 4});
  Tensor copy({3, 2, 4});
  for (std::size_t t = 1; t <= 3; ++t) set_step(copy, t, slice_step(seq, t));
  for (std::size_t i = 0; i < seq.numel(); ++i) CHECK(copy[i] == seq[i]);
}
