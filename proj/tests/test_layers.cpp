#include <cmath>

#include "doctest.h"
#include "seibw/layers.hpp"
#include "seibw/rng.hpp"

using namespace seibw;

TEST_CASE("binarize_weights direct evaluation") {
  SUBCASE("mixed-sign 2x2 kernel") {
    auto w = Tensor::from_data({2, 2}, {0.5f, -1.5f, 2.0f, -1.0f});
    auto [wb, a] = binarize_weights(w);
    CHECK(a == doctest::Approx(1.25));
    CHECK(wb[0] == doctest::Approx(1.25));
    CHECK(wb[1] == doctest::Approx(-1.25));
    CHECK(wb[2] == doctest::Approx(1.25));
    CHECK(wb[3] == doctest::Approx(-1.25));
  }
  SUBCASE("unit weights") {
    auto w = Tensor::from_data({2}, {1.0f, -1.0f});
    auto [wb, a] = binarize_weights(w);
    CHECK(a == doctest::Approx(1.0));
    CHECK(wb[0] == 1.0f);
    CHECK(wb[1] == -1.0f);
  }
  SUBCASE("all-zero kernel degenerates to a = 0") {
    Tensor w({3, 3});
    auto [wb, a] = binarize_weights(w);
    CHECK(a == 0.0f);
    for (std::size_t i = 0; i < wb.numel(); ++i) CHECK(wb[i] == 0.0f);
  }
  SUBCASE("zero entries binarize to -a (sign convention w <= 0)") {
    auto w = Tensor::from_data({2}, {0.0f, 2.0f});
    auto [wb, a] = binarize_weights(w);
    CHECK(a == doctest::Approx(1.0));
    CHECK(wb[0] == doctest::Approx(-1.0));
  }
}

TEST_CASE("binarization scale is mean(|w|) within 1e-6 on random kernels") {
  Rng rng(8);
  for (int iter = 0; iter < 50; ++iter) {
    Tensor w({4, 3, 3, 3});
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = static_cast<float>(rng.uniform(-2, 2));
    auto [wb, a] = binarize_weights(w);
    double l1 = 0;
    for (std::size_t i = 0; i < w.numel(); ++i) l1 += std::abs(double(w[i]));
    CHECK(std::abs(a - l1 / w.numel()) < 1e-6);
    for (std::size_t i = 0; i < w.numel(); ++i) CHECK(std::abs(std::abs(wb[i]) - a) < 1e-7);
  }
}

TEST_CASE("ste_weight_gradient indicator window") {
  auto w = Tensor::from_data({3}, {0.5f, 1.5f, -1.0f});
  auto g = Tensor::from_data({3}, {2.0f, 2.0f, 2.0f});
  auto out = ste_weight_gradient(g, w);
  CHECK(out[0] == 2.0f);   // |0.5| < 1
  CHECK(out[1] == 0.0f);   // |1.5| >= 1
  CHECK(out[2] == 0.0f);   // strict: |-1.0| is not < 1

  SUBCASE("masks magnitude, never flips sign") {
    Rng rng(13);
    Tensor wr({64}), gr({64});
    for (std::size_t i = 0; i < 64; ++i) {
      wr[i] = static_cast<float>(rng.uniform(-2, 2));
      gr[i] = static_cast<float>(rng.uniform(-3, 3));
    }
    auto masked = ste_weight_gradient(gr, wr);
    for (std::size_t i = 0; i < 64; ++i)
      CHECK((masked[i] == gr[i] || masked[i] == 0.0f));
  }
}

TEST_CASE("sws_standardize fan-in row arithmetic") {
  // mu = 2, sigma = sqrt(2/3), output = 2.74*(w-2)/(sigma*sqrt(3)).
  auto w = Tensor::from_data({1, 3}, {1, 2, 3});
  auto ws = sws_standardize(w, 2.74f);
  CHECK(ws[0] == doctest::Approx(-1.93747).epsilon(1e-4));
  CHECK(ws[1] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(ws[2] == doctest::Approx(1.93747).epsilon(1e-4));
}

TEST_CASE("sws_standardize constant row collapses to zero") {
  Tensor w({2, 4}, 0.7f);
  auto ws = sws_standardize(w, 2.74f);
  for (std::size_t i = 0; i < ws.numel(); ++i) CHECK(ws[i] == doctest::Approx(0.0));
}

TEST_CASE("sws_standardize row mean 0 and squared norm gamma^2") {
  Rng rng(19);
  const float gamma = 2.74f;
  for (int iter = 0; iter < 20; ++iter) {
    Tensor w({3, 16});
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = static_cast<float>(rng.uniform(-2, 2));
    auto ws = sws_standardize(w, gamma);
    for (std::size_t r = 0; r < 3; ++r) {
      double mu = 0, sq = 0;
      for (std::size_t i = 0; i < 16; ++i) {
        mu += ws[r * 16 + i];
        sq += double(ws[r * 16 + i]) * ws[r * 16 + i];
      }
      mu /= 16;
      CHECK(std::abs(mu) < 1e-6);
      CHECK(std::abs(sq - double(gamma) * gamma) < 1e-5);
    }
  }
}

TEST_CASE("sws_standardize backward matches finite differences") {
  Rng rng(23);
  DTensor w({2, 6});
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-1, 1);
  DTensor gy({2, 6});
  for (std::size_t i = 0; i < gy.numel(); ++i) gy[i] = rng.uniform(-1, 1);
  const double gamma = 2.74;

  auto gw = sws_standardize_backward(w, gy, gamma, true);
  const double h = 1e-6;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    DTensor wp = w, wm = w;
    wp[i] += h;
    wm[i] -= h;
    auto yp = sws_standardize(wp, gamma, true);
    auto ym = sws_standardize(wm, gamma, true);
    double fd = 0;
    for (std::size_t j = 0; j < yp.numel(); ++j) fd += gy[j] * (yp[j] - ym[j]) / (2 * h);
    CHECK(std::abs(fd - gw[i]) < 1e-6);
  }
}

TEST_CASE("sws fan-in factor switch") {
  auto w = Tensor::from_data({1, 4}, {1, 2, 3, 4});
  auto with = sws_standardize(w, 1.0f, true);
  auto without = sws_standardize(w, 1.0f, false);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(without[i] == doctest::Approx(with[i] * 2.0f));  // sqrt(N) = 2
}

TEST_CASE("per-step batch norm") {
  PerStepBatchNorm<float> bn;
  bn.init(2, 3);

  SUBCASE("eval with running stats (0,1), scale 1, shift 0 is identity up to epsilon") {
    Tensor x({4, 2}, 0.37f);
    auto y = bn.forward(x, 1, false);
    for (std::size_t i = 0; i < y.numel(); ++i)
      CHECK(y[i] == doctest::Approx(0.37f).epsilon(1e-4));
  }

  SUBCASE("training statistics need batch >= 2") {
    Tensor x({1, 2});
    CHECK_THROWS_AS(bn.forward(x, 1, true), ValueError);
  }

  SUBCASE("step index validated") {
    Tensor x({4, 2});
    CHECK_THROWS_AS(bn.forward(x, 0, true), ValueError);
    CHECK_THROWS_AS(bn.forward(x, 4, true), ValueError);
  }

  SUBCASE("perturbing another step leaves step-t state untouched") {
    Rng rng(31);
    Tensor x1({8, 2}), x2({8, 2});
    for (std::size_t i = 0; i < x1.numel(); ++i) {
      x1[i] = static_cast<float>(rng.uniform(-1, 1));
      x2[i] = static_cast<float>(rng.uniform(5, 9));
    }
    bn.begin_sequence(3);
    auto y1 = bn.forward(x1, 1, true);
    bn.forward(x2, 2, true);

    PerStepBatchNorm<float> bn2;
    bn2.init(2, 3);
    bn2.begin_sequence(3);
    auto y1b = bn2.forward(x1, 1, true);
    Tensor other({8, 2}, -3.0f);
    bn2.forward(other, 2, true);

    for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(y1[i] == y1b[i]);
    // Step-1 running stats agree although step 2 saw different data.
    CHECK(bn.running_mean[0] == bn2.running_mean[0]);
    CHECK(bn.running_var[1] == bn2.running_var[1]);
    CHECK(bn.running_mean[2] != bn2.running_mean[2]);
  }

  SUBCASE("training output has mean shift and variance scale^2 (moment oracle)") {
    Rng rng(37);
    PerStepBatchNorm<float> bn3;
    bn3.init(3, 1);
    for (std::size_t c = 0; c < 3; ++c) {
      bn3.gamma[c] = 0.5f + 0.25f * c;  // scale
      bn3.beta[c] = -1.0f + 0.5f * c;   // shift
    }
    Tensor x({64, 3, 4, 4});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.normal(2.0, 3.0));
    auto y = bn3.forward(x, 1, true);
    for (std::size_t c = 0; c < 3; ++c) {
      double mu = 0, sq = 0;
      std::size_t count = 0;
      for (std::size_t b = 0; b < 64; ++b)
        for (std::size_t s = 0; s < 16; ++s) {
          const double v = y[(b * 3 + c) * 16 + s];
          mu += v;
          sq += v * v;
          ++count;
        }
      mu /= count;
      const double var = sq / count - mu * mu;
      CHECK(std::abs(mu - bn3.beta[c]) < 1e-3);
      CHECK(std::abs(var - double(bn3.gamma[c]) * bn3.gamma[c]) < 1e-3);
    }
  }
}

TEST_CASE("per-step bn backward matches finite differences") {
  Rng rng(41);
  PerStepBatchNorm<double> bn;
  bn.init(2, 1);
  bn.gamma[0] = 1.3;
  bn.gamma[1] = 0.8;
  bn.beta[0] = 0.2;
  bn.beta[1] = -0.5;

  DTensor x({5, 2});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1, 1);
  DTensor gy({5, 2});
  for (std::size_t i = 0; i < gy.numel(); ++i) gy[i] = rng.uniform(-1, 1);

  bn.begin_sequence(1);
  bn.forward(x, 1, true);
  auto gx = bn.backward(gy, 1);

  const double h = 1e-6;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    auto loss = [&](const DTensor& xx) {
      PerStepBatchNorm<double> b2;
      b2.init(2, 1);
      b2.gamma = bn.gamma;
      b2.beta = bn.beta;
      b2.begin_sequence(1);
      auto y = b2.forward(xx, 1, true);
      double l = 0;
      for (std::size_t j = 0; j < y.numel(); ++j) l += gy[j] * y[j];
      return l;
    };
    DTensor xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (loss(xp) - loss(xm)) / (2 * h);
    CHECK(std::abs(fd - gx[i]) < 1e-6);
  }
}

TEST_CASE("layer params pipeline: sws then binarize") {
  Rng rng(47);
  LayerParams<float> p;
  p.mode = WeightMode::binary;
  p.sws.enabled = true;
  p.sws.gamma = 2.74f;
  p.init({4, 8}, false);
  for (std::size_t i = 0; i < p.w_real.numel(); ++i)
    p.w_real[i] = static_cast<float>(rng.uniform(-1, 1));
  p.refresh();

  // The effective weights are the binarization of the standardized weights.
  auto std_w = sws_standardize(p.w_real, p.sws.gamma, true);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t i = 0; i < 8; ++i)
      std_w[r * 8 + i] *= p.sws_gain[r];
  auto [wb, a] = binarize_weights(std_w);
  CHECK(p.scale_a == doctest::Approx(a));
  for (std::size_t i = 0; i < wb.numel(); ++i) CHECK(p.w_eff[i] == wb[i]);
}
