#include <cmath>

#include "doctest.h"
#include "seibw/binfer.hpp"

using namespace seibw;

namespace {

LayerParams<float> binary_dense(std::vector<std::size_t> shape, Rng& rng) {
  LayerParams<float> p;
  p.mode = WeightMode::binary;
  p.init(std::move(shape), false);
  for (std::size_t i = 0; i < p.w_real.numel(); ++i)
    p.w_real[i] = static_cast<float>(rng.uniform(-1, 1));
  p.refresh();
  return p;
}

}  // namespace

TEST_CASE("pack_layer sign reading") {
  LayerParams<float> p;
  p.mode = WeightMode::binary;
  p.init({1, 4}, false);
  p.w_real = Tensor::from_data({1, 4}, {1, -1, 2, -3});
  p.refresh();
  auto packed = pack_layer(p);
  CHECK(packed.fan_in == 4);
  CHECK(packed.pos_mask[0] == 0b0101u);
  CHECK(packed.neg_mask[0] == 0b1010u);
  CHECK(packed.scale_a == doctest::Approx(1.75));
}

TEST_CASE("pack_layer: all-positive weights leave neg_mask empty") {
  LayerParams<float> p;
  p.mode = WeightMode::binary;
  p.init({2, 3}, false);
  for (std::size_t i = 0; i < 6; ++i) p.w_real[i] = 0.5f + i;
  p.refresh();
  auto packed = pack_layer(p);
  for (auto w : packed.neg_mask) CHECK(w == 0u);
  for (std::size_t o = 0; o < 2; ++o) CHECK(__builtin_popcountll(packed.pos_row(o)[0]) == 3);
}

TEST_CASE("pack_layer rejects full-precision layers") {
  LayerParams<float> p;
  p.init({2, 2}, false);
  p.refresh();
  CHECK_THROWS_AS(pack_layer(p), ModeError);
}

TEST_CASE("pack/unpack round-trips w_binary exactly") {
  Rng rng(3);
  auto p = binary_dense({5, 37}, rng);
  auto packed = pack_layer(p);
  auto w = unpack_layer(packed, p.w_real.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) CHECK(w[i] == p.w_eff[i]);
}

TEST_CASE("packing invariant: masks disjoint and covering") {
  Rng rng(5);
  for (int iter = 0; iter < 20; ++iter) {
    const std::size_t fan_in = 1 + rng.uniform_index(200);
    auto p = binary_dense({3, fan_in}, rng);
    auto packed = pack_layer(p);
    for (std::size_t o = 0; o < 3; ++o) {
      std::size_t covered = 0;
      for (std::size_t w = 0; w < packed.words_per_row; ++w) {
        CHECK((packed.pos_row(o)[w] & packed.neg_row(o)[w]) == 0u);
        covered += __builtin_popcountll(packed.pos_row(o)[w] | packed.neg_row(o)[w]);
      }
      CHECK(covered == fan_in);
    }
  }
}

TEST_CASE("popcount_dot hand case") {
  // spikes [1,0,1,1], signs [+,-,+,-], a = 0.5 -> 0.5*(2-1) = 0.5
  LayerParams<float> p;
  p.mode = WeightMode::binary;
  p.init({1, 4}, false);
  p.w_real = Tensor::from_data({1, 4}, {0.5f, -0.5f, 0.5f, -0.5f});
  p.refresh();
  auto packed = pack_layer(p);
  float spikes[4] = {1, 0, 1, 1};
  auto words = pack_spikes(spikes, 4);
  CHECK(popcount_dot(packed, words) == doctest::Approx(0.5));

  float none[4] = {0, 0, 0, 0};
  CHECK(popcount_dot(packed, pack_spikes(none, 4)) == 0.0f);

  std::vector<std::uint64_t> wrong(2, 0);
  CHECK_THROWS_AS(popcount_dot(packed, wrong), DimError);
}

TEST_CASE("popcount_dot equals the double float-path dot exactly, fan-in up to 4096") {
  Rng rng(7);
  for (int iter = 0; iter < 60; ++iter) {
    const std::size_t fan_in = 1 + rng.uniform_index(4096);
    auto p = binary_dense({2, fan_in}, rng);
    auto packed = pack_layer(p);

    std::vector<float> spikes(fan_in);
    for (auto& s : spikes) s = rng.bernoulli(0.4) ? 1.0f : 0.0f;
    auto words = pack_spikes(spikes.data(), fan_in);

    for (std::size_t o = 0; o < 2; ++o) {
      double acc = 0.0;  // float-path oracle in double
      for (std::size_t i = 0; i < fan_in; ++i)
        acc += static_cast<double>(p.w_eff[o * fan_in + i]) * static_cast<double>(spikes[i]);
      const double got = static_cast<double>(packed.scale_a) *
                         [&] {
                           std::int64_t d = 0;
                           for (std::size_t w = 0; w < packed.words_per_row; ++w)
                             d += __builtin_popcountll(packed.pos_row(o)[w] & words[w]) -
                                  __builtin_popcountll(packed.neg_row(o)[w] & words[w]);
                           return d;
                         }();
      CHECK(acc == got);  // both integer-exact in double
      CHECK(popcount_dot(packed, words, o) == static_cast<float>(acc));
    }
  }
}

TEST_CASE("packed network matches float engine bit-for-bit on a binary convnet") {
  ArchSpec arch;
  arch.kind = ArchSpec::Kind::convnet;
  arch.input_shape = {1, 12, 12};
  arch.num_classes = 4;
  arch.stem_channels = 4;
  arch.stage_channels = {4, 6};
  arch.blocks_per_stage = {1, 1};
  arch.modes_per_block = 2;
  arch.norm = NormKind::bn;

  Rng rng(11);
  LifConfig lif;
  auto net = build_network<float>(arch, 3, lif, WeightMode::binary, rng);

  Tensor input({3, 5, 1, 12, 12});
  for (std::size_t i = 0; i < input.numel(); ++i)
    input[i] = static_cast<float>(rng.uniform(-1, 1));

  PackedNetwork<float> packed(net);
  CHECK(packed.packed_layer_count() == 4);
  auto packed_logits = packed.forward(input);
  auto float_logits = net.forward(input, Phase::eval);
  REQUIRE(packed_logits.numel() == float_logits.numel());
  for (std::size_t i = 0; i < packed_logits.numel(); ++i)
    CHECK(packed_logits[i] == float_logits[i]);
}

TEST_CASE("infer_packed returns identical predictions and a benchmark") {
  ArchSpec arch;
  arch.kind = ArchSpec::Kind::mlp;
  arch.input_shape = {1, 6, 6};
  arch.num_classes = 3;
  arch.hidden = {24, 16};
  arch.norm = NormKind::none;

  Rng rng(13);
  LifConfig lif;
  auto net = build_network<float>(arch, 2, lif, WeightMode::binary, rng);

  Tensor input({2, 50, 1, 6, 6});
  for (std::size_t i = 0; i < input.numel(); ++i)
    input[i] = static_cast<float>(rng.uniform(-1, 1));

  InferBenchmark bench;
  auto preds = infer_packed(net, input, &bench);
  CHECK(preds.size() == 50);
  CHECK(bench.samples == 50);
  CHECK(bench.packed_samples_per_s > 0);
  CHECK(bench.float_samples_per_s > 0);

  auto logits = net.forward(input, Phase::eval);
  TensorT<float> mean({50, 3});
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < 150; ++i) mean[i] += logits[t * 150 + i];
  auto want = argmax_rows(mean);
  CHECK(preds == want);
}
