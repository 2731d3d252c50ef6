#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "seibw/data.hpp"
#include "seibw/serialize.hpp"

using namespace seibw;

namespace {

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void push_be_u32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>((v >> 24) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>(v & 0xff));
}

std::string tiny_idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols) {
  std::string s;
  push_be_u32(s, 0x00000803u);
  push_be_u32(s, n);
  push_be_u32(s, rows);
  push_be_u32(s, cols);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i)
    s.push_back(static_cast<char>(i * 37 % 256));
  return s;
}

std::string tiny_idx_labels(const std::vector<unsigned char>& labels) {
  std::string s;
  push_be_u32(s, 0x00000801u);
  push_be_u32(s, static_cast<std::uint32_t>(labels.size()));
  for (auto l : labels) s.push_back(static_cast<char>(l));
  return s;
}

}  // namespace

TEST_CASE("idx loader parses header and scales pixels") {
  const std::string path = "/tmp/seibw_test.idx";
  std::string bytes = tiny_idx_images(3, 4, 5);
  // Force a known extreme value.
  bytes[16] = static_cast<char>(255);
  write_bytes(path, bytes);

  auto content = load_idx(path);
  REQUIRE(content.is_images);
  CHECK(content.images.shape() == std::vector<std::size_t>{3, 1, 4, 5});
  CHECK(content.images[0] == doctest::Approx(1.0f));  // pixel 255 -> 1.0
}

TEST_CASE("idx loader rejects bad magic and truncation atomically") {
  const std::string path = "/tmp/seibw_test_bad.idx";
  std::string bytes = tiny_idx_images(2, 3, 3);
  bytes[0] = 0x7f;
  write_bytes(path, bytes);
  CHECK_THROWS_AS(load_idx(path), FormatError);

  bytes = tiny_idx_images(2, 3, 3);
  bytes.resize(bytes.size() - 5);  // truncate payload
  write_bytes(path, bytes);
  CHECK_THROWS_AS(load_idx(path), FormatError);

  CHECK_THROWS_AS(load_idx("/tmp/seibw_no_such_file.idx"), FormatError);
}

TEST_CASE("mnist pairing via idx files") {
  const std::string dir = "/tmp/seibw_mnist_fixture";
  std::filesystem::create_directories(dir);
  write_bytes(dir + "/train-images-idx3-ubyte", tiny_idx_images(4, 5, 5));
  write_bytes(dir + "/train-labels-idx1-ubyte", tiny_idx_labels({0, 3, 9, 1}));
  auto ds = load_mnist(dir, true);
  CHECK(ds.size() == 4);
  CHECK(ds.labels[1] == 3);
  CHECK(ds.num_classes == 10);
}

TEST_CASE("cifar10 binary records") {
  Rng rng(3);
  Dataset ds;
  ds.samples = Tensor({5, 3, 32, 32});
  for (std::size_t i = 0; i < ds.samples.numel(); ++i)
    ds.samples[i] = static_cast<float>(rng.uniform_index(256)) / 255.0f;
  ds.labels = {1, 0, 7, 9, 4};
  ds.num_classes = 10;

  const std::string path = "/tmp/seibw_cifar_fixture.bin";
  write_cifar10_bin(ds, path);

  auto loaded = load_cifar10_bin(path);
  CHECK(loaded.size() == 5);
  CHECK(loaded.labels == ds.labels);  // record 0 label byte = parsed label
  for (std::size_t i = 0; i < ds.samples.numel(); ++i)
    CHECK(loaded.samples[i] == doctest::Approx(ds.samples[i]).epsilon(1e-6));

  SUBCASE("round-trip re-serialization is byte-identical") {
    const std::string path2 = "/tmp/seibw_cifar_fixture2.bin";
    write_cifar10_bin(loaded, path2);
    std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
  }

  SUBCASE("size not divisible by 3073 is rejected") {
    std::ifstream f(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    bytes.pop_back();
    const std::string bad = "/tmp/seibw_cifar_bad.bin";
    write_bytes(bad, bytes);
    CHECK_THROWS_AS(load_cifar10_bin(bad), FormatError);
  }
}

TEST_CASE("tensor-container dataset with temporal frames") {
  Tensor frames({3, 4, 2, 5, 5});
  Rng rng(9);
  for (std::size_t i = 0; i < frames.numel(); ++i)
    frames[i] = static_cast<float>(rng.uniform(0, 1));
  Tensor labels({4});
  labels[0] = 0;
  labels[1] = 2;
  labels[2] = 1;
  labels[3] = 2;
  const std::string path = "/tmp/seibw_frames.seib";
  write_container(path, {{"frames", frames}, {"labels", labels}});

  auto ds = load_tensor_dataset(path);
  CHECK(ds.temporal);
  CHECK(ds.size() == 4);
  CHECK(ds.num_classes == 3);
  auto s1 = ds.sample(1);
  CHECK(s1.shape() == std::vector<std::size_t>{3, 2, 5, 5});
  CHECK(s1[0] == frames[1 * 2 * 25]);
}

TEST_CASE("normalization reaches zero mean unit variance within 1e-3") {
  Rng rng(11);
  Dataset ds;
  ds.samples = Tensor({64, 2, 6, 6});
  for (std::size_t i = 0; i < ds.samples.numel(); ++i)
    ds.samples[i] = static_cast<float>(rng.uniform(0.2, 0.9) + (i % 2) * 0.3);
  ds.labels.assign(64, 0);
  ds.num_classes = 2;
  normalize(ds);
  REQUIRE(ds.norm_mean.size() == 2);

  for (std::size_t c = 0; c < 2; ++c) {
    double mu = 0, sq = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < 64; ++i)
      for (std::size_t j = 0; j < 36; ++j) {
        const double v = ds.samples[(i * 2 + c) * 36 + j];
        mu += v;
        sq += v * v;
        ++n;
      }
    mu /= n;
    const double var = sq / n - mu * mu;
    CHECK(std::abs(mu) < 1e-3);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
}

TEST_CASE("direct_encode repeats the sample bit-identically") {
  Rng rng(13);
  Tensor s({2, 3, 3});
  for (std::size_t i = 0; i < s.numel(); ++i) s[i] = static_cast<float>(rng.uniform(-1, 1));

  auto e1 = direct_encode(s, 1);
  CHECK(e1.shape() == std::vector<std::size_t>{1, 2, 3, 3});
  for (std::size_t i = 0; i < s.numel(); ++i) CHECK(e1[i] == s[i]);

  auto e4 = direct_encode(s, 4);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t i = 0; i < s.numel(); ++i) CHECK(e4[t * s.numel() + i] == s[i]);
}

TEST_CASE("augmentation") {
  Rng rng(17);
  Tensor s({1, 8, 8});
  for (std::size_t i = 0; i < s.numel(); ++i) s[i] = static_cast<float>(rng.uniform(0.1, 1.0));

  SUBCASE("all-disabled spec is the identity") {
    AugmentSpec spec;
    spec.pad_crop = 0;
    spec.hflip = false;
    auto out = augment(s, spec, rng);
    for (std::size_t i = 0; i < s.numel(); ++i) CHECK(out[i] == s[i]);
  }
  SUBCASE("fixed seed reproduces the augmentation stream") {
    AugmentSpec spec;
    spec.pad_crop = 2;
    spec.hflip = true;
    spec.cutout = 3;
    Rng r1(99), r2(99);
    for (int i = 0; i < 10; ++i) {
      auto a = augment(s, spec, r1);
      auto b = augment(s, spec, r2);
      for (std::size_t j = 0; j < a.numel(); ++j) CHECK(a[j] == b[j]);
    }
  }
  SUBCASE("cutout zeroes exactly one clipped square") {
    Tensor ones({1, 8, 8}, 1.0f);
    AugmentSpec spec;
    spec.pad_crop = 0;
    spec.cutout = 4;
    for (int iter = 0; iter < 20; ++iter) {
      auto out = augment(ones, spec, rng);
      // Zeros form one axis-aligned rectangle with sides <= 4.
      std::size_t zmin_y = 8, zmax_y = 0, zmin_x = 8, zmax_x = 0, zeros = 0;
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x)
          if (out[y * 8 + x] == 0.0f) {
            ++zeros;
            zmin_y = std::min(zmin_y, y);
            zmax_y = std::max(zmax_y, y);
            zmin_x = std::min(zmin_x, x);
            zmax_x = std::max(zmax_x, x);
          }
      REQUIRE(zeros > 0);
      CHECK(zeros == (zmax_y - zmin_y + 1) * (zmax_x - zmin_x + 1));
      CHECK(zmax_y - zmin_y + 1 <= 4);
      CHECK(zmax_x - zmin_x + 1 <= 4);
    }
  }
}

TEST_CASE("deterministic split and batch iteration") {
  Rng rng(19);
  auto ds = make_synthetic_images<float>(50, 3, 1, 6, 6, rng);
  auto [train1, val1] = split_dataset(ds, 0.1, 7);
  auto [train2, val2] = split_dataset(ds, 0.1, 7);
  CHECK(train1.size() == 45);
  CHECK(val1.size() == 5);
  CHECK(train1.labels == train2.labels);
  for (std::size_t i = 0; i < train1.samples.numel(); ++i)
    CHECK(train1.samples[i] == train2.samples[i]);

  Rng it_rng1(3), it_rng2(3);
  BatchIterator it1(45, 8, it_rng1, true), it2(45, 8, it_rng2, true);
  std::vector<std::size_t> a, b;
  while (it1.next(a)) {
    REQUIRE(it2.next(b));
    CHECK(a == b);
  }
  CHECK_FALSE(it2.next(b));
}

TEST_CASE("synthetic images are class-separable enough to have signal") {
  Rng rng(23);
  auto ds = make_synthetic_images<float>(200, 4, 1, 10, 10, rng);
  CHECK(ds.size() == 200);
  ds.validate();
  // Mean images of two classes differ substantially.
  Tensor mean0({100}), mean1({100});
  std::size_t n0 = 0, n1 = 0;
  for (std::size_t i = 0; i < 200; ++i) {
    if (ds.labels[i] == 0) {
      ++n0;
      for (std::size_t j = 0; j < 100; ++j) mean0[j] += ds.samples[i * 100 + j];
    } else if (ds.labels[i] == 1) {
      ++n1;
      for (std::size_t j = 0; j < 100; ++j) mean1[j] += ds.samples[i * 100 + j];
    }
  }
  double diff = 0;
  for (std::size_t j = 0; j < 100; ++j)
    diff += std::abs(mean0[j] / n0 - mean1[j] / n1);
  CHECK(diff > 1.0);
}
