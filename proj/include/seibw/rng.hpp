#pragma once

#include <cstdint>
#include <string>

namespace seibw {

// Counter-based splitmix64 stream: state_n = seed + n * 0x9E3779B97F4A7C15,
// output = finalizer(state_n). The (seed, counter) pair fully determines the
// stream, so checkpoints can persist and resume it exactly. Integer and
// uniform draws are bit-identical across platforms; normal() additionally
// goes through libm (log/sqrt/cos) and is bit-identical across runs on the
// same platform.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t seed) : seed_(seed), counter_(0) {}
  Rng(std::uint64_t seed, std::uint64_t counter) : seed_(seed), counter_(counter) {}

  static const char* algorithm() { return "splitmix64"; }

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n);

  // Box-Muller; consumes exactly two uniforms per call, no caching.
  double normal();
  double normal(double mean, double stddev);

  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace seibw
