#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "seibw/rng.hpp"
#include "seibw/tensor.hpp"

namespace seibw {

template <class T>
struct DatasetT {
  TensorT<T> samples;  // [N,C,H,W], or [T,N,C,H,W] when temporal
  bool temporal = false;
  std::vector<std::int32_t> labels;
  std::size_t num_classes = 0;
  std::vector<T> norm_mean;  // per channel, set by normalize()
  std::vector<T> norm_std;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const {
    return samples.rank() >= 2 ? samples.dim(temporal ? 2 : 1) : 0;
  }
  // One sample as [C,H,W] ([T,C,H,W] when temporal).
  TensorT<T> sample(std::size_t i) const;
  void validate() const;
};

using Dataset = DatasetT<float>;

// One parsed IDX file: a big-endian-header ubyte tensor (images, scaled to
// [0,1]) or a label vector.
struct IdxContent {
  bool is_images = false;
  Tensor images;  // [N,1,H,W]
  std::vector<std::int32_t> labels;
};

// Parses one IDX file (magic 0x00000803 for images, 0x00000801 for labels).
// Throws FormatError on bad magic or truncation; never returns partial data.
IdxContent load_idx(const std::string& path);

// Pairs train-images/train-labels (train) or t10k-* (test) under dir.
Dataset load_mnist(const std::string& dir, bool train);

// All *.bin batch files under dir (sorted), 3073-byte records each: label
// byte + 3072 channel-planar pixels.
Dataset load_cifar10_bin(const std::string& dir);

// Re-serializes a CIFAR-style dataset to one batch file (round-trip tests).
void write_cifar10_bin(const Dataset& ds, const std::string& path);

// SEIB container: record "frames" [T,N,C,H,W] or "samples" [N,C,H,W] plus
// "labels" [N] (class indices stored as f32).
Dataset load_tensor_dataset(const std::string& path);

// Per-channel zero-mean unit-variance using this dataset's own statistics;
// the stats are stored on the dataset (and later in checkpoints), so the
// same shift applies to held-out data via apply_normalization.
template <class T>
void normalize(DatasetT<T>& ds);

template <class T>
void apply_normalization(DatasetT<T>& ds, const std::vector<T>& mean,
                         const std::vector<T>& stddev);

// T identical copies along a new leading time axis.
template <class T>
TensorT<T> direct_encode(const TensorT<T>& sample, std::size_t horizon);

struct AugmentSpec {
  std::size_t pad_crop = 4;
  bool hflip = false;
  std::optional<std::size_t> cutout;
};

// Zero-pad + random crop, coin-flip horizontal mirror, optional cutout of
// one random square (clipped at the borders). All randomness from rng.
template <class T>
TensorT<T> augment(const TensorT<T>& sample, const AugmentSpec& spec, Rng& rng);

// Deterministic split by seeded shuffle; val_fraction of the samples go to
// the second dataset.
template <class T>
std::pair<DatasetT<T>, DatasetT<T>> split_dataset(const DatasetT<T>& ds, double val_fraction,
                                                  std::uint64_t seed);

// Seeded epoch shuffling over sample indices.
class BatchIterator {
 public:
  BatchIterator(std::size_t n, std::size_t batch_size, Rng& rng, bool shuffle);
  bool next(std::vector<std::size_t>& indices);

 private:
  std::size_t n_;
  std::size_t batch_size_;
  std::size_t pos_ = 0;
  std::vector<std::size_t> order_;
};

// Class-separable random images (one bright class-positioned blob plus
// noise); a self-contained stand-in wherever tests need a learnable task.
template <class T>
DatasetT<T> make_synthetic_images(std::size_t n, std::size_t classes, std::size_t channels,
                                  std::size_t height, std::size_t width, Rng& rng);

}  // namespace seibw
