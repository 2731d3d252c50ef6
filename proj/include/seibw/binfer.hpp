#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seibw/network.hpp"

namespace seibw {

// Sign bitmaps of one binary layer, one row of fan_in bits per output unit.
// pos_mask and neg_mask are disjoint and together cover exactly fan_in bits.
// Over {0,1} spikes the synaptic sum is a * (|pos & s| - |neg & s|), which
// is integer-exact before the single scale multiply.
template <class T>
struct PackedBinaryLayerT {
  std::size_t fan_in = 0;
  std::size_t n_out = 0;
  std::size_t words_per_row = 0;
  std::vector<std::uint64_t> pos_mask;  // [n_out * words_per_row]
  std::vector<std::uint64_t> neg_mask;
  T scale_a = T(0);

  const std::uint64_t* pos_row(std::size_t o) const { return pos_mask.data() + o * words_per_row; }
  const std::uint64_t* neg_row(std::size_t o) const { return neg_mask.data() + o * words_per_row; }
};

using PackedBinaryLayer = PackedBinaryLayerT<float>;

// Packs the signs of a binary layer's pre-binarization weights. Throws
// ModeError on a full-precision layer.
template <class T>
PackedBinaryLayerT<T> pack_layer(const LayerParams<T>& params);

// Reconstructs the +-a weight tensor from the bitmaps (testing aid).
template <class T>
TensorT<T> unpack_layer(const PackedBinaryLayerT<T>& packed, const std::vector<std::size_t>& shape);

// Packs a {0,1} vector into bitmap words, bit i = (values[i] != 0).
template <class T>
std::vector<std::uint64_t> pack_spikes(const T* values, std::size_t n);

// a * (popcount(pos & s) - popcount(neg & s)) for one output unit.
template <class T>
T popcount_dot(const PackedBinaryLayerT<T>& layer, const std::vector<std::uint64_t>& spikes,
               std::size_t out_unit = 0);

// Full network inference with packed kernels behind every binary layer and
// the float path elsewhere. Membrane state stays in floating point. The
// spike trains and logits equal the float engine's eval forward bit for bit.
template <class T>
class PackedNetwork {
 public:
  explicit PackedNetwork(Network<T>& net);
  ~PackedNetwork();
  PackedNetwork(const PackedNetwork&) = delete;
  PackedNetwork& operator=(const PackedNetwork&) = delete;

  // input [T, B, ...] -> logits [T, B, classes]
  TensorT<T> forward(const TensorT<T>& input_seq);

  std::size_t packed_layer_count() const { return packed_count_; }

 private:
  struct Op;
  std::vector<Op> program_;
  Network<T>* net_ = nullptr;
  std::size_t lif_count_ = 0;
  std::size_t packed_count_ = 0;

  void compile(std::vector<std::unique_ptr<Node<T>>>& nodes);
  void compile_node(Node<T>* node);
  void compile_chain(std::vector<std::unique_ptr<Node<T>>>& chain);
};

struct InferBenchmark {
  double packed_samples_per_s = 0.0;
  double float_samples_per_s = 0.0;
  std::size_t samples = 0;
  std::size_t horizon = 0;
};

// Runs both engines over the batch, checks the predictions agree, and times
// them. Predictions are argmax of time-averaged logits.
template <class T>
std::vector<std::size_t> infer_packed(Network<T>& net, const TensorT<T>& input_seq,
                                      InferBenchmark* bench = nullptr);

void write_benchmark_json(const InferBenchmark& bench, const std::string& path);
void write_predictions_csv(const std::vector<std::size_t>& preds, const std::string& path);

}  // namespace seibw
