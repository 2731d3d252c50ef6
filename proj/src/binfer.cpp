#include "seibw/binfer.hpp"

#include <chrono>
#include <fstream>

#include "json.hpp"

namespace seibw {

template <class T>
PackedBinaryLayerT<T> pack_layer(const LayerParams<T>& params) {
  if (params.mode != WeightMode::binary)
    throw ModeError("pack_layer: layer is not in binary weight mode");
  SEIBW_CHECK(params.bias.empty(), "pack_layer: binary layers with bias are not supported");
  SEIBW_CHECK(!params.w_pre.empty(), "pack_layer: refresh() has not run");

  PackedBinaryLayerT<T> packed;
  packed.n_out = params.w_pre.dim(0);
  packed.fan_in = params.w_pre.numel() / packed.n_out;
  packed.words_per_row = (packed.fan_in + 63) / 64;
  packed.scale_a = params.scale_a;
  packed.pos_mask.assign(packed.n_out * packed.words_per_row, 0);
  packed.neg_mask.assign(packed.n_out * packed.words_per_row, 0);
  for (std::size_t o = 0; o < packed.n_out; ++o) {
    const T* row = params.w_pre.data() + o * packed.fan_in;
    std::uint64_t* pos = packed.pos_mask.data() + o * packed.words_per_row;
    std::uint64_t* neg = packed.neg_mask.data() + o * packed.words_per_row;
    for (std::size_t i = 0; i < packed.fan_in; ++i) {
      const std::uint64_t bit = 1ull << (i % 64);
      if (row[i] > T(0))
        pos[i / 64] |= bit;
      else
        neg[i / 64] |= bit;
    }
  }
  return packed;
}

template <class T>
TensorT<T> unpack_layer(const PackedBinaryLayerT<T>& packed,
                        const std::vector<std::size_t>& shape) {
  TensorT<T> w(shape);
  SEIBW_CHECK_DIM(w.numel() == packed.n_out * packed.fan_in, "unpack_layer: shape mismatch");
  for (std::size_t o = 0; o < packed.n_out; ++o) {
    const std::uint64_t* pos = packed.pos_row(o);
    T* row = w.data() + o * packed.fan_in;
    for (std::size_t i = 0; i < packed.fan_in; ++i)
      row[i] = (pos[i / 64] >> (i % 64)) & 1ull ? packed.scale_a : -packed.scale_a;
  }
  return w;
}

template <class T>
std::vector<std::uint64_t> pack_spikes(const T* values, std::size_t n) {
  std::vector<std::uint64_t> words((n + 63) / 64, 0);
  for (std::size_t i = 0; i < n; ++i)
    if (values[i] != T(0)) words[i / 64] |= 1ull << (i % 64);
  return words;
}

template <class T>
T popcount_dot(const PackedBinaryLayerT<T>& layer, const std::vector<std::uint64_t>& spikes,
               std::size_t out_unit) {
  SEIBW_CHECK_DIM(spikes.size() == layer.words_per_row, "popcount_dot: spike width mismatch");
  SEIBW_CHECK_DIM(out_unit < layer.n_out, "popcount_dot: output unit out of range");
  const std::uint64_t* pos = layer.pos_row(out_unit);
  const std::uint64_t* neg = layer.neg_row(out_unit);
  std::int64_t diff = 0;
  for (std::size_t w = 0; w < layer.words_per_row; ++w)
    diff += __builtin_popcountll(pos[w] & spikes[w]) -
            __builtin_popcountll(neg[w] & spikes[w]);
  return static_cast<T>(static_cast<double>(layer.scale_a) * static_cast<double>(diff));
}

// --- PackedNetwork ---

template <class T>
struct PackedNetwork<T>::Op {
  enum class Kind {
    push,
    pop_add,
    swap_top,
    scale,
    conv_float,
    conv_packed,
    dense_float,
    dense_packed,
    bn,
    lif,
    pool,
    gap,
    flatten
  };
  Kind kind;
  ConvNode<T>* conv = nullptr;
  DenseNode<T>* dense = nullptr;
  BatchNormNode<T>* bn = nullptr;
  LifNode<T>* lif = nullptr;
  AvgPoolNode<T>* pool = nullptr;
  std::size_t lif_index = 0;
  T scale_value = T(1);
  PackedBinaryLayerT<T> packed;
};

namespace {

template <class T>
void check_binary_input(const TensorT<T>& x, const char* what) {
  for (std::size_t i = 0; i < x.numel(); ++i)
    SEIBW_CHECK_VALUE(x[i] == T(0) || x[i] == T(1),
                      std::string(what) + ": packed layer input must be {0,1} spikes");
}

template <class T>
TensorT<T> packed_dense_forward(const PackedBinaryLayerT<T>& packed, const TensorT<T>& x) {
  SEIBW_CHECK_DIM(x.rank() == 2 && x.dim(1) == packed.fan_in, "packed dense: shape mismatch");
  check_binary_input(x, "packed dense");
  const std::size_t B = x.dim(0);
  TensorT<T> y({B, packed.n_out});
  for (std::size_t b = 0; b < B; ++b) {
    auto words = pack_spikes(x.data() + b * packed.fan_in, packed.fan_in);
    for (std::size_t o = 0; o < packed.n_out; ++o)
      y[b * packed.n_out + o] = popcount_dot(packed, words, o);
  }
  return y;
}

template <class T>
TensorT<T> packed_conv_forward(const PackedBinaryLayerT<T>& packed, const ConvNode<T>& node,
                               const TensorT<T>& x) {
  SEIBW_CHECK_DIM(x.rank() == 4, "packed conv: [B,C,H,W] required");
  check_binary_input(x, "packed conv");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = node.params.w_eff.dim(0);
  const std::size_t kh = node.params.w_eff.dim(2), kw = node.params.w_eff.dim(3);
  const std::size_t stride = node.stride, padding = node.padding;
  SEIBW_CHECK_DIM(packed.fan_in == C * kh * kw, "packed conv: fan-in mismatch");
  const std::size_t Ho = (H + 2 * padding - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - kw) / stride + 1;
  TensorT<T> y({B, O, Ho, Wo});
  T* py = y.data();

  parallel_for(B, [&](std::size_t blo, std::size_t bhi) {
    std::vector<std::uint64_t> patch(packed.words_per_row);
    for (std::size_t b = blo; b < bhi; ++b) {
      const T* xb = x.data() + b * C * H * W;
      for (std::size_t oy = 0; oy < Ho; ++oy) {
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          std::fill(patch.begin(), patch.end(), 0ull);
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                        static_cast<std::ptrdiff_t>(padding);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                          static_cast<std::ptrdiff_t>(padding);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                if (xb[(c * H + iy) * W + ix] != T(0)) {
                  const std::size_t bit = (c * kh + ky) * kw + kx;
                  patch[bit / 64] |= 1ull << (bit % 64);
                }
              }
            }
          }
          for (std::size_t o = 0; o < O; ++o)
            py[((b * O + o) * Ho + oy) * Wo + ox] = popcount_dot(packed, patch, o);
        }
      }
    }
  });
  return y;
}

}  // namespace

template <class T>
void PackedNetwork<T>::compile_node(Node<T>* node) {
  if (auto* conv = dynamic_cast<ConvNode<T>*>(node)) {
    Op op;
    op.conv = conv;
    if (conv->params.mode == WeightMode::binary) {
      op.kind = Op::Kind::conv_packed;
      op.packed = pack_layer(conv->params);
      ++packed_count_;
    } else {
      op.kind = Op::Kind::conv_float;
    }
    program_.push_back(std::move(op));
  } else if (auto* dense = dynamic_cast<DenseNode<T>*>(node)) {
    Op op;
    op.dense = dense;
    if (dense->params.mode == WeightMode::binary) {
      op.kind = Op::Kind::dense_packed;
      op.packed = pack_layer(dense->params);
      ++packed_count_;
    } else {
      op.kind = Op::Kind::dense_float;
    }
    program_.push_back(std::move(op));
  } else if (auto* bn = dynamic_cast<BatchNormNode<T>*>(node)) {
    Op op;
    op.kind = Op::Kind::bn;
    op.bn = bn;
    program_.push_back(std::move(op));
  } else if (auto* lif = dynamic_cast<LifNode<T>*>(node)) {
    Op op;
    op.kind = Op::Kind::lif;
    op.lif = lif;
    op.lif_index = lif_count_++;
    program_.push_back(std::move(op));
  } else if (auto* pool = dynamic_cast<AvgPoolNode<T>*>(node)) {
    Op op;
    op.kind = Op::Kind::pool;
    op.pool = pool;
    program_.push_back(std::move(op));
  } else if (dynamic_cast<GlobalAvgPoolNode<T>*>(node)) {
    Op op;
    op.kind = Op::Kind::gap;
    program_.push_back(std::move(op));
  } else if (dynamic_cast<FlattenNode<T>*>(node)) {
    Op op;
    op.kind = Op::Kind::flatten;
    program_.push_back(std::move(op));
  } else if (auto* block = dynamic_cast<ResidualBlockNode<T>*>(node)) {
    const T alpha = block->nf ? block->nf_alpha : T(1);
    auto emit = [&](typename Op::Kind kind, T value = T(1)) {
      Op op;
      op.kind = kind;
      op.scale_value = value;
      program_.push_back(std::move(op));
    };
    if (block->style == ShortcutStyle::single_shortcut) {
      emit(Op::Kind::push);
      if (block->nf && block->modes[0].beta != T(1))
        emit(Op::Kind::scale, T(1) / block->modes[0].beta);
      for (auto& m : block->modes) compile_chain(m.chain);
      if (block->nf && alpha != T(1)) emit(Op::Kind::scale, alpha);
      if (!block->projection.empty()) {
        emit(Op::Kind::swap_top);
        compile_chain(block->projection);
      }
      emit(Op::Kind::pop_add);
    } else {
      for (std::size_t k = 0; k < block->modes.size(); ++k) {
        auto& m = block->modes[k];
        emit(Op::Kind::push);
        if (block->nf && m.beta != T(1)) emit(Op::Kind::scale, T(1) / m.beta);
        compile_chain(m.chain);
        if (block->nf && alpha != T(1)) emit(Op::Kind::scale, alpha);
        if (k == 0 && !block->projection.empty()) {
          emit(Op::Kind::swap_top);
          compile_chain(block->projection);
        }
        emit(Op::Kind::pop_add);
      }
    }
  } else {
    throw Error("packed network: unsupported node type: " + node->name());
  }
}

template <class T>
void PackedNetwork<T>::compile_chain(std::vector<std::unique_ptr<Node<T>>>& chain) {
  for (auto& n : chain) compile_node(n.get());
}

template <class T>
void PackedNetwork<T>::compile(std::vector<std::unique_ptr<Node<T>>>& nodes) {
  for (auto& n : nodes) compile_node(n.get());
}

template <class T>
PackedNetwork<T>::PackedNetwork(Network<T>& net) : net_(&net) {
  compile(net.nodes);
}

template <class T>
PackedNetwork<T>::~PackedNetwork() = default;

template <class T>
TensorT<T> PackedNetwork<T>::forward(const TensorT<T>& input_seq) {
  SEIBW_CHECK_DIM(input_seq.rank() >= 3 && input_seq.dim(0) == net_->horizon,
                  "packed forward: [T, B, ...] input required");
  const std::size_t B = input_seq.dim(1);
  const T leak = static_cast<T>(net_->lif.leak);
  const T vth = static_cast<T>(net_->lif.v_threshold);

  std::vector<TensorT<T>> membranes(lif_count_);
  TensorT<T> logits({net_->horizon, B, net_->num_classes});
  for (std::size_t t = 1; t <= net_->horizon; ++t) {
    TensorT<T> x = slice_step(input_seq, t);
    std::vector<TensorT<T>> stack;
    for (auto& op : program_) {
      switch (op.kind) {
        case Op::Kind::push:
          stack.push_back(x);
          break;
        case Op::Kind::pop_add: {
          SEIBW_CHECK(!stack.empty(), "packed forward: stack underflow");
          x.add_(stack.back());
          stack.pop_back();
          break;
        }
        case Op::Kind::swap_top: {
          SEIBW_CHECK(!stack.empty(), "packed forward: stack underflow");
          std::swap(x, stack.back());
          break;
        }
        case Op::Kind::scale:
          x.scale_(op.scale_value);
          break;
        case Op::Kind::conv_float: {
          // Same kernel the float engine uses.
          std::size_t cursor = 0;
          NoiseTraceT<T> none;
          x = op.conv->replay(x, t, none, cursor);
          break;
        }
        case Op::Kind::conv_packed:
          x = packed_conv_forward(op.packed, *op.conv, x);
          break;
        case Op::Kind::dense_float: {
          // Same kernel the float engine uses.
          std::size_t cursor = 0;
          NoiseTraceT<T> none;
          x = op.dense->replay(x, t, none, cursor);
          break;
        }
        case Op::Kind::dense_packed:
          x = packed_dense_forward(op.packed, x);
          break;
        case Op::Kind::bn:
          x = op.bn->bn.forward(x, t, false);
          break;
        case Op::Kind::lif: {
          TensorT<T>& v = membranes[op.lif_index];
          if (t == 1 || v.empty()) v = TensorT<T>(x.shape());
          SEIBW_CHECK_DIM(v.same_shape(x), "packed forward: membrane shape mismatch");
          TensorT<T> s(x.shape());
          for (std::size_t i = 0; i < x.numel(); ++i) {
            const T ui = leak * v[i] + x[i];
            const T si = ui >= vth ? T(1) : T(0);
            s[i] = si;
            v[i] = ui - vth * si;
          }
          x = std::move(s);
          break;
        }
        case Op::Kind::pool:
          x = avg_pool2d(x, op.pool->window, op.pool->stride);
          break;
        case Op::Kind::gap: {
          const std::size_t C = x.dim(1), S = x.dim(2) * x.dim(3);
          TensorT<T> y({x.dim(0), C});
          const double inv = 1.0 / static_cast<double>(S);
          for (std::size_t bc = 0; bc < x.dim(0) * C; ++bc) {
            double acc = 0.0;
            const T* p = x.data() + bc * S;
            for (std::size_t i = 0; i < S; ++i) acc += static_cast<double>(p[i]);
            y[bc] = static_cast<T>(acc * inv);
          }
          x = std::move(y);
          break;
        }
        case Op::Kind::flatten:
          x = x.reshaped({x.dim(0), x.numel() / x.dim(0)});
          break;
      }
    }
    SEIBW_CHECK(stack.empty(), "packed forward: unbalanced residual stack");
    set_step(logits, t, x);
  }
  return logits;
}

namespace {
template <class T>
std::vector<std::size_t> predictions_from_logits(const TensorT<T>& logits) {
  const std::size_t horizon = logits.dim(0), B = logits.dim(1), C = logits.dim(2);
  TensorT<T> mean({B, C});
  for (std::size_t t = 0; t < horizon; ++t)
    for (std::size_t i = 0; i < B * C; ++i) mean[i] += logits[t * B * C + i];
  return argmax_rows(mean);
}
}  // namespace

template <class T>
std::vector<std::size_t> infer_packed(Network<T>& net, const TensorT<T>& input_seq,
                                      InferBenchmark* bench) {
  using clock = std::chrono::steady_clock;

  PackedNetwork<T> packed(net);
  const auto t0 = clock::now();
  TensorT<T> packed_logits = packed.forward(input_seq);
  const auto t1 = clock::now();
  TensorT<T> float_logits = net.forward(input_seq, Phase::eval);
  const auto t2 = clock::now();

  auto packed_preds = predictions_from_logits(packed_logits);
  auto float_preds = predictions_from_logits(float_logits);
  SEIBW_CHECK(packed_preds == float_preds,
              "infer: packed and float engines disagree on predictions");

  if (bench) {
    const std::size_t B = input_seq.dim(1);
    bench->samples = B;
    bench->horizon = net.horizon;
    const double s_packed = std::chrono::duration<double>(t1 - t0).count();
    const double s_float = std::chrono::duration<double>(t2 - t1).count();
    bench->packed_samples_per_s = s_packed > 0 ? B / s_packed : 0.0;
    bench->float_samples_per_s = s_float > 0 ? B / s_float : 0.0;
  }
  return packed_preds;
}

void write_benchmark_json(const InferBenchmark& bench, const std::string& path) {
  nlohmann::json j;
  j["samples"] = bench.samples;
  j["time_steps"] = bench.horizon;
  j["packed_samples_per_s"] = bench.packed_samples_per_s;
  j["float_samples_per_s"] = bench.float_samples_per_s;
  std::ofstream f(path, std::ios::trunc);
  SEIBW_CHECK(f.good(), "cannot open for write: " + path);
  f << j.dump(2) << "\n";
}

void write_predictions_csv(const std::vector<std::size_t>& preds, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  SEIBW_CHECK(f.good(), "cannot open for write: " + path);
  f << "sample_index,predicted_class\n";
  for (std::size_t i = 0; i < preds.size(); ++i) f << i << "," << preds[i] << "\n";
}

#define SEIBW_INSTANTIATE(T)                                                              \
  template struct PackedBinaryLayerT<T>;                                                  \
  template PackedBinaryLayerT<T> pack_layer<T>(const LayerParams<T>&);                    \
  template TensorT<T> unpack_layer<T>(const PackedBinaryLayerT<T>&,                       \
                                      const std::vector<std::size_t>&);                   \
  template std::vector<std::uint64_t> pack_spikes<T>(const T*, std::size_t);              \
  template T popcount_dot<T>(const PackedBinaryLayerT<T>&,                                \
                             const std::vector<std::uint64_t>&, std::size_t);             \
  template class PackedNetwork<T>;                                                        \
  template std::vector<std::size_t> infer_packed<T>(Network<T>&, const TensorT<T>&,       \
                                                    InferBenchmark*);

SEIBW_INSTANTIATE(float)
SEIBW_INSTANTIATE(double)
#undef SEIBW_INSTANTIATE

}  // namespace seibw
