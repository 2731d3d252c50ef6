#pragma once

#include <memory>
#include <string>
#include <vector>

#include "seibw/layers.hpp"
#include "seibw/neuron.hpp"

namespace seibw {

enum class Phase {
  train,    // hard spikes, batch-stat BN with running updates, full caches
  eval,     // hard spikes, running-stat BN, LIF state still recorded
  relaxed,  // soft-step spikes for finite-difference gradient checks
};

enum class BackwardMode { sg_bptt, sltt };

template <class T>
struct SequenceContext {
  std::size_t horizon = 0;
  Phase phase = Phase::train;
  // When set (relaxed phase), every LIF appends its units' soft-step piece
  // indices here; two forwards with equal logs crossed no kink between them.
  std::vector<std::int8_t>* piece_log = nullptr;
};

// Per-LIF-layer injected pre-activation term for decoupled member replay,
// indexed [lif_index][t]. Entry t of layer l equals leak * v^l[t-1] from a
// recorded forward pass.
template <class T>
struct NoiseTraceT {
  std::vector<std::vector<TensorT<T>>> per_lif;  // [lif][t], t 1-based at index t-1
  std::size_t horizon = 0;
};

template <class T>
class LifNode;

template <class T>
class Node {
 public:
  explicit Node(std::string name) : name_(std::move(name)) {}
  virtual ~Node() = default;

  const std::string& name() const { return name_; }

  virtual void begin_sequence(const SequenceContext<T>& ctx) { ctx_ = ctx; }
  virtual void begin_backward() {}

  // t is 1-based.
  virtual TensorT<T> forward(const TensorT<T>& x, std::size_t t) = 0;
  virtual TensorT<T> backward(const TensorT<T>& gy, std::size_t t, BackwardMode mode) = 0;

  // Sums the per-step weight-gradient contributions in ascending t and maps
  // them onto the master-weight accumulators. Called once per sweep.
  virtual void finalize_grads() {}

  // Stateless single-member pass; LIF nodes consume their slice of `noise`.
  virtual TensorT<T> replay(const TensorT<T>& x, std::size_t t, const NoiseTraceT<T>& noise,
                            std::size_t& lif_cursor) = 0;

  virtual void collect_params(std::vector<std::pair<std::string, LayerParams<T>*>>& out) {
    (void)out;
  }
  virtual void collect_bns(std::vector<std::pair<std::string, PerStepBatchNorm<T>*>>& out) {
    (void)out;
  }
  virtual void collect_lifs(std::vector<LifNode<T>*>& out) { (void)out; }

 protected:
  std::string name_;
  SequenceContext<T> ctx_;
};

template <class T>
class DenseNode : public Node<T> {
 public:
  DenseNode(std::string name, std::size_t in, std::size_t out, bool with_bias,
            WeightMode mode, SwsSettings<T> sws = {});

  void begin_sequence(const SequenceContext<T>& ctx) override;
  TensorT<T> forward(const TensorT<T>& x, std::size_t t) override;
  TensorT<T> backward(const TensorT<T>& gy, std::size_t t, BackwardMode mode) override;
  void finalize_grads() override;
  TensorT<T> replay(const TensorT<T>& x, std::size_t t, const NoiseTraceT<T>& noise,
                    std::size_t& lif_cursor) override;
  void collect_params(std::vector<std::pair<std::string, LayerParams<T>*>>& out) override {
    out.emplace_back(this->name_, &params);
  }

  LayerParams<T> params;
  bool input_layer = false;

 private:
  TensorT<T> apply(const TensorT<T>& x) const;
  std::vector<TensorT<T>> x_cache_;
  std::vector<TensorT<T>> grad_eff_steps_;
  std::vector<TensorT<T>> grad_bias_steps_;
};

template <class T>
class ConvNode : public Node<T> {
 public:
  ConvNode(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
           std::size_t stride, std::size_t padding, bool with_bias, WeightMode mode,
           SwsSettings<T> sws = {});

  void begin_sequence(const SequenceContext<T>& ctx) override;
  TensorT<T> forward(const TensorT<T>& x, std::size_t t) override;
  TensorT<T> backward(const TensorT<T>& gy, std::size_t t, BackwardMode mode) override;
  void finalize_grads() override;
  TensorT<T> replay(const TensorT<T>& x, std::size_t t, const NoiseTraceT<T>& noise,
                    std::size_t& lif_cursor) override;
  void collect_params(std::vector<std::pair<std::string, LayerParams<T>*>>& out) override {
    out.emplace_back(this->name_, &params);
  }

  LayerParams<T> params;
  std::size_t stride;
  std::size_t padding;
  // First layer of the network: gradient w.r.t. the raw input is never
  // consumed, so backward skips computing it.
  bool input_layer = false;

 private:
  TensorT<T> apply(const TensorT<T>& x) const;
  std::vector<TensorT<T>> x_cache_;
  std::vector<TensorT<T>> grad_eff_steps_;
  std::vector<TensorT<T>> grad_bias_steps_;
};

template <class T>
class BatchNormNode : public Node<T> {
 public:
  BatchNormNode(std::string name, std::size_t channels, std::size_t horizon);

  void begin_sequence(const SequenceContext<T>& ctx) override;
  TensorT<T> forward(const TensorT<T>& x, std::size_t t) override;
  TensorT<T> backward(const TensorT<T>& gy, std::size_t t, BackwardMode mode) override;
  TensorT<T> replay(const TensorT<T>& x, std::size_t t, const NoiseTraceT<T>& noise,
                    std::size_t& lif_cursor) override;
  void collect_bns(std::vector<std::pair<std::string, PerStepBatchNorm<T>*>>& out) override {
    out.emplace_back(this->name_, &bn);
  }

  PerStepBatchNorm<T> bn;
};

template <class T>
class LifNode : public Node<T> {
 public:
  LifNode(std::string name, LifConfig cfg) : Node<T>(std::move(name)), cfg(cfg) {}

  void begin_sequence(const SequenceContext<T>& ctx) override;
  void begin_backward() override;
  TensorT<T> forward(const TensorT<T>& x, std::size_t t) override;
  TensorT<T> backward(const TensorT<T>& gy, std::size_t t, BackwardMode mode) override;
  TensorT<T> replay(const TensorT<T>& x, std::size_t t, const NoiseTraceT<T>& noise,
                    std::size_t& lif_cursor) override;
  void collect_lifs(std::vector<LifNode<T>*>& out) override { out.push_back(this); }

  bool has_state() const { return !u_.empty(); }
  const TensorT<T>& membrane_u(std::size_t t) const { return u_.at(t); }
  const TensorT<T>& state_v(std::size_t t) const { return v_.at(t); }  // t in [0, T]
  const TensorT<T>& spikes(std::size_t t) const { return s_.at(t); }
  const TensorT<T>& backward_du(std::size_t t) const;
  const TensorT<T>& last_replay_spikes() const { return replay_spikes_; }

  // leak * (1 - v_threshold * g'(u[t])): the factor the temporal recursion
  // multiplies by between adjacent steps.
  TensorT<T> temporal_jacobian(std::size_t t) const;

  LifConfig cfg;

 private:
  std::vector<TensorT<T>> u_, v_, s_, du_;
  TensorT<T> replay_spikes_;
  TensorT<T> carry_;  // d L / d v[t] during a bptt sweep
  bool carry_valid_ = false;
  std::size_t last_backward_t_ = 0;
};

template <class T>
class AvgPoolNode : public Node<T> {
 public:
  AvgPoolNode(std::string name, std::size_t window, std::size_t stride)
      : Node<T>(std::move(name)), window(window), stride(stride) {}

  TensorT<T> forward(const TensorT<T>& x, std::size_t t) override;
  TensorT<T> backward(const TensorT<T>& gy, std::size_t t, BackwardMode mode) override;
  TensorT<T> replay(const TensorT<T>& x, std::size_t t, const NoiseTraceT<T>& noise,
                    std::size_t& lif_cursor) override;

  std::size_t window;
  std::size_t stride;

 private:
  std::vector<std::size_t> x_shape_;
};

template <class T>
class GlobalAvgPoolNode : public Node<T> {
 public:
  explicit GlobalAvgPoolNode(std::string name) : Node<T>(std::move(name)) {}

  TensorT<T> forward(const TensorT<T>& x, std::size_t t) override;
  TensorT<T> backward(const TensorT<T>& gy, std::size_t t, BackwardMode mode) override;
  TensorT<T> replay(const TensorT<T>& x, std::size_t t, const NoiseTraceT<T>& noise,
                    std::size_t& lif_cursor) override;

 private:
  std::vector<std::size_t> x_shape_;
};

template <class T>
class FlattenNode : public Node<T> {
 public:
  explicit FlattenNode(std::string name) : Node<T>(std::move(name)) {}

  TensorT<T> forward(const TensorT<T>& x, std::size_t t) override;
  TensorT<T> backward(const TensorT<T>& gy, std::size_t t, BackwardMode mode) override;
  TensorT<T> replay(const TensorT<T>& x, std::size_t t, const NoiseTraceT<T>& noise,
                    std::size_t& lif_cursor) override;

 private:
  std::vector<std::size_t> x_shape_;
};

enum class ShortcutStyle { single_shortcut, multi_shortcut };

// Residual block. Each mode is a norm -> LIF -> conv sub-chain with its own
// skip connection in multi-shortcut style; single-shortcut wraps the whole
// chain once. An optional projection (avg pool + full-precision 1x1 conv)
// carries the shortcut across channel/stride changes on the first mode.
// When nf is set, every residual add is y = base + alpha * f(y / beta_m).
template <class T>
class ResidualBlockNode : public Node<T> {
 public:
  struct Mode {
    std::vector<std::unique_ptr<Node<T>>> chain;
    T beta = T(1);
  };

  ResidualBlockNode(std::string name, ShortcutStyle style)
      : Node<T>(std::move(name)), style(style) {}

  void begin_sequence(const SequenceContext<T>& ctx) override;
  void begin_backward() override;
  TensorT<T> forward(const TensorT<T>& x, std::size_t t) override;
  TensorT<T> backward(const TensorT<T>& gy, std::size_t t, BackwardMode mode) override;
  void finalize_grads() override;
  TensorT<T> replay(const TensorT<T>& x, std::size_t t, const NoiseTraceT<T>& noise,
                    std::size_t& lif_cursor) override;
  void collect_params(std::vector<std::pair<std::string, LayerParams<T>*>>& out) override;
  void collect_bns(std::vector<std::pair<std::string, PerStepBatchNorm<T>*>>& out) override;
  void collect_lifs(std::vector<LifNode<T>*>& out) override;

  ShortcutStyle style;
  std::vector<Mode> modes;
  std::vector<std::unique_ptr<Node<T>>> projection;  // empty when shapes match
  bool nf = false;
  T nf_alpha = T(0.2);
};

template <class T>
class Network {
 public:
  LifConfig lif;
  std::size_t horizon = 1;
  std::size_t num_classes = 0;
  std::vector<std::size_t> input_shape;  // per-sample, e.g. {1,28,28}
  std::vector<std::unique_ptr<Node<T>>> nodes;

  // input [T, B, ...] -> logits [T, B, classes]. Retains per-step state.
  TensorT<T> forward(const TensorT<T>& input_seq, Phase phase);

  // loss_grads [T, B, classes]. For sg_bptt, steps run T..1; for sltt a
  // custom processing order may be supplied (gradients are identical for
  // any order by construction). Throws StateError without a forward pass.
  void backward(const TensorT<T>& loss_grads, BackwardMode mode,
                const std::vector<std::size_t>* sltt_time_order = nullptr);

  void zero_grads();

  // Stateless pass of member t with the given injected noise.
  TensorT<T> replay_member(const TensorT<T>& x_t, std::size_t t,
                           const NoiseTraceT<T>& noise);

  std::vector<std::pair<std::string, LayerParams<T>*>> named_params();
  std::vector<std::pair<std::string, PerStepBatchNorm<T>*>> named_bns();
  std::vector<LifNode<T>*> lif_nodes();

  void refresh_all();

  bool has_forward_state() const { return forward_ran_; }
  Phase last_phase() const { return last_phase_; }
  std::size_t last_batch() const { return last_batch_; }

  // Soft-step piece signature of the most recent relaxed forward.
  const std::vector<std::int8_t>& piece_log() const { return piece_log_; }

 private:
  bool forward_ran_ = false;
  Phase last_phase_ = Phase::train;
  std::size_t last_batch_ = 0;
  std::vector<std::int8_t> piece_log_;
};

// --- architecture description / builder ---

enum class NormKind { none, bn, sws };

struct ArchSpec {
  enum class Kind { mlp, convnet };
  Kind kind = Kind::convnet;

  std::vector<std::size_t> input_shape = {1, 28, 28};
  std::size_t num_classes = 10;

  // mlp
  std::vector<std::size_t> hidden = {64};

  // convnet
  std::size_t stem_channels = 8;
  std::vector<std::size_t> stage_channels = {8, 16};
  std::vector<std::size_t> blocks_per_stage = {2, 2};
  std::size_t modes_per_block = 2;

  NormKind norm = NormKind::bn;
  ShortcutStyle shortcut = ShortcutStyle::multi_shortcut;
  // gap pools spatially before the classifier; flatten feeds it the whole
  // spike map.
  bool head_flatten = false;
  bool nf = false;
  double nf_alpha = 0.2;
  double sws_gamma = 2.74;
};

// weight_mode applies to the binarizable layers only; the input layer, the
// classification head and downsample projections stay full precision.
template <class T>
Network<T> build_network(const ArchSpec& arch, std::size_t horizon, const LifConfig& lif,
                         WeightMode weight_mode, Rng& rng);

template <class T>
void set_weight_mode(Network<T>& net, WeightMode mode);

using NoiseTrace = NoiseTraceT<float>;

}  // namespace seibw
