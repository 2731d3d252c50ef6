#pragma once

#include <optional>

#include "seibw/rng.hpp"
#include "seibw/tensor.hpp"

namespace seibw {

enum class WeightMode { full_precision, binary };

// Scaled weight standardization settings. gamma defaults to the value that
// keeps unit variance through a Heaviside nonlinearity. fan_in_factor
// selects whether the 1/sqrt(N) term is part of the normalization (the
// NF-ResNet convention); exposed as a switch because conventions differ.
template <class T>
struct SwsSettings {
  bool enabled = false;
  T gamma = T(2.74);
  bool fan_in_factor = true;
};

// Magnitude-aware binarization: one scale per layer, a = ||w||_1 / n,
// w_binary = +a where w > 0, -a where w <= 0. All-zero weights yield a = 0
// (degenerate but well defined); a warning is logged.
template <class T>
std::pair<TensorT<T>, T> binarize_weights(const TensorT<T>& w_real);

// Straight-through gradient for the sign function: passes the incoming
// gradient where |w_real| < 1 (strict), zero elsewhere.
template <class T>
TensorT<T> ste_weight_gradient(const TensorT<T>& grad_wb, const TensorT<T>& w_real);

// Per output unit i over its fan-in extent (all trailing axes):
// w_hat = gamma * (w - mu_i) / (sigma_i * sqrt(N_i)), population sigma
// floored at 1e-5. The learnable per-output gain is applied by the caller.
template <class T>
TensorT<T> sws_standardize(const TensorT<T>& w, T gamma, bool fan_in_factor = true);

// Chain rule through sws_standardize: maps d L/d w_hat back to d L/d w.
template <class T>
TensorT<T> sws_standardize_backward(const TensorT<T>& w, const TensorT<T>& grad_out, T gamma,
                                    bool fan_in_factor = true);

// Trainable weight bundle shared by dense and conv layers. w_real holds the
// master weights; refresh() derives the standardized / binarized views the
// forward pass actually uses.
template <class T>
struct LayerParams {
  TensorT<T> w_real;
  TensorT<T> bias;  // empty when the layer has no bias
  WeightMode mode = WeightMode::full_precision;
  // Input layer, classification head and downsample projections stay full
  // precision; mode switches skip layers carrying this flag.
  bool binarization_exempt = false;
  SwsSettings<T> sws;
  TensorT<T> sws_gain;  // [out], ones at init; only used when sws.enabled

  // Derived views, valid for the current w_real (refresh() after any update).
  TensorT<T> w_pre;  // value feeding sign(): gain * standardized, or w_real
  TensorT<T> w_eff;  // weights used in forward
  T scale_a = T(0);

  void init(std::vector<std::size_t> w_shape, bool with_bias);
  void refresh();

  // Maps d L/d w_eff to d L/d w_real (STE window, gain, standardization),
  // accumulating into grad_w / grad_gain.
  void backward_to_master(const TensorT<T>& grad_eff);

  std::size_t fan_in() const {
    return w_real.rank() == 0 ? 0 : w_real.numel() / w_real.dim(0);
  }

  TensorT<T> grad_w;
  TensorT<T> grad_bias;
  TensorT<T> grad_gain;
  void zero_grads();
};

// Batch normalization with independent statistics and affine parameters per
// time step: entry t is updated only from activations at step t.
template <class T>
struct PerStepBatchNorm {
  std::size_t channels = 0;
  std::size_t horizon = 0;
  T epsilon = T(1e-5);
  T momentum = T(0.1);

  TensorT<T> gamma;         // [T, C]
  TensorT<T> beta;          // [T, C]
  TensorT<T> running_mean;  // [T, C]
  TensorT<T> running_var;   // [T, C]

  TensorT<T> grad_gamma;
  TensorT<T> grad_beta;

  void init(std::size_t channels, std::size_t horizon);
  void zero_grads();

  // x is [B, C] or [B, C, H, W]; t is 1-based. Training mode normalizes with
  // batch statistics of step t (batch size >= 2 required) and updates that
  // step's running stats; eval mode uses the stored running stats.
  TensorT<T> forward(const TensorT<T>& x, std::size_t t, bool training);

  // Backward through the most recent training-mode forward at step t.
  TensorT<T> backward(const TensorT<T>& grad_out, std::size_t t);

  void begin_sequence(std::size_t horizon);

 private:
  struct StepCache {
    TensorT<T> x_hat;
    std::vector<double> inv_std;
    bool valid = false;
  };
  std::vector<StepCache> cache_;
};

// Kaiming-style fan-in scaled normal init.
template <class T>
void kaiming_normal_init(TensorT<T>& w, Rng& rng);

void log_warning(const std::string& msg);

}  // namespace seibw
