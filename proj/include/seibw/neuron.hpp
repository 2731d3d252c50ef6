#pragma once

#include "seibw/tensor.hpp"

namespace seibw {

enum class SurrogateKind { triangle };

// Leaky integrate-and-fire: u[t] = leak * v[t-1] + input[t],
// s[t] = 1 if u[t] >= v_threshold else 0, v[t] = u[t] - v_threshold * s[t].
// The spike condition is closed at threshold: H(0) = 1.
struct LifConfig {
  double v_threshold = 1.0;
  double leak = 0.1;
  SurrogateKind surrogate = SurrogateKind::triangle;
  double surrogate_width = 1.0;  // gamma, defaults to v_threshold

  void validate() const;
};

template <class T>
struct LifStepResult {
  TensorT<T> u;  // pre-reset membrane potential
  TensorT<T> s;  // spikes in {0,1}
  TensorT<T> v;  // post-reset state
};

// Spike train indexed [T, batch, features...]; every entry is 0 or 1.
template <class T>
struct SpikeSequenceT {
  TensorT<T> values;
  std::size_t horizon = 0;
};

// Full membrane history of one layer's forward pass. u has a leading time
// axis of extent T, v of extent T+1 with v[0] = 0.
template <class T>
struct LifLayerStateT {
  TensorT<T> u;
  TensorT<T> v;
};

template <class T>
LifStepResult<T> lif_step(const LifConfig& cfg, const TensorT<T>& v_prev,
                          const TensorT<T>& weighted_input);

template <class T>
std::pair<SpikeSequenceT<T>, LifLayerStateT<T>> lif_forward(const LifConfig& cfg,
                                                            const TensorT<T>& input_sequence);

// (1/gamma^2) * max(0, gamma - |u - v_threshold|), elementwise.
template <class T>
TensorT<T> triangle_surrogate_derivative(const LifConfig& cfg, const TensorT<T>& u);

// Scalar forms used by the engines and the relaxed soft step.
double triangle_derivative(const LifConfig& cfg, double u);

// Antiderivative of the triangle: a C1 piecewise-quadratic step rising from
// 0 at u = v_threshold - gamma to 1 at u = v_threshold + gamma. Substituting
// it for the Heaviside makes a whole network differentiable, which is what
// the finite-difference gradient checks run against.
double soft_step(const LifConfig& cfg, double u);

// Index of the smooth piece of soft_step that u falls in (0..3). Two
// evaluations that stay within one piece are free of kink crossings.
int soft_step_piece(const LifConfig& cfg, double u);

template <class T>
TensorT<T> soft_step(const LifConfig& cfg, const TensorT<T>& u);

using SpikeSequence = SpikeSequenceT<float>;
using LifLayerState = LifLayerStateT<float>;

}  // namespace seibw
