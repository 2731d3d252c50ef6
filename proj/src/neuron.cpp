#include "seibw/neuron.hpp"

#include <cmath>

namespace seibw {

void LifConfig::validate() const {
  // leak = 0 is admitted as a degenerate diagnostic case (it removes all
  // temporal coupling, making the two gradient engines provably identical).
  SEIBW_CHECK_VALUE(leak >= 0.0 && leak < 1.0, "LifConfig: leak must be in [0,1)");
  SEIBW_CHECK_VALUE(v_threshold > 0.0, "LifConfig: v_threshold must be positive");
  SEIBW_CHECK_VALUE(surrogate_width > 0.0, "LifConfig: surrogate_width must be positive");
}

template <class T>
LifStepResult<T> lif_step(const LifConfig& cfg, const TensorT<T>& v_prev,
                          const TensorT<T>& weighted_input) {
  SEIBW_CHECK_DIM(v_prev.same_shape(weighted_input), "lif_step: shape mismatch");
  const T leak = static_cast<T>(cfg.leak);
  const T vth = static_cast<T>(cfg.v_threshold);
  LifStepResult<T> r{TensorT<T>(v_prev.shape()), TensorT<T>(v_prev.shape()),
                     TensorT<T>(v_prev.shape())};
  for (std::size_t i = 0; i < v_prev.numel(); ++i) {
    const T u = leak * v_prev[i] + weighted_input[i];
    const T s = u >= vth ? T(1) : T(0);
    r.u[i] = u;
    r.s[i] = s;
    r.v[i] = u - vth * s;
  }
  return r;
}

template <class T>
std::pair<SpikeSequenceT<T>, LifLayerStateT<T>> lif_forward(const LifConfig& cfg,
                                                            const TensorT<T>& input_sequence) {
  SEIBW_CHECK_DIM(input_sequence.rank() >= 2, "lif_forward: [T, features...] required");
  const std::size_t horizon = input_sequence.dim(0);
  SEIBW_CHECK_DIM(horizon >= 1, "lif_forward: empty time axis");
  const std::size_t step_elems = input_sequence.numel() / horizon;

  std::vector<std::size_t> step_shape(input_sequence.shape().begin() + 1,
                                      input_sequence.shape().end());
  std::vector<std::size_t> v_shape = input_sequence.shape();
  v_shape[0] = horizon + 1;

  SpikeSequenceT<T> spikes{TensorT<T>(input_sequence.shape()), horizon};
  LifLayerStateT<T> state{TensorT<T>(input_sequence.shape()), TensorT<T>(v_shape)};

  TensorT<T> v_prev(step_shape);
  TensorT<T> input(step_shape);
  for (std::size_t t = 0; t < horizon; ++t) {
    std::copy(input_sequence.data() + t * step_elems, input_sequence.data() + (t + 1) * step_elems,
              input.data());
    auto step = lif_step(cfg, v_prev, input);
    std::copy(step.u.data(), step.u.data() + step_elems, state.u.data() + t * step_elems);
    std::copy(step.v.data(), step.v.data() + step_elems, state.v.data() + (t + 1) * step_elems);
    std::copy(step.s.data(), step.s.data() + step_elems, spikes.values.data() + t * step_elems);
    v_prev = std::move(step.v);
  }
  return {std::move(spikes), std::move(state)};
}

double triangle_derivative(const LifConfig& cfg, double u) {
  const double g = cfg.surrogate_width;
  return std::max(0.0, g - std::abs(u - cfg.v_threshold)) / (g * g);
}

template <class T>
TensorT<T> triangle_surrogate_derivative(const LifConfig& cfg, const TensorT<T>& u) {
  TensorT<T> out(u.shape());
  for (std::size_t i = 0; i < u.numel(); ++i)
    out[i] = static_cast<T>(triangle_derivative(cfg, static_cast<double>(u[i])));
  return out;
}

double soft_step(const LifConfig& cfg, double u) {
  const double g = cfg.surrogate_width;
  const double z = u - cfg.v_threshold;
  if (z <= -g) return 0.0;
  if (z <= 0.0) {
    const double w = z + g;
    return w * w / (2.0 * g * g);
  }
  if (z < g) {
    const double w = g - z;
    return 1.0 - w * w / (2.0 * g * g);
  }
  return 1.0;
}

int soft_step_piece(const LifConfig& cfg, double u) {
  const double g = cfg.surrogate_width;
  const double z = u - cfg.v_threshold;
  if (z <= -g) return 0;
  if (z <= 0.0) return 1;
  if (z < g) return 2;
  return 3;
}

template <class T>
TensorT<T> soft_step(const LifConfig& cfg, const TensorT<T>& u) {
  TensorT<T> out(u.shape());
  for (std::size_t i = 0; i < u.numel(); ++i)
    out[i] = static_cast<T>(soft_step(cfg, static_cast<double>(u[i])));
  return out;
}

#define SEIBW_INSTANTIATE(T)                                                       \
  template LifStepResult<T> lif_step<T>(const LifConfig&, const TensorT<T>&,       \
                                        const TensorT<T>&);                        \
  template std::pair<SpikeSequenceT<T>, LifLayerStateT<T>> lif_forward<T>(         \
      const LifConfig&, const TensorT<T>&);                                        \
  template TensorT<T> triangle_surrogate_derivative<T>(const LifConfig&,           \
                                                       const TensorT<T>&);         \
  template TensorT<T> soft_step<T>(const LifConfig&, const TensorT<T>&);

SEIBW_INSTANTIATE(float)
SEIBW_INSTANTIATE(double)
#undef SEIBW_INSTANTIATE

}  // namespace seibw
