#include "seibw/layers.hpp"

#include <cmath>
#include <iostream>

namespace seibw {

void log_warning(const std::string& msg) { std::cerr << "[seibw] warning: " << msg << "\n"; }

template <class T>
std::pair<TensorT<T>, T> binarize_weights(const TensorT<T>& w_real) {
  SEIBW_CHECK_VALUE(w_real.numel() > 0, "binarize_weights: empty weights");
  double l1 = 0.0;
  for (std::size_t i = 0; i < w_real.numel(); ++i) l1 += std::abs(static_cast<double>(w_real[i]));
  const T a = static_cast<T>(l1 / static_cast<double>(w_real.numel()));
  if (a == T(0)) log_warning("binarize_weights: all-zero kernel, scale a = 0");
  TensorT<T> wb(w_real.shape());
  for (std::size_t i = 0; i < w_real.numel(); ++i) wb[i] = w_real[i] > T(0) ? a : -a;
  return {std::move(wb), a};
}

template <class T>
TensorT<T> ste_weight_gradient(const TensorT<T>& grad_wb, const TensorT<T>& w_real) {
  SEIBW_CHECK_DIM(grad_wb.same_shape(w_real), "ste_weight_gradient: shape mismatch");
  TensorT<T> g(grad_wb.shape());
  for (std::size_t i = 0; i < g.numel(); ++i)
    g[i] = std::abs(w_real[i]) < T(1) ? grad_wb[i] : T(0);
  return g;
}

namespace {
constexpr double kSigmaFloor = 1e-5;

template <class T>
void fan_in_moments(const TensorT<T>& w, std::size_t row, std::size_t n, double& mu,
                    double& sigma) {
  const T* p = w.data() + row * n;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(p[i]);
  mu = s / static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(p[i]) - mu;
    ss += d * d;
  }
  sigma = std::sqrt(ss / static_cast<double>(n));
  if (sigma < kSigmaFloor) sigma = kSigmaFloor;
}
}  // namespace

template <class T>
TensorT<T> sws_standardize(const TensorT<T>& w, T gamma, bool fan_in_factor) {
  SEIBW_CHECK_DIM(w.rank() >= 2, "sws_standardize: [out, fan-in...] required");
  const std::size_t out = w.dim(0);
  const std::size_t n = w.numel() / out;
  SEIBW_CHECK_DIM(n >= 2, "sws_standardize: fan-in extent must have >= 2 elements");
  TensorT<T> what(w.shape());
  const double root_n = fan_in_factor ? std::sqrt(static_cast<double>(n)) : 1.0;
  for (std::size_t r = 0; r < out; ++r) {
    double mu, sigma;
    fan_in_moments(w, r, n, mu, sigma);
    const double scale = static_cast<double>(gamma) / (sigma * root_n);
    const T* p = w.data() + r * n;
    T* q = what.data() + r * n;
    for (std::size_t i = 0; i < n; ++i)
      q[i] = static_cast<T>((static_cast<double>(p[i]) - mu) * scale);
  }
  return what;
}

template <class T>
TensorT<T> sws_standardize_backward(const TensorT<T>& w, const TensorT<T>& grad_out, T gamma,
                                    bool fan_in_factor) {
  SEIBW_CHECK_DIM(w.same_shape(grad_out), "sws_standardize_backward: shape mismatch");
  const std::size_t out = w.dim(0);
  const std::size_t n = w.numel() / out;
  TensorT<T> gw(w.shape());
  const double root_n = fan_in_factor ? std::sqrt(static_cast<double>(n)) : 1.0;
  for (std::size_t r = 0; r < out; ++r) {
    double mu, sigma;
    fan_in_moments(w, r, n, mu, sigma);
    const double s = static_cast<double>(gamma) / (sigma * root_n);
    const T* p = w.data() + r * n;
    const T* g = grad_out.data() + r * n;
    T* q = gw.data() + r * n;
    // y_i = (w_i - mu)/sigma; dL/dw = (s) * (g - mean(g) - y * mean(g*y))
    double g_mean = 0.0, gy_mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double y = (static_cast<double>(p[i]) - mu) / sigma;
      g_mean += static_cast<double>(g[i]);
      gy_mean += static_cast<double>(g[i]) * y;
    }
    g_mean /= static_cast<double>(n);
    gy_mean /= static_cast<double>(n);
    const bool floored = sigma <= kSigmaFloor;
    for (std::size_t i = 0; i < n; ++i) {
      const double y = (static_cast<double>(p[i]) - mu) / sigma;
      // With sigma at the floor it is a constant, so only the mean-shift
      // path remains.
      const double centered = floored ? (static_cast<double>(g[i]) - g_mean)
                                      : (static_cast<double>(g[i]) - g_mean - y * gy_mean);
      q[i] = static_cast<T>(s * centered);
    }
  }
  return gw;
}

template <class T>
void LayerParams<T>::init(std::vector<std::size_t> w_shape, bool with_bias) {
  w_real = TensorT<T>(std::move(w_shape));
  if (with_bias) bias = TensorT<T>({w_real.dim(0)});
  if (sws.enabled) sws_gain = TensorT<T>({w_real.dim(0)}, T(1));
  zero_grads();
}

template <class T>
void LayerParams<T>::refresh() {
  if (sws.enabled) {
    w_pre = sws_standardize(w_real, sws.gamma, sws.fan_in_factor);
    const std::size_t n = fan_in();
    for (std::size_t r = 0; r < w_real.dim(0); ++r) {
      T* p = w_pre.data() + r * n;
      for (std::size_t i = 0; i < n; ++i) p[i] *= sws_gain[r];
    }
  } else {
    w_pre = w_real;
  }
  if (mode == WeightMode::binary) {
    auto [wb, a] = binarize_weights(w_pre);
    w_eff = std::move(wb);
    scale_a = a;
  } else {
    w_eff = w_pre;
    scale_a = T(0);
  }
}

template <class T>
void LayerParams<T>::backward_to_master(const TensorT<T>& grad_eff) {
  TensorT<T> g = grad_eff;
  if (mode == WeightMode::binary) g = ste_weight_gradient(g, w_pre);
  if (sws.enabled) {
    // Split the gain product: w_pre = gain_r * std_r.
    const std::size_t n = fan_in();
    TensorT<T> w_std = sws_standardize(w_real, sws.gamma, sws.fan_in_factor);
    for (std::size_t r = 0; r < w_real.dim(0); ++r) {
      const T* gp = g.data() + r * n;
      const T* sp = w_std.data() + r * n;
      double gg = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        gg += static_cast<double>(gp[i]) * static_cast<double>(sp[i]);
      grad_gain[r] += static_cast<T>(gg);
    }
    TensorT<T> g_std(g.shape());
    for (std::size_t r = 0; r < w_real.dim(0); ++r) {
      const T* gp = g.data() + r * n;
      T* q = g_std.data() + r * n;
      for (std::size_t i = 0; i < n; ++i) q[i] = gp[i] * sws_gain[r];
    }
    grad_w.add_(sws_standardize_backward(w_real, g_std, sws.gamma, sws.fan_in_factor));
  } else {
    grad_w.add_(g);
  }
}

template <class T>
void LayerParams<T>::zero_grads() {
  grad_w = TensorT<T>(w_real.shape());
  if (!bias.empty()) grad_bias = TensorT<T>(bias.shape());
  if (sws.enabled) grad_gain = TensorT<T>({w_real.dim(0)});
}

template <class T>
void PerStepBatchNorm<T>::init(std::size_t channels_in, std::size_t horizon_in) {
  channels = channels_in;
  horizon = horizon_in;
  gamma = TensorT<T>({horizon, channels}, T(1));
  beta = TensorT<T>({horizon, channels});
  running_mean = TensorT<T>({horizon, channels});
  running_var = TensorT<T>({horizon, channels}, T(1));
  zero_grads();
  cache_.assign(horizon, {});
}

template <class T>
void PerStepBatchNorm<T>::zero_grads() {
  grad_gamma = TensorT<T>({horizon, channels});
  grad_beta = TensorT<T>({horizon, channels});
}

template <class T>
void PerStepBatchNorm<T>::begin_sequence(std::size_t horizon_in) {
  SEIBW_CHECK_DIM(horizon_in == horizon, "PerStepBatchNorm: horizon changed after init");
  cache_.assign(horizon, {});
}

namespace {
template <class T>
void bn_extents(const TensorT<T>& x, std::size_t channels, std::size_t& batch,
                std::size_t& spatial) {
  SEIBW_CHECK_DIM(x.rank() == 2 || x.rank() == 4, "batch norm: [B,C] or [B,C,H,W] required");
  SEIBW_CHECK_DIM(x.dim(1) == channels, "batch norm: channel mismatch");
  batch = x.dim(0);
  spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
}
}  // namespace

template <class T>
TensorT<T> PerStepBatchNorm<T>::forward(const TensorT<T>& x, std::size_t t, bool training) {
  SEIBW_CHECK_VALUE(t >= 1 && t <= horizon, "batch norm: step index out of range");
  std::size_t B, S;
  bn_extents(x, channels, B, S);
  const std::size_t ti = t - 1;
  TensorT<T> y(x.shape());

  if (training) {
    SEIBW_CHECK_VALUE(B >= 2, "batch norm: training statistics need batch size >= 2");
    if (cache_.size() != horizon) cache_.assign(horizon, {});
    StepCache& cc = cache_[ti];
    cc.x_hat = TensorT<T>(x.shape());
    cc.inv_std.assign(channels, 0.0);
    const double m = static_cast<double>(B * S);
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.data() + (b * channels + c) * S;
        for (std::size_t i = 0; i < S; ++i) s += static_cast<double>(p[i]);
      }
      const double mu = s / m;
      double ss = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.data() + (b * channels + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          const double d = static_cast<double>(p[i]) - mu;
          ss += d * d;
        }
      }
      const double var = ss / m;
      const double inv = 1.0 / std::sqrt(var + static_cast<double>(epsilon));
      cc.inv_std[c] = inv;
      const double g = static_cast<double>(gamma[ti * channels + c]);
      const double bta = static_cast<double>(beta[ti * channels + c]);
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.data() + (b * channels + c) * S;
        T* ph = cc.x_hat.data() + (b * channels + c) * S;
        T* py = y.data() + (b * channels + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          const double xh = (static_cast<double>(p[i]) - mu) * inv;
          ph[i] = static_cast<T>(xh);
          py[i] = static_cast<T>(g * xh + bta);
        }
      }
      // Unbiased variance goes into the running estimate.
      const double var_unbiased = m > 1.0 ? ss / (m - 1.0) : var;
      const double mom = static_cast<double>(momentum);
      running_mean[ti * channels + c] =
          static_cast<T>((1.0 - mom) * static_cast<double>(running_mean[ti * channels + c]) +
                         mom * mu);
      running_var[ti * channels + c] =
          static_cast<T>((1.0 - mom) * static_cast<double>(running_var[ti * channels + c]) +
                         mom * var_unbiased);
    }
    cc.valid = true;
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      const double mu = static_cast<double>(running_mean[ti * channels + c]);
      const double inv =
          1.0 / std::sqrt(static_cast<double>(running_var[ti * channels + c]) +
                          static_cast<double>(epsilon));
      const double g = static_cast<double>(gamma[ti * channels + c]);
      const double bta = static_cast<double>(beta[ti * channels + c]);
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.data() + (b * channels + c) * S;
        T* py = y.data() + (b * channels + c) * S;
        for (std::size_t i = 0; i < S; ++i)
          py[i] = static_cast<T>(g * ((static_cast<double>(p[i]) - mu) * inv) + bta);
      }
    }
  }
  return y;
}

template <class T>
TensorT<T> PerStepBatchNorm<T>::backward(const TensorT<T>& grad_out, std::size_t t) {
  SEIBW_CHECK_VALUE(t >= 1 && t <= horizon, "batch norm: step index out of range");
  const std::size_t ti = t - 1;
  SEIBW_CHECK(ti < cache_.size() && cache_[ti].valid,
              "batch norm backward: no cached forward at this step");
  const StepCache& cc = cache_[ti];
  std::size_t B, S;
  bn_extents(grad_out, channels, B, S);
  SEIBW_CHECK_DIM(grad_out.same_shape(cc.x_hat), "batch norm backward: shape mismatch");

  TensorT<T> gx(grad_out.shape());
  const double m = static_cast<double>(B * S);
  for (std::size_t c = 0; c < channels; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const T* pg = grad_out.data() + (b * channels + c) * S;
      const T* ph = cc.x_hat.data() + (b * channels + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        sum_g += static_cast<double>(pg[i]);
        sum_gx += static_cast<double>(pg[i]) * static_cast<double>(ph[i]);
      }
    }
    grad_beta[ti * channels + c] += static_cast<T>(sum_g);
    grad_gamma[ti * channels + c] += static_cast<T>(sum_gx);
    const double g = static_cast<double>(gamma[ti * channels + c]);
    const double inv = cc.inv_std[c];
    const double k = g * inv / m;
    for (std::size_t b = 0; b < B; ++b) {
      const T* pg = grad_out.data() + (b * channels + c) * S;
      const T* ph = cc.x_hat.data() + (b * channels + c) * S;
      T* px = gx.data() + (b * channels + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        px[i] = static_cast<T>(k * (m * static_cast<double>(pg[i]) - sum_g -
                                    static_cast<double>(ph[i]) * sum_gx));
      }
    }
  }
  return gx;
}

template <class T>
void kaiming_normal_init(TensorT<T>& w, Rng& rng) {
  SEIBW_CHECK_DIM(w.rank() >= 2, "kaiming init: [out, fan-in...] required");
  const double fan_in = static_cast<double>(w.numel() / w.dim(0));
  const double stddev = std::sqrt(2.0 / fan_in);
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(rng.normal(0.0, stddev));
}

#define SEIBW_INSTANTIATE(T)                                                              \
  template std::pair<TensorT<T>, T> binarize_weights<T>(const TensorT<T>&);               \
  template TensorT<T> ste_weight_gradient<T>(const TensorT<T>&, const TensorT<T>&);       \
  template TensorT<T> sws_standardize<T>(const TensorT<T>&, T, bool);                     \
  template TensorT<T> sws_standardize_backward<T>(const TensorT<T>&, const TensorT<T>&,   \
                                                  T, bool);                               \
  template struct LayerParams<T>;                                                         \
  template struct PerStepBatchNorm<T>;                                                    \
  template void kaiming_normal_init<T>(TensorT<T>&, Rng&);

SEIBW_INSTANTIATE(float)
SEIBW_INSTANTIATE(double)
#undef SEIBW_INSTANTIATE

}  // namespace seibw
