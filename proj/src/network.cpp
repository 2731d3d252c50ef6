#include "seibw/network.hpp"

#include <cmath>

namespace seibw {

namespace {

// Dot with four interleaved double accumulators; combination order is fixed
// by index arithmetic alone.
template <class T>
inline double acc_dot(const T* a, const T* b, std::size_t n) {
  double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    a0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    a1 += static_cast<double>(a[i + 1]) * static_cast<double>(b[i + 1]);
    a2 += static_cast<double>(a[i + 2]) * static_cast<double>(b[i + 2]);
    a3 += static_cast<double>(a[i + 3]) * static_cast<double>(b[i + 3]);
  }
  for (; i < n; ++i) a0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return (a0 + a1) + (a2 + a3);
}

// y[B,out] = x[B,in] * W[out,in]^T (+ bias)
template <class T>
TensorT<T> linear_forward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias) {
  SEIBW_CHECK_DIM(x.rank() == 2, "dense: [B, in] input required");
  SEIBW_CHECK_DIM(x.dim(1) == w.dim(1), "dense: fan-in mismatch");
  const std::size_t B = x.dim(0), in = x.dim(1), out = w.dim(0);
  TensorT<T> y({B, out});
  const T* px = x.data();
  const T* pw = w.data();
  T* py = y.data();
  const bool with_bias = !bias.empty();
  parallel_for(B, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t b = lo; b < hi; ++b) {
      for (std::size_t o = 0; o < out; ++o) {
        double acc = with_bias ? static_cast<double>(bias[o]) : 0.0;
        acc += acc_dot(px + b * in, pw + o * in, in);
        py[b * out + o] = static_cast<T>(acc);
      }
    }
  });
  return y;
}

template <class T>
TensorT<T> linear_backward_input(const TensorT<T>& gy, const TensorT<T>& w) {
  const std::size_t B = gy.dim(0), out = gy.dim(1), in = w.dim(1);
  TensorT<T> gx({B, in});
  parallel_for(B, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> acc(in);
    for (std::size_t b = lo; b < hi; ++b) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t o = 0; o < out; ++o) {
        const double g = static_cast<double>(gy[b * out + o]);
        const T* wr = w.data() + o * in;
        for (std::size_t i = 0; i < in; ++i) acc[i] += g * static_cast<double>(wr[i]);
      }
      for (std::size_t i = 0; i < in; ++i) gx[b * in + i] = static_cast<T>(acc[i]);
    }
  });
  return gx;
}

template <class T>
TensorT<T> linear_backward_weight(const TensorT<T>& x, const TensorT<T>& gy) {
  const std::size_t B = x.dim(0), in = x.dim(1), out = gy.dim(1);
  TensorT<T> gw({out, in});
  parallel_for(out, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> acc(in);
    for (std::size_t o = lo; o < hi; ++o) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t b = 0; b < B; ++b) {
        const double g = static_cast<double>(gy[b * out + o]);
        const T* xr = x.data() + b * in;
        for (std::size_t i = 0; i < in; ++i) acc[i] += g * static_cast<double>(xr[i]);
      }
      for (std::size_t i = 0; i < in; ++i) gw[o * in + i] = static_cast<T>(acc[i]);
    }
  });
  return gw;
}

template <class T>
TensorT<T> channel_bias_grad(const TensorT<T>& gy, std::size_t channels) {
  TensorT<T> gb({channels});
  if (gy.rank() == 2) {
    for (std::size_t b = 0; b < gy.dim(0); ++b)
      for (std::size_t c = 0; c < channels; ++c) gb[c] += gy[b * channels + c];
  } else {
    const std::size_t S = gy.dim(2) * gy.dim(3);
    for (std::size_t b = 0; b < gy.dim(0); ++b)
      for (std::size_t c = 0; c < channels; ++c) {
        double acc = static_cast<double>(gb[c]);
        const T* p = gy.data() + (b * channels + c) * S;
        for (std::size_t i = 0; i < S; ++i) acc += static_cast<double>(p[i]);
        gb[c] = static_cast<T>(acc);
      }
  }
  return gb;
}

template <class T>
void add_channel_bias(TensorT<T>& y, const TensorT<T>& bias) {
  if (bias.empty()) return;
  const std::size_t C = bias.numel();
  const std::size_t S = y.rank() == 4 ? y.dim(2) * y.dim(3) : 1;
  for (std::size_t b = 0; b < y.dim(0); ++b)
    for (std::size_t c = 0; c < C; ++c) {
      T* p = y.data() + (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) p[i] += bias[c];
    }
}

template <class T>
TensorT<T> sum_steps_ascending(const std::vector<TensorT<T>>& steps) {
  TensorT<T> total;
  for (const auto& s : steps) {
    if (s.empty()) continue;
    if (total.empty())
      total = s;
    else
      total.add_(s);
  }
  return total;
}

}  // namespace

// --- DenseNode ---

template <class T>
DenseNode<T>::DenseNode(std::string name, std::size_t in, std::size_t out, bool with_bias,
                        WeightMode mode, SwsSettings<T> sws)
    : Node<T>(std::move(name)) {
  params.mode = mode;
  params.sws = sws;
  params.init({out, in}, with_bias);
}

template <class T>
void DenseNode<T>::begin_sequence(const SequenceContext<T>& ctx) {
  Node<T>::begin_sequence(ctx);
  x_cache_.assign(ctx.horizon + 1, {});
  grad_eff_steps_.assign(ctx.horizon + 1, {});
  grad_bias_steps_.assign(ctx.horizon + 1, {});
}

template <class T>
TensorT<T> DenseNode<T>::apply(const TensorT<T>& x) const {
  return linear_forward(x, params.w_eff, params.bias);
}

template <class T>
TensorT<T> DenseNode<T>::forward(const TensorT<T>& x, std::size_t t) {
  if (this->ctx_.phase != Phase::eval) x_cache_.at(t) = x;
  return apply(x);
}

template <class T>
TensorT<T> DenseNode<T>::backward(const TensorT<T>& gy, std::size_t t, BackwardMode) {
  const TensorT<T>& x = x_cache_.at(t);
  SEIBW_CHECK(!x.empty(), "dense backward: no cached forward input");
  grad_eff_steps_.at(t) = linear_backward_weight(x, gy);
  if (!params.bias.empty()) grad_bias_steps_.at(t) = channel_bias_grad(gy, params.bias.numel());
  if (input_layer) return {};
  return linear_backward_input(gy, params.w_eff);
}

template <class T>
void DenseNode<T>::finalize_grads() {
  TensorT<T> total = sum_steps_ascending(grad_eff_steps_);
  if (!total.empty()) params.backward_to_master(total);
  if (!params.bias.empty()) {
    TensorT<T> tb = sum_steps_ascending(grad_bias_steps_);
    if (!tb.empty()) params.grad_bias.add_(tb);
  }
  grad_eff_steps_.assign(grad_eff_steps_.size(), {});
  grad_bias_steps_.assign(grad_bias_steps_.size(), {});
}

template <class T>
TensorT<T> DenseNode<T>::replay(const TensorT<T>& x, std::size_t, const NoiseTraceT<T>&,
                                std::size_t&) {
  return apply(x);
}

// --- ConvNode ---

template <class T>
ConvNode<T>::ConvNode(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                      std::size_t stride_in, std::size_t padding_in, bool with_bias,
                      WeightMode mode, SwsSettings<T> sws)
    : Node<T>(std::move(name)), stride(stride_in), padding(padding_in) {
  params.mode = mode;
  params.sws = sws;
  params.init({out_ch, in_ch, kernel, kernel}, with_bias);
}

template <class T>
void ConvNode<T>::begin_sequence(const SequenceContext<T>& ctx) {
  Node<T>::begin_sequence(ctx);
  x_cache_.assign(ctx.horizon + 1, {});
  grad_eff_steps_.assign(ctx.horizon + 1, {});
  grad_bias_steps_.assign(ctx.horizon + 1, {});
}

template <class T>
TensorT<T> ConvNode<T>::apply(const TensorT<T>& x) const {
  TensorT<T> y = conv2d(x, params.w_eff, stride, padding);
  add_channel_bias(y, params.bias);
  return y;
}

template <class T>
TensorT<T> ConvNode<T>::forward(const TensorT<T>& x, std::size_t t) {
  if (this->ctx_.phase != Phase::eval) x_cache_.at(t) = x;
  return apply(x);
}

template <class T>
TensorT<T> ConvNode<T>::backward(const TensorT<T>& gy, std::size_t t, BackwardMode) {
  const TensorT<T>& x = x_cache_.at(t);
  SEIBW_CHECK(!x.empty(), "conv backward: no cached forward input");
  grad_eff_steps_.at(t) =
      conv2d_backward_weight(x, gy, params.w_eff.shape(), stride, padding);
  if (!params.bias.empty()) grad_bias_steps_.at(t) = channel_bias_grad(gy, params.bias.numel());
  if (input_layer) return {};
  return conv2d_backward_input(gy, params.w_eff, x.shape(), stride, padding);
}

template <class T>
void ConvNode<T>::finalize_grads() {
  TensorT<T> total = sum_steps_ascending(grad_eff_steps_);
  if (!total.empty()) params.backward_to_master(total);
  if (!params.bias.empty()) {
    TensorT<T> tb = sum_steps_ascending(grad_bias_steps_);
    if (!tb.empty()) params.grad_bias.add_(tb);
  }
  grad_eff_steps_.assign(grad_eff_steps_.size(), {});
  grad_bias_steps_.assign(grad_bias_steps_.size(), {});
}

template <class T>
TensorT<T> ConvNode<T>::replay(const TensorT<T>& x, std::size_t, const NoiseTraceT<T>&,
                               std::size_t&) {
  return apply(x);
}

// --- BatchNormNode ---

template <class T>
BatchNormNode<T>::BatchNormNode(std::string name, std::size_t channels, std::size_t horizon)
    : Node<T>(std::move(name)) {
  bn.init(channels, horizon);
}

template <class T>
void BatchNormNode<T>::begin_sequence(const SequenceContext<T>& ctx) {
  Node<T>::begin_sequence(ctx);
  bn.begin_sequence(ctx.horizon);
}

template <class T>
TensorT<T> BatchNormNode<T>::forward(const TensorT<T>& x, std::size_t t) {
  const bool training = this->ctx_.phase != Phase::eval;
  return bn.forward(x, t, training);
}

template <class T>
TensorT<T> BatchNormNode<T>::backward(const TensorT<T>& gy, std::size_t t, BackwardMode) {
  return bn.backward(gy, t);
}

template <class T>
TensorT<T> BatchNormNode<T>::replay(const TensorT<T>& x, std::size_t t, const NoiseTraceT<T>&,
                                    std::size_t&) {
  // Member replay mirrors an eval-phase pass: step-t running statistics.
  return bn.forward(x, t, false);
}

// --- LifNode ---

template <class T>
void LifNode<T>::begin_sequence(const SequenceContext<T>& ctx) {
  Node<T>::begin_sequence(ctx);
  u_.assign(ctx.horizon + 1, {});
  v_.assign(ctx.horizon + 1, {});
  s_.assign(ctx.horizon + 1, {});
  du_.assign(ctx.horizon + 1, {});
  carry_valid_ = false;
}

template <class T>
void LifNode<T>::begin_backward() {
  carry_valid_ = false;
  last_backward_t_ = this->ctx_.horizon + 1;
}

template <class T>
TensorT<T> LifNode<T>::forward(const TensorT<T>& x, std::size_t t) {
  SEIBW_CHECK(t >= 1 && t <= this->ctx_.horizon, "lif forward: step out of range");
  const T leak = static_cast<T>(cfg.leak);
  const T vth = static_cast<T>(cfg.v_threshold);
  if (t == 1) v_[0] = TensorT<T>(x.shape());
  const TensorT<T>& v_prev = v_.at(t - 1);
  SEIBW_CHECK_DIM(v_prev.same_shape(x), "lif forward: shape changed mid-sequence");

  TensorT<T> u(x.shape()), s(x.shape()), v(x.shape());
  const bool relaxed = this->ctx_.phase == Phase::relaxed;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T ui = leak * v_prev[i] + x[i];
    const T si = relaxed ? static_cast<T>(soft_step(cfg, static_cast<double>(ui)))
                         : (ui >= vth ? T(1) : T(0));
    u[i] = ui;
    s[i] = si;
    v[i] = ui - vth * si;
  }
  if (relaxed && this->ctx_.piece_log) {
    auto& log = *this->ctx_.piece_log;
    for (std::size_t i = 0; i < u.numel(); ++i)
      log.push_back(static_cast<std::int8_t>(soft_step_piece(cfg, static_cast<double>(u[i]))));
  }
  u_[t] = std::move(u);
  v_[t] = std::move(v);
  s_[t] = s;
  return s;
}

template <class T>
TensorT<T> LifNode<T>::backward(const TensorT<T>& gy, std::size_t t, BackwardMode mode) {
  SEIBW_CHECK(!u_.at(t).empty(), "lif backward: no recorded forward state");
  const TensorT<T>& u = u_[t];
  SEIBW_CHECK_DIM(gy.same_shape(u), "lif backward: gradient shape mismatch");
  const T vth = static_cast<T>(cfg.v_threshold);
  const T leak = static_cast<T>(cfg.leak);

  TensorT<T> du(u.shape());
  if (mode == BackwardMode::sg_bptt) {
    SEIBW_CHECK(t == last_backward_t_ - 1,
                "sg_bptt backward must process time steps in descending order");
    for (std::size_t i = 0; i < u.numel(); ++i) {
      const T gp = static_cast<T>(triangle_derivative(cfg, static_cast<double>(u[i])));
      const T c = carry_valid_ ? carry_[i] : T(0);
      // d L/d s[t] = spatial + (-vth) * d L/d v[t];  d L/d u[t] adds the
      // direct u -> v path.
      du[i] = (gy[i] - vth * c) * gp + c;
    }
    if (!carry_valid_) carry_ = TensorT<T>(u.shape());
    for (std::size_t i = 0; i < u.numel(); ++i) carry_[i] = leak * du[i];
    carry_valid_ = true;
    last_backward_t_ = t;
  } else {
    for (std::size_t i = 0; i < u.numel(); ++i) {
      const T gp = static_cast<T>(triangle_derivative(cfg, static_cast<double>(u[i])));
      du[i] = gy[i] * gp;
    }
  }
  du_[t] = du;
  return du;
}

template <class T>
const TensorT<T>& LifNode<T>::backward_du(std::size_t t) const {
  SEIBW_CHECK(t < du_.size() && !du_.at(t).empty(), "lif: no recorded backward at this step");
  return du_[t];
}

template <class T>
TensorT<T> LifNode<T>::temporal_jacobian(std::size_t t) const {
  SEIBW_CHECK(t < u_.size() && !u_.at(t).empty(), "lif: no recorded forward at this step");
  const TensorT<T>& u = u_[t];
  TensorT<T> eps(u.shape());
  const double leak = cfg.leak;
  const double vth = cfg.v_threshold;
  for (std::size_t i = 0; i < u.numel(); ++i)
    eps[i] = static_cast<T>(leak * (1.0 - vth * triangle_derivative(cfg, static_cast<double>(u[i]))));
  return eps;
}

template <class T>
TensorT<T> LifNode<T>::replay(const TensorT<T>& x, std::size_t t, const NoiseTraceT<T>& noise,
                              std::size_t& lif_cursor) {
  SEIBW_CHECK(lif_cursor < noise.per_lif.size(), "replay: noise trace has too few layers");
  const auto& slices = noise.per_lif[lif_cursor];
  ++lif_cursor;
  SEIBW_CHECK(t >= 1 && t <= slices.size(), "replay: step outside noise trace");
  const TensorT<T>& n = slices[t - 1];
  SEIBW_CHECK_DIM(n.same_shape(x), "replay: noise slice shape mismatch");
  const T vth = static_cast<T>(cfg.v_threshold);
  TensorT<T> s(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T ui = n[i] + x[i];
    s[i] = ui >= vth ? T(1) : T(0);
  }
  replay_spikes_ = s;
  return s;
}

// --- AvgPoolNode ---

template <class T>
TensorT<T> AvgPoolNode<T>::forward(const TensorT<T>& x, std::size_t) {
  x_shape_ = x.shape();
  return avg_pool2d(x, window, stride);
}

template <class T>
TensorT<T> AvgPoolNode<T>::backward(const TensorT<T>& gy, std::size_t, BackwardMode) {
  SEIBW_CHECK(!x_shape_.empty(), "avg pool backward: no recorded forward");
  return avg_pool2d_backward(gy, x_shape_, window, stride);
}

template <class T>
TensorT<T> AvgPoolNode<T>::replay(const TensorT<T>& x, std::size_t, const NoiseTraceT<T>&,
                                  std::size_t&) {
  return avg_pool2d(x, window, stride);
}

// --- GlobalAvgPoolNode ---

template <class T>
TensorT<T> GlobalAvgPoolNode<T>::forward(const TensorT<T>& x, std::size_t) {
  SEIBW_CHECK_DIM(x.rank() == 4, "global avg pool: [B,C,H,W] required");
  x_shape_ = x.shape();
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  TensorT<T> y({B, C});
  const double inv = 1.0 / static_cast<double>(S);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    double acc = 0.0;
    const T* p = x.data() + bc * S;
    for (std::size_t i = 0; i < S; ++i) acc += static_cast<double>(p[i]);
    y[bc] = static_cast<T>(acc * inv);
  }
  return y;
}

template <class T>
TensorT<T> GlobalAvgPoolNode<T>::backward(const TensorT<T>& gy, std::size_t, BackwardMode) {
  SEIBW_CHECK(!x_shape_.empty(), "global avg pool backward: no recorded forward");
  const std::size_t S = x_shape_[2] * x_shape_[3];
  TensorT<T> gx(x_shape_);
  const T inv = static_cast<T>(1.0 / static_cast<double>(S));
  for (std::size_t bc = 0; bc < x_shape_[0] * x_shape_[1]; ++bc) {
    const T g = gy[bc] * inv;
    T* p = gx.data() + bc * S;
    for (std::size_t i = 0; i < S; ++i) p[i] = g;
  }
  return gx;
}

template <class T>
TensorT<T> GlobalAvgPoolNode<T>::replay(const TensorT<T>& x, std::size_t t,
                                        const NoiseTraceT<T>&, std::size_t&) {
  return forward(x, t);
}

// --- FlattenNode ---

template <class T>
TensorT<T> FlattenNode<T>::forward(const TensorT<T>& x, std::size_t) {
  SEIBW_CHECK_DIM(x.rank() >= 2, "flatten: [B, ...] required");
  x_shape_ = x.shape();
  return x.reshaped({x.dim(0), x.numel() / x.dim(0)});
}

template <class T>
TensorT<T> FlattenNode<T>::backward(const TensorT<T>& gy, std::size_t, BackwardMode) {
  SEIBW_CHECK(!x_shape_.empty(), "flatten backward: no recorded forward");
  return gy.reshaped(x_shape_);
}

template <class T>
TensorT<T> FlattenNode<T>::replay(const TensorT<T>& x, std::size_t t, const NoiseTraceT<T>&,
                                  std::size_t&) {
  return forward(x, t);
}

// --- ResidualBlockNode ---

template <class T>
void ResidualBlockNode<T>::begin_sequence(const SequenceContext<T>& ctx) {
  Node<T>::begin_sequence(ctx);
  for (auto& m : modes)
    for (auto& n : m.chain) n->begin_sequence(ctx);
  for (auto& n : projection) n->begin_sequence(ctx);
}

template <class T>
void ResidualBlockNode<T>::begin_backward() {
  for (auto& m : modes)
    for (auto& n : m.chain) n->begin_backward();
  for (auto& n : projection) n->begin_backward();
}

template <class T>
TensorT<T> ResidualBlockNode<T>::forward(const TensorT<T>& x, std::size_t t) {
  SEIBW_CHECK_VALUE(!modes.empty(), "residual block: no modes");
  const T alpha = nf ? nf_alpha : T(1);

  auto run_chain = [&](std::vector<std::unique_ptr<Node<T>>>& chain, TensorT<T> z) {
    for (auto& n : chain) z = n->forward(z, t);
    return z;
  };

  auto run_branch = [&](Mode& m, const TensorT<T>& z) {
    TensorT<T> in = z;
    if (nf && m.beta != T(1)) in.scale_(T(1) / m.beta);
    TensorT<T> out = run_chain(m.chain, std::move(in));
    if (nf && alpha != T(1)) out.scale_(alpha);
    return out;
  };

  if (style == ShortcutStyle::single_shortcut) {
    TensorT<T> base = x;
    if (!projection.empty()) base = run_chain(projection, x);
    TensorT<T> z = x;
    if (nf && modes[0].beta != T(1)) z.scale_(T(1) / modes[0].beta);
    for (auto& m : modes) z = run_chain(m.chain, std::move(z));
    if (nf && alpha != T(1)) z.scale_(alpha);
    SEIBW_CHECK_DIM(z.same_shape(base), "residual block: branch/shortcut shape mismatch");
    z.add_(base);
    return z;
  }

  TensorT<T> y = x;
  for (std::size_t k = 0; k < modes.size(); ++k) {
    TensorT<T> branch = run_branch(modes[k], y);
    TensorT<T> base = (k == 0 && !projection.empty()) ? run_chain(projection, y) : y;
    SEIBW_CHECK_DIM(branch.same_shape(base), "residual block: branch/shortcut shape mismatch");
    branch.add_(base);
    y = std::move(branch);
  }
  return y;
}

template <class T>
TensorT<T> ResidualBlockNode<T>::backward(const TensorT<T>& gy, std::size_t t,
                                          BackwardMode mode) {
  const T alpha = nf ? nf_alpha : T(1);

  auto back_chain = [&](std::vector<std::unique_ptr<Node<T>>>& chain, TensorT<T> g) {
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) g = (*it)->backward(g, t, mode);
    return g;
  };

  auto back_branch = [&](Mode& m, TensorT<T> g) {
    if (nf && alpha != T(1)) g.scale_(alpha);
    g = back_chain(m.chain, std::move(g));
    if (nf && m.beta != T(1)) g.scale_(T(1) / m.beta);
    return g;
  };

  if (style == ShortcutStyle::single_shortcut) {
    TensorT<T> g_branch = gy;
    if (nf && alpha != T(1)) g_branch.scale_(alpha);
    for (auto it = modes.rbegin(); it != modes.rend(); ++it)
      g_branch = back_chain(it->chain, std::move(g_branch));
    if (nf && modes[0].beta != T(1)) g_branch.scale_(T(1) / modes[0].beta);
    TensorT<T> g_base = projection.empty() ? gy : back_chain(projection, gy);
    g_branch.add_(g_base);
    return g_branch;
  }

  TensorT<T> g = gy;
  for (std::size_t k = modes.size(); k-- > 0;) {
    TensorT<T> g_branch = back_branch(modes[k], g);
    TensorT<T> g_base = (k == 0 && !projection.empty()) ? back_chain(projection, g) : std::move(g);
    g_branch.add_(g_base);
    g = std::move(g_branch);
  }
  return g;
}

template <class T>
void ResidualBlockNode<T>::finalize_grads() {
  for (auto& m : modes)
    for (auto& n : m.chain) n->finalize_grads();
  for (auto& n : projection) n->finalize_grads();
}

template <class T>
TensorT<T> ResidualBlockNode<T>::replay(const TensorT<T>& x, std::size_t t,
                                        const NoiseTraceT<T>& noise, std::size_t& lif_cursor) {
  const T alpha = nf ? nf_alpha : T(1);

  auto replay_chain = [&](std::vector<std::unique_ptr<Node<T>>>& chain, TensorT<T> z) {
    for (auto& n : chain) z = n->replay(z, t, noise, lif_cursor);
    return z;
  };

  if (style == ShortcutStyle::single_shortcut) {
    TensorT<T> base = projection.empty() ? x : replay_chain(projection, x);
    TensorT<T> z = x;
    if (nf && modes[0].beta != T(1)) z.scale_(T(1) / modes[0].beta);
    for (auto& m : modes) z = replay_chain(m.chain, std::move(z));
    if (nf && alpha != T(1)) z.scale_(alpha);
    z.add_(base);
    return z;
  }

  TensorT<T> y = x;
  for (std::size_t k = 0; k < modes.size(); ++k) {
    TensorT<T> in = y;
    if (nf && modes[k].beta != T(1)) in.scale_(T(1) / modes[k].beta);
    TensorT<T> branch = replay_chain(modes[k].chain, std::move(in));
    if (nf && alpha != T(1)) branch.scale_(alpha);
    TensorT<T> base = (k == 0 && !projection.empty()) ? replay_chain(projection, y) : y;
    branch.add_(base);
    y = std::move(branch);
  }
  return y;
}

template <class T>
void ResidualBlockNode<T>::collect_params(
    std::vector<std::pair<std::string, LayerParams<T>*>>& out) {
  for (auto& m : modes)
    for (auto& n : m.chain) n->collect_params(out);
  for (auto& n : projection) n->collect_params(out);
}

template <class T>
void ResidualBlockNode<T>::collect_bns(
    std::vector<std::pair<std::string, PerStepBatchNorm<T>*>>& out) {
  for (auto& m : modes)
    for (auto& n : m.chain) n->collect_bns(out);
  for (auto& n : projection) n->collect_bns(out);
}

template <class T>
void ResidualBlockNode<T>::collect_lifs(std::vector<LifNode<T>*>& out) {
  for (auto& m : modes)
    for (auto& n : m.chain) n->collect_lifs(out);
  for (auto& n : projection) n->collect_lifs(out);
}

// --- Network ---

template <class T>
TensorT<T> Network<T>::forward(const TensorT<T>& input_seq, Phase phase) {
  SEIBW_CHECK_DIM(input_seq.rank() >= 3, "network forward: [T, B, ...] input required");
  SEIBW_CHECK_DIM(input_seq.dim(0) == horizon, "network forward: time axis != horizon");
  const std::size_t B = input_seq.dim(1);

  SequenceContext<T> ctx;
  ctx.horizon = horizon;
  ctx.phase = phase;
  piece_log_.clear();
  if (phase == Phase::relaxed) ctx.piece_log = &piece_log_;
  for (auto& n : nodes) n->begin_sequence(ctx);

  TensorT<T> logits({horizon, B, num_classes});
  for (std::size_t t = 1; t <= horizon; ++t) {
    TensorT<T> x = slice_step(input_seq, t);
    for (auto& n : nodes) x = n->forward(x, t);
    SEIBW_CHECK_DIM(x.rank() == 2 && x.dim(0) == B && x.dim(1) == num_classes,
                    "network forward: head output shape mismatch");
    set_step(logits, t, x);
  }
  forward_ran_ = true;
  last_phase_ = phase;
  last_batch_ = B;
  return logits;
}

template <class T>
void Network<T>::backward(const TensorT<T>& loss_grads, BackwardMode mode,
                          const std::vector<std::size_t>* sltt_time_order) {
  if (!forward_ran_)
    throw StateError("network backward: no retained forward pass");
  SEIBW_CHECK_DIM(loss_grads.rank() == 3 && loss_grads.dim(0) == horizon &&
                      loss_grads.dim(1) == last_batch_ && loss_grads.dim(2) == num_classes,
                  "network backward: loss gradient shape mismatch");

  std::vector<std::size_t> order;
  if (mode == BackwardMode::sltt && sltt_time_order) {
    order = *sltt_time_order;
    SEIBW_CHECK_VALUE(order.size() == horizon, "backward: time order must cover all steps");
  } else {
    for (std::size_t t = horizon; t >= 1; --t) order.push_back(t);
  }

  for (auto& n : nodes) n->begin_backward();
  for (std::size_t t : order) {
    TensorT<T> g = slice_step(loss_grads, t);
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
      g = (*it)->backward(g, t, mode);
      // The input layer returns an empty gradient; nothing upstream of it
      // has parameters.
      if (g.empty()) break;
    }
  }
  for (auto& n : nodes) n->finalize_grads();
}

template <class T>
void Network<T>::zero_grads() {
  for (auto& [name, p] : named_params()) p->zero_grads();
  for (auto& [name, b] : named_bns()) b->zero_grads();
}

template <class T>
TensorT<T> Network<T>::replay_member(const TensorT<T>& x_t, std::size_t t,
                                     const NoiseTraceT<T>& noise) {
  std::size_t cursor = 0;
  TensorT<T> x = x_t;
  for (auto& n : nodes) x = n->replay(x, t, noise, cursor);
  SEIBW_CHECK(cursor == noise.per_lif.size(), "replay: noise trace layer count mismatch");
  return x;
}

template <class T>
std::vector<std::pair<std::string, LayerParams<T>*>> Network<T>::named_params() {
  std::vector<std::pair<std::string, LayerParams<T>*>> out;
  for (auto& n : nodes) n->collect_params(out);
  return out;
}

template <class T>
std::vector<std::pair<std::string, PerStepBatchNorm<T>*>> Network<T>::named_bns() {
  std::vector<std::pair<std::string, PerStepBatchNorm<T>*>> out;
  for (auto& n : nodes) n->collect_bns(out);
  return out;
}

template <class T>
std::vector<LifNode<T>*> Network<T>::lif_nodes() {
  std::vector<LifNode<T>*> out;
  for (auto& n : nodes) n->collect_lifs(out);
  return out;
}

template <class T>
void Network<T>::refresh_all() {
  for (auto& [name, p] : named_params()) p->refresh();
}

// --- builder ---

namespace {

template <class T>
std::unique_ptr<Node<T>> make_mode_conv(const std::string& name, const ArchSpec& arch,
                                        std::size_t in_ch, std::size_t out_ch,
                                        std::size_t stride, WeightMode mode, Rng& rng) {
  SwsSettings<T> sws;
  if (arch.norm == NormKind::sws) {
    sws.enabled = true;
    sws.gamma = static_cast<T>(arch.sws_gamma);
  }
  auto conv = std::make_unique<ConvNode<T>>(name, in_ch, out_ch, 3, stride, 1,
                                            /*with_bias=*/false, mode, sws);
  kaiming_normal_init(conv->params.w_real, rng);
  conv->params.refresh();
  return conv;
}

}  // namespace

template <class T>
Network<T> build_network(const ArchSpec& arch, std::size_t horizon, const LifConfig& lif,
                         WeightMode weight_mode, Rng& rng) {
  lif.validate();
  SEIBW_CHECK_VALUE(horizon >= 1, "build_network: horizon must be >= 1");
  Network<T> net;
  net.lif = lif;
  net.horizon = horizon;
  net.num_classes = arch.num_classes;
  net.input_shape = arch.input_shape;

  auto add_bn = [&](const std::string& name, std::size_t ch) {
    if (arch.norm == NormKind::bn)
      net.nodes.push_back(std::make_unique<BatchNormNode<T>>(name, ch, horizon));
  };

  if (arch.kind == ArchSpec::Kind::mlp) {
    std::size_t in = TensorT<T>::count(arch.input_shape);
    net.nodes.push_back(std::make_unique<FlattenNode<T>>("flatten"));
    for (std::size_t i = 0; i < arch.hidden.size(); ++i) {
      const std::string base = "fc" + std::to_string(i + 1);
      const bool first = i == 0;
      auto dense = std::make_unique<DenseNode<T>>(base, in, arch.hidden[i], /*with_bias=*/false,
                                                  first ? WeightMode::full_precision : weight_mode);
      dense->params.binarization_exempt = first;
      dense->input_layer = first;
      kaiming_normal_init(dense->params.w_real, rng);
      dense->params.refresh();
      net.nodes.push_back(std::move(dense));
      add_bn(base + ".bn", arch.hidden[i]);
      net.nodes.push_back(std::make_unique<LifNode<T>>(base + ".lif", lif));
      in = arch.hidden[i];
    }
    auto head = std::make_unique<DenseNode<T>>("head.fc", in, arch.num_classes,
                                               /*with_bias=*/true, WeightMode::full_precision);
    head->params.binarization_exempt = true;
    kaiming_normal_init(head->params.w_real, rng);
    head->params.refresh();
    net.nodes.push_back(std::move(head));
    return net;
  }

  // convnet
  SEIBW_CHECK_VALUE(arch.input_shape.size() == 3, "convnet: input shape must be [C,H,W]");
  SEIBW_CHECK_VALUE(arch.stage_channels.size() == arch.blocks_per_stage.size(),
                    "convnet: stage_channels and blocks_per_stage must align");
  std::size_t ch = arch.input_shape[0];
  std::size_t H = arch.input_shape[1];

  // Large inputs downsample in the stem conv itself (the initial
  // downsample layer stays full precision).
  const std::size_t stem_stride = H >= 16 ? 2 : 1;
  auto stem = std::make_unique<ConvNode<T>>("stem.conv", ch, arch.stem_channels, 3, stem_stride,
                                            1, /*with_bias=*/false, WeightMode::full_precision);
  stem->params.binarization_exempt = true;
  stem->input_layer = true;
  kaiming_normal_init(stem->params.w_real, rng);
  stem->params.refresh();
  net.nodes.push_back(std::move(stem));
  ch = arch.stem_channels;
  if (stem_stride == 2) H = (H + 2 - 3) / 2 + 1;
  add_bn("stem.bn", ch);
  net.nodes.push_back(std::make_unique<LifNode<T>>("stem.lif", lif));

  const T alpha = static_cast<T>(arch.nf_alpha);
  double beta_sq = 1.0;  // running variance estimate for the nf schedule

  for (std::size_t si = 0; si < arch.stage_channels.size(); ++si) {
    const std::size_t out_ch = arch.stage_channels[si];
    for (std::size_t bi = 0; bi < arch.blocks_per_stage[si]; ++bi) {
      const std::string bname =
          "stage" + std::to_string(si + 1) + ".block" + std::to_string(bi + 1);
      const bool transition = bi == 0 && si > 0;
      const std::size_t stride = transition ? 2 : 1;
      if (transition) beta_sq = 1.0;

      auto block = std::make_unique<ResidualBlockNode<T>>(bname, arch.shortcut);
      block->nf = arch.nf;
      block->nf_alpha = alpha;

      for (std::size_t mi = 0; mi < arch.modes_per_block; ++mi) {
        const std::string mname = bname + ".m" + std::to_string(mi + 1);
        const std::size_t m_in = mi == 0 ? ch : out_ch;
        const std::size_t m_stride = mi == 0 ? stride : 1;
        typename ResidualBlockNode<T>::Mode mode;
        mode.beta = static_cast<T>(std::sqrt(beta_sq));
        if (arch.norm == NormKind::bn)
          mode.chain.push_back(std::make_unique<BatchNormNode<T>>(mname + ".bn", m_in, horizon));
        mode.chain.push_back(std::make_unique<LifNode<T>>(mname + ".lif", lif));
        mode.chain.push_back(
            make_mode_conv<T>(mname + ".conv", arch, m_in, out_ch, m_stride, weight_mode, rng));
        block->modes.push_back(std::move(mode));
        if (arch.nf &&
            (arch.shortcut == ShortcutStyle::multi_shortcut || mi + 1 == arch.modes_per_block))
          beta_sq += static_cast<double>(alpha) * static_cast<double>(alpha);
      }

      if (ch != out_ch || stride != 1) {
        if (stride != 1) {
          const std::size_t window = H % 2 == 0 ? 2 : 1;
          block->projection.push_back(
              std::make_unique<AvgPoolNode<T>>(bname + ".proj.pool", window, stride));
        }
        auto proj = std::make_unique<ConvNode<T>>(bname + ".proj.conv", ch, out_ch, 1, 1, 0,
                                                  /*with_bias=*/false,
                                                  WeightMode::full_precision);
        proj->params.binarization_exempt = true;
        kaiming_normal_init(proj->params.w_real, rng);
        proj->params.refresh();
        block->projection.push_back(std::move(proj));
      }

      net.nodes.push_back(std::move(block));
      ch = out_ch;
      if (stride == 2) H = (H % 2 == 0) ? H / 2 : (H - 1) / 2 + 1;
    }
  }

  add_bn("head.bn", ch);
  net.nodes.push_back(std::make_unique<LifNode<T>>("head.lif", lif));
  std::size_t head_in = ch;
  if (arch.head_flatten) {
    net.nodes.push_back(std::make_unique<FlattenNode<T>>("head.flatten"));
    head_in = ch * H * H;
  } else {
    net.nodes.push_back(std::make_unique<GlobalAvgPoolNode<T>>("head.gap"));
  }
  auto head = std::make_unique<DenseNode<T>>("head.fc", head_in, arch.num_classes,
                                             /*with_bias=*/true, WeightMode::full_precision);
  head->params.binarization_exempt = true;
  kaiming_normal_init(head->params.w_real, rng);
  head->params.refresh();
  net.nodes.push_back(std::move(head));
  return net;
}

template <class T>
void set_weight_mode(Network<T>& net, WeightMode mode) {
  for (auto& [name, p] : net.named_params()) {
    p->mode = p->binarization_exempt ? WeightMode::full_precision : mode;
    p->refresh();
  }
}

#define SEIBW_INSTANTIATE(T)                                                            \
  template class DenseNode<T>;                                                          \
  template class ConvNode<T>;                                                           \
  template class BatchNormNode<T>;                                                      \
  template class LifNode<T>;                                                            \
  template class AvgPoolNode<T>;                                                        \
  template class GlobalAvgPoolNode<T>;                                                  \
  template class FlattenNode<T>;                                                        \
  template class ResidualBlockNode<T>;                                                  \
  template class Network<T>;                                                            \
  template Network<T> build_network<T>(const ArchSpec&, std::size_t, const LifConfig&,  \
                                       WeightMode, Rng&);                               \
  template void set_weight_mode<T>(Network<T>&, WeightMode);

SEIBW_INSTANTIATE(float)
SEIBW_INSTANTIATE(double)
#undef SEIBW_INSTANTIATE

}  // namespace seibw
