#include "seibw/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace seibw {

template <class T>
double sum(const TensorT<T>& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(a[i]);
  return acc;
}

template <class T>
double mean(const TensorT<T>& a) {
  SEIBW_CHECK_VALUE(a.numel() > 0, "mean of empty tensor");
  return sum(a) / static_cast<double>(a.numel());
}

template <class T>
double max_abs(const TensorT<T>& a) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i])));
  return m;
}

template <class T>
double dot(const TensorT<T>& a, const TensorT<T>& b) {
  SEIBW_CHECK_DIM(a.numel() == b.numel(), "dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  SEIBW_CHECK_DIM(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors required");
  SEIBW_CHECK_DIM(a.dim(1) == b.dim(0), "matmul: inner dimensions mismatch");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<T> out({m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  parallel_for(m, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p)
          acc += static_cast<double>(pa[i * k + p]) * static_cast<double>(pb[p * n + j]);
        po[i * n + j] = static_cast<T>(acc);
      }
    }
  });
  return out;
}

namespace {
std::size_t conv_out_extent(std::size_t in, std::size_t pad, std::size_t kern, std::size_t stride) {
  SEIBW_CHECK_DIM(stride >= 1, "conv2d: stride must be >= 1");
  SEIBW_CHECK_DIM(in + 2 * pad >= kern, "conv2d: kernel exceeds padded extent");
  return (in + 2 * pad - kern) / stride + 1;
}
}  // namespace

namespace {

// Dot of two contiguous runs with four interleaved double accumulators; the
// combination order is fixed by index arithmetic alone, so results are
// reproducible across runs and thread counts.
template <class T>
inline double dot_span(const T* a, const T* b, std::size_t n) {
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

// Valid output range [lo, hi) so that o*stride + kpos - pad lands in [0, n_in).
inline void out_bounds(std::size_t kpos, std::size_t stride, std::size_t pad, std::size_t n_in,
                       std::size_t n_out, std::size_t& lo, std::size_t& hi) {
  lo = pad > kpos ? (pad - kpos + stride - 1) / stride : 0;
  if (n_in + pad <= kpos) {
    lo = hi = 0;
    return;
  }
  hi = std::min(n_out, (n_in - 1 + pad - kpos) / stride + 1);
  if (lo > hi) lo = hi;
}

// Valid kernel range [lo, hi) so that o*stride + k - pad lands in [0, n).
inline void kernel_bounds(std::size_t o, std::size_t stride, std::size_t pad, std::size_t kext,
                          std::size_t n, std::size_t& lo, std::size_t& hi) {
  const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(o * stride) -
                              static_cast<std::ptrdiff_t>(pad);
  lo = base < 0 ? static_cast<std::size_t>(-base) : 0;
  const std::ptrdiff_t room = static_cast<std::ptrdiff_t>(n) - base;
  hi = room <= 0 ? 0 : std::min<std::size_t>(kext, static_cast<std::size_t>(room));
  if (lo > hi) lo = hi;
}
}  // namespace

template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& k, std::size_t stride,
                  std::size_t padding) {
  SEIBW_CHECK_DIM(x.rank() == 4 && k.rank() == 4, "conv2d: x[B,C,H,W], k[O,C,kh,kw] required");
  SEIBW_CHECK_DIM(x.dim(1) == k.dim(1), "conv2d: channel mismatch");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = conv_out_extent(H, padding, kh, stride);
  const std::size_t Wo = conv_out_extent(W, padding, kw, stride);
  TensorT<T> out({B, O, Ho, Wo});
  const T* px = x.data();
  const T* pk = k.data();
  T* po = out.data();
  // One output row of double accumulators at a time: every output element is
  // an independent chain fed in fixed (c, ky, kx) order.
  parallel_for(B * O, [&](std::size_t lo_idx, std::size_t hi_idx) {
    std::vector<double> acc(Wo);
    for (std::size_t bo = lo_idx; bo < hi_idx; ++bo) {
      const std::size_t b = bo / O, o = bo % O;
      const T* xb = px + b * C * H * W;
      const T* ko = pk + o * C * kh * kw;
      T* ob = po + (b * O + o) * Ho * Wo;
      for (std::size_t oy = 0; oy < Ho; ++oy) {
        std::size_t ky_lo, ky_hi;
        kernel_bounds(oy, stride, padding, kh, H, ky_lo, ky_hi);
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t c = 0; c < C; ++c) {
          const T* xc = xb + c * H * W;
          const T* kc = ko + c * kh * kw;
          for (std::size_t ky = ky_lo; ky < ky_hi; ++ky) {
            const std::size_t iy = oy * stride + ky - padding;
            const T* xrow = xc + iy * W;
            const T* krow = kc + ky * kw;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              // Valid ox: 0 <= ox*stride + kx - pad < W.
              std::size_t ox_lo, ox_hi;
              out_bounds(kx, stride, padding, W, Wo, ox_lo, ox_hi);
              const double kv = static_cast<double>(krow[kx]);
              if (stride == 1) {
                const T* xp = xrow + ox_lo + kx - padding;
                for (std::size_t i = 0; i < ox_hi - ox_lo; ++i)
                  acc[ox_lo + i] += kv * static_cast<double>(xp[i]);
              } else {
                for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                  acc[ox] += kv * static_cast<double>(xrow[ox * stride + kx - padding]);
              }
            }
          }
        }
        for (std::size_t ox = 0; ox < Wo; ++ox) ob[oy * Wo + ox] = static_cast<T>(acc[ox]);
      }
    }
  });
  return out;
}

template <class T>
TensorT<T> conv2d_backward_input(const TensorT<T>& gy, const TensorT<T>& k,
                                 const std::vector<std::size_t>& x_shape, std::size_t stride,
                                 std::size_t padding) {
  SEIBW_CHECK_DIM(gy.rank() == 4 && k.rank() == 4 && x_shape.size() == 4,
                  "conv2d_backward_input: rank-4 tensors required");
  const std::size_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3];
  const std::size_t O = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = gy.dim(2), Wo = gy.dim(3);
  SEIBW_CHECK_DIM(gy.dim(0) == B && gy.dim(1) == O && k.dim(1) == C,
                  "conv2d_backward_input: shape mismatch");
  TensorT<T> gx({B, C, H, W});
  const T* pg = gy.data();
  const T* pk = k.data();
  T* po = gx.data();
  parallel_for(B * C, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t bc = lo; bc < hi; ++bc) {
      const std::size_t b = bc / C, c = bc % C;
      T* gxc = po + (b * C + c) * H * W;
      if (stride == 1) {
        // Row accumulators; each gx element is fed in (ky, kx, o) order.
        std::vector<double> acc(W);
        for (std::size_t iy = 0; iy < H; ++iy) {
          const std::size_t sum_y = iy + padding;
          const std::size_t ky_lo = sum_y >= Ho ? sum_y - Ho + 1 : 0;
          const std::size_t ky_hi = std::min(kh, sum_y + 1);
          std::fill(acc.begin(), acc.end(), 0.0);
          for (std::size_t ky = ky_lo; ky < ky_hi; ++ky) {
            const std::size_t oy = sum_y - ky;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              // Valid ix: 0 <= ix + pad - kx < Wo.
              const std::size_t ix_lo = kx > padding ? kx - padding : 0;
              const std::size_t ix_hi =
                  std::min(W, Wo + kx >= padding ? Wo + kx - padding : 0);
              if (ix_lo >= ix_hi) continue;
              for (std::size_t o = 0; o < O; ++o) {
                const double kv =
                    static_cast<double>(pk[((o * C + c) * kh + ky) * kw + kx]);
                const T* grow = pg + ((b * O + o) * Ho + oy) * Wo;
                const T* gp = grow + (ix_lo + padding - kx);
                for (std::size_t i = 0; i < ix_hi - ix_lo; ++i)
                  acc[ix_lo + i] += kv * static_cast<double>(gp[i]);
              }
            }
          }
          for (std::size_t ix = 0; ix < W; ++ix) gxc[iy * W + ix] = static_cast<T>(acc[ix]);
        }
        continue;
      }
      for (std::size_t iy = 0; iy < H; ++iy) {
        for (std::size_t ix = 0; ix < W; ++ix) {
          double acc = 0.0;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t num_y = static_cast<std::ptrdiff_t>(iy + padding) -
                                         static_cast<std::ptrdiff_t>(ky);
            if (num_y < 0 || num_y % static_cast<std::ptrdiff_t>(stride) != 0) continue;
            const std::size_t oy = static_cast<std::size_t>(num_y) / stride;
            if (oy >= Ho) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::ptrdiff_t num_x = static_cast<std::ptrdiff_t>(ix + padding) -
                                           static_cast<std::ptrdiff_t>(kx);
              if (num_x < 0 || num_x % static_cast<std::ptrdiff_t>(stride) != 0) continue;
              const std::size_t ox = static_cast<std::size_t>(num_x) / stride;
              if (ox >= Wo) continue;
              for (std::size_t o = 0; o < O; ++o) {
                acc += static_cast<double>(pg[((b * O + o) * Ho + oy) * Wo + ox]) *
                       static_cast<double>(pk[((o * C + c) * kh + ky) * kw + kx]);
              }
            }
          }
          gxc[iy * W + ix] = static_cast<T>(acc);
        }
      }
    }
  });
  return gx;
}

template <class T>
TensorT<T> conv2d_backward_weight(const TensorT<T>& x, const TensorT<T>& gy,
                                  const std::vector<std::size_t>& k_shape, std::size_t stride,
                                  std::size_t padding) {
  SEIBW_CHECK_DIM(x.rank() == 4 && gy.rank() == 4 && k_shape.size() == 4,
                  "conv2d_backward_weight: rank-4 tensors required");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = k_shape[0], kh = k_shape[2], kw = k_shape[3];
  const std::size_t Ho = gy.dim(2), Wo = gy.dim(3);
  SEIBW_CHECK_DIM(gy.dim(0) == B && gy.dim(1) == O && k_shape[1] == C,
                  "conv2d_backward_weight: shape mismatch");
  TensorT<T> gk({O, C, kh, kw});
  const T* px = x.data();
  const T* pg = gy.data();
  T* po = gk.data();
  parallel_for(O, [&](std::size_t lo_idx, std::size_t hi_idx) {
    for (std::size_t o = lo_idx; o < hi_idx; ++o) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ky = 0; ky < kh; ++ky) {
          std::size_t oy_lo, oy_hi;
          out_bounds(ky, stride, padding, H, Ho, oy_lo, oy_hi);
          for (std::size_t kx = 0; kx < kw; ++kx) {
            std::size_t ox_lo, ox_hi;
            out_bounds(kx, stride, padding, W, Wo, ox_lo, ox_hi);
            double acc = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
              const T* xb = px + (b * C + c) * H * W;
              const T* gb = pg + (b * O + o) * Ho * Wo;
              for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                const std::size_t iy = oy * stride + ky - padding;
                const T* xrow = xb + iy * W;
                const T* grow = gb + oy * Wo;
                // ox >= ox_lo guarantees ox*stride + kx >= padding.
                if (stride == 1) {
                  acc += dot_span(xrow + (ox_lo + kx - padding), grow + ox_lo, ox_hi - ox_lo);
                } else {
                  for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                    acc += static_cast<double>(xrow[ox * stride + kx - padding]) *
                           static_cast<double>(grow[ox]);
                }
              }
            }
            po[((o * C + c) * kh + ky) * kw + kx] = static_cast<T>(acc);
          }
        }
      }
    }
  });
  return gk;
}

template <class T>
TensorT<T> avg_pool2d(const TensorT<T>& x, std::size_t window, std::size_t stride) {
  SEIBW_CHECK_DIM(x.rank() == 4, "avg_pool2d: x[B,C,H,W] required");
  SEIBW_CHECK_DIM(window >= 1 && stride >= 1, "avg_pool2d: window/stride must be >= 1");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  SEIBW_CHECK_DIM(window <= H && window <= W, "avg_pool2d: window exceeds spatial extent");
  const std::size_t Ho = (H - window) / stride + 1;
  const std::size_t Wo = (W - window) / stride + 1;
  TensorT<T> out({B, C, Ho, Wo});
  const T* px = x.data();
  T* po = out.data();
  const double inv = 1.0 / static_cast<double>(window * window);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* xc = px + bc * H * W;
    T* oc = po + bc * Ho * Wo;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double acc = 0.0;
        for (std::size_t wy = 0; wy < window; ++wy)
          for (std::size_t wx = 0; wx < window; ++wx)
            acc += static_cast<double>(xc[(oy * stride + wy) * W + ox * stride + wx]);
        oc[oy * Wo + ox] = static_cast<T>(acc * inv);
      }
    }
  }
  return out;
}

template <class T>
TensorT<T> avg_pool2d_backward(const TensorT<T>& gy, const std::vector<std::size_t>& x_shape,
                               std::size_t window, std::size_t stride) {
  SEIBW_CHECK_DIM(gy.rank() == 4 && x_shape.size() == 4, "avg_pool2d_backward: rank-4 required");
  const std::size_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3];
  const std::size_t Ho = gy.dim(2), Wo = gy.dim(3);
  TensorT<T> gx({B, C, H, W});
  const T* pg = gy.data();
  T* po = gx.data();
  const T inv = static_cast<T>(1.0 / static_cast<double>(window * window));
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* gc = pg + bc * Ho * Wo;
    T* xc = po + bc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const T g = gc[oy * Wo + ox] * inv;
        for (std::size_t wy = 0; wy < window; ++wy)
          for (std::size_t wx = 0; wx < window; ++wx)
            xc[(oy * stride + wy) * W + ox * stride + wx] += g;
      }
  }
  return gx;
}

template <class T>
TensorT<T> softmax(const TensorT<T>& x) {
  SEIBW_CHECK_DIM(x.rank() >= 1, "softmax: rank >= 1 required");
  const std::size_t C = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / C;
  TensorT<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = px + r * C;
    T* orow = po + r * C;
    double mx = static_cast<double>(xr[0]);
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(xr[c]));
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double e = std::exp(static_cast<double>(xr[c]) - mx);
      orow[c] = static_cast<T>(e);
      z += e;
    }
    const double inv = 1.0 / z;
    for (std::size_t c = 0; c < C; ++c) orow[c] = static_cast<T>(static_cast<double>(orow[c]) * inv);
  }
  return out;
}

template <class T>
TensorT<T> log_softmax(const TensorT<T>& x) {
  SEIBW_CHECK_DIM(x.rank() >= 1, "log_softmax: rank >= 1 required");
  const std::size_t C = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / C;
  TensorT<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = px + r * C;
    T* orow = po + r * C;
    double mx = static_cast<double>(xr[0]);
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(xr[c]));
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(xr[c]) - mx);
    const double lz = std::log(z) + mx;
    for (std::size_t c = 0; c < C; ++c) orow[c] = static_cast<T>(static_cast<double>(xr[c]) - lz);
  }
  return out;
}

template <class T>
std::vector<std::size_t> argmax_rows(const TensorT<T>& x) {
  SEIBW_CHECK_DIM(x.rank() >= 1, "argmax_rows: rank >= 1 required");
  const std::size_t C = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / C;
  std::vector<std::size_t> out(rows);
  const T* px = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = px + r * C;
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (xr[c] > xr[best]) best = c;
    out[r] = best;
  }
  return out;
}

#define SEIBW_INSTANTIATE(T)                                                                     \
  template double sum<T>(const TensorT<T>&);                                                     \
  template double mean<T>(const TensorT<T>&);                                                    \
  template double max_abs<T>(const TensorT<T>&);                                                 \
  template double dot<T>(const TensorT<T>&, const TensorT<T>&);                                  \
  template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);                           \
  template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, std::size_t, std::size_t); \
  template TensorT<T> conv2d_backward_input<T>(const TensorT<T>&, const TensorT<T>&,             \
                                               const std::vector<std::size_t>&, std::size_t,     \
                                               std::size_t);                                     \
  template TensorT<T> conv2d_backward_weight<T>(const TensorT<T>&, const TensorT<T>&,            \
                                                const std::vector<std::size_t>&, std::size_t,    \
                                                std::size_t);                                    \
  template TensorT<T> avg_pool2d<T>(const TensorT<T>&, std::size_t, std::size_t);                \
  template TensorT<T> avg_pool2d_backward<T>(const TensorT<T>&,                                  \
                                             const std::vector<std::size_t>&, std::size_t,       \
                                             std::size_t);                                       \
  template TensorT<T> softmax<T>(const TensorT<T>&);                                             \
  template TensorT<T> log_softmax<T>(const TensorT<T>&);                                         \
  template std::vector<std::size_t> argmax_rows<T>(const TensorT<T>&);

SEIBW_INSTANTIATE(float)
SEIBW_INSTANTIATE(double)
#undef SEIBW_INSTANTIATE

}  // namespace seibw
