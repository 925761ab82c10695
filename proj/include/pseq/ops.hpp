#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pseq/tensor.hpp"

namespace pseq {

enum class Padding { kSame, kValid };
enum class Act { kRelu, kSigmoid, kTanh, kSoftmaxChannels };

namespace detail {

struct ConvGeom {
  int out_h = 0, out_w = 0;
  int pad_h0 = 0, pad_w0 = 0;
};

// Standard convolution arithmetic. kSame pads so that out = ceil(in / stride),
// with the extra pad cell (odd totals) at the high side.
inline ConvGeom conv_geometry(int h, int w, int kh, int kw, int stride, Padding pad) {
  ConvGeom g;
  if (pad == Padding::kSame) {
    g.out_h = (h + stride - 1) / stride;
    g.out_w = (w + stride - 1) / stride;
    const int ph = std::max((g.out_h - 1) * stride + kh - h, 0);
    const int pw = std::max((g.out_w - 1) * stride + kw - w, 0);
    g.pad_h0 = ph / 2;
    g.pad_w0 = pw / 2;
  } else {
    if (h < kh || w < kw) throw std::invalid_argument("conv2d: input smaller than kernel under valid padding");
    g.out_h = (h - kh) / stride + 1;
    g.out_w = (w - kw) / stride + 1;
  }
  return g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d
//
// x: B x H x W x Cin, kernel: KH x KW x Cin x Cout, bias: Cout (or empty).
// The channel axis is innermost in every hot loop so the compiler can
// vectorize over contiguous rows.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, int stride,
                 Padding pad = Padding::kSame) {
  if (x.rank() != 4 || kernel.rank() != 4) throw std::invalid_argument("conv2d: x and kernel must be rank 4");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
  const int KH = kernel.dim(0), KW = kernel.dim(1), Cout = kernel.dim(3);
  if (kernel.dim(2) != Cin) {
    throw std::invalid_argument("conv2d: kernel expects " + std::to_string(kernel.dim(2)) +
                                " input channels, input has " + std::to_string(Cin));
  }
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != Cout)) {
    throw std::invalid_argument("conv2d: bias shape " + bias.shape_str() + " does not match Cout=" +
                                std::to_string(Cout));
  }
  const auto g = detail::conv_geometry(H, W, KH, KW, stride, pad);

  Tensor<T> out({B, g.out_h, g.out_w, Cout});
  for (int b = 0; b < B; ++b) {
    for (int oh = 0; oh < g.out_h; ++oh) {
      for (int ow = 0; ow < g.out_w; ++ow) {
        T* __restrict orow = &out(b, oh, ow, 0);
        if (!bias.empty()) {
          const T* brow = bias.data();
          for (int co = 0; co < Cout; ++co) orow[co] = brow[co];
        }
        for (int dh = 0; dh < KH; ++dh) {
          const int ih = oh * stride + dh - g.pad_h0;
          if (ih < 0 || ih >= H) continue;
          for (int dw = 0; dw < KW; ++dw) {
            const int iw = ow * stride + dw - g.pad_w0;
            if (iw < 0 || iw >= W) continue;
            const T* __restrict xrow = &x(b, ih, iw, 0);
            const T* __restrict krow = &kernel(dh, dw, 0, 0);
            for (int ci = 0; ci < Cin; ++ci) {
              const T a = xrow[ci];
              const T* __restrict kk = krow + static_cast<int64_t>(ci) * Cout;
              for (int co = 0; co < Cout; ++co) orow[co] += a * kk[co];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
struct ConvGrads {
  Tensor<T> dx;
  Tensor<T> dkernel;
  Tensor<T> dbias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel, int stride, Padding pad,
                             const Tensor<T>& dy) {
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
  const int KH = kernel.dim(0), KW = kernel.dim(1), Cout = kernel.dim(3);
  const auto g = detail::conv_geometry(H, W, KH, KW, stride, pad);
  if (dy.rank() != 4 || dy.dim(0) != B || dy.dim(1) != g.out_h || dy.dim(2) != g.out_w || dy.dim(3) != Cout) {
    throw std::invalid_argument("conv2d_backward: dy shape " + dy.shape_str() + " does not match output");
  }

  ConvGrads<T> grads;
  grads.dx = Tensor<T>(x.shape());
  grads.dkernel = Tensor<T>(kernel.shape());
  grads.dbias = Tensor<T>({Cout});

  // kernel transposed to (dh, dw, co, ci) so the dx update runs as a
  // contiguous axpy over ci (reductions over co would not vectorize)
  Tensor<T> kt({KH, KW, Cout, Cin});
  for (int dh = 0; dh < KH; ++dh)
    for (int dw = 0; dw < KW; ++dw)
      for (int ci = 0; ci < Cin; ++ci)
        for (int co = 0; co < Cout; ++co) kt(dh, dw, co, ci) = kernel(dh, dw, ci, co);

  for (int b = 0; b < B; ++b) {
    for (int oh = 0; oh < g.out_h; ++oh) {
      for (int ow = 0; ow < g.out_w; ++ow) {
        const T* __restrict dyrow = &dy(b, oh, ow, 0);
        {
          T* __restrict db = grads.dbias.data();
          for (int co = 0; co < Cout; ++co) db[co] += dyrow[co];
        }
        for (int dh = 0; dh < KH; ++dh) {
          const int ih = oh * stride + dh - g.pad_h0;
          if (ih < 0 || ih >= H) continue;
          for (int dw = 0; dw < KW; ++dw) {
            const int iw = ow * stride + dw - g.pad_w0;
            if (iw < 0 || iw >= W) continue;
            const T* __restrict xrow = &x(b, ih, iw, 0);
            T* __restrict dxrow = &grads.dx(b, ih, iw, 0);
            T* __restrict dkrow = &grads.dkernel(dh, dw, 0, 0);
            const T* __restrict ktrow = &kt(dh, dw, 0, 0);
            for (int ci = 0; ci < Cin; ++ci) {
              const T a = xrow[ci];
              T* __restrict dkk = dkrow + static_cast<int64_t>(ci) * Cout;
              for (int co = 0; co < Cout; ++co) dkk[co] += a * dyrow[co];
            }
            for (int co = 0; co < Cout; ++co) {
              const T d = dyrow[co];
              const T* __restrict ktk = ktrow + static_cast<int64_t>(co) * Cin;
              for (int ci = 0; ci < Cin; ++ci) dxrow[ci] += d * ktk[ci];
            }
          }
        }
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// conv2d_transpose
//
// Adjoint of conv2d under the same kernel and stride: for kernel
// KH x KW x Cpost x Cx, an input of B x H x W x Cx maps to
// B x H*stride x W*stride x Cpost, and
//   <conv2d(a, k), b> == <a, conv2d_transpose(b, k)>   (zero bias)
// whenever a has spatial dims H*stride x W*stride. The kernel axis order is
// the conv2d one; channels swap roles between the two directions.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, int stride,
                           int out_h = -1, int out_w = -1) {
  if (x.rank() != 4 || kernel.rank() != 4) throw std::invalid_argument("conv2d_transpose: rank 4 required");
  if (stride < 1) throw std::invalid_argument("conv2d_transpose: stride must be >= 1");
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), Cx = x.dim(3);
  const int KH = kernel.dim(0), KW = kernel.dim(1), Cpost = kernel.dim(2);
  if (kernel.dim(3) != Cx) {
    throw std::invalid_argument("conv2d_transpose: kernel expects " + std::to_string(kernel.dim(3)) +
                                " channels, input has " + std::to_string(Cx));
  }
  if (out_h < 0) out_h = H * stride;
  if (out_w < 0) out_w = W * stride;
  if ((out_h + stride - 1) / stride != H || (out_w + stride - 1) / stride != W) {
    throw std::invalid_argument("conv2d_transpose: output size incompatible with input and stride");
  }
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != Cpost)) {
    throw std::invalid_argument("conv2d_transpose: bias shape mismatch");
  }
  const int ph0 = std::max((H - 1) * stride + KH - out_h, 0) / 2;
  const int pw0 = std::max((W - 1) * stride + KW - out_w, 0) / 2;

  // transpose to (dh, dw, c, q) so the scatter runs as an axpy over q
  Tensor<T> kt({KH, KW, Cx, Cpost});
  for (int dh = 0; dh < KH; ++dh)
    for (int dw = 0; dw < KW; ++dw)
      for (int q = 0; q < Cpost; ++q)
        for (int c = 0; c < Cx; ++c) kt(dh, dw, c, q) = kernel(dh, dw, q, c);

  Tensor<T> out({B, out_h, out_w, Cpost});
  for (int b = 0; b < B; ++b) {
    for (int ih = 0; ih < H; ++ih) {
      for (int iw = 0; iw < W; ++iw) {
        const T* __restrict xrow = &x(b, ih, iw, 0);
        for (int dh = 0; dh < KH; ++dh) {
          const int nh = ih * stride + dh - ph0;
          if (nh < 0 || nh >= out_h) continue;
          for (int dw = 0; dw < KW; ++dw) {
            const int nw = iw * stride + dw - pw0;
            if (nw < 0 || nw >= out_w) continue;
            T* __restrict orow = &out(b, nh, nw, 0);
            const T* __restrict ktrow = &kt(dh, dw, 0, 0);
            for (int c = 0; c < Cx; ++c) {
              const T a = xrow[c];
              const T* __restrict kq = ktrow + static_cast<int64_t>(c) * Cpost;
              for (int q = 0; q < Cpost; ++q) orow[q] += a * kq[q];
            }
          }
        }
      }
    }
  }
  if (!bias.empty()) {
    for (int b = 0; b < B; ++b)
      for (int nh = 0; nh < out_h; ++nh)
        for (int nw = 0; nw < out_w; ++nw) {
          T* __restrict orow = &out(b, nh, nw, 0);
          const T* brow = bias.data();
          for (int q = 0; q < Cpost; ++q) orow[q] += brow[q];
        }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_transpose_backward(const Tensor<T>& x, const Tensor<T>& kernel, int stride,
                                       const Tensor<T>& dy, int out_h = -1, int out_w = -1) {
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), Cx = x.dim(3);
  const int KH = kernel.dim(0), KW = kernel.dim(1), Cpost = kernel.dim(2);
  if (out_h < 0) out_h = H * stride;
  if (out_w < 0) out_w = W * stride;
  if (dy.dim(0) != B || dy.dim(1) != out_h || dy.dim(2) != out_w || dy.dim(3) != Cpost) {
    throw std::invalid_argument("conv2d_transpose_backward: dy shape mismatch");
  }
  const int ph0 = std::max((H - 1) * stride + KH - out_h, 0) / 2;
  const int pw0 = std::max((W - 1) * stride + KW - out_w, 0) / 2;

  ConvGrads<T> grads;
  grads.dx = Tensor<T>(x.shape());
  grads.dkernel = Tensor<T>(kernel.shape());
  grads.dbias = Tensor<T>({Cpost});

  for (int b = 0; b < B; ++b) {
    for (int nh = 0; nh < out_h; ++nh)
      for (int nw = 0; nw < out_w; ++nw) {
        const T* __restrict dyrow = &dy(b, nh, nw, 0);
        T* __restrict db = grads.dbias.data();
        for (int q = 0; q < Cpost; ++q) db[q] += dyrow[q];
      }
    for (int ih = 0; ih < H; ++ih) {
      for (int iw = 0; iw < W; ++iw) {
        const T* __restrict xrow = &x(b, ih, iw, 0);
        T* __restrict dxrow = &grads.dx(b, ih, iw, 0);
        for (int dh = 0; dh < KH; ++dh) {
          const int nh = ih * stride + dh - ph0;
          if (nh < 0 || nh >= out_h) continue;
          for (int dw = 0; dw < KW; ++dw) {
            const int nw = iw * stride + dw - pw0;
            if (nw < 0 || nw >= out_w) continue;
            const T* __restrict dyrow = &dy(b, nh, nw, 0);
            const T* __restrict krow = &kernel(dh, dw, 0, 0);
            T* __restrict dkrow = &grads.dkernel(dh, dw, 0, 0);
            for (int q = 0; q < Cpost; ++q) {
              const T dq = dyrow[q];
              const T* __restrict kk = krow + static_cast<int64_t>(q) * Cx;
              T* __restrict dkk = dkrow + static_cast<int64_t>(q) * Cx;
              for (int c = 0; c < Cx; ++c) {
                dxrow[c] += dq * kk[c];
                dkk[c] += dq * xrow[c];
              }
            }
          }
        }
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// linear: pointwise map over the last axis. x: N x Din, w: Din x Dout.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (x.rank() != 2 || w.rank() != 2) throw std::invalid_argument("linear: x and w must be rank 2");
  const int N = x.dim(0), Din = x.dim(1), Dout = w.dim(1);
  if (w.dim(0) != Din) throw std::invalid_argument("linear: weight expects " + std::to_string(w.dim(0)) +
                                                   " inputs, got " + std::to_string(Din));
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != Dout))
    throw std::invalid_argument("linear: bias shape mismatch");
  Tensor<T> out({N, Dout});
  for (int n = 0; n < N; ++n) {
    T* __restrict orow = &out(n, 0);
    if (!bias.empty()) {
      const T* brow = bias.data();
      for (int q = 0; q < Dout; ++q) orow[q] = brow[q];
    }
    const T* __restrict xrow = &x(n, 0);
    for (int d = 0; d < Din; ++d) {
      const T a = xrow[d];
      const T* __restrict wrow = &w(d, 0);
      for (int q = 0; q < Dout; ++q) orow[q] += a * wrow[q];
    }
  }
  return out;
}

template <typename T>
struct LinearGrads {
  Tensor<T> dx, dw, dbias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy) {
  const int N = x.dim(0), Din = x.dim(1), Dout = w.dim(1);
  if (dy.rank() != 2 || dy.dim(0) != N || dy.dim(1) != Dout)
    throw std::invalid_argument("linear_backward: dy shape mismatch");
  LinearGrads<T> g;
  g.dx = Tensor<T>({N, Din});
  g.dw = Tensor<T>({Din, Dout});
  g.dbias = Tensor<T>({Dout});
  for (int n = 0; n < N; ++n) {
    const T* __restrict dyrow = &dy(n, 0);
    const T* __restrict xrow = &x(n, 0);
    T* __restrict dxrow = &g.dx(n, 0);
    T* __restrict db = g.dbias.data();
    for (int q = 0; q < Dout; ++q) db[q] += dyrow[q];
    for (int d = 0; d < Din; ++d) {
      const T a = xrow[d];
      const T* __restrict wrow = &w(d, 0);
      T* __restrict dwrow = &g.dw(d, 0);
      T acc = T(0);
      for (int q = 0; q < Dout; ++q) {
        acc += dyrow[q] * wrow[q];
        dwrow[q] += a * dyrow[q];
      }
      dxrow[d] += acc;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// batchnorm over all axes but the channel (last) axis.
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;  // per channel
  int64_t m = 0;           // elements per channel
};

/// Train mode normalizes with batch statistics and updates the running ones;
/// infer mode normalizes with the running statistics.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T eps,
                    T momentum = T(0.1), BatchNormCache<T>* cache = nullptr) {
  if (x.rank() < 2) throw std::invalid_argument("batchnorm: rank >= 2 required");
  const int C = x.dim(x.rank() - 1);
  const int64_t m = x.size() / C;
  if (m == 0) throw std::invalid_argument("batchnorm: zero-element batch");
  if (gamma.size() != C || beta.size() != C || running_mean.size() != C || running_var.size() != C)
    throw std::invalid_argument("batchnorm: parameter length != channel count " + std::to_string(C));

  std::vector<T> mean(C), var(C);
  if (training) {
    std::vector<double> acc(C, 0.0);
    const T* xd = x.data();
    for (int64_t i = 0; i < m; ++i)
      for (int c = 0; c < C; ++c) acc[static_cast<size_t>(c)] += static_cast<double>(xd[i * C + c]);
    for (int c = 0; c < C; ++c) mean[static_cast<size_t>(c)] = static_cast<T>(acc[static_cast<size_t>(c)] / m);
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int64_t i = 0; i < m; ++i)
      for (int c = 0; c < C; ++c) {
        const double d = static_cast<double>(xd[i * C + c]) - static_cast<double>(mean[static_cast<size_t>(c)]);
        acc[static_cast<size_t>(c)] += d * d;
      }
    for (int c = 0; c < C; ++c) var[static_cast<size_t>(c)] = static_cast<T>(acc[static_cast<size_t>(c)] / m);
    // Running statistics track the unbiased variance.
    for (int c = 0; c < C; ++c) {
      const T uvar = m > 1 ? var[static_cast<size_t>(c)] * T(m) / T(m - 1) : var[static_cast<size_t>(c)];
      running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean[static_cast<size_t>(c)];
      running_var[c] = (T(1) - momentum) * running_var[c] + momentum * uvar;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[static_cast<size_t>(c)] = running_mean[c];
      var[static_cast<size_t>(c)] = running_var[c];
    }
  }

  std::vector<T> inv_std(C);
  for (int c = 0; c < C; ++c) inv_std[static_cast<size_t>(c)] = T(1) / std::sqrt(var[static_cast<size_t>(c)] + eps);

  Tensor<T> out(x.shape());
  Tensor<T> xhat;
  if (cache) xhat = Tensor<T>(x.shape());
  const T* xd = x.data();
  T* od = out.data();
  T* hd = cache ? xhat.data() : nullptr;
  for (int64_t i = 0; i < m; ++i) {
    for (int c = 0; c < C; ++c) {
      const T h = (xd[i * C + c] - mean[static_cast<size_t>(c)]) * inv_std[static_cast<size_t>(c)];
      if (hd) hd[i * C + c] = h;
      od[i * C + c] = gamma[c] * h + beta[c];
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->m = m;
  }
  return out;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> dx, dgamma, dbeta;
};

/// Backward through train-mode normalization (batch statistics are functions
/// of the input).
template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma,
                                     const Tensor<T>& dy) {
  const Tensor<T>& xhat = cache.xhat;
  if (!dy.same_shape(xhat)) throw std::invalid_argument("batchnorm_backward: dy shape mismatch");
  const int C = xhat.dim(xhat.rank() - 1);
  const int64_t m = cache.m;

  BatchNormGrads<T> g;
  g.dx = Tensor<T>(xhat.shape());
  g.dgamma = Tensor<T>({C});
  g.dbeta = Tensor<T>({C});

  std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
  const T* dyd = dy.data();
  const T* hd = xhat.data();
  for (int64_t i = 0; i < m; ++i)
    for (int c = 0; c < C; ++c) {
      sum_dy[static_cast<size_t>(c)] += static_cast<double>(dyd[i * C + c]);
      sum_dy_xhat[static_cast<size_t>(c)] += static_cast<double>(dyd[i * C + c]) * static_cast<double>(hd[i * C + c]);
    }
  for (int c = 0; c < C; ++c) {
    g.dgamma[c] = static_cast<T>(sum_dy_xhat[static_cast<size_t>(c)]);
    g.dbeta[c] = static_cast<T>(sum_dy[static_cast<size_t>(c)]);
  }
  T* dxd = g.dx.data();
  for (int64_t i = 0; i < m; ++i)
    for (int c = 0; c < C; ++c) {
      const T k = gamma[c] * cache.inv_std[static_cast<size_t>(c)] / T(m);
      dxd[i * C + c] = k * (T(m) * dyd[i * C + c] - static_cast<T>(sum_dy[static_cast<size_t>(c)]) -
                            hd[i * C + c] * static_cast<T>(sum_dy_xhat[static_cast<size_t>(c)]));
    }
  return g;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Act kind) {
  Tensor<T> out(x.shape());
  const T* xd = x.data();
  T* od = out.data();
  const int64_t n = x.size();
  switch (kind) {
    case Act::kRelu:
      for (int64_t i = 0; i < n; ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
      break;
    case Act::kSigmoid:
      for (int64_t i = 0; i < n; ++i) od[i] = T(1) / (T(1) + std::exp(-xd[i]));
      break;
    case Act::kTanh:
      for (int64_t i = 0; i < n; ++i) od[i] = std::tanh(xd[i]);
      break;
    case Act::kSoftmaxChannels: {
      if (x.rank() < 2) throw std::invalid_argument("softmax_channels: rank >= 2 required");
      const int C = x.dim(x.rank() - 1);
      const int64_t rows = n / C;
      for (int64_t i = 0; i < rows; ++i) {
        const T* xr = xd + i * C;
        T* orow = od + i * C;
        T mx = xr[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
        T sum = T(0);
        for (int c = 0; c < C; ++c) {
          orow[c] = std::exp(xr[c] - mx);
          sum += orow[c];
        }
        const T inv = T(1) / sum;
        for (int c = 0; c < C; ++c) orow[c] *= inv;
      }
      break;
    }
  }
  return out;
}

/// Backward from the forward *output* y. ReLU takes subgradient 0 at 0.
template <typename T>
Tensor<T> activation_backward(const Tensor<T>& y, Act kind, const Tensor<T>& dy) {
  if (!y.same_shape(dy)) throw std::invalid_argument("activation_backward: shape mismatch");
  Tensor<T> dx(y.shape());
  const T* yd = y.data();
  const T* dyd = dy.data();
  T* dxd = dx.data();
  const int64_t n = y.size();
  switch (kind) {
    case Act::kRelu:
      for (int64_t i = 0; i < n; ++i) dxd[i] = yd[i] > T(0) ? dyd[i] : T(0);
      break;
    case Act::kSigmoid:
      for (int64_t i = 0; i < n; ++i) dxd[i] = dyd[i] * yd[i] * (T(1) - yd[i]);
      break;
    case Act::kTanh:
      for (int64_t i = 0; i < n; ++i) dxd[i] = dyd[i] * (T(1) - yd[i] * yd[i]);
      break;
    case Act::kSoftmaxChannels: {
      const int C = y.dim(y.rank() - 1);
      const int64_t rows = n / C;
      for (int64_t i = 0; i < rows; ++i) {
        const T* yr = yd + i * C;
        const T* dyr = dyd + i * C;
        T* dxr = dxd + i * C;
        T dot = T(0);
        for (int c = 0; c < C; ++c) dot += dyr[c] * yr[c];
        for (int c = 0; c < C; ++c) dxr[c] = yr[c] * (dyr[c] - dot);
      }
      break;
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// scatter_max
//
// feats: N x C point features, cell: per-point flat grid index in
// [0, rows*cols) or -1 for dropped points. Empty cells hold 0. Gradient is
// routed to the argmax point only; the lowest point index wins exact ties.
// ---------------------------------------------------------------------------

constexpr int64_t kInvalidCell = -1;

namespace detail {

template <typename T>
void scatter_max_compute(const Tensor<T>& feats, const std::vector<int64_t>& cell, int rows, int cols,
                         Tensor<T>* out, std::vector<int64_t>* argmax) {
  if (feats.rank() != 2) throw std::invalid_argument("scatter_max: features must be N x C");
  const int N = feats.dim(0), C = feats.dim(1);
  if (static_cast<int>(cell.size()) != N)
    throw std::invalid_argument("scatter_max: cell index count != point count");
  const int64_t ncells = static_cast<int64_t>(rows) * cols;
  if (out) *out = Tensor<T>({rows, cols, C});
  if (argmax) argmax->assign(static_cast<size_t>(ncells * C), -1);

  std::vector<T> best(static_cast<size_t>(ncells * C), T(0));
  std::vector<char> occupied(static_cast<size_t>(ncells), 0);
  for (int n = 0; n < N; ++n) {
    const int64_t id = cell[static_cast<size_t>(n)];
    if (id == kInvalidCell) continue;
    if (id < 0 || id >= ncells) {
      throw std::invalid_argument("scatter_max: cell index " + std::to_string(id) + " outside " +
                                  std::to_string(rows) + "x" + std::to_string(cols) + " grid");
    }
    const T* frow = &feats(n, 0);
    T* brow = &best[static_cast<size_t>(id * C)];
    if (!occupied[static_cast<size_t>(id)]) {
      occupied[static_cast<size_t>(id)] = 1;
      for (int c = 0; c < C; ++c) brow[c] = frow[c];
      if (argmax)
        for (int c = 0; c < C; ++c) (*argmax)[static_cast<size_t>(id * C + c)] = n;
    } else {
      for (int c = 0; c < C; ++c) {
        if (frow[c] > brow[c]) {
          brow[c] = frow[c];
          if (argmax) (*argmax)[static_cast<size_t>(id * C + c)] = n;
        }
      }
    }
  }
  if (out) {
    T* od = out->data();
    for (int64_t i = 0; i < ncells; ++i) {
      if (!occupied[static_cast<size_t>(i)]) continue;
      for (int c = 0; c < C; ++c) od[i * C + c] = best[static_cast<size_t>(i * C + c)];
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> scatter_max(const Tensor<T>& feats, const std::vector<int64_t>& cell, int rows, int cols) {
  Tensor<T> out;
  detail::scatter_max_compute(feats, cell, rows, cols, &out, static_cast<std::vector<int64_t>*>(nullptr));
  return out;
}

template <typename T>
Tensor<T> scatter_max_backward(const Tensor<T>& feats, const std::vector<int64_t>& cell, int rows, int cols,
                               const Tensor<T>& dy) {
  const int N = feats.dim(0), C = feats.dim(1);
  if (dy.rank() != 3 || dy.dim(0) != rows || dy.dim(1) != cols || dy.dim(2) != C)
    throw std::invalid_argument("scatter_max_backward: dy shape mismatch");
  std::vector<int64_t> argmax;
  detail::scatter_max_compute(feats, cell, rows, cols, static_cast<Tensor<T>*>(nullptr), &argmax);
  Tensor<T> dx({N, C});
  const T* dyd = dy.data();
  for (int64_t i = 0; i < static_cast<int64_t>(rows) * cols; ++i) {
    for (int c = 0; c < C; ++c) {
      const int64_t n = argmax[static_cast<size_t>(i * C + c)];
      if (n >= 0) dx(static_cast<int>(n), c) += dyd[i * C + c];
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// small elementwise helpers used by composite layers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank()) throw std::invalid_argument("concat_channels: rank mismatch");
  for (int i = 0; i + 1 < a.rank(); ++i)
    if (a.dim(i) != b.dim(i)) throw std::invalid_argument("concat_channels: leading dims differ");
  const int Ca = a.dim(a.rank() - 1), Cb = b.dim(b.rank() - 1);
  std::vector<int> shape = a.shape();
  shape.back() = Ca + Cb;
  Tensor<T> out(shape);
  const int64_t rows = a.size() / Ca;
  const T* ad = a.data();
  const T* bd = b.data();
  T* od = out.data();
  for (int64_t i = 0; i < rows; ++i) {
    std::copy(ad + i * Ca, ad + (i + 1) * Ca, od + i * (Ca + Cb));
    std::copy(bd + i * Cb, bd + (i + 1) * Cb, od + i * (Ca + Cb) + Ca);
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
  const int C = x.dim(x.rank() - 1);
  if (c0 < 0 || c1 > C || c0 >= c1) throw std::invalid_argument("slice_channels: bad range");
  std::vector<int> shape = x.shape();
  shape.back() = c1 - c0;
  Tensor<T> out(shape);
  const int64_t rows = x.size() / C;
  const T* xd = x.data();
  T* od = out.data();
  for (int64_t i = 0; i < rows; ++i) std::copy(xd + i * C + c0, xd + i * C + c1, od + i * (c1 - c0));
  return out;
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("hadamard: shape mismatch");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("add: shape mismatch");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("sub: shape mismatch");
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

}  // namespace pseq
