#pragma once

#include <array>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "pseq/dataio.hpp"
#include "pseq/geometry.hpp"
#include "pseq/ops.hpp"
#include "pseq/params.hpp"
#include "pseq/pillars.hpp"
#include "pseq/warp.hpp"

namespace pseq {

enum class MemoryPlacement { kBeforeBackbone, kAfterBackbone };
enum class Compensation { kPreprocessing, kInterpolation, kConv };

inline MemoryPlacement memory_placement_from_string(const std::string& s) {
  if (s == "before_backbone") return MemoryPlacement::kBeforeBackbone;
  if (s == "after_backbone") return MemoryPlacement::kAfterBackbone;
  throw std::invalid_argument("unknown memory_placement '" + s + "'");
}
inline Compensation compensation_from_string(const std::string& s) {
  if (s == "preprocessing") return Compensation::kPreprocessing;
  if (s == "interpolation") return Compensation::kInterpolation;
  if (s == "conv") return Compensation::kConv;
  throw std::invalid_argument("unknown compensation '" + s + "'");
}
inline const char* to_string(MemoryPlacement p) {
  return p == MemoryPlacement::kBeforeBackbone ? "before_backbone" : "after_backbone";
}
inline const char* to_string(Compensation c) {
  switch (c) {
    case Compensation::kPreprocessing: return "preprocessing";
    case Compensation::kInterpolation: return "interpolation";
    default: return "conv";
  }
}

struct ModelConfig {
  GridSpec grid;
  PillarConfig pillar;
  std::array<int, 3> stage_convs{2, 2, 2};  // convs per downsample stage
  MemoryPlacement placement = MemoryPlacement::kAfterBackbone;
  Compensation compensation = Compensation::kConv;
  bool aux_enabled = true;
  uint64_t init_seed = 1;

  int feature_channels() const { return 6 * pillar.channels; }
  /// GRU/hidden width at the memory placement point.
  int hidden_channels() const {
    return placement == MemoryPlacement::kAfterBackbone ? feature_channels() : pillar.channels;
  }
  GridSpec hidden_grid() const {
    return placement == MemoryPlacement::kAfterBackbone ? grid.at_stride(grid.output_stride) : grid;
  }
  void validate() const {
    grid.validate();
    if (grid.length() % 8 != 0 || grid.width() % 8 != 0)
      throw std::invalid_argument("ModelConfig: grid dims must be divisible by 8 (three stride-2 stages)");
    if (pillar.channels <= 0) throw std::invalid_argument("ModelConfig: channels must be positive");
    for (int n : stage_convs)
      if (n < 1) throw std::invalid_argument("ModelConfig: each stage needs at least one conv");
  }
};

// ---------------------------------------------------------------------------
// Conv2D-BN-ReLU block (no conv bias; the BN shift covers it).
// ---------------------------------------------------------------------------

template <typename T>
struct ConvBNRelu {
  struct Cache {
    Tensor<T> x;
    Tensor<T> conv_out;
    BatchNormCache<T> bn;
    Tensor<T> y;
  };

  void init(ParamStore<T>& store, const std::string& prefix, int kh, int cin, int cout, int stride_,
            std::mt19937_64& rng) {
    store_ = &store;
    prefix_ = prefix;
    stride = stride_;
    store.create_he_uniform(prefix + "/kernel", {kh, kh, cin, cout}, kh * kh * cin, rng);
    auto& gamma = store.create(prefix + "/bn/gamma", {cout});
    gamma.value.fill(T(1));
    store.create(prefix + "/bn/beta", {cout});
    store.create(prefix + "/bn/running_mean", {cout}, false);
    auto& rv = store.create(prefix + "/bn/running_var", {cout}, false);
    rv.value.fill(T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool training, Cache* cache) const {
    Tensor<T> conv = conv2d(x, store_->value(prefix_ + "/kernel"), Tensor<T>{}, stride, Padding::kSame);
    BatchNormCache<T> bn_cache;
    Tensor<T> bn = batchnorm(conv, store_->value(prefix_ + "/bn/gamma"), store_->value(prefix_ + "/bn/beta"),
                             store_->value(prefix_ + "/bn/running_mean"),
                             store_->value(prefix_ + "/bn/running_var"), training, T(1e-5), T(0.1),
                             cache ? &bn_cache : nullptr);
    Tensor<T> y = activation(bn, Act::kRelu);
    if (cache) {
      cache->x = x;
      cache->conv_out = std::move(conv);
      cache->bn = std::move(bn_cache);
      cache->y = y;
    }
    return y;
  }

  Tensor<T> backward(const Cache& cache, const Tensor<T>& dy) const {
    Tensor<T> dbn = activation_backward(cache.y, Act::kRelu, dy);
    auto bn_grads = batchnorm_backward(cache.bn, store_->value(prefix_ + "/bn/gamma"), dbn);
    store_->value(prefix_ + "/bn/gamma").accumulate_grad(bn_grads.dgamma);
    store_->value(prefix_ + "/bn/beta").accumulate_grad(bn_grads.dbeta);
    auto conv_grads =
        conv2d_backward(cache.x, store_->value(prefix_ + "/kernel"), stride, Padding::kSame, bn_grads.dx);
    store_->value(prefix_ + "/kernel").accumulate_grad(conv_grads.dkernel);
    return std::move(conv_grads.dx);
  }

  ParamStore<T>* store_ = nullptr;
  std::string prefix_;
  int stride = 1;
};

// Transposed-conv upsampling block with BN + ReLU.
template <typename T>
struct TConvBNRelu {
  struct Cache {
    Tensor<T> x;
    BatchNormCache<T> bn;
    Tensor<T> y;
  };

  void init(ParamStore<T>& store, const std::string& prefix, int cin, int cout, int stride_,
            std::mt19937_64& rng) {
    store_ = &store;
    prefix_ = prefix;
    stride = stride_;
    const int k = stride_ == 1 ? 3 : 2 * stride_;
    store.create_he_uniform(prefix + "/kernel", {k, k, cout, cin}, k * k * cin, rng);
    auto& gamma = store.create(prefix + "/bn/gamma", {cout});
    gamma.value.fill(T(1));
    store.create(prefix + "/bn/beta", {cout});
    store.create(prefix + "/bn/running_mean", {cout}, false);
    auto& rv = store.create(prefix + "/bn/running_var", {cout}, false);
    rv.value.fill(T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool training, Cache* cache) const {
    Tensor<T> conv = conv2d_transpose(x, store_->value(prefix_ + "/kernel"), Tensor<T>{}, stride);
    BatchNormCache<T> bn_cache;
    Tensor<T> bn = batchnorm(conv, store_->value(prefix_ + "/bn/gamma"), store_->value(prefix_ + "/bn/beta"),
                             store_->value(prefix_ + "/bn/running_mean"),
                             store_->value(prefix_ + "/bn/running_var"), training, T(1e-5), T(0.1),
                             cache ? &bn_cache : nullptr);
    Tensor<T> y = activation(bn, Act::kRelu);
    if (cache) {
      cache->x = x;
      cache->bn = std::move(bn_cache);
      cache->y = y;
    }
    return y;
  }

  Tensor<T> backward(const Cache& cache, const Tensor<T>& dy) const {
    Tensor<T> dbn = activation_backward(cache.y, Act::kRelu, dy);
    auto bn_grads = batchnorm_backward(cache.bn, store_->value(prefix_ + "/bn/gamma"), dbn);
    store_->value(prefix_ + "/bn/gamma").accumulate_grad(bn_grads.dgamma);
    store_->value(prefix_ + "/bn/beta").accumulate_grad(bn_grads.dbeta);
    auto grads = conv2d_transpose_backward(cache.x, store_->value(prefix_ + "/kernel"), stride, bn_grads.dx);
    store_->value(prefix_ + "/kernel").accumulate_grad(grads.dkernel);
    return std::move(grads.dx);
  }

  ParamStore<T>* store_ = nullptr;
  std::string prefix_;
  int stride = 2;
};

// ---------------------------------------------------------------------------
// Backbone: three stride-2 downsample stages (channels 2C/2C/4C), three
// upsample stages back to stride-2 resolution with 2C channels each,
// concatenated to 6C.
// ---------------------------------------------------------------------------

template <typename T>
struct Backbone {
  struct Cache {
    std::vector<std::vector<typename ConvBNRelu<T>::Cache>> down;
    std::vector<typename TConvBNRelu<T>::Cache> up;
  };

  void init(ParamStore<T>& store, int c, const std::array<int, 3>& stage_convs, std::mt19937_64& rng) {
    channels_in = c;
    const int stage_out[3] = {2 * c, 2 * c, 4 * c};
    down.assign(3, {});
    for (int s = 0; s < 3; ++s) {
      int cin = s == 0 ? c : stage_out[s - 1];
      for (int i = 0; i < stage_convs[static_cast<size_t>(s)]; ++i) {
        ConvBNRelu<T> block;
        block.init(store, "backbone/down" + std::to_string(s) + "/conv" + std::to_string(i), 3, cin,
                   stage_out[s], i == 0 ? 2 : 1, rng);
        down[static_cast<size_t>(s)].push_back(block);
        cin = stage_out[s];
      }
    }
    up.resize(3);
    for (int s = 0; s < 3; ++s) {
      up[static_cast<size_t>(s)].init(store, "backbone/up" + std::to_string(s), stage_out[s], 2 * c, 1 << s,
                                      rng);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, bool training, Cache* cache) const {
    if (cache) {
      cache->down.assign(3, {});
      cache->up.resize(3);
    }
    Tensor<T> cur = x;
    std::array<Tensor<T>, 3> stage_out;
    for (size_t s = 0; s < 3; ++s) {
      for (size_t i = 0; i < down[s].size(); ++i) {
        typename ConvBNRelu<T>::Cache c;
        cur = down[s][i].forward(cur, training, cache ? &c : nullptr);
        if (cache) cache->down[s].push_back(std::move(c));
      }
      stage_out[s] = cur;
    }
    Tensor<T> u0 = up[0].forward(stage_out[0], training, cache ? &cache->up[0] : nullptr);
    Tensor<T> u1 = up[1].forward(stage_out[1], training, cache ? &cache->up[1] : nullptr);
    Tensor<T> u2 = up[2].forward(stage_out[2], training, cache ? &cache->up[2] : nullptr);
    return concat_channels(concat_channels(u0, u1), u2);
  }

  Tensor<T> backward(const Cache& cache, const Tensor<T>& dy) const {
    const int c2 = dy.dim(3) / 3;
    Tensor<T> du0 = slice_channels(dy, 0, c2);
    Tensor<T> du1 = slice_channels(dy, c2, 2 * c2);
    Tensor<T> du2 = slice_channels(dy, 2 * c2, 3 * c2);
    Tensor<T> ds2 = up[2].backward(cache.up[2], du2);
    Tensor<T> ds1 = up[1].backward(cache.up[1], du1);
    Tensor<T> ds0 = up[0].backward(cache.up[0], du0);
    // stage 2 gradient flows back through its convs into stage 1, etc.
    Tensor<T> d = ds2;
    for (size_t s = 3; s-- > 0;) {
      for (size_t i = cache.down[s].size(); i-- > 0;) {
        d = down[s][i].backward(cache.down[s][i], d);
      }
      if (s == 2)
        d = add(d, ds1);
      else if (s == 1)
        d = add(d, ds0);
    }
    return d;
  }

  std::vector<std::vector<ConvBNRelu<T>>> down;
  std::vector<TConvBNRelu<T>> up;
  int channels_in = 0;
};

// ---------------------------------------------------------------------------
// convGRU step. Reset and update gates come from ONE fused convolution with
// doubled filters over concat(h_prev, x):
//   [r, z]  = sigmoid(W_g * [h, x] + b_g)
//   h_cand  = tanh(W_h * [r.h, x] + b_h)
//   h_new   = (1 - z) . h + z . h_cand
// ---------------------------------------------------------------------------

template <typename T>
struct ConvGRU {
  struct Cache {
    Tensor<T> h_prev, x;
    Tensor<T> cat_hx, cat_rhx;
    Tensor<T> r, z, h_cand;
  };

  struct InputGrads {
    Tensor<T> dh_prev, dx;
  };

  void init(ParamStore<T>& store, int channels, std::mt19937_64& rng) {
    store_ = &store;
    g_ = channels;
    store.create_he_uniform("gru/gates/kernel", {3, 3, 2 * channels, 2 * channels}, 9 * 2 * channels, rng);
    store.create("gru/gates/bias", {2 * channels});
    store.create_he_uniform("gru/cand/kernel", {3, 3, 2 * channels, channels}, 9 * 2 * channels, rng);
    store.create("gru/cand/bias", {channels});
  }

  int channels() const { return g_; }

  Tensor<T> forward(const Tensor<T>& h_prev, const Tensor<T>& x, Cache* cache) const {
    if (!h_prev.same_shape(x))
      throw std::invalid_argument("ConvGRU: hidden " + h_prev.shape_str() + " and input " + x.shape_str() +
                                  " must match");
    if (x.dim(3) != g_) throw std::invalid_argument("ConvGRU: channel mismatch");
    Tensor<T> cat_hx = concat_channels(h_prev, x);
    Tensor<T> gates =
        activation(conv2d(cat_hx, store_->value("gru/gates/kernel"), store_->value("gru/gates/bias"), 1),
                   Act::kSigmoid);
    Tensor<T> r = slice_channels(gates, 0, g_);
    Tensor<T> z = slice_channels(gates, g_, 2 * g_);
    Tensor<T> cat_rhx = concat_channels(hadamard(r, h_prev), x);
    Tensor<T> h_cand =
        activation(conv2d(cat_rhx, store_->value("gru/cand/kernel"), store_->value("gru/cand/bias"), 1),
                   Act::kTanh);
    Tensor<T> h(h_prev.shape());
    for (int64_t i = 0; i < h.size(); ++i) h[i] = (T(1) - z[i]) * h_prev[i] + z[i] * h_cand[i];
    if (cache) {
      cache->h_prev = h_prev;
      cache->x = x;
      cache->cat_hx = std::move(cat_hx);
      cache->cat_rhx = std::move(cat_rhx);
      cache->r = std::move(r);
      cache->z = std::move(z);
      cache->h_cand = std::move(h_cand);
    }
    return h;
  }

  InputGrads backward(const Cache& c, const Tensor<T>& dh) const {
    const int64_t n = dh.size();
    Tensor<T> dz(c.z.shape()), dh_cand(c.h_cand.shape());
    InputGrads out;
    out.dh_prev = Tensor<T>(c.h_prev.shape());
    for (int64_t i = 0; i < n; ++i) {
      dz[i] = dh[i] * (c.h_cand[i] - c.h_prev[i]);
      dh_cand[i] = dh[i] * c.z[i];
      out.dh_prev[i] = dh[i] * (T(1) - c.z[i]);
    }
    // candidate path
    Tensor<T> dc = activation_backward(c.h_cand, Act::kTanh, dh_cand);
    auto cand_grads = conv2d_backward(c.cat_rhx, store_->value("gru/cand/kernel"), 1, Padding::kSame, dc);
    store_->value("gru/cand/kernel").accumulate_grad(cand_grads.dkernel);
    store_->value("gru/cand/bias").accumulate_grad(cand_grads.dbias);
    Tensor<T> drh = slice_channels(cand_grads.dx, 0, g_);
    out.dx = slice_channels(cand_grads.dx, g_, 2 * g_);
    Tensor<T> dr(c.r.shape());
    for (int64_t i = 0; i < n; ++i) {
      dr[i] = drh[i] * c.h_prev[i];
      out.dh_prev[i] += drh[i] * c.r[i];
    }
    // fused gate path; sigmoid backward applied per gate slice
    Tensor<T> dgates = concat_channels(dr, dz);
    Tensor<T> gates = concat_channels(c.r, c.z);
    Tensor<T> dpre = activation_backward(gates, Act::kSigmoid, dgates);
    auto gate_grads = conv2d_backward(c.cat_hx, store_->value("gru/gates/kernel"), 1, Padding::kSame, dpre);
    store_->value("gru/gates/kernel").accumulate_grad(gate_grads.dkernel);
    store_->value("gru/gates/bias").accumulate_grad(gate_grads.dbias);
    Tensor<T> dcat_h = slice_channels(gate_grads.dx, 0, g_);
    Tensor<T> dcat_x = slice_channels(gate_grads.dx, g_, 2 * g_);
    for (int64_t i = 0; i < n; ++i) {
      out.dh_prev[i] += dcat_h[i];
      out.dx[i] += dcat_x[i];
    }
    return out;
  }

  ParamStore<T>* store_ = nullptr;
  int g_ = 0;
};

// ---------------------------------------------------------------------------
// Convolutional ego-motion compensation: the six relative-transform values
// are broadcast to a (H, W, 6) map, concatenated onto the hidden state, and
// one learned convolution maps the result back to the hidden shape.
// ---------------------------------------------------------------------------

/// The 6-value broadcast map for a transform: (r11, r12, r21, r22, tx, ty)
/// at every location.
template <typename T>
Tensor<T> motion_map(const Transform2D& t, int h, int w) {
  Tensor<T> out({1, h, w, 6});
  const auto vals = t.values();
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int k = 0; k < 6; ++k) out(0, i, j, k) = static_cast<T>(vals[static_cast<size_t>(k)]);
  return out;
}

template <typename T>
struct CompConv {
  struct Cache {
    Tensor<T> cat_in;
  };

  void init(ParamStore<T>& store, int channels, std::mt19937_64& rng) {
    store_ = &store;
    g_ = channels;
    store.create_he_uniform("comp/kernel", {3, 3, channels + 6, channels}, 9 * (channels + 6), rng);
    store.create("comp/bias", {channels});
  }

  Tensor<T> forward(const Tensor<T>& h_prev, const Transform2D& rel, Cache* cache) const {
    Tensor<T> cat_in = concat_channels(h_prev, motion_map<T>(rel, h_prev.dim(1), h_prev.dim(2)));
    Tensor<T> out = conv2d(cat_in, store_->value("comp/kernel"), store_->value("comp/bias"), 1);
    if (cache) cache->cat_in = std::move(cat_in);
    return out;
  }

  Tensor<T> backward(const Cache& c, const Tensor<T>& dy) const {
    auto grads = conv2d_backward(c.cat_in, store_->value("comp/kernel"), 1, Padding::kSame, dy);
    store_->value("comp/kernel").accumulate_grad(grads.dkernel);
    store_->value("comp/bias").accumulate_grad(grads.dbias);
    return slice_channels(grads.dx, 0, g_);
  }

  ParamStore<T>* store_ = nullptr;
  int g_ = 0;
};

// ---------------------------------------------------------------------------
// Train-only auxiliary head: two 3x3 convolutions with a ReLU between,
// regressed against the analytically warped hidden state.
// ---------------------------------------------------------------------------

template <typename T>
struct AuxHead {
  struct Cache {
    Tensor<T> x;
    Tensor<T> mid_pre;  // unused, kept empty
    Tensor<T> mid;      // post-ReLU
  };

  void init(ParamStore<T>& store, int channels, std::mt19937_64& rng) {
    store_ = &store;
    g_ = channels;
    store.create_he_uniform("aux/conv0/kernel", {3, 3, channels, channels}, 9 * channels, rng);
    store.create("aux/conv0/bias", {channels});
    store.create_he_uniform("aux/conv1/kernel", {3, 3, channels, channels}, 9 * channels, rng);
    store.create("aux/conv1/bias", {channels});
  }

  Tensor<T> forward(const Tensor<T>& x, bool training, Cache* cache) const {
    if (!training) throw std::logic_error("AuxHead: invoked at inference");
    ++invocations;
    Tensor<T> mid = activation(
        conv2d(x, store_->value("aux/conv0/kernel"), store_->value("aux/conv0/bias"), 1), Act::kRelu);
    Tensor<T> out = conv2d(mid, store_->value("aux/conv1/kernel"), store_->value("aux/conv1/bias"), 1);
    if (cache) {
      cache->x = x;
      cache->mid = std::move(mid);
    }
    return out;
  }

  Tensor<T> backward(const Cache& c, const Tensor<T>& dy) const {
    auto g1 = conv2d_backward(c.mid, store_->value("aux/conv1/kernel"), 1, Padding::kSame, dy);
    store_->value("aux/conv1/kernel").accumulate_grad(g1.dkernel);
    store_->value("aux/conv1/bias").accumulate_grad(g1.dbias);
    Tensor<T> dmid = activation_backward(c.mid, Act::kRelu, g1.dx);
    auto g0 = conv2d_backward(c.x, store_->value("aux/conv0/kernel"), 1, Padding::kSame, dmid);
    store_->value("aux/conv0/kernel").accumulate_grad(g0.dkernel);
    store_->value("aux/conv0/bias").accumulate_grad(g0.dbias);
    return std::move(g0.dx);
  }

  ParamStore<T>* store_ = nullptr;
  int g_ = 0;
  mutable int64_t invocations = 0;
};

// ---------------------------------------------------------------------------
// Anchor-free detection head: parallel 1x1 convolutions per cell.
// class probabilities (background + 3 classes, softmax), location offsets
// (dx, dy, z; linear), sizes (ReLU), heading (sin, cos; linear).
// ---------------------------------------------------------------------------

constexpr int kNumClassChannels = 4;  // background, vehicle, cyclist, pedestrian
constexpr int kBackgroundChannel = 0;

template <typename T>
struct HeadOut {
  Tensor<T> class_probs;  // (1, h, w, 4)
  Tensor<T> location;     // (1, h, w, 3)
  Tensor<T> size;         // (1, h, w, 3)
  Tensor<T> heading;      // (1, h, w, 2)
};

template <typename T>
struct HeadGrads {
  Tensor<T> dclass_probs, dlocation, dsize, dheading;
};

template <typename T>
struct DetectionHead {
  struct Cache {
    Tensor<T> x;
    HeadOut<T> out;
  };

  void init(ParamStore<T>& store, int cin, std::mt19937_64& rng) {
    store_ = &store;
    store.create_he_uniform("head/cls/kernel", {1, 1, cin, kNumClassChannels}, cin, rng);
    store.create("head/cls/bias", {kNumClassChannels});
    store.create_he_uniform("head/loc/kernel", {1, 1, cin, 3}, cin, rng);
    store.create("head/loc/bias", {3});
    store.create_he_uniform("head/size/kernel", {1, 1, cin, 3}, cin, rng);
    store.create("head/size/bias", {3});
    store.create_he_uniform("head/heading/kernel", {1, 1, cin, 2}, cin, rng);
    store.create("head/heading/bias", {2});
  }

  HeadOut<T> forward(const Tensor<T>& x, Cache* cache) const {
    HeadOut<T> out;
    out.class_probs = activation(
        conv2d(x, store_->value("head/cls/kernel"), store_->value("head/cls/bias"), 1), Act::kSoftmaxChannels);
    out.location = conv2d(x, store_->value("head/loc/kernel"), store_->value("head/loc/bias"), 1);
    out.size =
        activation(conv2d(x, store_->value("head/size/kernel"), store_->value("head/size/bias"), 1), Act::kRelu);
    out.heading = conv2d(x, store_->value("head/heading/kernel"), store_->value("head/heading/bias"), 1);
    if (cache) {
      cache->x = x;
      cache->out = out;
    }
    return out;
  }

  Tensor<T> backward(const Cache& c, const HeadGrads<T>& dg) const {
    Tensor<T> dx(c.x.shape());
    auto run = [&](const char* name, const Tensor<T>& dpre) {
      auto grads = conv2d_backward(c.x, store_->value(std::string("head/") + name + "/kernel"), 1,
                                   Padding::kSame, dpre);
      store_->value(std::string("head/") + name + "/kernel").accumulate_grad(grads.dkernel);
      store_->value(std::string("head/") + name + "/bias").accumulate_grad(grads.dbias);
      dx = add(dx, grads.dx);
    };
    run("cls", activation_backward(c.out.class_probs, Act::kSoftmaxChannels, dg.dclass_probs));
    run("loc", dg.dlocation);
    run("size", activation_backward(c.out.size, Act::kRelu, dg.dsize));
    run("heading", dg.dheading);
    return dx;
  }

  ParamStore<T>* store_ = nullptr;
};

// ---------------------------------------------------------------------------
// Full model: per-scan pillarize -> encode -> (memory before backbone?) ->
// backbone -> (memory after backbone?) -> head on the final scan.
// ---------------------------------------------------------------------------

template <typename T>
struct HiddenState {
  Tensor<T> h;  // (1, h, w, G); empty at sequence start
  Pose frame;   // ego pose the state is expressed in
  bool valid = false;
};

template <typename T>
class Model {
 public:
  // Per-scan intermediates retained for the training backward pass.
  struct StepCache {
    typename PillarEncoder<T>::Cache enc;
    typename Backbone<T>::Cache bb;
    typename ConvGRU<T>::Cache gru;
    typename CompConv<T>::Cache comp;
    bool comp_used = false;
    bool warp_used = false;
    Transform2D rel;
    Tensor<T> h_pre_comp;  // state entering compensation
  };

  struct TrainForward {
    HeadOut<T> out;
    typename DetectionHead<T>::Cache head;
    std::vector<StepCache> steps;  // warm-ups included only under BPTT
    bool aux_used = false;
    typename AuxHead<T>::Cache aux;
    Tensor<T> aux_out;
    Tensor<T> aux_target;  // warp of the raw previous state (constant)
    HiddenState<T> state;
  };

  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg.init_seed);
    encoder_.init(params_, cfg.pillar, rng);
    backbone_.init(params_, cfg.pillar.channels, cfg.stage_convs, rng);
    gru_.init(params_, cfg.hidden_channels(), rng);
    comp_.init(params_, cfg.hidden_channels(), rng);
    aux_.init(params_, cfg.hidden_channels(), rng);
    head_.init(params_, cfg.feature_channels(), rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const AuxHead<T>& aux_head() const { return aux_; }

  /// Sets the classifier bias so the initial softmax matches the given class
  /// frequencies (background, vehicle, cyclist, pedestrian).
  void init_classifier_bias(const std::array<double, kNumClassChannels>& freqs) {
    double total = 0;
    std::array<double, kNumClassChannels> f = freqs;
    for (auto& x : f) {
      if (x < 1e-6) x = 1e-6;
      total += x;
    }
    Tensor<T>& bias = params_.value("head/cls/bias");
    for (int i = 0; i < kNumClassChannels; ++i)
      bias[i] = static_cast<T>(std::log(f[static_cast<size_t>(i)] / total));
  }

  /// Inference over (the last `use_scans` of) a sequence. The hidden state is
  /// zero-initialized at sequence start; the auxiliary head is never invoked.
  std::pair<HeadOut<T>, HiddenState<T>> forward(const Sequence& seq, int use_scans = -1) {
    const int n = static_cast<int>(seq.scans.size());
    const int first = use_scans < 0 ? 0 : std::max(0, n - use_scans);
    HiddenState<T> state;
    for (int s = first; s < n - 1; ++s) run_step(seq, s, state, /*training=*/false, nullptr, false);
    Tensor<T> feats = run_step(seq, n - 1, state, /*training=*/false, nullptr, true);
    HeadOut<T> out = head_.forward(feats, nullptr);
    return {out, state};
  }

  /// Training pass: `warmups` scans carry the hidden state (gradient cut
  /// unless `bptt`), then the core frame runs with caches retained.
  TrainForward train_forward(const Sequence& seq, int warmups, bool bptt) {
    const int n = static_cast<int>(seq.scans.size());
    if (warmups > n - 1) throw std::invalid_argument("train_forward: not enough past scans");
    const int first = n - 1 - warmups;
    TrainForward tf;
    HiddenState<T> state;
    for (int s = first; s < n - 1; ++s) {
      if (bptt) {
        StepCache cache;
        run_step(seq, s, state, /*training=*/true, &cache, false);
        tf.steps.push_back(std::move(cache));
      } else {
        run_step(seq, s, state, /*training=*/true, nullptr, false);
      }
    }
    StepCache cache;
    Tensor<T> h_raw_prev = state.valid ? state.h : Tensor<T>();
    Tensor<T> feats = run_step(seq, n - 1, state, /*training=*/true, &cache, true);
    // auxiliary supervision of the compensation conv on the final step
    if (cfg_.aux_enabled && cfg_.compensation == Compensation::kConv && cache.comp_used) {
      tf.aux_used = true;
      tf.aux_out = aux_.forward(cache.gru.h_prev, /*training=*/true, &tf.aux);
      Tensor<T> h3 = squeeze_batch(h_raw_prev);
      tf.aux_target = expand_batch(warp_feature_map(h3, cache.rel, cfg_.hidden_grid()));
    }
    tf.steps.push_back(std::move(cache));
    tf.out = head_.forward(feats, &tf.head);
    tf.state = state;
    return tf;
  }

  /// Backpropagates head (and auxiliary) gradients, accumulating parameter
  /// gradients. `daux` may be empty when the aux task was unused.
  void train_backward(const TrainForward& tf, const HeadGrads<T>& dhead, const Tensor<T>& daux) {
    Tensor<T> dfeat = head_.backward(tf.head, dhead);
    Tensor<T> dh;  // gradient flowing into the previous hidden state
    for (size_t s = tf.steps.size(); s-- > 0;) {
      const StepCache& cache = tf.steps[s];
      const bool is_final = (s + 1 == tf.steps.size());
      Tensor<T> dh_step;  // gradient on this step's GRU output
      if (cfg_.placement == MemoryPlacement::kAfterBackbone) {
        dh_step = is_final ? dfeat : dh;
      } else {
        // head gradient reaches the final hidden state through the backbone
        dh_step = is_final ? backbone_.backward(cache.bb, dfeat) : dh;
      }
      auto gru_grads = gru_.backward(cache.gru, dh_step);
      Tensor<T> dh_comp = std::move(gru_grads.dh_prev);
      if (is_final && tf.aux_used) {
        Tensor<T> daux_in = aux_.backward(tf.aux, daux);
        dh_comp = add(dh_comp, daux_in);
      }
      if (cache.comp_used) {
        dh = comp_.backward(cache.comp, dh_comp);
      } else if (cache.warp_used) {
        dh = expand_batch(
            warp_feature_map_backward(cache.rel, cfg_.hidden_grid(), squeeze_batch(dh_comp)));
      } else {
        dh = std::move(dh_comp);  // identity compensation (or sequence start)
      }
      Tensor<T> dpseudo;
      if (cfg_.placement == MemoryPlacement::kAfterBackbone) {
        dpseudo = backbone_.backward(cache.bb, gru_grads.dx);
      } else {
        dpseudo = std::move(gru_grads.dx);
      }
      encoder_.backward(cache.enc, squeeze_batch(dpseudo));
    }
  }

  static Tensor<T> expand_batch(const Tensor<T>& t3) {
    Tensor<T> out({1, t3.dim(0), t3.dim(1), t3.dim(2)});
    std::copy(t3.data(), t3.data() + t3.size(), out.data());
    return out;
  }
  static Tensor<T> squeeze_batch(const Tensor<T>& t4) {
    Tensor<T> out({t4.dim(1), t4.dim(2), t4.dim(3)});
    std::copy(t4.data(), t4.data() + t4.size(), out.data());
    return out;
  }

 private:
  /// One scan through the pipeline. Updates `state`; returns the feature map
  /// the head consumes when `is_final`. With the memory before the backbone,
  /// warm-up scans skip the backbone entirely (only the state matters).
  Tensor<T> run_step(const Sequence& seq, int scan_idx, HiddenState<T>& state, bool training,
                     StepCache* cache, bool is_final) {
    const Scan& scan = seq.scans[static_cast<size_t>(scan_idx)];
    Tensor<T> pts = scan.points.template cast<T>();
    if (cfg_.compensation == Compensation::kPreprocessing) {
      const Pose rel = relative_transform(seq.core().pose, scan.pose);
      pts = transform_points(pts, rel);
    }
    Pillarized<T> pil = pillarize(pts, cfg_.grid);
    typename PillarEncoder<T>::Cache enc_cache;
    Tensor<T> pseudo =
        expand_batch(encoder_.forward(pil, cfg_.grid, training, cache ? &enc_cache : nullptr));

    Tensor<T> gru_input;
    typename Backbone<T>::Cache bb_cache;
    if (cfg_.placement == MemoryPlacement::kAfterBackbone) {
      gru_input = backbone_.forward(pseudo, training, cache ? &bb_cache : nullptr);
    } else {
      gru_input = std::move(pseudo);
    }

    // hidden state: zeros at sequence start, compensated otherwise
    Tensor<T> h_prev;
    bool comp_used = false, warp_used = false;
    Transform2D rel2d;
    typename CompConv<T>::Cache comp_cache;
    if (!state.valid) {
      h_prev = Tensor<T>(gru_input.shape());
    } else {
      rel2d = extract_2d(relative_transform(scan.pose, state.frame));
      switch (cfg_.compensation) {
        case Compensation::kPreprocessing:
          h_prev = state.h;  // features already share the core frame
          break;
        case Compensation::kInterpolation:
          h_prev = expand_batch(warp_feature_map(squeeze_batch(state.h), rel2d, cfg_.hidden_grid()));
          warp_used = true;
          break;
        case Compensation::kConv:
          h_prev = comp_.forward(state.h, rel2d, cache ? &comp_cache : nullptr);
          comp_used = true;
          break;
      }
    }

    typename ConvGRU<T>::Cache gru_cache;
    Tensor<T> h = gru_.forward(h_prev, gru_input, cache ? &gru_cache : nullptr);
    if (cache) {
      cache->enc = std::move(enc_cache);
      cache->bb = std::move(bb_cache);
      cache->gru = std::move(gru_cache);
      cache->comp = std::move(comp_cache);
      cache->comp_used = comp_used;
      cache->warp_used = warp_used;
      cache->rel = rel2d;
      cache->h_pre_comp = state.valid ? state.h : Tensor<T>();
    }
    state.h = h;
    state.frame = scan.pose;
    state.valid = true;

    if (cfg_.placement == MemoryPlacement::kAfterBackbone) return h;
    if (!is_final) return Tensor<T>();
    typename Backbone<T>::Cache bb2;
    Tensor<T> feats = backbone_.forward(h, training, cache ? &bb2 : nullptr);
    if (cache) cache->bb = std::move(bb2);
    return feats;
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
  PillarEncoder<T> encoder_;
  Backbone<T> backbone_;
  ConvGRU<T> gru_;
  CompConv<T> comp_;
  AuxHead<T> aux_;
  DetectionHead<T> head_;
};

}  // namespace pseq
