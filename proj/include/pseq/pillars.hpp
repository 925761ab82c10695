#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "pseq/grid.hpp"
#include "pseq/ops.hpp"
#include "pseq/params.hpp"
#include "pseq/tensor.hpp"

namespace pseq {

/// Pillar encoder dimensions. D is the per-point decoration width, C the
/// encoder output channels, N_t the global point budget. There is no
/// per-pillar point cap: clouds are budgeted as a whole.
struct PillarConfig {
  int decoration = 9;
  int channels = 16;
  int point_budget = 200000;
};

/// Decorated in-grid points plus their flat pillar indices (row * W + col).
template <typename T>
struct Pillarized {
  Tensor<T> decorated{std::vector<int>{0, 9}};  // N' x D
  std::vector<int64_t> cell;                    // N'
  int dropped = 0;                              // points outside the grid
};

/// Dynamic voxelization: drops out-of-grid points and decorates the rest to
/// D = 9 channels (x, y, z, intensity, offsets to the pillar's point mean,
/// offsets to the pillar's geometric center). Points are put into a canonical
/// order (by pillar, then by value) so the result is independent of the input
/// permutation, bitwise.
template <typename T>
Pillarized<T> pillarize(const Tensor<T>& points, const GridSpec& grid) {
  if (points.rank() != 2 || points.dim(1) != 4)
    throw std::invalid_argument("pillarize: points must be N x 4");
  grid.validate();
  const int n = points.dim(0);
  const int w = grid.width();

  struct Entry {
    int64_t cell;
    int idx;
  };
  std::vector<Entry> kept;
  kept.reserve(static_cast<size_t>(n));
  Pillarized<T> out;
  for (int i = 0; i < n; ++i) {
    int row, col;
    if (!grid.locate(points(i, 0), points(i, 1), &row, &col)) {
      ++out.dropped;
      continue;
    }
    kept.push_back({static_cast<int64_t>(row) * w + col, i});
  }
  std::sort(kept.begin(), kept.end(), [&](const Entry& a, const Entry& b) {
    if (a.cell != b.cell) return a.cell < b.cell;
    for (int j = 0; j < 4; ++j) {
      if (points(a.idx, j) != points(b.idx, j)) return points(a.idx, j) < points(b.idx, j);
    }
    return false;
  });

  const int m = static_cast<int>(kept.size());
  out.decorated = Tensor<T>({m, 9});
  out.cell.resize(static_cast<size_t>(m));

  int start = 0;
  while (start < m) {
    int end = start;
    while (end < m && kept[static_cast<size_t>(end)].cell == kept[static_cast<size_t>(start)].cell) ++end;
    double sx = 0, sy = 0, sz = 0;
    for (int k = start; k < end; ++k) {
      const int i = kept[static_cast<size_t>(k)].idx;
      sx += static_cast<double>(points(i, 0));
      sy += static_cast<double>(points(i, 1));
      sz += static_cast<double>(points(i, 2));
    }
    const double inv = 1.0 / (end - start);
    const double mx = sx * inv, my = sy * inv, mz = sz * inv;
    const int64_t cell = kept[static_cast<size_t>(start)].cell;
    const int row = static_cast<int>(cell / w), col = static_cast<int>(cell % w);
    const double px = grid.center_x(row), py = grid.center_y(col);
    for (int k = start; k < end; ++k) {
      const int i = kept[static_cast<size_t>(k)].idx;
      out.cell[static_cast<size_t>(k)] = cell;
      T* d = &out.decorated(k, 0);
      d[0] = points(i, 0);
      d[1] = points(i, 1);
      d[2] = points(i, 2);
      d[3] = points(i, 3);
      d[4] = static_cast<T>(static_cast<double>(points(i, 0)) - mx);
      d[5] = static_cast<T>(static_cast<double>(points(i, 1)) - my);
      d[6] = static_cast<T>(static_cast<double>(points(i, 2)) - mz);
      d[7] = static_cast<T>(static_cast<double>(points(i, 0)) - px);
      d[8] = static_cast<T>(static_cast<double>(points(i, 1)) - py);
    }
    start = end;
  }
  return out;
}

/// Pointwise linear map + batchnorm + ReLU on the decorated points, then
/// scatter-max into the BEV grid. There is no per-pillar pooling anywhere in
/// this path; the scatter-max is the only reduction.
template <typename T>
class PillarEncoder {
 public:
  struct Cache {
    Tensor<T> decorated;
    std::vector<int64_t> cell;
    Tensor<T> lin_out;
    BatchNormCache<T> bn;
    Tensor<T> relu_out;
    int rows = 0, cols = 0;
  };

  PillarEncoder() = default;

  void init(ParamStore<T>& store, const PillarConfig& cfg, std::mt19937_64& rng) {
    store_ = &store;
    d_ = cfg.decoration;
    c_ = cfg.channels;
    store.create_he_uniform("encoder/linear/kernel", {d_, c_}, d_, rng);
    store.create("encoder/linear/bias", {c_});
    auto& gamma = store.create("encoder/bn/gamma", {c_});
    gamma.value.fill(T(1));
    store.create("encoder/bn/beta", {c_});
    store.create("encoder/bn/running_mean", {c_}, /*trainable=*/false);
    auto& rv = store.create("encoder/bn/running_var", {c_}, /*trainable=*/false);
    rv.value.fill(T(1));
  }

  int channels() const { return c_; }

  /// Returns the pseudo-image (L, W, C). Zero points give an all-zero map.
  Tensor<T> forward(const Pillarized<T>& pil, const GridSpec& grid, bool training, Cache* cache) const {
    const int rows = grid.length(), cols = grid.width();
    if (pil.decorated.dim(1) != d_)
      throw std::invalid_argument("PillarEncoder: decoration width " + std::to_string(pil.decorated.dim(1)) +
                                  " != configured " + std::to_string(d_));
    if (pil.decorated.dim(0) == 0) {
      if (cache) *cache = Cache{Tensor<T>({0, d_}), {}, Tensor<T>({0, c_}), {}, Tensor<T>({0, c_}), rows, cols};
      return Tensor<T>({rows, cols, c_});
    }
    Tensor<T> lin = linear(pil.decorated, store_->value("encoder/linear/kernel"),
                           store_->value("encoder/linear/bias"));
    BatchNormCache<T> bn_cache;
    Tensor<T> bn = batchnorm(lin, store_->value("encoder/bn/gamma"), store_->value("encoder/bn/beta"),
                             store_->value("encoder/bn/running_mean"), store_->value("encoder/bn/running_var"),
                             training, T(1e-5), T(0.1), cache ? &bn_cache : nullptr);
    Tensor<T> act = activation(bn, Act::kRelu);
    Tensor<T> pseudo = scatter_max(act, pil.cell, rows, cols);
    if (cache) {
      cache->decorated = pil.decorated;
      cache->cell = pil.cell;
      cache->lin_out = std::move(lin);
      cache->bn = std::move(bn_cache);
      cache->relu_out = std::move(act);
      cache->rows = rows;
      cache->cols = cols;
    }
    return pseudo;
  }

  /// Accumulates parameter gradients; returns the gradient w.r.t. the
  /// decorated point features.
  Tensor<T> backward(const Cache& cache, const Tensor<T>& dpseudo) const {
    if (cache.decorated.dim(0) == 0) return Tensor<T>({0, d_});
    Tensor<T> dact = scatter_max_backward(cache.relu_out, cache.cell, cache.rows, cache.cols, dpseudo);
    Tensor<T> dbn = activation_backward(cache.relu_out, Act::kRelu, dact);
    auto bn_grads = batchnorm_backward(cache.bn, store_->value("encoder/bn/gamma"), dbn);
    accumulate(*store_, "encoder/bn/gamma", bn_grads.dgamma);
    accumulate(*store_, "encoder/bn/beta", bn_grads.dbeta);
    auto lin_grads = linear_backward(cache.decorated, store_->value("encoder/linear/kernel"), bn_grads.dx);
    accumulate(*store_, "encoder/linear/kernel", lin_grads.dw);
    accumulate(*store_, "encoder/linear/bias", lin_grads.dbias);
    return lin_grads.dx;
  }

 private:
  static void accumulate(ParamStore<T>& store, const std::string& name, const Tensor<T>& g) {
    store.value(name).accumulate_grad(g);
  }

  ParamStore<T>* store_ = nullptr;
  int d_ = 9;
  int c_ = 16;
};

}  // namespace pseq
