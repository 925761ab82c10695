#pragma once

#include "pseq/geometry.hpp"
#include "pseq/grid.hpp"
#include "pseq/tensor.hpp"

namespace pseq {

/// Bilinear resampling of a BEV feature map under the inverse of `rel2d`.
/// Each output cell reads the input at the location the cell's world
/// position had in the previous frame; taps outside the grid read as 0.
template <typename T>
Tensor<T> warp_feature_map(const Tensor<T>& features, const Transform2D& rel2d, const GridSpec& grid) {
  if (features.rank() != 3) throw std::invalid_argument("warp_feature_map: features must be H x W x C");
  const int H = features.dim(0), W = features.dim(1), C = features.dim(2);
  if (H != grid.length() || W != grid.width())
    throw std::invalid_argument("warp_feature_map: grid " + std::to_string(grid.length()) + "x" +
                                std::to_string(grid.width()) + " does not match features " + features.shape_str());
  const Transform2D inv = rel2d.inverse();
  Tensor<T> out({H, W, C});
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      const auto src = inv.apply(grid.center_x(i), grid.center_y(j));
      const double u = (src[0] - grid.x_min) / grid.cell - 0.5;
      const double v = (src[1] - grid.y_min) / grid.cell - 0.5;
      const int i0 = static_cast<int>(std::floor(u));
      const int j0 = static_cast<int>(std::floor(v));
      const double fu = u - i0, fv = v - j0;
      const double w00 = (1 - fu) * (1 - fv), w01 = (1 - fu) * fv, w10 = fu * (1 - fv), w11 = fu * fv;
      T* orow = &out(i, j, 0);
      auto tap = [&](int ii, int jj, double wgt) {
        if (wgt == 0.0 || ii < 0 || ii >= H || jj < 0 || jj >= W) return;
        const T* frow = &features(ii, jj, 0);
        for (int c = 0; c < C; ++c) orow[c] += static_cast<T>(wgt) * frow[c];
      };
      tap(i0, j0, w00);
      tap(i0, j0 + 1, w01);
      tap(i0 + 1, j0, w10);
      tap(i0 + 1, j0 + 1, w11);
    }
  }
  return out;
}

/// Adjoint of warp_feature_map (the warp is linear in the features).
template <typename T>
Tensor<T> warp_feature_map_backward(const Transform2D& rel2d, const GridSpec& grid, const Tensor<T>& dy) {
  const int H = dy.dim(0), W = dy.dim(1), C = dy.dim(2);
  const Transform2D inv = rel2d.inverse();
  Tensor<T> dx({H, W, C});
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      const auto src = inv.apply(grid.center_x(i), grid.center_y(j));
      const double u = (src[0] - grid.x_min) / grid.cell - 0.5;
      const double v = (src[1] - grid.y_min) / grid.cell - 0.5;
      const int i0 = static_cast<int>(std::floor(u));
      const int j0 = static_cast<int>(std::floor(v));
      const double fu = u - i0, fv = v - j0;
      const T* dyrow = &dy(i, j, 0);
      auto tap = [&](int ii, int jj, double wgt) {
        if (wgt == 0.0 || ii < 0 || ii >= H || jj < 0 || jj >= W) return;
        T* drow = &dx(ii, jj, 0);
        for (int c = 0; c < C; ++c) drow[c] += static_cast<T>(wgt) * dyrow[c];
      };
      tap(i0, j0, (1 - fu) * (1 - fv));
      tap(i0, j0 + 1, (1 - fu) * fv);
      tap(i0 + 1, j0, fu * (1 - fv));
      tap(i0 + 1, j0 + 1, fu * fv);
    }
  }
  return dx;
}

}  // namespace pseq
