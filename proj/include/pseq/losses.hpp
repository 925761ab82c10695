#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "pseq/geometry.hpp"
#include "pseq/grid.hpp"
#include "pseq/network.hpp"
#include "pseq/tensor.hpp"

namespace pseq {

struct LossConfig {
  double focal_alpha = 0.5;
  double focal_gamma = 2.0;
  double huber_delta_loc = 1.0;    // location and size
  double huber_delta_angle = 3.0;  // sin/cos heading
  std::array<double, kNumClassChannels> class_weights{1, 1, 1, 1};
  double lambda_aux = 0.5;
  double w_loc = 2.0;
  double w_ang = 1.0;
  int k_min = 1, k_max = 9;  // warm-up scan count range

  void validate() const {
    if (focal_gamma < 0) throw std::invalid_argument("LossConfig: gamma must be >= 0");
    if (huber_delta_loc <= 0 || huber_delta_angle <= 0)
      throw std::invalid_argument("LossConfig: huber delta must be > 0");
    for (double w : class_weights)
      if (w <= 0) throw std::invalid_argument("LossConfig: class weights must be > 0");
    if (k_min < 0 || k_max < k_min) throw std::invalid_argument("LossConfig: bad warm-up range");
  }
};

/// Per-cell targets on the head grid. Regression channels are
/// (dx, dy, z, l, w, h, sin yaw, cos yaw); they are defined only where the
/// foreground mask is set. The foreground and unclear masks are disjoint.
template <typename T>
struct TargetMaps {
  Tensor<T> class_onehot;  // (h, w, 4)
  Tensor<T> regression;    // (h, w, 8)
  std::vector<uint8_t> foreground;
  std::vector<uint8_t> unclear;
  int out_of_grid = 0;  // boxes whose center fell outside the grid
};

constexpr int kRegChannels = 8;

/// Assigns every box to the single head-grid cell containing its BEV center.
/// The nearer-to-ego box wins collisions; "unclear" boxes mark their cell
/// excluded from every loss.
template <typename T>
TargetMaps<T> build_targets(const std::vector<RotatedBox>& annotations, const GridSpec& head_grid) {
  const int h = head_grid.length(), w = head_grid.width();
  TargetMaps<T> maps;
  maps.class_onehot = Tensor<T>({h, w, kNumClassChannels});
  maps.regression = Tensor<T>({h, w, kRegChannels});
  maps.foreground.assign(static_cast<size_t>(h) * w, 0);
  maps.unclear.assign(static_cast<size_t>(h) * w, 0);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) maps.class_onehot(i, j, kBackgroundChannel) = T(1);

  std::vector<double> cell_range(static_cast<size_t>(h) * w, 1e30);
  for (const auto& box : annotations) {
    int row, col;
    if (!head_grid.locate(box.cx, box.cy, &row, &col)) {
      ++maps.out_of_grid;
      continue;
    }
    const size_t flat = static_cast<size_t>(row) * w + col;
    const double range = box.bev_range();
    if (range >= cell_range[flat]) continue;  // an earlier, nearer box keeps the cell
    cell_range[flat] = range;

    for (int c = 0; c < kNumClassChannels; ++c) maps.class_onehot(row, col, c) = T(0);
    if (box.cls == BoxClass::kUnclear) {
      maps.unclear[flat] = 1;
      maps.foreground[flat] = 0;
      maps.class_onehot(row, col, kBackgroundChannel) = T(1);  // placeholder, masked anyway
      for (int c = 0; c < kRegChannels; ++c) maps.regression(row, col, c) = T(0);
      continue;
    }
    maps.unclear[flat] = 0;
    maps.foreground[flat] = 1;
    maps.class_onehot(row, col, static_cast<int>(box.cls) + 1) = T(1);
    maps.regression(row, col, 0) = static_cast<T>(box.cx - head_grid.center_x(row));
    maps.regression(row, col, 1) = static_cast<T>(box.cy - head_grid.center_y(col));
    maps.regression(row, col, 2) = static_cast<T>(box.cz);
    maps.regression(row, col, 3) = static_cast<T>(box.length);
    maps.regression(row, col, 4) = static_cast<T>(box.width);
    maps.regression(row, col, 5) = static_cast<T>(box.height);
    maps.regression(row, col, 6) = static_cast<T>(std::sin(box.yaw));
    maps.regression(row, col, 7) = static_cast<T>(std::cos(box.yaw));
  }
  return maps;
}

template <typename T>
struct LossResult {
  double value = 0.0;
  Tensor<T> grad;  // w.r.t. the prediction tensor
};

/// Mean over non-unclear cells of -alpha * w_c * (1 - p_t)^gamma * log(p_t),
/// where p_t is the predicted probability of the target class. Probabilities
/// are clamped to [1e-7, 1 - 1e-7].
template <typename T>
LossResult<T> focal_loss(const Tensor<T>& probs, const Tensor<T>& class_onehot,
                         const std::vector<uint8_t>& unclear_mask, double alpha, double gamma,
                         const std::array<double, kNumClassChannels>& class_weights) {
  const int C = kNumClassChannels;
  const int64_t cells = probs.size() / C;
  if (class_onehot.size() != probs.size()) throw std::invalid_argument("focal_loss: target shape mismatch");
  LossResult<T> res;
  res.grad = Tensor<T>(probs.shape());
  int64_t counted = 0;
  for (int64_t i = 0; i < cells; ++i)
    if (!unclear_mask[static_cast<size_t>(i)]) ++counted;
  if (counted == 0) return res;

  constexpr double eps = 1e-7;
  double total = 0;
  for (int64_t i = 0; i < cells; ++i) {
    if (unclear_mask[static_cast<size_t>(i)]) continue;
    int target = -1;
    for (int c = 0; c < C; ++c)
      if (class_onehot[i * C + c] > T(0.5)) target = c;
    const double wc = alpha * class_weights[static_cast<size_t>(target)];
    const double p_raw = static_cast<double>(probs[i * C + target]);
    const double p = std::min(std::max(p_raw, eps), 1.0 - eps);
    const double one_m = 1.0 - p;
    const double pow_g = std::pow(one_m, gamma);
    total += -wc * pow_g * std::log(p);
    if (p_raw > eps && p_raw < 1.0 - eps) {
      // d/dp [ (1-p)^g log p ] = -g (1-p)^(g-1) log p + (1-p)^g / p
      const double dpow = gamma > 0 ? gamma * std::pow(one_m, gamma - 1.0) : 0.0;
      const double d = -wc * (-dpow * std::log(p) + pow_g / p);
      res.grad[i * C + target] = static_cast<T>(d / static_cast<double>(counted));
    }
  }
  res.value = total / static_cast<double>(counted);
  return res;
}

/// Masked mean of the Huber penalty; `mask` is per cell and broadcasts over
/// the channel axis. Zero masked cells give a zero loss and gradient.
template <typename T>
LossResult<T> huber_loss(const Tensor<T>& pred, const Tensor<T>& target, const std::vector<uint8_t>& mask,
                         double delta) {
  if (!pred.same_shape(target) && pred.size() != target.size())
    throw std::invalid_argument("huber_loss: shape mismatch");
  const int C = pred.dim(pred.rank() - 1);
  const int64_t cells = pred.size() / C;
  LossResult<T> res;
  res.grad = Tensor<T>(pred.shape());
  int64_t counted = 0;
  for (int64_t i = 0; i < cells; ++i)
    if (mask[static_cast<size_t>(i)]) ++counted;
  if (counted == 0) return res;
  const double norm = 1.0 / (static_cast<double>(counted) * C);
  double total = 0;
  for (int64_t i = 0; i < cells; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    for (int c = 0; c < C; ++c) {
      const double e = static_cast<double>(pred[i * C + c]) - static_cast<double>(target[i * C + c]);
      if (std::abs(e) <= delta)
        total += 0.5 * e * e;
      else
        total += delta * (std::abs(e) - 0.5 * delta);
      res.grad[i * C + c] = static_cast<T>(std::clamp(e, -delta, delta) * norm);
    }
  }
  res.value = total * norm;
  return res;
}

/// Huber on every element (the auxiliary regression has no mask).
template <typename T>
LossResult<T> huber_loss_dense(const Tensor<T>& pred, const Tensor<T>& target, double delta) {
  const int C = pred.dim(pred.rank() - 1);
  std::vector<uint8_t> all(static_cast<size_t>(pred.size() / C), 1);
  return huber_loss(pred, target, all, delta);
}

/// log of the (clamped, renormalized) class frequencies; with zero classifier
/// weights the initial softmax then reproduces the frequencies.
inline std::array<double, kNumClassChannels> bias_init(std::array<double, kNumClassChannels> freqs) {
  double total = 0;
  for (auto& f : freqs) {
    if (f < 1e-6) f = 1e-6;
    total += f;
  }
  std::array<double, kNumClassChannels> out{};
  for (size_t i = 0; i < freqs.size(); ++i) out[i] = std::log(freqs[i] / total);
  return out;
}

}  // namespace pseq
