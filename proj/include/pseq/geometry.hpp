#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pseq/tensor.hpp"

namespace pseq {

/// Wraps an angle into (-pi, pi].
inline double normalize_angle(double a) {
  a = std::fmod(a + M_PI, 2.0 * M_PI);
  if (a <= 0.0) a += 2.0 * M_PI;
  return a - M_PI;
}

/// Rigid ego-to-world transform, 4x4 homogeneous, row-major, meters.
struct Pose {
  std::array<double, 16> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

  static Pose identity() { return Pose{}; }
  static Pose from_xy_yaw(double x, double y, double yaw, double z = 0.0);

  double at(int r, int c) const { return m[static_cast<size_t>(r * 4 + c)]; }
  double& at(int r, int c) { return m[static_cast<size_t>(r * 4 + c)]; }

  /// Rotation block orthonormal within tol and last row (0,0,0,1).
  bool valid(double tol = 1e-6) const;
  void require_valid() const;

  Pose compose(const Pose& rhs) const;  // this * rhs
  Pose inverse() const;                 // rigid inverse

  std::array<double, 3> apply(double x, double y, double z) const;
};

/// 2D reduction of a relative pose: rotation sub-block entries and BEV
/// translation, (r11, r12, r21, r22, tx, ty).
struct Transform2D {
  double r11 = 1, r12 = 0, r21 = 0, r22 = 1, tx = 0, ty = 0;

  std::array<double, 6> values() const { return {r11, r12, r21, r22, tx, ty}; }
  std::array<double, 2> apply(double x, double y) const { return {r11 * x + r12 * y + tx, r21 * x + r22 * y + ty}; }
  Transform2D inverse() const;
  bool is_identity(double tol = 1e-12) const;
};

enum class BoxClass : int { kVehicle = 0, kCyclist = 1, kPedestrian = 2, kUnclear = 3 };

const char* to_string(BoxClass c);
BoxClass box_class_from_string(const std::string& s);

/// BEV-rotated 3D box. `length` runs along the heading, `width` across it.
struct RotatedBox {
  double cx = 0, cy = 0, cz = 0;
  double length = 0, width = 0, height = 0;
  double yaw = 0;  // radians in (-pi, pi]
  BoxClass cls = BoxClass::kVehicle;
  double score = 1.0;

  double bev_range() const { return std::hypot(cx, cy); }
  std::array<std::array<double, 2>, 4> bev_corners() const;
};

/// (pose_now)^-1 * pose_prev; maps previous-frame coordinates into the
/// current frame. Both poses are validated.
Pose relative_transform(const Pose& pose_now, const Pose& pose_prev);

/// Reads the 2D rotation/translation entries out of a relative pose.
Transform2D extract_2d(const Pose& rel);

/// Applies a homogeneous transform to every point row (first three columns;
/// any trailing columns pass through).
template <typename T>
Tensor<T> transform_points(const Tensor<T>& points, const Pose& rel) {
  if (points.rank() != 2 || points.dim(1) < 3)
    throw std::invalid_argument("transform_points: points must be N x D with D >= 3");
  Tensor<T> out = points;
  const int n = points.dim(0);
  for (int i = 0; i < n; ++i) {
    const auto p = rel.apply(points(i, 0), points(i, 1), points(i, 2));
    out(i, 0) = static_cast<T>(p[0]);
    out(i, 1) = static_cast<T>(p[1]);
    out(i, 2) = static_cast<T>(p[2]);
  }
  return out;
}

/// Exact intersection-over-union of the two BEV rectangles (convex clipping
/// plus shoelace area). Zero-area boxes give 0.
double rotated_iou_bev(const RotatedBox& a, const RotatedBox& b);

/// Greedy per-class suppression in descending score order; ties break toward
/// the lower input index. Survivors keep pairwise same-class IoU < threshold.
std::vector<RotatedBox> nms(const std::vector<RotatedBox>& boxes, double iou_threshold);

}  // namespace pseq
