#include "pseq/geometry.hpp"

#include <algorithm>
#include <numeric>

namespace pseq {

Pose Pose::from_xy_yaw(double x, double y, double yaw, double z) {
  Pose p;
  const double c = std::cos(yaw), s = std::sin(yaw);
  p.at(0, 0) = c;
  p.at(0, 1) = -s;
  p.at(1, 0) = s;
  p.at(1, 1) = c;
  p.at(0, 3) = x;
  p.at(1, 3) = y;
  p.at(2, 3) = z;
  return p;
}

bool Pose::valid(double tol) const {
  // R * R^T == I
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0;
      for (int k = 0; k < 3; ++k) dot += at(i, k) * at(j, k);
      if (std::abs(dot - (i == j ? 1.0 : 0.0)) > tol) return false;
    }
  }
  const double last[4] = {0, 0, 0, 1};
  for (int j = 0; j < 4; ++j)
    if (std::abs(at(3, j) - last[j]) > tol) return false;
  return true;
}

void Pose::require_valid() const {
  if (!valid()) throw std::invalid_argument("Pose: rotation block not orthonormal or bad last row");
}

Pose Pose::compose(const Pose& rhs) const {
  Pose out;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0;
      for (int k = 0; k < 4; ++k) acc += at(i, k) * rhs.at(k, j);
      out.at(i, j) = acc;
    }
  return out;
}

Pose Pose::inverse() const {
  require_valid();
  Pose out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out.at(i, j) = at(j, i);
  for (int i = 0; i < 3; ++i) {
    double acc = 0;
    for (int k = 0; k < 3; ++k) acc += at(k, i) * at(k, 3);
    out.at(i, 3) = -acc;
  }
  return out;
}

std::array<double, 3> Pose::apply(double x, double y, double z) const {
  return {at(0, 0) * x + at(0, 1) * y + at(0, 2) * z + at(0, 3),
          at(1, 0) * x + at(1, 1) * y + at(1, 2) * z + at(1, 3),
          at(2, 0) * x + at(2, 1) * y + at(2, 2) * z + at(2, 3)};
}

Transform2D Transform2D::inverse() const {
  // 2x2 block of a rigid transform: inverse is the transpose.
  Transform2D inv;
  inv.r11 = r11;
  inv.r12 = r21;
  inv.r21 = r12;
  inv.r22 = r22;
  inv.tx = -(inv.r11 * tx + inv.r12 * ty);
  inv.ty = -(inv.r21 * tx + inv.r22 * ty);
  return inv;
}

bool Transform2D::is_identity(double tol) const {
  return std::abs(r11 - 1) <= tol && std::abs(r12) <= tol && std::abs(r21) <= tol && std::abs(r22 - 1) <= tol &&
         std::abs(tx) <= tol && std::abs(ty) <= tol;
}

const char* to_string(BoxClass c) {
  switch (c) {
    case BoxClass::kVehicle: return "vehicle";
    case BoxClass::kCyclist: return "cyclist";
    case BoxClass::kPedestrian: return "pedestrian";
    case BoxClass::kUnclear: return "unclear";
  }
  return "unclear";
}

BoxClass box_class_from_string(const std::string& s) {
  if (s == "vehicle") return BoxClass::kVehicle;
  if (s == "cyclist") return BoxClass::kCyclist;
  if (s == "pedestrian") return BoxClass::kPedestrian;
  if (s == "unclear") return BoxClass::kUnclear;
  throw std::invalid_argument("unknown box class '" + s + "'");
}

std::array<std::array<double, 2>, 4> RotatedBox::bev_corners() const {
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double hl = length / 2.0, hw = width / 2.0;
  // counter-clockwise order
  const double lx[4] = {hl, -hl, -hl, hl};
  const double ly[4] = {hw, hw, -hw, -hw};
  std::array<std::array<double, 2>, 4> out;
  for (int i = 0; i < 4; ++i) {
    out[static_cast<size_t>(i)] = {cx + c * lx[i] - s * ly[i], cy + s * lx[i] + c * ly[i]};
  }
  return out;
}

Pose relative_transform(const Pose& pose_now, const Pose& pose_prev) {
  pose_now.require_valid();
  pose_prev.require_valid();
  if (pose_now.m == pose_prev.m) return Pose::identity();  // exact, no roundoff
  return pose_now.inverse().compose(pose_prev);
}

Transform2D extract_2d(const Pose& rel) {
  Transform2D t;
  t.r11 = rel.at(0, 0);
  t.r12 = rel.at(0, 1);
  t.r21 = rel.at(1, 0);
  t.r22 = rel.at(1, 1);
  t.tx = rel.at(0, 3);
  t.ty = rel.at(1, 3);
  return t;
}

namespace {

using Poly = std::vector<std::array<double, 2>>;

double shoelace_area(const Poly& p) {
  double a = 0;
  const size_t n = p.size();
  for (size_t i = 0; i < n; ++i) {
    const auto& u = p[i];
    const auto& v = p[(i + 1) % n];
    a += u[0] * v[1] - v[0] * u[1];
  }
  return 0.5 * a;
}

// Sutherland-Hodgman clip of `poly` by the half-plane left of edge a->b.
Poly clip_edge(const Poly& poly, const std::array<double, 2>& a, const std::array<double, 2>& b) {
  Poly out;
  const size_t n = poly.size();
  if (n == 0) return out;
  auto side = [&](const std::array<double, 2>& p) {
    return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
  };
  for (size_t i = 0; i < n; ++i) {
    const auto& cur = poly[i];
    const auto& nxt = poly[(i + 1) % n];
    const double sc = side(cur), sn = side(nxt);
    if (sc >= 0) out.push_back(cur);
    if ((sc > 0 && sn < 0) || (sc < 0 && sn > 0)) {
      const double t = sc / (sc - sn);
      out.push_back({cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])});
    }
  }
  return out;
}

}  // namespace

double rotated_iou_bev(const RotatedBox& a, const RotatedBox& b) {
  const double area_a = a.length * a.width;
  const double area_b = b.length * b.width;
  if (area_a <= 0.0 || area_b <= 0.0) return 0.0;
  const auto ca = a.bev_corners();
  const auto cb = b.bev_corners();
  Poly poly(ca.begin(), ca.end());
  for (int i = 0; i < 4 && !poly.empty(); ++i) {
    poly = clip_edge(poly, cb[static_cast<size_t>(i)], cb[static_cast<size_t>((i + 1) % 4)]);
  }
  double inter = poly.size() >= 3 ? std::abs(shoelace_area(poly)) : 0.0;
  inter = std::min(inter, std::min(area_a, area_b));
  const double uni = area_a + area_b - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<RotatedBox> nms(const std::vector<RotatedBox>& boxes, double iou_threshold) {
  std::vector<size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t i, size_t j) { return boxes[i].score > boxes[j].score; });
  std::vector<char> suppressed(boxes.size(), 0);
  std::vector<RotatedBox> kept;
  for (size_t oi = 0; oi < order.size(); ++oi) {
    const size_t i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(boxes[i]);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      const size_t j = order[oj];
      if (suppressed[j] || boxes[j].cls != boxes[i].cls) continue;
      if (rotated_iou_bev(boxes[i], boxes[j]) >= iou_threshold) suppressed[j] = 1;
    }
  }
  return kept;
}

}  // namespace pseq
