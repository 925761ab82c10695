#include "pseq/svg.hpp"

#include <cstdio>
#include <fstream>

namespace pseq {

namespace {

constexpr double kPxPerMeter = 12.0;

const char* class_color(BoxClass c) {
  switch (c) {
    case BoxClass::kVehicle: return "#1f77b4";     // blue
    case BoxClass::kCyclist: return "#d62728";     // red
    case BoxClass::kPedestrian: return "#2ca02c";  // green
    case BoxClass::kUnclear: return "#7f7f7f";
  }
  return "#7f7f7f";
}

struct Mapper {
  const GridSpec& grid;
  // x (forward) points up in the image, y (left) points left
  double px(double y) const { return (grid.y_max - y) * kPxPerMeter; }
  double py(double x) const { return (grid.x_max - x) * kPxPerMeter; }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

void write_box(std::ofstream& f, const Mapper& m, const RotatedBox& b, const char* role,
               const char* dash) {
  const auto corners = b.bev_corners();
  f << "<polygon class=\"" << role << "-box\" points=\"";
  for (const auto& c : corners) f << fmt(m.px(c[1])) << "," << fmt(m.py(c[0])) << " ";
  f << "\" fill=\"none\" stroke=\"" << class_color(b.cls) << "\" stroke-width=\"1.5\"" << dash << "/>\n";
  // heading arrow from center to the front face midpoint
  const double fx = b.cx + std::cos(b.yaw) * b.length * 0.5;
  const double fy = b.cy + std::sin(b.yaw) * b.length * 0.5;
  f << "<line class=\"" << role << "-arrow\" x1=\"" << fmt(m.px(b.cy)) << "\" y1=\"" << fmt(m.py(b.cx))
    << "\" x2=\"" << fmt(m.px(fy)) << "\" y2=\"" << fmt(m.py(fx)) << "\" stroke=\"" << class_color(b.cls)
    << "\" stroke-width=\"1.5\"" << dash << "/>\n";
}

}  // namespace

void render_bev_svg(const Scan& core, const std::vector<RotatedBox>& ground_truths,
                    const std::vector<RotatedBox>& detections, const GridSpec& grid,
                    const std::filesystem::path& out_file) {
  std::ofstream f(out_file);
  if (!f) throw std::runtime_error("render_bev_svg: cannot open " + out_file.string());
  const Mapper m{grid};
  const double width = (grid.y_max - grid.y_min) * kPxPerMeter;
  const double height = (grid.x_max - grid.x_min) * kPxPerMeter;
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width) << "\" height=\"" << fmt(height)
    << "\" viewBox=\"0 0 " << fmt(width) << " " << fmt(height) << "\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"#0d0d12\"/>\n";
  f << "<g class=\"points\">\n";
  for (int i = 0; i < core.points.dim(0); ++i) {
    const double x = core.points(i, 0), y = core.points(i, 1);
    if (x < grid.x_min || x >= grid.x_max || y < grid.y_min || y >= grid.y_max) continue;
    f << "<circle cx=\"" << fmt(m.px(y)) << "\" cy=\"" << fmt(m.py(x)) << "\" r=\"0.8\" fill=\"#b0b6c0\"/>\n";
  }
  f << "</g>\n<g class=\"ground-truths\">\n";
  for (const auto& b : ground_truths) write_box(f, m, b, "gt", "");
  f << "</g>\n<g class=\"detections\">\n";
  for (const auto& b : detections) write_box(f, m, b, "det", " stroke-dasharray=\"4 3\"");
  f << "</g>\n</svg>\n";
  if (!f) throw std::runtime_error("render_bev_svg: write failed for " + out_file.string());
}

}  // namespace pseq
