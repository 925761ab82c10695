#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace pseq {

/// BEV grid geometry. Rows index the x range (length L), columns the y range
/// (width W); cells are square. Half-open extents: a point belongs to the
/// grid iff x in [x_min, x_max) and y in [y_min, y_max).
struct GridSpec {
  double x_min = 0.0, x_max = 48.0;
  double y_min = -16.0, y_max = 16.0;
  double cell = 0.5;
  int output_stride = 2;  // head grid resolution relative to the encoder grid

  int length() const { return static_cast<int>(std::llround((x_max - x_min) / cell)); }
  int width() const { return static_cast<int>(std::llround((y_max - y_min) / cell)); }

  void validate() const {
    if (cell <= 0) throw std::invalid_argument("GridSpec: cell size must be positive");
    const double lf = (x_max - x_min) / cell;
    const double wf = (y_max - y_min) / cell;
    if (std::abs(lf - std::llround(lf)) > 1e-9 || std::abs(wf - std::llround(wf)) > 1e-9)
      throw std::invalid_argument("GridSpec: extents must be integral multiples of the cell size");
    if (length() <= 0 || width() <= 0) throw std::invalid_argument("GridSpec: empty grid");
    if (output_stride < 1) throw std::invalid_argument("GridSpec: output stride must be >= 1");
  }

  /// Same extents at a coarser resolution (e.g. the head grid at stride 2).
  GridSpec at_stride(int s) const {
    GridSpec g = *this;
    g.cell = cell * s;
    g.output_stride = 1;
    if (length() % s != 0 || width() % s != 0)
      throw std::invalid_argument("GridSpec: dims not divisible by stride " + std::to_string(s));
    return g;
  }

  double center_x(int row) const { return x_min + (row + 0.5) * cell; }
  double center_y(int col) const { return y_min + (col + 0.5) * cell; }

  /// Row/col of the cell containing (x, y); false if outside the grid.
  bool locate(double x, double y, int* row, int* col) const {
    if (x < x_min || x >= x_max || y < y_min || y >= y_max) return false;
    int r = static_cast<int>(std::floor((x - x_min) / cell));
    int c = static_cast<int>(std::floor((y - y_min) / cell));
    // guard the upper edge against rounding
    if (r >= length()) r = length() - 1;
    if (c >= width()) c = width() - 1;
    *row = r;
    *col = c;
    return true;
  }
};

}  // namespace pseq
