#pragma once

#include <filesystem>
#include <vector>

#include "pseq/dataio.hpp"
#include "pseq/geometry.hpp"
#include "pseq/grid.hpp"

namespace pseq {

/// Renders the core-frame point cloud, ground-truth boxes, and detections as
/// a static SVG. Vehicles blue, cyclists red, pedestrians green; every box
/// carries a heading arrow. Ground truths draw solid, detections dashed.
/// Output bytes are deterministic for fixed input.
void render_bev_svg(const Scan& core, const std::vector<RotatedBox>& ground_truths,
                    const std::vector<RotatedBox>& detections, const GridSpec& grid,
                    const std::filesystem::path& out_file);

}  // namespace pseq
