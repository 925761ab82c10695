#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pseq/geometry.hpp"
#include "pseq/tensor.hpp"

namespace pseq {

/// One LiDAR sweep: N x 4 rows of (x, y, z, intensity) in the ego frame of
/// this scan, the ego-to-world pose, and a timestamp in seconds.
struct Scan {
  Tensorf points{std::vector<int>{0, 4}};
  Pose pose;
  double timestamp = 0.0;
};

/// Ordered scans ending in the annotated core frame. Annotations are boxes
/// in the core frame's ego coordinates.
struct Sequence {
  std::vector<Scan> scans;
  std::vector<RotatedBox> annotations;

  const Scan& core() const { return scans.back(); }
  int past_count() const { return static_cast<int>(scans.size()) - 1; }
  void validate() const;
};

/// Uniform random subsample without replacement down to `budget` rows; under
/// budget the input passes through unchanged. Selected rows keep their
/// original relative order. No per-pillar truncation or padding is ever
/// applied anywhere downstream of this.
Tensorf apply_point_budget(const Tensorf& points, int budget, uint64_t seed);

// Scan file: magic "TPSCAN1\0", u32 version=1, u32 point count, then per
// point 4 little-endian f32 (x, y, z, intensity).
void save_scan_points(const std::filesystem::path& path, const Tensorf& points);
Tensorf load_scan_points(const std::filesystem::path& path);

// Sequence directory: manifest.json {scans:[{file,pose:[16 f64],timestamp}],
// core_annotations:[{cx,cy,cz,l,w,h,yaw,class}]} plus the per-scan binaries.
void save_sequence(const Sequence& seq, const std::filesystem::path& dir);
Sequence load_sequence(const std::filesystem::path& dir_or_manifest);

// Dataset index: index.json {sequences:[reldir,...]} in the dataset root.
void save_dataset_index(const std::filesystem::path& root, const std::vector<std::string>& seq_dirs);
std::vector<std::filesystem::path> load_dataset_index(const std::filesystem::path& root);

}  // namespace pseq
