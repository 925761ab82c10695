#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pseq/geometry.hpp"
#include "pseq/grid.hpp"
#include "pseq/network.hpp"

namespace pseq {

struct EvalConfig {
  double score_threshold = 0.1;
  double nms_iou = 0.5;
  std::vector<double> match_thresholds{0.5, 1.0, 2.0, 4.0};  // meters
  double tp_threshold = 2.0;                                 // matches feeding the TP errors
  std::vector<double> bin_edges{50.0, 100.0};                // range bins, half-open
  bool normalize_ate = false;  // divide translation error by max(1, gt range)
};

/// Per-cell head output -> boxes: argmax over the non-background classes,
/// score filtering, yaw from atan2(sin, cos), then per-class NMS.
template <typename T>
std::vector<RotatedBox> decode_detections(const HeadOut<T>& head, const GridSpec& head_grid,
                                          double score_threshold, double nms_iou) {
  const int h = head.class_probs.dim(1), w = head.class_probs.dim(2);
  if (h != head_grid.length() || w != head_grid.width())
    throw std::invalid_argument("decode_detections: head grid mismatch");
  std::vector<RotatedBox> boxes;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      int arg_all = 0;
      for (int c = 1; c < kNumClassChannels; ++c)
        if (head.class_probs(0, i, j, c) > head.class_probs(0, i, j, arg_all)) arg_all = c;
      if (arg_all == kBackgroundChannel) continue;
      int best = 1;
      for (int c = 2; c < kNumClassChannels; ++c)
        if (head.class_probs(0, i, j, c) > head.class_probs(0, i, j, best)) best = c;
      const double score = static_cast<double>(head.class_probs(0, i, j, best));
      if (score < score_threshold) continue;
      RotatedBox b;
      b.cx = head_grid.center_x(i) + static_cast<double>(head.location(0, i, j, 0));
      b.cy = head_grid.center_y(j) + static_cast<double>(head.location(0, i, j, 1));
      b.cz = static_cast<double>(head.location(0, i, j, 2));
      b.length = static_cast<double>(head.size(0, i, j, 0));
      b.width = static_cast<double>(head.size(0, i, j, 1));
      b.height = static_cast<double>(head.size(0, i, j, 2));
      const double s = static_cast<double>(head.heading(0, i, j, 0));
      const double c = static_cast<double>(head.heading(0, i, j, 1));
      b.yaw = (s == 0.0 && c == 0.0) ? 0.0 : normalize_angle(std::atan2(s, c));
      b.cls = static_cast<BoxClass>(best - 1);
      b.score = score;
      boxes.push_back(b);
    }
  }
  return nms(boxes, nms_iou);
}

struct MatchPair {
  int det = -1, gt = -1;
  double dist = 0;
};

struct MatchResult {
  std::vector<MatchPair> matches;
  std::vector<int> unmatched_dets;
  std::vector<int> unmatched_gts;
};

/// Greedy one-to-one matching in descending score order: each detection takes
/// the nearest unmatched same-class ground truth within the BEV distance
/// threshold. Ties break toward lower indices.
MatchResult match_detections(const std::vector<RotatedBox>& dets, const std::vector<RotatedBox>& gts,
                             double distance_threshold);

/// One frame's detections and ground truths, both in core-frame coordinates.
struct FrameDetections {
  std::vector<RotatedBox> dets;
  std::vector<RotatedBox> gts;
};

/// AP for one class at one distance threshold over a set of frames:
/// per-frame greedy matching, pooled PR curve by descending score, trapezoid
/// integration over recall. NaN when the class has no ground truths.
double average_precision_single(const std::vector<FrameDetections>& frames, BoxClass cls,
                                double distance_threshold);

/// Mean over the configured distance thresholds; NaN when undefined.
double average_precision(const std::vector<FrameDetections>& frames, BoxClass cls,
                         const std::vector<double>& thresholds);

struct TpErrors {
  double mate = 1.0, mase = 1.0, maoe = 1.0;
  int64_t matches = 0;
};

/// Translation (BEV meters), scale (1 - aligned 3D IoU) and orientation
/// (|dyaw| wrapped to [0, pi]) means over the matched pairs.
TpErrors tp_errors(const std::vector<FrameDetections>& frames, double tp_threshold, bool normalize_ate);

/// NDS = (5 mAP + sum_e (1 - min(1, e))) / 8.
double nds(double map, double mate, double mase, double maoe);

struct MetricsReport {
  std::map<std::string, double> per_class_ap;  // classes with ground truths only
  double map = 0.0;
  double mate = 1.0, mase = 1.0, maoe = 1.0;
  double nds_value = 0.0;
  // bin label -> class -> AP (only defined entries)
  std::vector<std::pair<std::string, std::map<std::string, double>>> bin_ap;
  int64_t total_gts = 0;
  int64_t total_dets = 0;
  int64_t frames = 0;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Full nuScenes-style aggregation including the distance-binned breakdown.
MetricsReport evaluate_detections(const std::vector<FrameDetections>& frames, const EvalConfig& cfg);

/// Range-binned AP: ground truths and detections are partitioned by their own
/// BEV range; bins are half-open, the last reaches infinity.
std::vector<std::pair<std::string, std::map<std::string, double>>> distance_binned_eval(
    const std::vector<FrameDetections>& frames, const EvalConfig& cfg);

// Detections file: JSON array of {cx, cy, cz, l, w, h, yaw, class, score}.
nlohmann::json detections_to_json(const std::vector<RotatedBox>& dets);
std::vector<RotatedBox> detections_from_json(const nlohmann::json& j);

}  // namespace pseq
