#include "pseq/evaluation.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace pseq {

namespace {

const std::array<BoxClass, 3> kEvalClasses = {BoxClass::kVehicle, BoxClass::kCyclist, BoxClass::kPedestrian};

struct ScoredFlag {
  double score;
  bool tp;
};

// aligned 3D IoU: centers and yaws equalized, dims as given
double aligned_iou(const RotatedBox& a, const RotatedBox& b) {
  const double inter = std::min(a.length, b.length) * std::min(a.width, b.width) * std::min(a.height, b.height);
  const double va = a.length * a.width * a.height;
  const double vb = b.length * b.width * b.height;
  const double uni = va + vb - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

}  // namespace

MatchResult match_detections(const std::vector<RotatedBox>& dets, const std::vector<RotatedBox>& gts,
                             double distance_threshold) {
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t i, size_t j) { return dets[i].score > dets[j].score; });

  MatchResult res;
  std::vector<char> gt_taken(gts.size(), 0);
  std::vector<char> det_matched(dets.size(), 0);
  for (size_t oi : order) {
    const RotatedBox& d = dets[oi];
    int best = -1;
    double best_dist = distance_threshold;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (gt_taken[g] || gts[g].cls != d.cls) continue;
      const double dist = std::hypot(d.cx - gts[g].cx, d.cy - gts[g].cy);
      if (dist < best_dist || (dist == best_dist && best < 0)) {
        best_dist = dist;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      gt_taken[static_cast<size_t>(best)] = 1;
      det_matched[oi] = 1;
      res.matches.push_back({static_cast<int>(oi), best, best_dist});
    }
  }
  for (size_t i = 0; i < dets.size(); ++i)
    if (!det_matched[i]) res.unmatched_dets.push_back(static_cast<int>(i));
  for (size_t g = 0; g < gts.size(); ++g)
    if (!gt_taken[g]) res.unmatched_gts.push_back(static_cast<int>(g));
  return res;
}

double average_precision_single(const std::vector<FrameDetections>& frames, BoxClass cls,
                                double distance_threshold) {
  int64_t n_gt = 0;
  std::vector<ScoredFlag> pool;
  for (const auto& frame : frames) {
    std::vector<RotatedBox> dets, gts;
    for (const auto& d : frame.dets)
      if (d.cls == cls) dets.push_back(d);
    for (const auto& g : frame.gts)
      if (g.cls == cls) gts.push_back(g);
    n_gt += static_cast<int64_t>(gts.size());
    MatchResult m = match_detections(dets, gts, distance_threshold);
    std::vector<char> tp(dets.size(), 0);
    for (const auto& pair : m.matches) tp[static_cast<size_t>(pair.det)] = 1;
    for (size_t i = 0; i < dets.size(); ++i) pool.push_back({dets[i].score, tp[i] != 0});
  }
  if (n_gt == 0) return std::nan("");
  if (pool.empty()) return 0.0;
  std::stable_sort(pool.begin(), pool.end(), [](const ScoredFlag& a, const ScoredFlag& b) {
    return a.score > b.score;
  });
  // trapezoid over the (recall, precision) points after each detection, with
  // the curve extended flat to recall 0
  double ap = 0.0;
  int64_t tp_count = 0;
  double prev_recall = 0.0, prev_precision = 1.0;
  for (size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].tp) ++tp_count;
    const double recall = static_cast<double>(tp_count) / static_cast<double>(n_gt);
    const double precision = static_cast<double>(tp_count) / static_cast<double>(i + 1);
    if (i == 0) prev_precision = precision;
    ap += (recall - prev_recall) * 0.5 * (precision + prev_precision);
    prev_recall = recall;
    prev_precision = precision;
  }
  return ap;
}

double average_precision(const std::vector<FrameDetections>& frames, BoxClass cls,
                         const std::vector<double>& thresholds) {
  double sum = 0;
  for (double thr : thresholds) {
    const double ap = average_precision_single(frames, cls, thr);
    if (std::isnan(ap)) return std::nan("");
    sum += ap;
  }
  return sum / static_cast<double>(thresholds.size());
}

TpErrors tp_errors(const std::vector<FrameDetections>& frames, double tp_threshold, bool normalize_ate) {
  TpErrors e;
  double sum_t = 0, sum_s = 0, sum_o = 0;
  int64_t n = 0;
  for (const auto& frame : frames) {
    MatchResult m = match_detections(frame.dets, frame.gts, tp_threshold);
    for (const auto& pair : m.matches) {
      const RotatedBox& d = frame.dets[static_cast<size_t>(pair.det)];
      const RotatedBox& g = frame.gts[static_cast<size_t>(pair.gt)];
      double terr = pair.dist;
      if (normalize_ate) terr /= std::max(1.0, g.bev_range());
      sum_t += terr;
      sum_s += 1.0 - aligned_iou(d, g);
      sum_o += std::abs(normalize_angle(d.yaw - g.yaw));
      ++n;
    }
  }
  if (n == 0) return e;  // worst case 1.0 everywhere
  e.mate = sum_t / static_cast<double>(n);
  e.mase = sum_s / static_cast<double>(n);
  e.maoe = sum_o / static_cast<double>(n);
  e.matches = n;
  return e;
}

double nds(double map, double mate, double mase, double maoe) {
  double score = 5.0 * map;
  for (double err : {mate, mase, maoe}) score += 1.0 - std::min(1.0, err);
  return score / 8.0;
}

namespace {

std::vector<std::pair<double, double>> bin_ranges(const std::vector<double>& edges) {
  std::vector<std::pair<double, double>> bins;
  double lo = 0.0;
  for (double e : edges) {
    bins.emplace_back(lo, e);
    lo = e;
  }
  bins.emplace_back(lo, std::numeric_limits<double>::infinity());
  return bins;
}

std::string bin_label(double lo, double hi) {
  std::ostringstream os;
  if (std::isinf(hi))
    os << "[" << lo << ", inf)";
  else
    os << "[" << lo << ", " << hi << ")";
  return os.str();
}

}  // namespace

std::vector<std::pair<std::string, std::map<std::string, double>>> distance_binned_eval(
    const std::vector<FrameDetections>& frames, const EvalConfig& cfg) {
  std::vector<std::pair<std::string, std::map<std::string, double>>> out;
  for (const auto& [lo, hi] : bin_ranges(cfg.bin_edges)) {
    std::vector<FrameDetections> binned;
    binned.reserve(frames.size());
    for (const auto& frame : frames) {
      FrameDetections fb;
      for (const auto& d : frame.dets)
        if (d.bev_range() >= lo && d.bev_range() < hi) fb.dets.push_back(d);
      for (const auto& g : frame.gts)
        if (g.bev_range() >= lo && g.bev_range() < hi) fb.gts.push_back(g);
      binned.push_back(std::move(fb));
    }
    std::map<std::string, double> per_class;
    for (BoxClass cls : kEvalClasses) {
      const double ap = average_precision(binned, cls, cfg.match_thresholds);
      if (!std::isnan(ap)) per_class[to_string(cls)] = ap;
    }
    out.emplace_back(bin_label(lo, hi), std::move(per_class));
  }
  return out;
}

MetricsReport evaluate_detections(const std::vector<FrameDetections>& frames, const EvalConfig& cfg) {
  MetricsReport report;
  report.frames = static_cast<int64_t>(frames.size());
  for (const auto& frame : frames) {
    report.total_dets += static_cast<int64_t>(frame.dets.size());
    report.total_gts += static_cast<int64_t>(frame.gts.size());
  }
  double ap_sum = 0;
  int defined = 0;
  for (BoxClass cls : kEvalClasses) {
    const double ap = average_precision(frames, cls, cfg.match_thresholds);
    if (std::isnan(ap)) continue;
    report.per_class_ap[to_string(cls)] = ap;
    ap_sum += ap;
    ++defined;
  }
  report.map = defined ? ap_sum / defined : 0.0;
  const TpErrors errs = tp_errors(frames, cfg.tp_threshold, cfg.normalize_ate);
  report.mate = errs.mate;
  report.mase = errs.mase;
  report.maoe = errs.maoe;
  report.nds_value = nds(report.map, report.mate, report.mase, report.maoe);
  report.bin_ap = distance_binned_eval(frames, cfg);
  return report;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["per_class_ap"] = per_class_ap;
  j["mAP"] = map;
  j["mATE"] = mate;
  j["mASE"] = mase;
  j["mAOE"] = maoe;
  j["NDS"] = nds_value;
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& [label, per_class] : bin_ap) {
    bins.push_back({{"bin", label}, {"ap", per_class}});
  }
  j["distance_bins"] = bins;
  j["counts"] = {{"frames", frames}, {"ground_truths", total_gts}, {"detections", total_dets}};
  return j;
}

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "NDS " << nds_value << " | mAP " << map << " | mATE " << mate << " | mASE " << mase << " | mAOE "
     << maoe << "\n";
  os << "per-class AP:";
  for (const auto& [cls, ap] : per_class_ap) os << "  " << cls << " " << ap;
  os << "\n";
  for (const auto& [label, per_class] : bin_ap) {
    os << "  bin " << label << ":";
    if (per_class.empty()) os << "  (no ground truths)";
    for (const auto& [cls, ap] : per_class) os << "  " << cls << " " << ap;
    os << "\n";
  }
  os << "frames " << frames << ", gts " << total_gts << ", dets " << total_dets << "\n";
  return os.str();
}

nlohmann::json detections_to_json(const std::vector<RotatedBox>& dets) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& b : dets) {
    arr.push_back({{"cx", b.cx},
                   {"cy", b.cy},
                   {"cz", b.cz},
                   {"l", b.length},
                   {"w", b.width},
                   {"h", b.height},
                   {"yaw", b.yaw},
                   {"class", to_string(b.cls)},
                   {"score", b.score}});
  }
  return arr;
}

std::vector<RotatedBox> detections_from_json(const nlohmann::json& j) {
  std::vector<RotatedBox> out;
  for (const auto& e : j) {
    RotatedBox b;
    b.cx = e.at("cx").get<double>();
    b.cy = e.at("cy").get<double>();
    b.cz = e.at("cz").get<double>();
    b.length = e.at("l").get<double>();
    b.width = e.at("w").get<double>();
    b.height = e.at("h").get<double>();
    b.yaw = e.at("yaw").get<double>();
    b.cls = box_class_from_string(e.at("class").get<std::string>());
    b.score = e.at("score").get<double>();
    out.push_back(b);
  }
  return out;
}

}  // namespace pseq
