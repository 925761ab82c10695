#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "pseq/evaluation.hpp"
#include "pseq/losses.hpp"

using namespace pseq;

namespace {

GridSpec head_grid_32() {
  GridSpec g;
  g.x_min = 0;
  g.x_max = 32;
  g.y_min = -16;
  g.y_max = 16;
  g.cell = 1.0;
  return g;
}

RotatedBox box_at(double cx, double cy, BoxClass cls, double score = 1.0, double yaw = 0.0,
                  double l = 2.0, double w = 1.0, double h = 1.5) {
  RotatedBox b;
  b.cx = cx;
  b.cy = cy;
  b.cz = h / 2;
  b.length = l;
  b.width = w;
  b.height = h;
  b.yaw = yaw;
  b.cls = cls;
  b.score = score;
  return b;
}

/// Builds the head output that encodes the given targets with full confidence.
HeadOut<double> head_from_targets(const TargetMaps<double>& maps, const GridSpec& g) {
  const int h = g.length(), w = g.width();
  HeadOut<double> out;
  out.class_probs = Tensord({1, h, w, 4});
  out.location = Tensord({1, h, w, 3});
  out.size = Tensord({1, h, w, 3});
  out.heading = Tensord({1, h, w, 2});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      for (int c = 0; c < 4; ++c) out.class_probs(0, i, j, c) = maps.class_onehot(i, j, c);
      for (int c = 0; c < 3; ++c) out.location(0, i, j, c) = maps.regression(i, j, c);
      for (int c = 0; c < 3; ++c) out.size(0, i, j, c) = maps.regression(i, j, 3 + c);
      for (int c = 0; c < 2; ++c) out.heading(0, i, j, c) = maps.regression(i, j, 6 + c);
    }
  return out;
}

// Exhaustive matcher mirroring the spec contract, written independently.
MatchResult match_reference(const std::vector<RotatedBox>& dets, const std::vector<RotatedBox>& gts,
                            double thr) {
  std::vector<int> det_order;
  std::vector<char> used(dets.size(), 0), taken(gts.size(), 0);
  MatchResult out;
  for (size_t k = 0; k < dets.size(); ++k) {
    int best = -1;
    for (size_t i = 0; i < dets.size(); ++i)
      if (!used[i] && (best < 0 || dets[i].score > dets[static_cast<size_t>(best)].score))
        best = static_cast<int>(i);
    used[static_cast<size_t>(best)] = 1;
    int gbest = -1;
    double gdist = thr;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].cls != dets[static_cast<size_t>(best)].cls) continue;
      const double d =
          std::hypot(dets[static_cast<size_t>(best)].cx - gts[g].cx, dets[static_cast<size_t>(best)].cy - gts[g].cy);
      if (d < gdist) {
        gdist = d;
        gbest = static_cast<int>(g);
      }
    }
    if (gbest >= 0) {
      taken[static_cast<size_t>(gbest)] = 1;
      out.matches.push_back({best, gbest, gdist});
    }
  }
  return out;
}

}  // namespace

TEST_CASE("decode: all-background head gives an empty list") {
  GridSpec g = head_grid_32();
  TargetMaps<double> maps = build_targets<double>({}, g);
  HeadOut<double> head = head_from_targets(maps, g);
  CHECK(decode_detections(head, g, 0.1, 0.5).empty());
}

TEST_CASE("decode: heading recovery via atan2") {
  GridSpec g = head_grid_32();
  TargetMaps<double> maps = build_targets<double>({}, g);
  HeadOut<double> head = head_from_targets(maps, g);
  head.class_probs(0, 4, 7, 0) = 0;
  head.class_probs(0, 4, 7, 1) = 1;  // vehicle
  head.size(0, 4, 7, 0) = 2;
  head.size(0, 4, 7, 1) = 1;
  head.size(0, 4, 7, 2) = 1;
  head.heading(0, 4, 7, 0) = 0.6;
  head.heading(0, 4, 7, 1) = 0.8;
  auto dets = decode_detections(head, g, 0.1, 0.5);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].yaw == doctest::Approx(std::atan2(0.6, 0.8)).epsilon(1e-9));  // ~0.6435

  head.heading(0, 4, 7, 0) = std::sqrt(0.5);
  head.heading(0, 4, 7, 1) = std::sqrt(0.5);
  dets = decode_detections(head, g, 0.1, 0.5);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].yaw == doctest::Approx(M_PI / 4).epsilon(1e-9));
}

TEST_CASE("encode/decode round trip reproduces the annotations") {
  GridSpec g = head_grid_32();
  std::mt19937_64 rng(71);
  std::uniform_real_distribution<double> jitter(-0.45, 0.45), yaw(-M_PI, M_PI), dim(0.8, 2.2);
  std::uniform_int_distribution<int> cls(0, 2);
  for (int scene = 0; scene < 10; ++scene) {
    // boxes on a sparse lattice: distinct cells, no overlap, all in grid
    std::vector<RotatedBox> boxes;
    for (int i = 2; i < g.length() - 2; i += 5)
      for (int j = 2; j < g.width() - 2; j += 5) {
        RotatedBox b = box_at(g.center_x(i) + jitter(rng), g.center_y(j) + jitter(rng),
                              static_cast<BoxClass>(cls(rng)), 1.0, normalize_angle(yaw(rng)), dim(rng),
                              dim(rng), dim(rng));
        b.cz = jitter(rng) * 2;
        boxes.push_back(b);
      }
    auto maps = build_targets<double>(boxes, g);
    auto head = head_from_targets(maps, g);
    auto dets = decode_detections(head, g, 0.5, 0.5);
    REQUIRE(dets.size() == boxes.size());
    // match by nearest center
    for (const auto& want : boxes) {
      double best = 1e30;
      const RotatedBox* got = nullptr;
      for (const auto& d : dets) {
        const double dist = std::hypot(d.cx - want.cx, d.cy - want.cy);
        if (dist < best) {
          best = dist;
          got = &d;
        }
      }
      REQUIRE(got != nullptr);
      CHECK(std::abs(got->cx - want.cx) < 1e-6);
      CHECK(std::abs(got->cy - want.cy) < 1e-6);
      CHECK(std::abs(got->cz - want.cz) < 1e-6);
      CHECK(std::abs(got->length - want.length) < 1e-6);
      CHECK(std::abs(got->width - want.width) < 1e-6);
      CHECK(std::abs(got->height - want.height) < 1e-6);
      CHECK(std::abs(normalize_angle(got->yaw - want.yaw)) < 1e-6);
      CHECK(got->cls == want.cls);
    }
  }
}

TEST_CASE("match_detections: trivial contracts") {
  auto gt = box_at(5, 5, BoxClass::kVehicle);
  SUBCASE("det exactly on the gt center matches at any positive threshold") {
    auto m = match_detections({box_at(5, 5, BoxClass::kVehicle, 0.9)}, {gt}, 1e-9);
    CHECK(m.matches.size() == 1);
  }
  SUBCASE("two dets, one gt: the higher score wins") {
    auto a = box_at(5.1, 5, BoxClass::kVehicle, 0.7);
    auto b = box_at(5.2, 5, BoxClass::kVehicle, 0.9);
    auto m = match_detections({a, b}, {gt}, 2.0);
    REQUIRE(m.matches.size() == 1);
    CHECK(m.matches[0].det == 1);
    CHECK(m.unmatched_dets == std::vector<int>{0});
  }
  SUBCASE("class mismatch never matches") {
    auto m = match_detections({box_at(5, 5, BoxClass::kCyclist, 0.9)}, {gt}, 2.0);
    CHECK(m.matches.empty());
  }
}

TEST_CASE("match_detections equals the exhaustive reference; one-to-one") {
  std::mt19937_64 rng(73);
  std::uniform_real_distribution<double> pos(0, 30), sc(0.01, 1.0);
  std::uniform_int_distribution<int> cls(0, 2);
  for (int t = 0; t < 20; ++t) {
    std::vector<RotatedBox> dets, gts;
    for (int i = 0; i < 25; ++i) dets.push_back(box_at(pos(rng), pos(rng) - 15, static_cast<BoxClass>(cls(rng)), sc(rng)));
    for (int i = 0; i < 15; ++i) gts.push_back(box_at(pos(rng), pos(rng) - 15, static_cast<BoxClass>(cls(rng))));
    auto got = match_detections(dets, gts, 3.0);
    auto want = match_reference(dets, gts, 3.0);
    REQUIRE(got.matches.size() == want.matches.size());
    std::set<int> det_seen, gt_seen;
    for (size_t i = 0; i < got.matches.size(); ++i) {
      CHECK(got.matches[i].det == want.matches[i].det);
      CHECK(got.matches[i].gt == want.matches[i].gt);
      CHECK(dets[static_cast<size_t>(got.matches[i].det)].cls == gts[static_cast<size_t>(got.matches[i].gt)].cls);
      CHECK(det_seen.insert(got.matches[i].det).second);  // one-to-one
      CHECK(gt_seen.insert(got.matches[i].gt).second);
    }
  }
}

TEST_CASE("average_precision: perfect and empty cases") {
  FrameDetections f;
  f.gts = {box_at(5, 0, BoxClass::kVehicle), box_at(15, 3, BoxClass::kVehicle)};
  SUBCASE("perfect detections give AP 1") {
    f.dets = {box_at(5, 0, BoxClass::kVehicle, 0.9), box_at(15, 3, BoxClass::kVehicle, 0.8)};
    CHECK(average_precision({f}, BoxClass::kVehicle, {0.5, 1, 2, 4}) == doctest::Approx(1.0));
  }
  SUBCASE("no detections give AP 0") {
    CHECK(average_precision({f}, BoxClass::kVehicle, {0.5, 1, 2, 4}) == doctest::Approx(0.0));
  }
  SUBCASE("no ground truths make AP undefined") {
    FrameDetections g;
    g.dets = {box_at(5, 0, BoxClass::kVehicle, 0.9)};
    CHECK(std::isnan(average_precision({g}, BoxClass::kVehicle, {0.5, 1, 2, 4})));
  }
}

TEST_CASE("average_precision: hand-computed 3-det/2-gt fixture") {
  FrameDetections f;
  f.gts = {box_at(0, 0, BoxClass::kVehicle), box_at(10, 0, BoxClass::kVehicle)};
  f.dets = {box_at(0.1, 0, BoxClass::kVehicle, 0.9),    // TP
            box_at(50, 50, BoxClass::kVehicle, 0.8),    // FP
            box_at(10.2, 0, BoxClass::kVehicle, 0.7)};  // TP
  // PR points: (0.5, 1), (0.5, 0.5), (1.0, 2/3); trapezoid with p(0)=p(first)
  // = 0.5*1 + 0 + 0.5*(0.5+2/3)/2 = 0.7916666...
  const double want = 0.5 + 0.5 * (0.5 + 2.0 / 3.0) / 2.0;
  for (double thr : {0.5, 1.0, 2.0, 4.0})
    CHECK(average_precision_single({f}, BoxClass::kVehicle, thr) == doctest::Approx(want).epsilon(1e-12));
  CHECK(average_precision({f}, BoxClass::kVehicle, {0.5, 1, 2, 4}) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("average_precision: truncation never raises AP; a top TP never lowers it") {
  std::mt19937_64 rng(79);
  std::uniform_real_distribution<double> pos(0, 40), sc(0.01, 0.9);
  for (int t = 0; t < 20; ++t) {
    FrameDetections f;
    for (int i = 0; i < 12; ++i) f.gts.push_back(box_at(pos(rng), pos(rng) - 20, BoxClass::kVehicle));
    for (int i = 0; i < 18; ++i) f.dets.push_back(box_at(pos(rng), pos(rng) - 20, BoxClass::kVehicle, sc(rng)));
    const double base = average_precision_single({f}, BoxClass::kVehicle, 2.0);

    FrameDetections sorted = f;
    std::stable_sort(sorted.dets.begin(), sorted.dets.end(),
                     [](const RotatedBox& a, const RotatedBox& b) { return a.score > b.score; });
    double prev = base;
    for (size_t keep = sorted.dets.size(); keep-- > 0;) {
      FrameDetections cut = sorted;
      cut.dets.resize(keep);
      const double ap = average_precision_single({cut}, BoxClass::kVehicle, 2.0);
      CHECK(ap <= prev + 1e-12);
      prev = ap;
    }

    // add a fresh gt + perfect detection at top score
    FrameDetections plus = f;
    plus.gts.push_back(box_at(100, 100, BoxClass::kVehicle));
    plus.dets.push_back(box_at(100, 100, BoxClass::kVehicle, 0.99));
    const double ap_plus = average_precision_single({plus}, BoxClass::kVehicle, 2.0);
    CHECK(ap_plus >= base - 1e-12);
  }
}

TEST_CASE("tp_errors: exact, scaled-dims, and rotated cases") {
  FrameDetections f;
  f.gts = {box_at(5, 0, BoxClass::kVehicle, 1.0, 0.5, 4, 2, 2)};
  SUBCASE("exact detections give zero errors") {
    f.dets = {box_at(5, 0, BoxClass::kVehicle, 0.9, 0.5, 4, 2, 2)};
    auto e = tp_errors({f}, 2.0, false);
    CHECK(e.mate == doctest::Approx(0.0));
    CHECK(e.mase == doctest::Approx(0.0));
    CHECK(e.maoe == doctest::Approx(0.0));
  }
  SUBCASE("dims scaled by one half give ASE 0.875") {
    f.dets = {box_at(5, 0, BoxClass::kVehicle, 0.9, 0.5, 2, 1, 1)};
    auto e = tp_errors({f}, 2.0, false);
    CHECK(e.mase == doctest::Approx(0.875).epsilon(1e-12));  // 1 - (0.5^3)
  }
  SUBCASE("yaw off by pi/2 contributes pi/2") {
    f.dets = {box_at(5, 0, BoxClass::kVehicle, 0.9, 0.5 - M_PI / 2, 4, 2, 2)};
    auto e = tp_errors({f}, 2.0, false);
    CHECK(e.maoe == doctest::Approx(M_PI / 2).epsilon(1e-9));
  }
  SUBCASE("zero matches report worst-case 1.0") {
    auto e = tp_errors({f}, 2.0, false);
    CHECK(e.mate == 1.0);
    CHECK(e.mase == 1.0);
    CHECK(e.maoe == 1.0);
  }
}

TEST_CASE("nds: aggregation formula and published fixtures") {
  CHECK(nds(1, 0, 0, 0) == doctest::Approx(1.0));
  struct Row {
    double map, mate, mase, maoe, want;
  };
  const Row rows[] = {
      {0.506, 0.022, 0.026, 0.068, 0.677}, {0.547, 0.021, 0.025, 0.029, 0.708},
      {0.577, 0.018, 0.024, 0.022, 0.728}, {0.515, 0.018, 0.024, 0.064, 0.684},
      {0.577, 0.018, 0.024, 0.029, 0.727},
  };
  for (const auto& r : rows) {
    CHECK(std::abs(nds(r.map, r.mate, r.mase, r.maoe) - r.want) <= 5e-4 + 1e-9);
  }
  // clamp: errors above 1 contribute nothing
  CHECK(nds(0.4, 1.7, 0.5, 0.5) == doctest::Approx((5 * 0.4 + 0 + 0.5 + 0.5) / 8.0));
}

TEST_CASE("distance bins: assignment, boundaries, and partition consistency") {
  EvalConfig cfg;
  cfg.bin_edges = {50.0, 100.0};
  FrameDetections f;
  f.gts = {box_at(10, 0, BoxClass::kVehicle), box_at(50.1, 0, BoxClass::kVehicle)};
  f.dets = {box_at(10, 0, BoxClass::kVehicle, 0.9), box_at(49.9, 0, BoxClass::kVehicle, 0.8)};

  auto bins = distance_binned_eval({f}, cfg);
  REQUIRE(bins.size() == 3);
  // near bin: one gt, one matching det
  CHECK(bins[0].second.at("vehicle") > 0.0);
  // middle bin: gt at 50.1 has no det in its bin (the 49.9 det went near)
  CHECK(bins[1].second.at("vehicle") == 0.0);
  // far bin: no gts -> undefined, entry absent
  CHECK(bins[2].second.count("vehicle") == 0);

  SUBCASE("all gts near: far bins undefined") {
    FrameDetections near_only;
    near_only.gts = {box_at(10, 0, BoxClass::kPedestrian)};
    near_only.dets = {box_at(10, 0, BoxClass::kPedestrian, 0.9)};
    auto b = distance_binned_eval({near_only}, cfg);
    CHECK(b[0].second.count("pedestrian") == 1);
    CHECK(b[1].second.count("pedestrian") == 0);
    CHECK(b[2].second.count("pedestrian") == 0);
  }

  SUBCASE("merging all bins reproduces the whole-set AP") {
    // the union of the bin partitions is the full set; evaluating with a
    // single infinite bin must equal the unbinned AP
    EvalConfig merged = cfg;
    merged.bin_edges = {};
    auto b = distance_binned_eval({f}, merged);
    REQUIRE(b.size() == 1);
    const double whole = average_precision({f}, BoxClass::kVehicle, cfg.match_thresholds);
    CHECK(b[0].second.at("vehicle") == doctest::Approx(whole).epsilon(1e-12));
  }
}

TEST_CASE("evaluate_detections: full report plumbing") {
  EvalConfig cfg;
  FrameDetections f;
  f.gts = {box_at(5, 0, BoxClass::kVehicle), box_at(20, 4, BoxClass::kPedestrian)};
  f.dets = {box_at(5.05, 0, BoxClass::kVehicle, 0.95), box_at(20, 4.1, BoxClass::kPedestrian, 0.9)};
  auto report = evaluate_detections({f}, cfg);
  CHECK(report.map == doctest::Approx(1.0));
  CHECK(report.mate < 0.2);
  CHECK(report.nds_value > 0.9);
  CHECK(report.per_class_ap.count("vehicle") == 1);
  CHECK(report.per_class_ap.count("cyclist") == 0);  // no cyclist gts
  auto j = report.to_json();
  CHECK(j.at("NDS").get<double>() == doctest::Approx(report.nds_value));
  CHECK(!report.to_text().empty());
}

TEST_CASE("detections JSON round trip") {
  std::vector<RotatedBox> dets = {box_at(1, 2, BoxClass::kCyclist, 0.7, 0.3),
                                  box_at(5, -3, BoxClass::kPedestrian, 0.4, -1.2)};
  auto back = detections_from_json(detections_to_json(dets));
  REQUIRE(back.size() == 2);
  CHECK(back[0].cx == dets[0].cx);
  CHECK(back[0].yaw == dets[0].yaw);
  CHECK(back[0].cls == dets[0].cls);
  CHECK(back[1].score == dets[1].score);
}
