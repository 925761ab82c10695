#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "pseq/dataio.hpp"
#include "pseq/scenegen.hpp"

using namespace pseq;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() / (std::string("pseq_test_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::set<std::array<float, 4>> row_set(const Tensorf& pts) {
  std::set<std::array<float, 4>> out;
  for (int i = 0; i < pts.dim(0); ++i)
    out.insert({pts(i, 0), pts(i, 1), pts(i, 2), pts(i, 3)});
  return out;
}

Sequence tiny_sequence() {
  Sequence seq;
  for (int s = 0; s < 3; ++s) {
    Scan scan;
    std::mt19937_64 rng(100 + static_cast<uint64_t>(s));
    scan.points = Tensorf::uniform({20, 4}, rng, -10.0f, 10.0f);
    scan.pose = Pose::from_xy_yaw(0.5 * s, 0.0, 0.01 * s);
    scan.timestamp = 0.1 * s;
    seq.scans.push_back(std::move(scan));
  }
  RotatedBox b;
  b.cx = 5;
  b.cy = 1;
  b.cz = 0.8;
  b.length = 4.2;
  b.width = 1.8;
  b.height = 1.6;
  b.yaw = 0.3;
  b.cls = BoxClass::kVehicle;
  seq.annotations.push_back(b);
  return seq;
}

}  // namespace

TEST_CASE("apply_point_budget: under and at budget pass through") {
  std::mt19937_64 rng(1);
  Tensorf pts = Tensorf::uniform({50, 4}, rng);
  Tensorf same = apply_point_budget(pts, 50, 7);
  CHECK(same.dim(0) == 50);
  for (int64_t i = 0; i < pts.size(); ++i) CHECK(same[i] == pts[i]);
  CHECK(apply_point_budget(pts, 200, 7).dim(0) == 50);
}

TEST_CASE("apply_point_budget: deterministic strict subset") {
  std::mt19937_64 rng(2);
  Tensorf pts = Tensorf::uniform({10, 4}, rng);
  Tensorf a = apply_point_budget(pts, 5, 42);
  Tensorf b = apply_point_budget(pts, 5, 42);
  REQUIRE(a.dim(0) == 5);
  for (int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  auto all = row_set(pts), sub = row_set(a);
  for (const auto& row : sub) CHECK(all.count(row) == 1);
}

TEST_CASE("apply_point_budget: 300k points cut to exactly the 200k budget") {
  std::mt19937_64 rng(3);
  Tensorf pts = Tensorf::uniform({300000, 4}, rng);
  Tensorf cut = apply_point_budget(pts, 200000, 9);
  CHECK(cut.dim(0) == 200000);
  // spot-check membership on a sample; full set comparison is expensive
  auto all = row_set(pts);
  for (int i = 0; i < 200000; i += 997) {
    CHECK(all.count({cut(i, 0), cut(i, 1), cut(i, 2), cut(i, 3)}) == 1);
  }
}

TEST_CASE("sequence save/load round trip is exact") {
  const fs::path dir = temp_dir("roundtrip");
  Sequence seq = tiny_sequence();
  save_sequence(seq, dir);
  Sequence back = load_sequence(dir);
  REQUIRE(back.scans.size() == seq.scans.size());
  for (size_t s = 0; s < seq.scans.size(); ++s) {
    CHECK(back.scans[s].timestamp == seq.scans[s].timestamp);
    CHECK(back.scans[s].pose.m == seq.scans[s].pose.m);
    REQUIRE(back.scans[s].points.size() == seq.scans[s].points.size());
    for (int64_t i = 0; i < seq.scans[s].points.size(); ++i)
      CHECK(back.scans[s].points[i] == seq.scans[s].points[i]);  // bitwise
  }
  REQUIRE(back.annotations.size() == 1);
  CHECK(back.annotations[0].cx == seq.annotations[0].cx);
  CHECK(back.annotations[0].yaw == seq.annotations[0].yaw);
  CHECK(back.annotations[0].cls == seq.annotations[0].cls);
}

TEST_CASE("scan loader rejects corrupted and truncated files") {
  const fs::path dir = temp_dir("corrupt");
  Sequence seq = tiny_sequence();
  save_sequence(seq, dir);

  SUBCASE("bad magic") {
    std::fstream f(dir / "scan_00.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XX", 2);
    f.close();
    CHECK_THROWS_WITH_AS(load_sequence(dir), doctest::Contains("bad magic"), std::runtime_error);
  }
  SUBCASE("truncated data") {
    fs::resize_file(dir / "scan_01.bin", 20);
    CHECK_THROWS_WITH_AS(load_sequence(dir), doctest::Contains("truncated"), std::runtime_error);
  }
}

TEST_CASE("empty annotation list is a valid sequence") {
  const fs::path dir = temp_dir("bgonly");
  Sequence seq = tiny_sequence();
  seq.annotations.clear();
  save_sequence(seq, dir);
  Sequence back = load_sequence(dir);
  CHECK(back.annotations.empty());
}

TEST_CASE("non-monotone timestamps are rejected") {
  Sequence seq = tiny_sequence();
  seq.scans[1].timestamp = seq.scans[0].timestamp;
  CHECK_THROWS_AS(seq.validate(), std::invalid_argument);
}

TEST_CASE("dataset index round trip") {
  const fs::path root = temp_dir("index");
  save_dataset_index(root, {"seq_000000", "seq_000001"});
  auto dirs = load_dataset_index(root);
  REQUIRE(dirs.size() == 2);
  CHECK(dirs[0].filename() == "seq_000000");
}

// ---------------------------------------------------------------------------
// synthetic scenes
// ---------------------------------------------------------------------------

TEST_CASE("generate_scene: identical seeds give bitwise-identical sequences") {
  SceneConfig cfg;
  cfg.seed = 77;
  cfg.n_scans = 3;
  Sequence a = generate_scene(cfg);
  Sequence b = generate_scene(cfg);
  REQUIRE(a.scans.size() == b.scans.size());
  for (size_t s = 0; s < a.scans.size(); ++s) {
    REQUIRE(a.scans[s].points.size() == b.scans[s].points.size());
    for (int64_t i = 0; i < a.scans[s].points.size(); ++i)
      CHECK(a.scans[s].points[i] == b.scans[s].points[i]);
    CHECK(a.scans[s].pose.m == b.scans[s].pose.m);
  }
  REQUIRE(a.annotations.size() == b.annotations.size());
  for (size_t i = 0; i < a.annotations.size(); ++i) {
    CHECK(a.annotations[i].cx == b.annotations[i].cx);
    CHECK(a.annotations[i].yaw == b.annotations[i].yaw);
  }
  Sequence c = generate_scene([&] {
    SceneConfig c2 = cfg;
    c2.seed = 78;
    return c2;
  }());
  bool any_diff = c.scans[0].points.size() != a.scans[0].points.size();
  if (!any_diff)
    for (int64_t i = 0; i < c.scans[0].points.size(); ++i) any_diff |= c.scans[0].points[i] != a.scans[0].points[i];
  CHECK(any_diff);
}

TEST_CASE("generate_scene: static world keeps geometry fixed, reseeds noise per scan") {
  SceneConfig cfg;
  cfg.seed = 5;
  cfg.n_scans = 4;
  cfg.vehicles = 1;
  cfg.cyclists = 0;
  cfg.pedestrians = 0;
  cfg.unclear = 0;
  cfg.clutter_mean = 0;
  cfg.ego_speed_min = cfg.ego_speed_max = 0.0;
  cfg.ego_yaw_rate_min = cfg.ego_yaw_rate_max = 0.0;
  cfg.vehicle_prior.speed_min = cfg.vehicle_prior.speed_max = 0.0;
  cfg.spawn_x_min = cfg.spawn_x_max = 12.0;
  cfg.spawn_y_min = cfg.spawn_y_max = 2.0;
  Sequence seq = generate_scene(cfg);
  REQUIRE(seq.annotations.size() == 1);
  for (const auto& scan : seq.scans) {
    CHECK(scan.pose.m == Pose::identity().m);
    // centroid of each sweep stays near the (static) object
    double mx = 0, my = 0;
    for (int i = 0; i < scan.points.dim(0); ++i) {
      mx += scan.points(i, 0);
      my += scan.points(i, 1);
    }
    mx /= scan.points.dim(0);
    my /= scan.points.dim(0);
    CHECK(std::abs(mx - 12.0) < 1.0);
    CHECK(std::abs(my - 2.0) < 1.0);
  }
  // per-scan reseeding: consecutive scans differ in their sampled points
  bool differs = seq.scans[0].points.size() != seq.scans[1].points.size();
  if (!differs)
    for (int64_t i = 0; i < seq.scans[0].points.size(); ++i)
      differs |= seq.scans[0].points[i] != seq.scans[1].points[i];
  CHECK(differs);
}

TEST_CASE("generate_scene: point count follows the inverse-square law") {
  auto mean_count = [&](double x_spawn) {
    double total = 0;
    for (uint64_t seed = 0; seed < 100; ++seed) {
      SceneConfig cfg;
      cfg.seed = seed;
      cfg.n_scans = 1;
      cfg.vehicles = 1;
      cfg.cyclists = 0;
      cfg.pedestrians = 0;
      cfg.unclear = 0;
      cfg.clutter_mean = 0;
      cfg.vehicle_prior.dim_jitter = 0.0;  // keep the surface area fixed
      cfg.ego_speed_min = cfg.ego_speed_max = 0.0;
      cfg.ego_yaw_rate_min = cfg.ego_yaw_rate_max = 0.0;
      cfg.spawn_x_min = cfg.spawn_x_max = x_spawn;
      cfg.spawn_y_min = cfg.spawn_y_max = 0.0;
      cfg.spawn_x_max = x_spawn;
      Sequence seq = generate_scene(cfg);
      total += seq.scans[0].points.dim(0);
    }
    return total / 100.0;
  };
  const double near = mean_count(10.0);
  const double far = mean_count(20.0);
  CHECK(far / near == doctest::Approx(0.25).epsilon(0.15));
}

TEST_CASE("generate_scene: annotations carry true pose-derived boxes") {
  SceneConfig cfg;
  cfg.seed = 31;
  cfg.n_scans = 3;
  Sequence seq = generate_scene(cfg);
  CHECK(seq.annotations.size() ==
        static_cast<size_t>(cfg.vehicles + cfg.cyclists + cfg.pedestrians + cfg.unclear));
  for (const auto& b : seq.annotations) {
    CHECK(b.length > 0);
    CHECK(b.width > 0);
    CHECK(b.height > 0);
    CHECK(b.yaw <= M_PI);
    CHECK(b.yaw > -M_PI);
    CHECK(b.cz == doctest::Approx(b.height / 2).epsilon(1e-9));
  }
  for (const auto& scan : seq.scans) CHECK(scan.pose.valid());
}

TEST_CASE("generate_scene rejects infeasible configs") {
  SceneConfig cfg;
  cfg.density_at_10m = 0.0;
  CHECK_THROWS_AS(generate_scene(cfg), std::invalid_argument);
  SceneConfig cfg2;
  cfg2.n_scans = 11;
  CHECK_THROWS_AS(generate_scene(cfg2), std::invalid_argument);
}
