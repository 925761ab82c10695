#include "pseq/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace pseq {

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct SceneObject {
  BoxClass cls;
  double length, width, height;
  double world_x0, world_y0;  // position at t = 0
  double world_yaw;
  double vx, vy;              // constant world velocity
  // face sampling: 4 sides + top, weighted by area
  std::array<double, 5> face_area;
};

double surface_area(const SceneObject& o) {
  return 2.0 * o.length * o.height + 2.0 * o.width * o.height + o.length * o.width;
}

// Uniform point on the box surface (sides + top), object-local coordinates,
// z in [0, height].
std::array<double, 3> sample_surface(const SceneObject& o, std::mt19937_64& rng) {
  std::discrete_distribution<int> face(o.face_area.begin(), o.face_area.end());
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const int f = face(rng);
  const double a = u01(rng), b = u01(rng);
  const double hl = o.length / 2, hw = o.width / 2;
  switch (f) {
    case 0: return {hl, -hw + a * o.width, b * o.height};        // front
    case 1: return {-hl, -hw + a * o.width, b * o.height};       // back
    case 2: return {-hl + a * o.length, hw, b * o.height};       // left
    case 3: return {-hl + a * o.length, -hw, b * o.height};      // right
    default: return {-hl + a * o.length, -hw + b * o.width, o.height};  // top
  }
}

}  // namespace

void SceneConfig::validate() const {
  if (n_scans < 1 || n_scans > 10) throw std::invalid_argument("SceneConfig: n_scans must be in [1, 10]");
  if (density_at_10m <= 0.0)
    throw std::invalid_argument("SceneConfig: zero point density everywhere is infeasible");
  if (clutter_mean < 0.0) throw std::invalid_argument("SceneConfig: clutter_mean must be nonnegative");
  if (scan_period <= 0.0) throw std::invalid_argument("SceneConfig: scan_period must be positive");
  if (max_range <= 0.0) throw std::invalid_argument("SceneConfig: max_range must be positive");
  if (spawn_x_max < spawn_x_min || spawn_y_max < spawn_y_min)
    throw std::invalid_argument("SceneConfig: empty spawn region");
}

Sequence generate_scene(const SceneConfig& config) {
  config.validate();
  std::mt19937_64 layout_rng(mix_seed(config.seed, 0));
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  // Ego trajectory: constant speed and yaw rate, world frame anchored at the
  // first scan's pose.
  const double ego_speed =
      config.ego_speed_min + (config.ego_speed_max - config.ego_speed_min) * u01(layout_rng);
  const double ego_yaw_rate =
      config.ego_yaw_rate_min + (config.ego_yaw_rate_max - config.ego_yaw_rate_min) * u01(layout_rng);
  const double t_core = (config.n_scans - 1) * config.scan_period;

  auto ego_pose_at = [&](double t) {
    const double psi = ego_yaw_rate * t;
    double x, y;
    if (std::abs(ego_yaw_rate) < 1e-9) {
      x = ego_speed * t;
      y = 0.0;
    } else {
      const double r = ego_speed / ego_yaw_rate;
      x = r * std::sin(psi);
      y = r * (1.0 - std::cos(psi));
    }
    return Pose::from_xy_yaw(x, y, psi);
  };
  const Pose core_pose = ego_pose_at(t_core);

  // Objects are placed in the core frame so that the annotated frame is
  // populated, then integrated backwards with their constant velocity.
  std::vector<SceneObject> objects;
  auto spawn_class = [&](BoxClass cls, const ClassPrior& prior, int count) {
    for (int k = 0; k < count; ++k) {
      SceneObject o;
      o.cls = cls;
      auto jitter = [&](double v) { return v * (1.0 + prior.dim_jitter * (2.0 * u01(layout_rng) - 1.0)); };
      o.length = jitter(prior.length);
      o.width = jitter(prior.width);
      o.height = jitter(prior.height);
      double cx = 0, cy = 0;
      for (int attempt = 0; attempt < 100; ++attempt) {
        cx = config.spawn_x_min + (config.spawn_x_max - config.spawn_x_min) * u01(layout_rng);
        cy = config.spawn_y_min + (config.spawn_y_max - config.spawn_y_min) * u01(layout_rng);
        bool clear = true;
        for (const auto& other : objects) {
          const auto pc = core_pose.inverse().apply(other.world_x0 + other.vx * t_core,
                                                    other.world_y0 + other.vy * t_core, 0.0);
          const double min_sep = 0.6 * (std::max(o.length, o.width) + std::max(other.length, other.width));
          if (std::hypot(cx - pc[0], cy - pc[1]) < min_sep) {
            clear = false;
            break;
          }
        }
        if (clear) break;
      }
      const double yaw_core = normalize_angle(2.0 * M_PI * u01(layout_rng) - M_PI);
      const double speed = prior.speed_min + (prior.speed_max - prior.speed_min) * u01(layout_rng);
      // core-frame pose -> world
      const auto pw = core_pose.apply(cx, cy, 0.0);
      const double ego_core_yaw = std::atan2(core_pose.at(1, 0), core_pose.at(0, 0));
      o.world_yaw = normalize_angle(yaw_core + ego_core_yaw);
      o.vx = speed * std::cos(o.world_yaw);
      o.vy = speed * std::sin(o.world_yaw);
      o.world_x0 = pw[0] - o.vx * t_core;
      o.world_y0 = pw[1] - o.vy * t_core;
      o.face_area = {o.width * o.height, o.width * o.height, o.length * o.height, o.length * o.height,
                     o.length * o.width};
      objects.push_back(o);
    }
  };
  spawn_class(BoxClass::kVehicle, config.vehicle_prior, config.vehicles);
  spawn_class(BoxClass::kCyclist, config.cyclist_prior, config.cyclists);
  spawn_class(BoxClass::kPedestrian, config.pedestrian_prior, config.pedestrians);
  spawn_class(BoxClass::kUnclear, config.unclear_prior, config.unclear);

  Sequence seq;
  std::vector<int> core_point_count(objects.size(), 0);
  for (int s = 0; s < config.n_scans; ++s) {
    const double t = s * config.scan_period;
    std::mt19937_64 scan_rng(mix_seed(config.seed, 1000 + static_cast<uint64_t>(s)));
    std::normal_distribution<double> jitter(0.0, config.surface_sigma);

    Scan scan;
    scan.pose = ego_pose_at(t);
    scan.timestamp = t;
    const Pose world_to_ego = scan.pose.inverse();

    std::vector<float> rows;
    for (size_t oi = 0; oi < objects.size(); ++oi) {
      const auto& o = objects[oi];
      const double ox = o.world_x0 + o.vx * t;
      const double oy = o.world_y0 + o.vy * t;
      const auto ego_xyz = scan.pose.apply(0.0, 0.0, 0.0);
      const double dist = std::hypot(ox - ego_xyz[0], oy - ego_xyz[1]);
      if (dist > config.max_range) continue;
      const double lambda = config.density_at_10m * surface_area(o) * 100.0 / std::max(dist * dist, 1.0);
      std::poisson_distribution<int> count_dist(lambda);
      const int count = std::max(1, count_dist(scan_rng));
      const double cy_ = std::cos(o.world_yaw), sy_ = std::sin(o.world_yaw);
      for (int k = 0; k < count; ++k) {
        const auto local = sample_surface(o, scan_rng);
        const double wx = ox + cy_ * local[0] - sy_ * local[1] + jitter(scan_rng);
        const double wy = oy + sy_ * local[0] + cy_ * local[1] + jitter(scan_rng);
        const double wz = local[2] + jitter(scan_rng);
        const auto pe = world_to_ego.apply(wx, wy, wz);
        rows.push_back(static_cast<float>(pe[0]));
        rows.push_back(static_cast<float>(pe[1]));
        rows.push_back(static_cast<float>(pe[2]));
        rows.push_back(static_cast<float>(u01(scan_rng)));
      }
      if (s == config.n_scans - 1) core_point_count[oi] = count;
    }
    // Ground clutter, resampled each sweep in the sweep's own frame with a
    // 1/d^2 areal density (inverse-CDF over the annulus).
    if (config.clutter_mean > 0.0) {
      std::poisson_distribution<int> count_dist(config.clutter_mean);
      const int count = count_dist(scan_rng);
      for (int k = 0; k < count; ++k) {
        const double ang = 2.0 * M_PI * u01(scan_rng) - M_PI;
        const double d = config.clutter_range_min *
                         std::pow(config.clutter_range_max / config.clutter_range_min, u01(scan_rng));
        rows.push_back(static_cast<float>(d * std::cos(ang)));
        rows.push_back(static_cast<float>(d * std::sin(ang)));
        rows.push_back(static_cast<float>(jitter(scan_rng) * 1.5));
        rows.push_back(static_cast<float>(u01(scan_rng)));
      }
    }
    const int point_count = static_cast<int>(rows.size() / 4);
    scan.points = Tensorf::from_values({point_count, 4}, std::move(rows));
    seq.scans.push_back(std::move(scan));
  }

  const Pose core_inv = core_pose.inverse();
  const double ego_core_yaw = std::atan2(core_pose.at(1, 0), core_pose.at(0, 0));
  for (size_t oi = 0; oi < objects.size(); ++oi) {
    if (core_point_count[oi] == 0) continue;
    const auto& o = objects[oi];
    const auto pc = core_inv.apply(o.world_x0 + o.vx * t_core, o.world_y0 + o.vy * t_core, o.height / 2.0);
    RotatedBox box;
    box.cx = pc[0];
    box.cy = pc[1];
    box.cz = pc[2];
    box.length = o.length;
    box.width = o.width;
    box.height = o.height;
    box.yaw = normalize_angle(o.world_yaw - ego_core_yaw);
    box.cls = o.cls;
    seq.annotations.push_back(box);
  }
  seq.validate();
  return seq;
}

}  // namespace pseq
