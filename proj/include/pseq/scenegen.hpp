#pragma once

#include <cstdint>

#include "pseq/dataio.hpp"

namespace pseq {

/// Size/motion prior for one object class.
struct ClassPrior {
  double length = 1.0, width = 1.0, height = 1.0;  // mean dims, meters
  double dim_jitter = 0.2;                         // uniform +/- fraction
  double speed_min = 0.0, speed_max = 0.0;         // m/s
};

/// Synthetic scene parameters. Scenes are deterministic for a fixed seed:
/// objects move with constant velocity, the ego follows a constant-curvature
/// arc, and per-object surface point counts decay with squared distance
/// (floor of one point while within range).
struct SceneConfig {
  int vehicles = 6;
  int cyclists = 2;
  int pedestrians = 3;
  int unclear = 0;

  ClassPrior vehicle_prior{4.5, 1.9, 1.6, 0.2, 0.0, 8.0};
  ClassPrior cyclist_prior{1.8, 0.7, 1.5, 0.2, 0.0, 5.0};
  ClassPrior pedestrian_prior{0.6, 0.6, 1.7, 0.2, 0.0, 1.5};
  ClassPrior unclear_prior{1.2, 1.2, 1.0, 0.2, 0.0, 0.0};

  double ego_speed_min = 0.0, ego_speed_max = 20.0;    // m/s
  double ego_yaw_rate_min = -0.2, ego_yaw_rate_max = 0.2;  // rad/s

  double density_at_10m = 4.0;   // surface points per m^2 at 10 m range
  double max_range = 200.0;      // no returns beyond this
  double surface_sigma = 0.03;   // point jitter, meters
  double clutter_mean = 300.0;   // expected ground-return points per scan
  double clutter_range_min = 1.0, clutter_range_max = 60.0;

  double scan_period = 0.1;  // seconds
  int n_scans = 3;           // total scans, core frame last

  // object spawn region, core-frame coordinates
  double spawn_x_min = 2.0, spawn_x_max = 46.0;
  double spawn_y_min = -15.0, spawn_y_max = 15.0;

  uint64_t seed = 0;

  void validate() const;
};

/// Generates one sequence. Annotations are written in the core frame's ego
/// coordinates for every object that produced at least one core-scan point.
Sequence generate_scene(const SceneConfig& config);

}  // namespace pseq
