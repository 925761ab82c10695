#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "pseq/evaluation.hpp"
#include "pseq/losses.hpp"
#include "pseq/network.hpp"
#include "pseq/optimizer.hpp"
#include "pseq/scenegen.hpp"

namespace pseq {

/// Flat key=value run configuration. Loadable from a text file ('#' starts a
/// comment), overridable from the command line; unknown keys are rejected.
/// The fully-resolved configuration is echoed into every output directory.
struct RunConfig {
  // grid
  double grid_x_min = 0.0, grid_x_max = 48.0;
  double grid_y_min = -16.0, grid_y_max = 16.0;
  double grid_cell = 0.5;

  // pillar encoder
  int pillar_channels = 16;
  int pillar_point_budget = 200000;

  // backbone / model
  std::string backbone_stage_convs = "2,2,2";
  std::string memory_placement = "after_backbone";
  std::string compensation = "conv";
  bool aux = true;

  // losses
  double focal_alpha = 0.5, focal_gamma = 2.0;
  double huber_delta_loc = 1.0, huber_delta_angle = 3.0;
  double lambda_aux = 0.5, w_loc = 2.0, w_ang = 1.0;
  std::string class_weights = "auto";  // "auto" or four comma values

  // training
  double lr = 2e-3, weight_decay = 0.01, beta1 = 0.9, beta2 = 0.999, opt_eps = 1e-8;
  int epochs = 10;
  int k_min = 1, k_max = 9;
  bool backprop_through_warmup = false;
  bool cosine_decay = true;
  bool bias_init_enabled = true;
  std::string transfer_from;

  // evaluation
  double score_threshold = 0.1, nms_iou = 0.5;
  int eval_scans = 0;  // 0 = all scans in the sequence
  std::string eval_bins = "50,100";
  bool normalize_ate = false;

  // synthetic scenes
  int synth_vehicles = 6, synth_cyclists = 2, synth_pedestrians = 3, synth_unclear = 1;
  int synth_n_scans = 3;
  double synth_density = 4.0;
  double synth_clutter = 300.0;
  double synth_max_range = 200.0;
  double synth_ego_speed_min = 0.0, synth_ego_speed_max = 20.0;
  double synth_ego_yaw_rate_min = -0.2, synth_ego_yaw_rate_max = 0.2;
  double synth_scan_period = 0.1;
  double synth_spawn_margin = 2.0;

  uint64_t seed = 0;

  /// Applies one `key=value`; throws on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  /// Reads a config file and applies every assignment in order.
  void load_file(const std::filesystem::path& path);
  /// Sorted `key = value` text of the fully-resolved configuration.
  std::string dump() const;
  void echo_to(const std::filesystem::path& dir) const;

  GridSpec grid() const;
  ModelConfig model_config() const;
  SceneConfig scene_config() const;
  LossConfig loss_config() const;  // class weights resolved only if explicit
  AdamWConfig opt_config() const;
  EvalConfig eval_config() const;
  bool class_weights_auto() const { return class_weights == "auto"; }
};

}  // namespace pseq
