#include "pseq/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace pseq {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw std::invalid_argument("expected a boolean, got '" + v + "'");
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<double> parse_csv(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(trim(item)));
  return out;
}

struct Entry {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define FIELD_D(key, member)                                                            \
  {key, {[](RunConfig& c, const std::string& v) { c.member = std::stod(v); },          \
         [](const RunConfig& c) { return fmt_double(c.member); }}}
#define FIELD_I(key, member)                                                            \
  {key, {[](RunConfig& c, const std::string& v) { c.member = std::stoi(v); },          \
         [](const RunConfig& c) { return std::to_string(c.member); }}}
#define FIELD_U(key, member)                                                            \
  {key, {[](RunConfig& c, const std::string& v) { c.member = std::stoull(v); },        \
         [](const RunConfig& c) { return std::to_string(c.member); }}}
#define FIELD_B(key, member)                                                            \
  {key, {[](RunConfig& c, const std::string& v) { c.member = parse_bool(v); },         \
         [](const RunConfig& c) { return c.member ? "true" : "false"; }}}
#define FIELD_S(key, member)                                                            \
  {key, {[](RunConfig& c, const std::string& v) { c.member = v; },                     \
         [](const RunConfig& c) { return c.member; }}}

const std::map<std::string, Entry>& registry() {
  static const std::map<std::string, Entry> table = {
      FIELD_D("grid.x_min", grid_x_min),
      FIELD_D("grid.x_max", grid_x_max),
      FIELD_D("grid.y_min", grid_y_min),
      FIELD_D("grid.y_max", grid_y_max),
      FIELD_D("grid.cell", grid_cell),
      FIELD_I("pillar.channels", pillar_channels),
      FIELD_I("pillar.point_budget", pillar_point_budget),
      FIELD_S("backbone.stage_convs", backbone_stage_convs),
      FIELD_S("model.memory_placement", memory_placement),
      FIELD_S("model.compensation", compensation),
      FIELD_B("model.aux", aux),
      FIELD_D("loss.focal_alpha", focal_alpha),
      FIELD_D("loss.focal_gamma", focal_gamma),
      FIELD_D("loss.huber_delta_loc", huber_delta_loc),
      FIELD_D("loss.huber_delta_angle", huber_delta_angle),
      FIELD_D("loss.lambda_aux", lambda_aux),
      FIELD_D("loss.w_loc", w_loc),
      FIELD_D("loss.w_ang", w_ang),
      FIELD_S("loss.class_weights", class_weights),
      FIELD_D("train.lr", lr),
      FIELD_D("train.weight_decay", weight_decay),
      FIELD_D("train.beta1", beta1),
      FIELD_D("train.beta2", beta2),
      FIELD_D("train.eps", opt_eps),
      FIELD_I("train.epochs", epochs),
      FIELD_I("train.k_min", k_min),
      FIELD_I("train.k_max", k_max),
      FIELD_B("train.backprop_through_warmup", backprop_through_warmup),
      FIELD_B("train.cosine_decay", cosine_decay),
      FIELD_B("train.bias_init", bias_init_enabled),
      FIELD_S("train.transfer_from", transfer_from),
      FIELD_D("eval.score_threshold", score_threshold),
      FIELD_D("eval.nms_iou", nms_iou),
      FIELD_I("eval.scans", eval_scans),
      FIELD_S("eval.bins", eval_bins),
      FIELD_B("eval.normalize_ate", normalize_ate),
      FIELD_I("synth.vehicles", synth_vehicles),
      FIELD_I("synth.cyclists", synth_cyclists),
      FIELD_I("synth.pedestrians", synth_pedestrians),
      FIELD_I("synth.unclear", synth_unclear),
      FIELD_I("synth.n_scans", synth_n_scans),
      FIELD_D("synth.density", synth_density),
      FIELD_D("synth.clutter", synth_clutter),
      FIELD_D("synth.max_range", synth_max_range),
      FIELD_D("synth.ego_speed_min", synth_ego_speed_min),
      FIELD_D("synth.ego_speed_max", synth_ego_speed_max),
      FIELD_D("synth.ego_yaw_rate_min", synth_ego_yaw_rate_min),
      FIELD_D("synth.ego_yaw_rate_max", synth_ego_yaw_rate_max),
      FIELD_D("synth.scan_period", synth_scan_period),
      FIELD_D("synth.spawn_margin", synth_spawn_margin),
      FIELD_U("seed", seed),
  };
  return table;
}

#undef FIELD_D
#undef FIELD_I
#undef FIELD_U
#undef FIELD_B
#undef FIELD_S

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = registry().find(key);
  if (it == registry().end()) throw std::invalid_argument("unknown config key '" + key + "'");
  try {
    it->second.set(*this, trim(value));
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("config key '" + key + "': " + e.what());
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "': cannot parse value '" + value + "'");
  }
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

std::string RunConfig::dump() const {
  std::ostringstream os;
  for (const auto& [key, entry] : registry()) os << key << " = " << entry.get(*this) << "\n";
  return os.str();
}

void RunConfig::echo_to(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream f(dir / "config_resolved.txt");
  if (!f) throw std::runtime_error("cannot write resolved config to " + dir.string());
  f << dump();
}

GridSpec RunConfig::grid() const {
  GridSpec g;
  g.x_min = grid_x_min;
  g.x_max = grid_x_max;
  g.y_min = grid_y_min;
  g.y_max = grid_y_max;
  g.cell = grid_cell;
  g.validate();
  return g;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.grid = grid();
  m.pillar.channels = pillar_channels;
  m.pillar.point_budget = pillar_point_budget;
  const auto convs = parse_csv(backbone_stage_convs);
  if (convs.size() != 3) throw std::invalid_argument("backbone.stage_convs needs three values");
  for (int i = 0; i < 3; ++i) m.stage_convs[static_cast<size_t>(i)] = static_cast<int>(convs[static_cast<size_t>(i)]);
  m.placement = memory_placement_from_string(memory_placement);
  m.compensation = compensation_from_string(compensation);
  m.aux_enabled = aux;
  m.init_seed = seed + 1;
  m.validate();
  return m;
}

SceneConfig RunConfig::scene_config() const {
  SceneConfig s;
  s.vehicles = synth_vehicles;
  s.cyclists = synth_cyclists;
  s.pedestrians = synth_pedestrians;
  s.unclear = synth_unclear;
  s.n_scans = synth_n_scans;
  s.density_at_10m = synth_density;
  s.clutter_mean = synth_clutter;
  s.max_range = synth_max_range;
  s.ego_speed_min = synth_ego_speed_min;
  s.ego_speed_max = synth_ego_speed_max;
  s.ego_yaw_rate_min = synth_ego_yaw_rate_min;
  s.ego_yaw_rate_max = synth_ego_yaw_rate_max;
  s.scan_period = synth_scan_period;
  s.spawn_x_min = grid_x_min + synth_spawn_margin;
  s.spawn_x_max = grid_x_max - synth_spawn_margin;
  s.spawn_y_min = grid_y_min + synth_spawn_margin;
  s.spawn_y_max = grid_y_max - synth_spawn_margin;
  s.clutter_range_max = std::max(grid_x_max, -grid_y_min) * 1.3;
  s.seed = seed;
  s.validate();
  return s;
}

LossConfig RunConfig::loss_config() const {
  LossConfig l;
  l.focal_alpha = focal_alpha;
  l.focal_gamma = focal_gamma;
  l.huber_delta_loc = huber_delta_loc;
  l.huber_delta_angle = huber_delta_angle;
  l.lambda_aux = lambda_aux;
  l.w_loc = w_loc;
  l.w_ang = w_ang;
  l.k_min = k_min;
  l.k_max = k_max;
  if (!class_weights_auto()) {
    const auto w = parse_csv(class_weights);
    if (w.size() != kNumClassChannels)
      throw std::invalid_argument("loss.class_weights needs four values or 'auto'");
    for (size_t i = 0; i < w.size(); ++i) l.class_weights[i] = w[i];
  }
  l.validate();
  return l;
}

AdamWConfig RunConfig::opt_config() const {
  AdamWConfig a;
  a.lr = lr;
  a.beta1 = beta1;
  a.beta2 = beta2;
  a.eps = opt_eps;
  a.weight_decay = weight_decay;
  return a;
}

EvalConfig RunConfig::eval_config() const {
  EvalConfig e;
  e.score_threshold = score_threshold;
  e.nms_iou = nms_iou;
  e.bin_edges = parse_csv(eval_bins);
  e.normalize_ate = normalize_ate;
  return e;
}

}  // namespace pseq
