// pillarseq command-line tool: synthetic data generation, training,
// evaluation, inference, BEV plots, and micro-benchmarks.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>

#include <CLI11.hpp>
#include <json.hpp>

#include "pseq/checkpoint.hpp"
#include "pseq/config.hpp"
#include "pseq/dataio.hpp"
#include "pseq/evaluation.hpp"
#include "pseq/scenegen.hpp"
#include "pseq/svg.hpp"
#include "pseq/trainer.hpp"

namespace fs = std::filesystem;
using namespace pseq;

namespace {

struct CommonArgs {
  std::string config_file;
  std::vector<std::string> overrides;
  int64_t seed = -1;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_file, "configuration file (key = value lines)");
  cmd->add_option("--set", args.overrides, "override a config key, e.g. --set train.lr=0.001")
      ->type_name("KEY=VALUE");
  cmd->add_option("--seed", args.seed, "random seed (overrides the config)");
  cmd->add_option("--out", args.out_dir, "output directory");
}

RunConfig resolve_config(const CommonArgs& args) {
  RunConfig cfg;
  if (!args.config_file.empty()) cfg.load_file(args.config_file);
  for (const auto& kv : args.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects KEY=VALUE, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
  return cfg;
}

uint64_t mix(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Loads a dataset and applies the global point budget per scan.
std::vector<Sequence> load_dataset(const fs::path& data_dir, const RunConfig& cfg) {
  std::vector<Sequence> out;
  for (const auto& dir : load_dataset_index(data_dir)) {
    Sequence seq = load_sequence(dir);
    for (size_t s = 0; s < seq.scans.size(); ++s) {
      seq.scans[s].points = apply_point_budget(seq.scans[s].points, cfg.pillar_point_budget,
                                               mix(cfg.seed, mix(out.size(), s)));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

nlohmann::json model_meta(const RunConfig& cfg) {
  return {{"grid", {cfg.grid_x_min, cfg.grid_x_max, cfg.grid_y_min, cfg.grid_y_max, cfg.grid_cell}},
          {"channels", cfg.pillar_channels},
          {"stage_convs", cfg.backbone_stage_convs},
          {"memory_placement", cfg.memory_placement},
          {"compensation", cfg.compensation},
          {"aux", cfg.aux}};
}

void require_compatible(const nlohmann::json& meta, const RunConfig& cfg) {
  const nlohmann::json want = model_meta(cfg);
  std::string diff;
  for (const auto& [key, value] : want.items()) {
    if (!meta.contains(key) || meta.at(key) != value) {
      diff += "\n  " + key + ": checkpoint " + (meta.contains(key) ? meta.at(key).dump() : "<absent>") +
              " vs config " + value.dump();
    }
  }
  if (!diff.empty()) throw std::runtime_error("checkpoint is incompatible with the configuration:" + diff);
}

// class frequencies (background, vehicle, cyclist, pedestrian) over the
// training targets; drives the classifier bias init and the class weights
std::array<double, kNumClassChannels> class_frequencies(const std::vector<Sequence>& data,
                                                        const GridSpec& head_grid) {
  std::array<double, kNumClassChannels> counts{};
  for (const auto& seq : data) {
    auto maps = build_targets<float>(seq.annotations, head_grid);
    for (int64_t i = 0; i < maps.class_onehot.size() / kNumClassChannels; ++i) {
      if (maps.unclear[static_cast<size_t>(i)]) continue;
      for (int c = 0; c < kNumClassChannels; ++c)
        if (maps.class_onehot[i * kNumClassChannels + c] > 0.5f) counts[static_cast<size_t>(c)] += 1;
    }
  }
  double total = 0;
  for (double c : counts) total += c;
  std::array<double, kNumClassChannels> freqs{};
  for (size_t i = 0; i < counts.size(); ++i) freqs[i] = total > 0 ? counts[i] / total : 0.25;
  return freqs;
}

int cmd_synth(const CommonArgs& common, int count) {
  RunConfig cfg = resolve_config(common);
  if (common.out_dir.empty()) throw std::invalid_argument("synth: --out is required");
  const fs::path out(common.out_dir);
  fs::create_directories(out);
  cfg.echo_to(out);
  std::vector<std::string> dirs;
  for (int i = 0; i < count; ++i) {
    SceneConfig scene = cfg.scene_config();
    scene.seed = mix(cfg.seed, static_cast<uint64_t>(i));
    Sequence seq = generate_scene(scene);
    char name[32];
    std::snprintf(name, sizeof(name), "seq_%06d", i);
    save_sequence(seq, out / name);
    dirs.emplace_back(name);
  }
  save_dataset_index(out, dirs);
  std::cout << "wrote " << count << " sequences to " << out << "\n";
  return 0;
}

int cmd_train(const CommonArgs& common, const std::string& data_dir, const std::string& resume) {
  RunConfig cfg = resolve_config(common);
  if (common.out_dir.empty()) throw std::invalid_argument("train: --out is required");
  const fs::path out(common.out_dir);
  fs::create_directories(out);
  cfg.echo_to(out);

  std::vector<Sequence> data = load_dataset(data_dir, cfg);
  if (data.empty()) throw std::runtime_error("train: no sequences in " + data_dir);
  ModelConfig mcfg = cfg.model_config();
  const GridSpec head_grid = mcfg.grid.at_stride(mcfg.grid.output_stride);

  Model<float> model(mcfg);
  LossConfig loss = cfg.loss_config();
  const auto freqs = class_frequencies(data, head_grid);
  if (cfg.class_weights_auto()) {
    // inverse frequency, normalized to mean 1
    double sum = 0;
    for (size_t c = 0; c < freqs.size(); ++c) {
      loss.class_weights[c] = 1.0 / std::max(freqs[c], 1e-6);
      sum += loss.class_weights[c];
    }
    for (auto& w : loss.class_weights) w *= kNumClassChannels / sum;
  }
  if (cfg.bias_init_enabled) model.init_classifier_bias(freqs);
  if (!cfg.transfer_from.empty()) {
    auto report = transfer_weights(model, cfg.transfer_from);
    std::cout << "transferred " << report.loaded.size() << " tensors, " << report.missing_in_file.size()
              << " left at fresh init; encoder and downsampling stages frozen\n";
  }

  Trainer<float> trainer(model, loss, cfg.opt_config(), mix(cfg.seed, 0xA11CE),
                         cfg.backprop_through_warmup);
  if (!resume.empty()) {
    auto report = load_checkpoint(resume, model.params(), /*strict=*/false);
    require_compatible(report.meta, cfg);
    std::cout << "resumed from " << resume << " at step " << trainer.optimizer().steps() << "\n";
  }

  std::ofstream log(out / "train_log.csv", resume.empty() ? std::ios::trunc : std::ios::app);
  if (resume.empty()) log << "step,total,focal,loc,ang,aux\n";
  const double base_lr = cfg.lr;
  const int64_t total_steps = static_cast<int64_t>(cfg.epochs) * static_cast<int64_t>(data.size());
  std::mt19937_64 order_rng(mix(cfg.seed, 0x0BDE5ULL));

  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), size_t{0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_total = 0;
    int counted = 0;
    for (size_t idx : order) {
      if (cfg.cosine_decay) {
        const double t = std::min(1.0, static_cast<double>(trainer.optimizer().steps()) /
                                           std::max<int64_t>(1, total_steps));
        trainer.optimizer().set_lr(base_lr * 0.5 * (1.0 + std::cos(M_PI * t)));
      }
      auto res = trainer.step(data[idx]);
      if (res.skipped) continue;
      log << trainer.optimizer().steps() << "," << res.total << "," << res.focal << "," << res.loc << ","
          << res.ang << "," << res.aux << "\n";
      epoch_total += res.total;
      ++counted;
    }
    std::cout << "epoch " << epoch + 1 << "/" << cfg.epochs << "  mean loss "
              << (counted ? epoch_total / counted : 0.0) << "\n";
  }
  log.flush();

  nlohmann::json meta = model_meta(cfg);
  meta["step"] = trainer.optimizer().steps();
  meta["class_frequencies"] = freqs;
  meta["class_weights"] = loss.class_weights;
  save_checkpoint(out / "model.ckpt", model.params(), meta);
  std::cout << "checkpoint written to " << (out / "model.ckpt") << "\n";
  return 0;
}

std::vector<FrameDetections> run_inference(Model<float>& model, const std::vector<Sequence>& data,
                                           const RunConfig& cfg, std::vector<std::vector<RotatedBox>>* raw) {
  const GridSpec head_grid = model.config().grid.at_stride(model.config().grid.output_stride);
  std::vector<FrameDetections> frames;
  for (const auto& seq : data) {
    const int use = cfg.eval_scans > 0 ? cfg.eval_scans : -1;
    auto [head, state] = model.forward(seq, use);
    FrameDetections frame;
    frame.dets = decode_detections(head, head_grid, cfg.score_threshold, cfg.nms_iou);
    frame.gts = seq.annotations;
    if (raw) raw->push_back(frame.dets);
    frames.push_back(std::move(frame));
  }
  return frames;
}

Model<float> load_model(const std::string& checkpoint, const RunConfig& cfg) {
  require_compatible(load_checkpoint_meta(checkpoint), cfg);
  Model<float> model(cfg.model_config());
  load_checkpoint(checkpoint, model.params(), /*strict=*/false);
  return model;
}

int cmd_eval(const CommonArgs& common, const std::string& checkpoint, const std::string& data_dir) {
  RunConfig cfg = resolve_config(common);
  std::vector<Sequence> data = load_dataset(data_dir, cfg);
  if (data.empty()) throw std::runtime_error("eval: empty evaluation set in " + data_dir);
  Model<float> model = load_model(checkpoint, cfg);
  auto frames = run_inference(model, data, cfg, nullptr);
  MetricsReport report = evaluate_detections(frames, cfg.eval_config());
  std::cout << report.to_text();
  if (!common.out_dir.empty()) {
    const fs::path out(common.out_dir);
    fs::create_directories(out);
    cfg.echo_to(out);
    std::ofstream mj(out / "metrics.json");
    mj << report.to_json().dump(2) << "\n";
    std::ofstream mt(out / "metrics.txt");
    mt << report.to_text();
  }
  return 0;
}

int cmd_infer(const CommonArgs& common, const std::string& checkpoint, const std::string& data_dir) {
  RunConfig cfg = resolve_config(common);
  if (common.out_dir.empty()) throw std::invalid_argument("infer: --out is required");
  std::vector<Sequence> data = load_dataset(data_dir, cfg);
  if (data.empty()) throw std::runtime_error("infer: no sequences in " + data_dir);
  Model<float> model = load_model(checkpoint, cfg);
  std::vector<std::vector<RotatedBox>> raw;
  run_inference(model, data, cfg, &raw);
  const fs::path out(common.out_dir);
  fs::create_directories(out);
  cfg.echo_to(out);
  const auto dirs = load_dataset_index(data_dir);
  for (size_t i = 0; i < raw.size(); ++i) {
    std::ofstream f(out / (dirs[i].filename().string() + "_detections.json"));
    f << detections_to_json(raw[i]).dump(2) << "\n";
  }
  std::cout << "wrote detections for " << raw.size() << " sequences to " << out << "\n";
  return 0;
}

int cmd_plot_bev(const CommonArgs& common, const std::string& sequence_dir, const std::string& detections,
                 const std::string& out_file) {
  RunConfig cfg = resolve_config(common);
  Sequence seq = load_sequence(sequence_dir);
  std::vector<RotatedBox> dets;
  if (!detections.empty()) {
    std::ifstream f(detections);
    if (!f) throw std::runtime_error("plot-bev: cannot open " + detections);
    nlohmann::json j;
    f >> j;
    dets = detections_from_json(j);
  }
  render_bev_svg(seq.core(), seq.annotations, dets, cfg.grid(), out_file);
  std::cout << "wrote " << out_file << "\n";
  return 0;
}

int cmd_bench(const CommonArgs& common, const std::string& stage, int reps) {
  RunConfig cfg = resolve_config(common);
  ModelConfig mcfg = cfg.model_config();
  std::mt19937_64 rng(cfg.seed);

  // synthetic cloud at the configured budget, uniform over the grid
  const int n = cfg.pillar_point_budget;
  Tensorf cloud({n, 4});
  std::uniform_real_distribution<float> ux(static_cast<float>(cfg.grid_x_min), static_cast<float>(cfg.grid_x_max) - 1e-3f);
  std::uniform_real_distribution<float> uy(static_cast<float>(cfg.grid_y_min), static_cast<float>(cfg.grid_y_max) - 1e-3f);
  std::uniform_real_distribution<float> uz(0.f, 3.f), ui(0.f, 1.f);
  for (int i = 0; i < n; ++i) {
    cloud(i, 0) = ux(rng);
    cloud(i, 1) = uy(rng);
    cloud(i, 2) = uz(rng);
    cloud(i, 3) = ui(rng);
  }
  SceneConfig scene = cfg.scene_config();
  scene.seed = cfg.seed;
  Sequence seq = generate_scene(scene);
  Model<float> model(mcfg);
  ParamStore<float>& store = model.params();
  (void)store;
  PillarEncoder<float> encoder;
  ParamStore<float> enc_store;
  std::mt19937_64 enc_rng(7);
  encoder.init(enc_store, mcfg.pillar, enc_rng);

  auto run_once = [&]() {
    if (stage == "pillarize") {
      auto pil = pillarize(cloud, mcfg.grid);
      return static_cast<double>(pil.decorated.dim(0));
    } else if (stage == "encode") {
      auto pil = pillarize(cloud, mcfg.grid);
      auto pseudo = encoder.forward(pil, mcfg.grid, false, nullptr);
      return static_cast<double>(pseudo.size());
    } else if (stage == "forward") {
      Sequence single;
      single.scans.push_back(seq.scans.back());
      auto [head, state] = model.forward(single);
      return static_cast<double>(head.class_probs.size());
    } else if (stage == "e2e") {
      auto [head, state] = model.forward(seq);
      return static_cast<double>(head.class_probs.size());
    }
    throw std::invalid_argument("bench: unknown stage '" + stage + "'");
  };

  std::vector<double> ms(static_cast<size_t>(reps));
  double sink = 0;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    sink += run_once();
    const auto t1 = std::chrono::steady_clock::now();
    ms[static_cast<size_t>(r)] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  std::vector<double> sorted = ms;
  std::sort(sorted.begin(), sorted.end());
  const double mean = std::accumulate(ms.begin(), ms.end(), 0.0) / reps;
  const double median = sorted[static_cast<size_t>((reps - 1) / 2)];
  const double p99 = sorted[static_cast<size_t>(std::min<int>(reps - 1, static_cast<int>(std::ceil(0.99 * reps)) - 1))];
  nlohmann::json out = {{"stage", stage},       {"repetitions", reps}, {"mean_ms", mean},
                        {"median_ms", median},  {"p99_ms", p99},       {"hz", mean > 0 ? 1000.0 / mean : 0.0},
                        {"checksum", sink}};
  std::cout << out.dump(2) << "\n";
  if (!common.out_dir.empty()) {
    fs::create_directories(common.out_dir);
    cfg.echo_to(common.out_dir);
    std::ofstream f(fs::path(common.out_dir) / ("bench_" + stage + ".json"));
    f << out.dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"temporally-recurrent pillar-based LiDAR object detection"};
  app.require_subcommand(1);

  CommonArgs synth_args, train_args, eval_args, infer_args, plot_args, bench_args;
  int synth_count = 1;
  std::string train_data, train_resume;
  std::string eval_ckpt, eval_data;
  std::string infer_ckpt, infer_data;
  std::string plot_sequence, plot_detections, plot_out = "bev.svg";
  std::string bench_stage = "e2e";
  int bench_reps = 10;

  auto* synth = app.add_subcommand("synth", "generate synthetic sequences");
  add_common(synth, synth_args);
  synth->add_option("--count", synth_count, "number of sequences")->default_val(1);

  auto* train = app.add_subcommand("train", "train a model");
  add_common(train, train_args);
  train->add_option("--data", train_data, "dataset directory (from synth)")->required();
  train->add_option("--resume", train_resume, "checkpoint to resume from");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, eval_args);
  eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();

  auto* infer = app.add_subcommand("infer", "write detections for a dataset");
  add_common(infer, infer_args);
  infer->add_option("--checkpoint", infer_ckpt, "model checkpoint")->required();
  infer->add_option("--data", infer_data, "dataset directory")->required();

  auto* plot = app.add_subcommand("plot-bev", "render a BEV SVG of a sequence");
  add_common(plot, plot_args);
  plot->add_option("--sequence", plot_sequence, "sequence directory")->required();
  plot->add_option("--detections", plot_detections, "detections JSON (optional)");
  plot->add_option("--file", plot_out, "output SVG path")->default_val("bev.svg");

  auto* bench = app.add_subcommand("bench", "time a pipeline stage");
  add_common(bench, bench_args);
  bench->add_option("--stage", bench_stage, "pillarize | encode | forward | e2e")->default_val("e2e");
  bench->add_option("--reps", bench_reps, "repetitions")->default_val(10);

  CLI11_PARSE(app, argc, argv);
  try {
    if (synth->parsed()) return cmd_synth(synth_args, synth_count);
    if (train->parsed()) return cmd_train(train_args, train_data, train_resume);
    if (eval->parsed()) return cmd_eval(eval_args, eval_ckpt, eval_data);
    if (infer->parsed()) return cmd_infer(infer_args, infer_ckpt, infer_data);
    if (plot->parsed()) return cmd_plot_bev(plot_args, plot_sequence, plot_detections, plot_out);
    if (bench->parsed()) return cmd_bench(bench_args, bench_stage, bench_reps);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
