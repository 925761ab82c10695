#include "pseq/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

namespace pseq {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'T', 'P', 'S', 'C', 'A', 'N', '1', '\0'};
constexpr uint32_t kVersion = 1;
}  // namespace

void Sequence::validate() const {
  if (scans.empty()) throw std::invalid_argument("Sequence: no scans");
  for (size_t i = 0; i < scans.size(); ++i) {
    scans[i].pose.require_valid();
    const Tensorf& p = scans[i].points;
    if (p.rank() != 2 || p.dim(1) != 4) throw std::invalid_argument("Sequence: points must be N x 4");
    for (int64_t k = 0; k < p.size(); ++k)
      if (!std::isfinite(p[k])) throw std::invalid_argument("Sequence: non-finite point coordinate");
    if (i > 0 && !(scans[i].timestamp > scans[i - 1].timestamp))
      throw std::invalid_argument("Sequence: timestamps not strictly increasing");
  }
}

Tensorf apply_point_budget(const Tensorf& points, int budget, uint64_t seed) {
  if (budget <= 0) throw std::invalid_argument("apply_point_budget: budget must be positive");
  const int n = points.dim(0);
  if (n <= budget) return points;
  std::mt19937_64 rng(seed);
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  // partial Fisher-Yates, then restore original order within the subset
  for (int i = 0; i < budget; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(pick(rng))]);
  }
  idx.resize(static_cast<size_t>(budget));
  std::sort(idx.begin(), idx.end());
  const int d = points.dim(1);
  Tensorf out({budget, d});
  for (int i = 0; i < budget; ++i)
    for (int j = 0; j < d; ++j) out(i, j) = points(idx[static_cast<size_t>(i)], j);
  return out;
}

void save_scan_points(const fs::path& path, const Tensorf& points) {
  if (points.rank() != 2 || points.dim(1) != 4)
    throw std::invalid_argument("save_scan_points: points must be N x 4");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_scan_points: cannot open " + path.string());
  f.write(kMagic, 8);
  const uint32_t version = kVersion;
  const uint32_t n = static_cast<uint32_t>(points.dim(0));
  f.write(reinterpret_cast<const char*>(&version), 4);
  f.write(reinterpret_cast<const char*>(&n), 4);
  f.write(reinterpret_cast<const char*>(points.data()), static_cast<std::streamsize>(points.size() * 4));
  if (!f) throw std::runtime_error("save_scan_points: write failed for " + path.string());
}

Tensorf load_scan_points(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_scan_points: cannot open " + path.string());
  char magic[8];
  if (!f.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("load_scan_points: bad magic in " + path.string());
  uint32_t version = 0, n = 0;
  if (!f.read(reinterpret_cast<char*>(&version), 4) || version != kVersion)
    throw std::runtime_error("load_scan_points: unsupported version in " + path.string());
  if (!f.read(reinterpret_cast<char*>(&n), 4))
    throw std::runtime_error("load_scan_points: truncated header in " + path.string());
  Tensorf points({static_cast<int>(n), 4});
  if (!f.read(reinterpret_cast<char*>(points.data()), static_cast<std::streamsize>(points.size() * 4)))
    throw std::runtime_error("load_scan_points: truncated point data in " + path.string());
  return points;
}

void save_sequence(const Sequence& seq, const fs::path& dir) {
  seq.validate();
  fs::create_directories(dir);
  json scans = json::array();
  for (size_t i = 0; i < seq.scans.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "scan_%02zu.bin", i);
    save_scan_points(dir / name, seq.scans[i].points);
    json entry;
    entry["file"] = name;
    entry["pose"] = seq.scans[i].pose.m;
    entry["timestamp"] = seq.scans[i].timestamp;
    scans.push_back(entry);
  }
  json anns = json::array();
  for (const auto& b : seq.annotations) {
    anns.push_back({{"cx", b.cx},
                    {"cy", b.cy},
                    {"cz", b.cz},
                    {"l", b.length},
                    {"w", b.width},
                    {"h", b.height},
                    {"yaw", b.yaw},
                    {"class", to_string(b.cls)}});
  }
  json manifest;
  manifest["scans"] = scans;
  manifest["core_annotations"] = anns;
  std::ofstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("save_sequence: cannot open " + (dir / "manifest.json").string());
  f << manifest.dump(2) << "\n";
}

Sequence load_sequence(const fs::path& dir_or_manifest) {
  fs::path manifest_path = dir_or_manifest;
  if (fs::is_directory(manifest_path)) manifest_path /= "manifest.json";
  std::ifstream f(manifest_path);
  if (!f) throw std::runtime_error("load_sequence: cannot open " + manifest_path.string());
  json manifest;
  try {
    f >> manifest;
  } catch (const json::exception& e) {
    throw std::runtime_error("load_sequence: bad JSON in " + manifest_path.string() + ": " + e.what());
  }
  const fs::path dir = manifest_path.parent_path();
  Sequence seq;
  for (const auto& entry : manifest.at("scans")) {
    Scan scan;
    scan.points = load_scan_points(dir / entry.at("file").get<std::string>());
    const auto pose = entry.at("pose").get<std::vector<double>>();
    if (pose.size() != 16) throw std::runtime_error("load_sequence: pose must have 16 values");
    std::copy(pose.begin(), pose.end(), scan.pose.m.begin());
    scan.timestamp = entry.at("timestamp").get<double>();
    seq.scans.push_back(std::move(scan));
  }
  for (const auto& entry : manifest.at("core_annotations")) {
    RotatedBox b;
    b.cx = entry.at("cx").get<double>();
    b.cy = entry.at("cy").get<double>();
    b.cz = entry.at("cz").get<double>();
    b.length = entry.at("l").get<double>();
    b.width = entry.at("w").get<double>();
    b.height = entry.at("h").get<double>();
    b.yaw = entry.at("yaw").get<double>();
    b.cls = box_class_from_string(entry.at("class").get<std::string>());
    seq.annotations.push_back(b);
  }
  seq.validate();
  return seq;
}

void save_dataset_index(const fs::path& root, const std::vector<std::string>& seq_dirs) {
  json index;
  index["sequences"] = seq_dirs;
  std::ofstream f(root / "index.json");
  if (!f) throw std::runtime_error("save_dataset_index: cannot open " + (root / "index.json").string());
  f << index.dump(2) << "\n";
}

std::vector<fs::path> load_dataset_index(const fs::path& root) {
  std::ifstream f(root / "index.json");
  if (!f) throw std::runtime_error("load_dataset_index: cannot open " + (root / "index.json").string());
  json index;
  f >> index;
  std::vector<fs::path> out;
  for (const auto& s : index.at("sequences")) out.push_back(root / s.get<std::string>());
  return out;
}

}  // namespace pseq
