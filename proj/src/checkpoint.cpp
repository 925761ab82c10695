#include "pseq/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace pseq {

namespace {

template <typename T>
const char* dtype_name();
template <>
const char* dtype_name<float>() {
  return "f32";
}
template <>
const char* dtype_name<double>() {
  return "f64";
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& store,
                     const nlohmann::json& meta) {
  std::ofstream blob(path, std::ios::binary);
  if (!blob) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  nlohmann::json tensors = nlohmann::json::array();
  uint64_t offset = 0;
  store.for_each([&](const Param<T>& p) {
    const uint64_t bytes = static_cast<uint64_t>(p.value.size()) * sizeof(T);
    tensors.push_back({{"name", p.name},
                       {"shape", p.value.shape()},
                       {"dtype", dtype_name<T>()},
                       {"byte_offset", offset},
                       {"byte_size", bytes}});
    blob.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(bytes));
    offset += bytes;
  });
  if (!blob) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
  nlohmann::json index;
  index["tensors"] = tensors;
  index["meta"] = meta;
  std::ofstream idx(path.string() + ".json");
  if (!idx) throw std::runtime_error("save_checkpoint: cannot open " + path.string() + ".json");
  idx << index.dump(2) << "\n";
}

template <typename T>
LoadReport load_checkpoint(const std::filesystem::path& path, ParamStore<T>& store, bool strict) {
  std::ifstream idx(path.string() + ".json");
  if (!idx) throw std::runtime_error("load_checkpoint: cannot open " + path.string() + ".json");
  nlohmann::json index;
  idx >> index;
  std::ifstream blob(path, std::ios::binary);
  if (!blob) throw std::runtime_error("load_checkpoint: cannot open " + path.string());

  LoadReport report;
  report.meta = index.value("meta", nlohmann::json::object());
  std::vector<std::string> shape_errors;
  std::vector<std::string> seen;

  for (const auto& entry : index.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    seen.push_back(name);
    if (!store.contains(name)) {
      report.unused_in_file.push_back(name);
      continue;
    }
    Param<T>& p = store.at(name);
    const auto shape = entry.at("shape").get<std::vector<int>>();
    if (shape != p.value.shape()) {
      std::ostringstream os;
      os << name << ": file";
      for (int d : shape) os << " " << d;
      os << " vs model " << p.value.shape_str();
      shape_errors.push_back(os.str());
      continue;
    }
    const std::string dtype = entry.at("dtype").get<std::string>();
    const uint64_t off = entry.at("byte_offset").get<uint64_t>();
    const uint64_t bytes = entry.at("byte_size").get<uint64_t>();
    blob.seekg(static_cast<std::streamoff>(off));
    if (dtype == dtype_name<T>()) {
      if (!blob.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(bytes)))
        throw std::runtime_error("load_checkpoint: truncated blob reading " + name);
    } else if (dtype == "f32") {
      std::vector<float> tmp(bytes / sizeof(float));
      if (!blob.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(bytes)))
        throw std::runtime_error("load_checkpoint: truncated blob reading " + name);
      for (int64_t i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<T>(tmp[static_cast<size_t>(i)]);
    } else if (dtype == "f64") {
      std::vector<double> tmp(bytes / sizeof(double));
      if (!blob.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(bytes)))
        throw std::runtime_error("load_checkpoint: truncated blob reading " + name);
      for (int64_t i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<T>(tmp[static_cast<size_t>(i)]);
    } else {
      throw std::runtime_error("load_checkpoint: unknown dtype '" + dtype + "' for " + name);
    }
    report.loaded.push_back(name);
  }
  for (const auto& name : store.names()) {
    if (std::find(seen.begin(), seen.end(), name) == seen.end()) report.missing_in_file.push_back(name);
  }
  if (!shape_errors.empty()) {
    std::string msg = "load_checkpoint: shape mismatches:";
    for (const auto& e : shape_errors) msg += "\n  " + e;
    throw std::runtime_error(msg);
  }
  if (strict && !report.missing_in_file.empty()) {
    std::string msg = "load_checkpoint: parameters missing from checkpoint:";
    for (const auto& e : report.missing_in_file) msg += "\n  " + e;
    throw std::runtime_error(msg);
  }
  return report;
}

nlohmann::json load_checkpoint_meta(const std::filesystem::path& path) {
  std::ifstream idx(path.string() + ".json");
  if (!idx) throw std::runtime_error("load_checkpoint_meta: cannot open " + path.string() + ".json");
  nlohmann::json index;
  idx >> index;
  return index.value("meta", nlohmann::json::object());
}

template void save_checkpoint<float>(const std::filesystem::path&, const ParamStore<float>&,
                                     const nlohmann::json&);
template void save_checkpoint<double>(const std::filesystem::path&, const ParamStore<double>&,
                                      const nlohmann::json&);
template LoadReport load_checkpoint<float>(const std::filesystem::path&, ParamStore<float>&, bool);
template LoadReport load_checkpoint<double>(const std::filesystem::path&, ParamStore<double>&, bool);

}  // namespace pseq
