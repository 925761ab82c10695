#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "pseq/params.hpp"

namespace pseq {

/// Checkpoints are two files: `<path>` holds the raw little-endian tensor
/// blob, `<path>.json` the index: {tensors: [{name, shape, dtype,
/// byte_offset, byte_size}], meta: {...}}. Tensors are laid out in name
/// order.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& store,
                     const nlohmann::json& meta);

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> missing_in_file;   // store params not in the checkpoint
  std::vector<std::string> unused_in_file;    // checkpoint tensors with no target
  nlohmann::json meta;
};

/// Copies checkpoint tensors into same-named parameters. Shape mismatches
/// are always an error (all offending keys listed); missing keys are an
/// error only under `strict`.
template <typename T>
LoadReport load_checkpoint(const std::filesystem::path& path, ParamStore<T>& store, bool strict);

/// Reads only the meta block of a checkpoint index.
nlohmann::json load_checkpoint_meta(const std::filesystem::path& path);

}  // namespace pseq
