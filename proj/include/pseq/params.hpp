#pragma once

#include <map>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "pseq/tensor.hpp"

namespace pseq {

/// One named learnable (or frozen) tensor. The name is the checkpoint key.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
};

/// Registry of named parameters. Names must be unique; iteration order is
/// lexicographic so that checkpoints and optimizer sweeps are reproducible.
template <typename T>
class ParamStore {
 public:
  Param<T>& create(const std::string& name, const std::vector<int>& shape, bool trainable = true) {
    auto [it, inserted] = params_.try_emplace(name);
    if (!inserted) throw std::invalid_argument("ParamStore: duplicate parameter name '" + name + "'");
    it->second = std::make_unique<Param<T>>();
    it->second->name = name;
    it->second->value = Tensor<T>(shape);
    it->second->trainable = trainable;
    return *it->second;
  }

  /// He-uniform fan-in initialization; fan_in is the receptive field size.
  Param<T>& create_he_uniform(const std::string& name, const std::vector<int>& shape, int fan_in,
                              std::mt19937_64& rng) {
    Param<T>& p = create(name, shape);
    const T bound = std::sqrt(T(6) / T(fan_in));
    std::uniform_real_distribution<T> dist(-bound, bound);
    for (auto& x : p.value.values()) x = dist(rng);
    return p;
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  Param<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
    return *it->second;
  }
  const Param<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
    return *it->second;
  }

  Tensor<T>& value(const std::string& name) { return at(name).value; }
  const Tensor<T>& value(const std::string& name) const { return at(name).value; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
  }

  size_t count() const { return params_.size(); }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (auto& [k, v] : params_) fn(*v);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& [k, v] : params_) fn(*v);
  }

  void zero_grads() {
    for (auto& [k, v] : params_)
      if (v->value.has_grad()) v->value.zero_grad();
  }

  /// Marks every parameter whose name starts with `prefix` as frozen.
  int freeze_prefix(const std::string& prefix) {
    int n = 0;
    for (auto& [k, v] : params_) {
      if (k.rfind(prefix, 0) == 0) {
        v->trainable = false;
        ++n;
      }
    }
    return n;
  }

 private:
  std::map<std::string, std::unique_ptr<Param<T>>> params_;
};

}  // namespace pseq
