#pragma once

#include <cmath>
#include <string>

#include "pseq/params.hpp"

namespace pseq {

struct AdamWConfig {
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled weight-decay Adam. Moment tensors live in the same ParamStore
/// under "opt/" (non-trainable) so checkpoints capture the optimizer state
/// and resumed runs continue seamlessly. Frozen parameters receive no update
/// of any kind.
template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& store, const AdamWConfig& cfg) : store_(&store), cfg_(cfg) {
    if (!store.contains("opt/step")) store.create("opt/step", {1}, /*trainable=*/false);
    store.for_each([&](Param<T>& p) {
      if (p.name.rfind("opt/", 0) == 0) return;
      ensure_state(p.name, p.value.shape());
    });
  }

  int64_t steps() const { return static_cast<int64_t>(store_->value("opt/step")[0]); }
  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  /// One update from the gradients accumulated on the parameter tensors.
  void step() {
    Tensor<T>& step_t = store_->value("opt/step");
    step_t[0] += T(1);
    const double t = static_cast<double>(step_t[0]);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    store_->for_each([&](Param<T>& p) {
      if (p.name.rfind("opt/", 0) == 0) return;
      if (!p.trainable || !p.value.has_grad()) return;
      Tensor<T>& m = store_->value("opt/m/" + p.name);
      Tensor<T>& v = store_->value("opt/v/" + p.name);
      const auto& g = p.value.grad();
      for (int64_t i = 0; i < p.value.size(); ++i) {
        const double gi = static_cast<double>(g[static_cast<size_t>(i)]);
        const double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * gi;
        const double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        double w = static_cast<double>(p.value[i]);
        w -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps));
        w -= cfg_.lr * cfg_.weight_decay * static_cast<double>(p.value[i]);
        p.value[i] = static_cast<T>(w);
      }
    });
  }

 private:
  void ensure_state(const std::string& name, const std::vector<int>& shape) {
    if (!store_->contains("opt/m/" + name)) store_->create("opt/m/" + name, shape, false);
    if (!store_->contains("opt/v/" + name)) store_->create("opt/v/" + name, shape, false);
  }

  ParamStore<T>* store_;
  AdamWConfig cfg_;
};

}  // namespace pseq
