// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>

#include "sftn/nn.hpp"

// SGD with momentum and a step schedule, shared by both training stages.
// Update rule: v <- momentum*v + (g + wd*theta); theta <- theta - lr*v.
// Weight decay applies to conv/linear weights only (ParamRef carries the
// policy bit); a parameter that received no gradient this step is skipped.

namespace sftn {

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int epochs = 30;
  std::vector<int> milestones = {19, 23, 27};
  double decay_factor = 0.1;
  int batch_size = 64;

  void validate() const {
    if (lr <= 0) throw ConfigError("sgd.lr must be positive");
    if (momentum < 0 || momentum >= 1) throw ConfigError("sgd.momentum must be in [0,1)");
    if (weight_decay < 0) throw ConfigError("sgd.weight_decay must be nonnegative");
    if (epochs < 0) throw ConfigError("sgd.epochs must be nonnegative");
    if (decay_factor <= 0) throw ConfigError("sgd.decay_factor must be positive");
    if (batch_size < 1) throw ConfigError("sgd.batch_size must be >= 1");
    for (size_t i = 0; i < milestones.size(); ++i) {
      if (i > 0 && milestones[i] <= milestones[i - 1])
        throw ConfigError("sgd.milestones must be strictly increasing");
      if (milestones[i] < 0 || milestones[i] >= epochs)
        throw ConfigError("sgd.milestones must lie in [0, epochs)");
    }
  }
};

inline double lr_at(int epoch, const SgdConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs)
    throw ConfigError("lr_at: epoch " + std::to_string(epoch) + " outside [0," +
                      std::to_string(cfg.epochs) + ")");
  double lr = cfg.lr;
  for (int m : cfg.milestones)
    if (m <= epoch) lr *= cfg.decay_factor;
  return lr;
}

template <class T>
class Sgd {
 public:
  Sgd(std::vector<ParamRef<T>> params, const SgdConfig& cfg)
      : params_(std::move(params)), momentum_(T(cfg.momentum)), wd_(T(cfg.weight_decay)) {
    velocity_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i)
      velocity_[i].assign(params_[i].tensor->size(), T(0));
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor->zero_grad();
  }

  void step(T lr) {
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& t = *params_[i].tensor;
      if (!t.has_grad()) continue;
      auto& g = t.grad();
      auto& v = velocity_[i];
      auto& theta = t.data();
      const T wd = params_[i].decay ? wd_ : T(0);
      for (size_t j = 0; j < theta.size(); ++j) {
        v[j] = momentum_ * v[j] + (g[j] + wd * theta[j]);
        theta[j] -= lr * v[j];
      }
    }
  }

  const std::vector<T>& velocity(size_t i) const { return velocity_[i]; }

 private:
  std::vector<ParamRef<T>> params_;
  std::vector<std::vector<T>> velocity_;
  T momentum_, wd_;
};

}  // namespace sftn
