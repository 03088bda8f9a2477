#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "restlab/numcore/tensor.hpp"

namespace restlab::nc {

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // L2 coefficient added to the gradient
};

/// Plain SGD or bias-corrected adaptive moments (Adam). Moment buffers are
/// sized on the first step and bound to the parameter list from then on.
template <typename Real>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {
    if (!(cfg_.learning_rate > 0.0)) throw ConfigError("optimizer: learning rate must be > 0");
  }

  const OptimizerConfig& config() const { return cfg_; }
  long step_count() const { return steps_; }

  /// Applies one update to every parameter and clears its gradient.
  void step(std::span<Parameter<Real>> params) {
    for (const auto& p : params) {
      if (!p.value.has_grad()) throw StateError("optimizer: parameter '" + p.name + "' has no gradient");
      for (Real g : p.value.grad()) {
        if (!std::isfinite(g)) throw NumericalError("optimizer: non-finite gradient in '" + p.name + "'");
      }
    }
    if (cfg_.kind == OptimizerKind::kAdam) bind_moments(params);
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto value = params[k].value.data();
      auto grad = params[k].value.grad();
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = static_cast<double>(grad[i]) + cfg_.weight_decay * static_cast<double>(value[i]);
        if (cfg_.kind == OptimizerKind::kSgd) {
          value[i] = static_cast<Real>(value[i] - cfg_.learning_rate * g);
        } else {
          double& m = first_[k][i];
          double& v = second_[k][i];
          m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
          v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
          const double mhat = m / bc1;
          const double vhat = v / bc2;
          value[i] = static_cast<Real>(value[i] - cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon));
        }
      }
      params[k].value.clear_grad();
    }
  }

 private:
  void bind_moments(std::span<Parameter<Real>> params) {
    if (first_.empty()) {
      for (const auto& p : params) {
        first_.emplace_back(p.value.size(), 0.0);
        second_.emplace_back(p.value.size(), 0.0);
      }
      return;
    }
    if (first_.size() != params.size()) throw StateError("optimizer: parameter list changed between steps");
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (first_[k].size() != params[k].value.size()) {
        throw StateError("optimizer: moment shape mismatch for '" + params[k].name + "'");
      }
    }
  }

  OptimizerConfig cfg_;
  long steps_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

template <typename Real>
void zero_grads(std::span<Parameter<Real>> params) {
  for (auto& p : params) p.value.clear_grad();
}

}  // namespace restlab::nc
