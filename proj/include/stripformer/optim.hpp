// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "stripformer/model.hpp"

namespace stripformer {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-parameter first/second moment state, keyed to a registry by position
// and name. step() applies the bias-corrected update in place.
template <typename T>
class AdamState {
 public:
  explicit AdamState(const ParamRegistry<T>& params, AdamConfig cfg = {}) : cfg_(cfg) {
    slots_.reserve(params.size());
    for (const auto& [name, t] : params) {
      slots_.push_back(Slot{name, std::vector<T>(static_cast<size_t>(t.numel()), T(0)),
                            std::vector<T>(static_cast<size_t>(t.numel()), T(0))});
    }
  }

  int64_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  void step(ParamRegistry<T>& params, double lr) {
    if (params.size() != slots_.size()) {
      throw UsageError("adam: registry has " + std::to_string(params.size()) + " parameters, state has " +
                       std::to_string(slots_.size()));
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& [name, p] = params[i];
      Slot& slot = slots_[i];
      if (slot.name != name) {
        throw UsageError("adam: parameter order changed ('" + name + "' vs '" + slot.name + "')");
      }
      if (!p.has_grad()) {
        throw UsageError("adam: missing gradient for parameter '" + name + "'");
      }
      auto g = p.grad();
      auto pd = p.data_mut();
      for (int64_t j = 0; j < p.numel(); ++j) {
        const double gj = g[j];
        const double m = cfg_.beta1 * slot.m[j] + (1.0 - cfg_.beta1) * gj;
        const double v = cfg_.beta2 * slot.v[j] + (1.0 - cfg_.beta2) * gj * gj;
        slot.m[j] = static_cast<T>(m);
        slot.v[j] = static_cast<T>(v);
        pd[j] -= static_cast<T>(lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps));
      }
    }
  }

 private:
  struct Slot {
    std::string name;
    std::vector<T> m, v;
  };
  std::vector<Slot> slots_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

struct Schedule {
  double lr_init = 1e-4;
  double lr_final = 1e-7;
  int64_t total_steps = 1000;
};

// Cosine annealing from lr_init to lr_final. Endpoints are returned exactly
// (cos(pi) is not exactly -1 in floating point).
inline double cosine_lr(int64_t step, const Schedule& s) {
  if (step < 0 || step > s.total_steps) {
    throw UsageError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                     std::to_string(s.total_steps) + "]");
  }
  if (step == 0) return s.lr_init;
  if (step == s.total_steps) return s.lr_final;
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(s.total_steps);
  return s.lr_final + 0.5 * (s.lr_init - s.lr_final) * (1.0 + std::cos(phase));
}

}  // namespace stripformer
