#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cpae/errors.hpp"
#include "cpae/tensor.hpp"

namespace cpae {

template <typename S>
struct AdamConfig {
  S lr = S(1e-4);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  S weight_decay = S(0);
};

// Adam with bias correction. Moment buffers shape-match their parameters;
// the step count increases strictly monotonically.
template <typename S>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Param<S>*> params, AdamConfig<S> cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    slots_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      slots_[i].m.assign(params_[i]->value.size(), S(0));
      slots_[i].v.assign(params_[i]->value.size(), S(0));
    }
  }

  std::int64_t step_count() const { return step_; }
  const AdamConfig<S>& config() const { return cfg_; }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  // One update over all parameters. Throws TrainingDivergedError naming the
  // offending tensor if a gradient or updated value is not finite.
  void step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      Param<S>& p = *params_[pi];
      if (p.grad.empty()) continue;  // parameter unused this step
      Slot& s = slots_[pi];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        S g = p.grad[i];
        if (!std::isfinite(static_cast<double>(g)))
          throw TrainingDivergedError("non-finite gradient in '" + p.name + "'");
        if (cfg_.weight_decay != S(0)) g += cfg_.weight_decay * p.value[i];
        s.m[i] = cfg_.beta1 * s.m[i] + (S(1) - cfg_.beta1) * g;
        s.v[i] = cfg_.beta2 * s.v[i] + (S(1) - cfg_.beta2) * g * g;
        const double mhat = static_cast<double>(s.m[i]) / bc1;
        const double vhat = static_cast<double>(s.v[i]) / bc2;
        p.value[i] -= static_cast<S>(static_cast<double>(cfg_.lr) * mhat /
                                     (std::sqrt(vhat) + static_cast<double>(cfg_.eps)));
        if (!std::isfinite(static_cast<double>(p.value[i])))
          throw TrainingDivergedError("non-finite value in '" + p.name + "' after update");
      }
    }
  }

 private:
  struct Slot {
    std::vector<S> m, v;
  };

  std::vector<Param<S>*> params_;
  std::vector<Slot> slots_;
  AdamConfig<S> cfg_;
  std::int64_t step_ = 0;
};

}  // namespace cpae
