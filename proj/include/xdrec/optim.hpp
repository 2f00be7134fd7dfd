#pragma once

#include <cstdint>
#include <vector>

#include "xdrec/autograd.hpp"

namespace xdrec {

struct AdamConfig {
  float learning_rate = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Adam without weight decay. One instance per parameter set.
class Adam {
 public:
  Adam(ParamList params, AdamConfig cfg);

  // When skip_untouched is set, tensors whose gradient is all zeros keep
  // both their values and moment estimates.
  void step(bool skip_untouched = false);
  void zero_grad();

  int64_t steps() const { return steps_; }
  void set_steps(int64_t s) { steps_ = s; }
  const ParamList& params() const { return params_; }

  // Moment tensors as named views, for checkpointing.
  ParamList state() const;

 private:
  ParamList params_;
  AdamConfig cfg_;
  std::vector<Var> m_;
  std::vector<Var> v_;
  int64_t steps_ = 0;
};

}  // namespace xdrec
