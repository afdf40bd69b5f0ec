#pragma once

#include <cstdint>
#include <vector>

#include "dcp/gradcheck.hpp"

namespace dcp {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
};

/// Adam with decoupled weight decay. Decay applies to matrices only
/// (rank >= 2); biases, norms and scalars are left undecayed.
class AdamW {
 public:
  AdamW(ParameterList params, AdamWOptions options = {});

  void step();
  void zero_grad();

  double lr() const { return options_.lr; }
  void set_lr(double lr) { options_.lr = lr; }
  std::uint64_t steps() const { return t_; }
  const ParameterList& params() const { return params_; }

 private:
  ParameterList params_;
  AdamWOptions options_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::uint64_t t_ = 0;
};

}  // namespace dcp
