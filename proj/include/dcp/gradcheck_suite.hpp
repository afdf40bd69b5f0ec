#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dcp/config.hpp"
#include "dcp/gradcheck.hpp"

namespace dcp {

/// A scalar function of named parameters, built for one seed.
struct GradCheckFixture {
  std::function<Tensor()> f;
  ParameterList params;
  GradCheckOptions options;
};

struct GradCheckCase {
  std::string name;
  std::function<GradCheckFixture(std::uint64_t seed)> make;
};

/// Every differentiable op, the prompt-pool and objective compositions, a
/// transformer block, and the end-to-end combined pre-training loss.
const std::vector<GradCheckCase>& gradcheck_cases();

/// Two-layer configuration small enough for full end-to-end checks.
ModelConfig gradcheck_model_config();

struct GradCheckCaseResult {
  std::string name;
  std::size_t seeds = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  std::uint64_t worst_seed = 0;
  std::string worst_param;
};

struct GradCheckSuiteReport {
  std::vector<GradCheckCaseResult> cases;
  bool passed = true;
};

/// Runs every case over seeds base_seed .. base_seed + seeds - 1.
GradCheckSuiteReport run_gradcheck_suite(std::size_t seeds, std::uint64_t base_seed, double h, double tol,
                                         const std::function<void(const GradCheckCaseResult&)>& on_case = {});

}  // namespace dcp
