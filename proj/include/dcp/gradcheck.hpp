#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dcp/tensor.hpp"

namespace dcp {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedTensor>;

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-5;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor);
  // below it the measure degrades to an absolute error.
  double floor = 1e-2;
  // When positive, only this many seeded-random coordinates per parameter
  // are perturbed (all of them when the parameter is smaller).
  std::size_t max_coords = 0;
  std::uint64_t sample_seed = 0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Compares tape gradients of the scalar function `f` against central
/// differences (f(x+h) - f(x-h)) / 2h for every element of every parameter
/// (or a sample of them, see max_coords).
/// Throws NumericError when two evaluations of `f` at the same point differ.
GradCheckReport fd_check(const std::function<Tensor()>& f, const ParameterList& params,
                         const GradCheckOptions& options = {});
GradCheckReport fd_check(const std::function<Tensor()>& f, const ParameterList& params, double h, double tol);

}  // namespace dcp
