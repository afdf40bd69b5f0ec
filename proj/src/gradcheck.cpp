#include "dcp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dcp/errors.hpp"
#include "dcp/rng.hpp"

namespace dcp {

namespace {

double eval_value(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  Tensor out = f();
  if (out.numel() != 1) throw DimensionError("fd_check: function must return a scalar, got " + shape_str(out.shape()));
  return out.item();
}

}  // namespace

GradCheckReport fd_check(const std::function<Tensor()>& f, const ParameterList& params,
                         const GradCheckOptions& options) {
  if (!(options.h > 0.0)) throw ConfigError("fd_check: step h must be positive");

  ParameterList leaves = params;
  std::vector<bool> previous(leaves.size());
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    previous[i] = leaves[i].tensor.requires_grad();
    leaves[i].tensor.set_requires_grad(true);
    leaves[i].tensor.zero_grad();
  }

  Tape::current().clear();
  Tensor loss = f();
  if (loss.numel() != 1) throw DimensionError("fd_check: function must return a scalar, got " + shape_str(loss.shape()));
  const double base = loss.item();
  backward(loss);

  const double again = eval_value(f);
  if (again != base || eval_value(f) != base) {
    throw NumericError("fd_check: function is not deterministic (" + std::to_string(base) + " vs " +
                       std::to_string(again) + ")");
  }

  GradCheckReport report;
  for (auto& p : leaves) {
    GradCheckEntry entry;
    entry.name = p.name;
    std::vector<double> analytic(p.tensor.numel(), 0.0);
    if (p.tensor.has_grad()) std::copy(p.tensor.grad().begin(), p.tensor.grad().end(), analytic.begin());
    auto values = p.tensor.mutable_data();
    std::vector<std::size_t> coords(values.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (options.max_coords > 0 && coords.size() > options.max_coords) {
      Rng rng(Rng::derive(options.sample_seed, report.entries.size()));
      rng.shuffle(coords);
      coords.resize(options.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    bool first = true;
    for (std::size_t i : coords) {
      const double orig = values[i];
      values[i] = orig + options.h;
      const double fp = eval_value(f);
      values[i] = orig - options.h;
      const double fm = eval_value(f);
      values[i] = orig;
      const double numeric = (fp - fm) / (2.0 * options.h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), options.floor});
      double err = std::abs(analytic[i] - numeric) / denom;
      if (std::isnan(err)) err = std::numeric_limits<double>::infinity();
      if (first || err > entry.max_rel_error) {
        first = false;
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = analytic[i];
        entry.numeric = numeric;
      }
    }
    entry.passed = entry.max_rel_error < options.tol;
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.passed = report.passed && entry.passed;
    report.entries.push_back(std::move(entry));
  }

  for (std::size_t i = 0; i < leaves.size(); ++i) {
    leaves[i].tensor.zero_grad();
    leaves[i].tensor.set_requires_grad(previous[i]);
  }
  return report;
}

GradCheckReport fd_check(const std::function<Tensor()>& f, const ParameterList& params, double h, double tol) {
  GradCheckOptions options;
  options.h = h;
  options.tol = tol;
  return fd_check(f, params, options);
}

}  // namespace dcp
