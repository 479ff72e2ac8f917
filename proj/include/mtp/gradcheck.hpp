#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mtp/optim.hpp"
#include "mtp/tensor.hpp"

namespace mtp {

struct GradCheckOptions {
  double eps = 1e-5;
  // Relative error uses max(|analytic|, |numeric|, abs_floor) as denominator.
  double abs_floor = 1e-6;
  // 0 checks every entry; otherwise a seeded sample per parameter, always
  // including the entries with the largest analytic gradient.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
  std::size_t entries_checked = 0;
};

// Compares analytic gradients of loss_fn against central differences
// (f(w+eps) - f(w-eps)) / 2eps. loss_fn must be deterministic (dropout off).
inline GradCheckResult check_gradients(const std::function<Tensor<double>()>& loss_fn,
                                       std::vector<Parameter<double>>& params,
                                       const GradCheckOptions& opts = {}) {
  zero_grads(params);
  for (auto& p : params) p.tensor.mutable_grad();
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());

  std::mt19937_64 rng(opts.seed);
  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].tensor.mutable_values();
    const auto& ga = analytic[pi];
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (opts.max_entries_per_param && idx.size() > opts.max_entries_per_param) {
      const std::size_t top = opts.max_entries_per_param / 2;
      std::partial_sort(idx.begin(), idx.begin() + top, idx.end(), [&](auto a, auto b) {
        return std::abs(ga[a]) > std::abs(ga[b]);
      });
      std::shuffle(idx.begin() + top, idx.end(), rng);
      idx.resize(opts.max_entries_per_param);
    }
    for (std::size_t i : idx) {
      const double orig = values[i];
      values[i] = orig + opts.eps;
      const double fp = loss_fn().item();
      values[i] = orig - opts.eps;
      const double fm = loss_fn().item();
      values[i] = orig;
      const double numeric = (fp - fm) / (2 * opts.eps);
      const double denom = std::max({std::abs(ga[i]), std::abs(numeric), opts.abs_floor});
      const double rel = std::abs(ga[i] - numeric) / denom;
      ++result.entries_checked;
      if (result.worst_param.empty() || rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = params[pi].name;
        result.worst_index = i;
        result.worst_analytic = ga[i];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace mtp
