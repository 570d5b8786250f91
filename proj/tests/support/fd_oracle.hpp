#pragma once

// Central finite-difference oracle. It perturbs raw leaf storage and re-runs the
// forward function with graph recording disabled; it never touches the tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lfdepth/nn.hpp"
#include "lfdepth/ops.hpp"
#include "lfdepth/tensor.hpp"

namespace lfd::testing {

struct FdResult {
  double max_rel = 0.0;
  std::string worst;
  std::size_t checked = 0;
  /// Largest |analytic| seen, to confirm gradients are not trivially zero.
  double max_abs_grad = 0.0;
  std::size_t kink_skips = 0;
};

inline double rel_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Compares backward() against central differences for every entry of every
/// tensor in `wrt`, or for `max_per_tensor` randomly chosen entries of each.
/// With `avoid_kinks`, a perturbation that changes any relu/abs/max branch is
/// retried at step/10 and step/100; entries that flip at every step are skipped.
inline FdResult finite_difference_check(const std::function<Tensor()>& loss_fn,
                                        std::vector<std::pair<std::string, Tensor>> wrt,
                                        double step = 1e-5, std::size_t max_per_tensor = 0,
                                        std::uint64_t sample_seed = 7, bool avoid_kinks = false) {
  for (auto& [name, t] : wrt) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  std::uint64_t base_branches = 0;
  GradientMap grads;
  {
    detail::BranchTrace trace;
    grads = backward(loss_fn());
    base_branches = trace.value();
  }
  FdResult r;
  std::mt19937_64 pick(sample_seed);
  for (auto& [name, t] : wrt) {
    auto data = t.mutable_data();
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (max_per_tensor && idx.size() > max_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), pick);
      idx.resize(max_per_tensor);
    }
    auto it = grads.find(t.id());
    for (std::size_t i : idx) {
      const double analytic = it == grads.end() ? 0.0 : it->second[i];
      const double orig = data[i];
      bool smooth = true;
      auto eval = [&](double x) {
        detail::BranchTrace trace;
        data[i] = x;
        const double f = loss_fn().item();
        smooth = smooth && trace.value() == base_branches;
        return f;
      };
      double numeric = 0.0;
      for (int attempt = 0; attempt < (avoid_kinks ? 3 : 1); ++attempt) {
        const double h = step * std::pow(0.1, attempt);
        NoGradGuard guard;
        smooth = true;
        const double fp = eval(orig + h);
        const double fm = eval(orig - h);
        data[i] = orig;
        numeric = (fp - fm) / (2.0 * h);
        if (smooth) break;
      }
      if (avoid_kinks && !smooth) {
        ++r.kink_skips;
        continue;
      }
      const double e = rel_error(analytic, numeric);
      r.max_abs_grad = std::max(r.max_abs_grad, std::abs(analytic));
      ++r.checked;
      if (e > r.max_rel) {
        r.max_rel = e;
        r.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic) +
                  " numeric=" + std::to_string(numeric);
      }
    }
  }
  return r;
}

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (double& x : v) x = lo + (hi - lo) * uniform01(rng);
  return Tensor(shape, std::move(v));
}

/// sum(out * weights) with fixed random weights: a generic scalar readout.
inline Tensor weighted_sum(const Tensor& out, const Tensor& weights) {
  return sum(mul(out, weights));
}

}  // namespace lfd::testing
