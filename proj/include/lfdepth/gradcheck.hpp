#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lfdepth/model.hpp"

namespace lfd {

inline constexpr double kGradcheckTolerance = 1e-4;
inline constexpr double kGradcheckStep = 1e-5;

struct GradcheckEntry {
  std::string path;
  double max_rel = 0.0;
  std::size_t checked = 0;
  /// Entries left out because a perturbed forward crossed a relu, abs or max
  /// kink, where central differences do not estimate the derivative.
  std::size_t kink_skips = 0;
  /// Largest |analytic| entry, so an all-zero gradient is visible.
  double max_abs_grad = 0.0;
};

struct GradcheckReport {
  std::string scope;
  std::vector<GradcheckEntry> entries;
  double tolerance = kGradcheckTolerance;

  double max_rel() const;
  std::size_t kink_skips() const;
  bool passed() const;
};

/// "ops", "cru", "cmfa", "model".
const std::vector<std::string>& gradcheck_scopes();

/// Relative error |a - n| / max(|a|, |n|, 1e-6).
double gradient_rel_error(double analytic, double numeric);

/// Central-difference check of every entry of each named tensor, or of
/// `max_per_tensor` seeded picks when nonzero. One report entry per tensor.
/// An entry whose perturbed forwards change a kink branch is retried at
/// step/10 and step/100; if every step crosses, it is counted in `kink_skips`
/// rather than compared, and sampling draws a replacement.
std::vector<GradcheckEntry> check_gradients(const std::function<Tensor()>& loss_fn,
                                            const std::vector<std::pair<std::string, Tensor>>& wrt,
                                            std::size_t max_per_tensor, std::uint64_t seed,
                                            double step = kGradcheckStep);

/// Micro full-model configuration: 32x32, 4 slices, reduced channels.
NetworkConfig gradcheck_model_config();

/// Runs the suite for one scope. `model_samples` caps checked entries per
/// model tensor (0 checks all). Unknown scopes are usage errors.
GradcheckReport run_gradcheck(const std::string& scope, std::uint64_t seed, std::size_t model_samples = 0);

nlohmann::ordered_json gradcheck_to_json(const GradcheckReport& report);
std::string format_gradcheck_report(const GradcheckReport& report);

}  // namespace lfd
