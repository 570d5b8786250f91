#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lfdepth/tensor.hpp"

namespace lfd {

struct DepthMetrics {
  double rms = 0.0;
  double abs_rel = 0.0;
  double sq_rel = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;

  bool operator==(const DepthMetrics&) const = default;
};

inline constexpr double kMetricEps = 1e-3;

/// Over pixels with gt > eps: rms, abs rel, sq rel and the fraction with
/// max(d/g, g/d) < 1.25^i. Throws EvaluationError when no pixel qualifies.
DepthMetrics evaluate_depth(const Tensor& pred, const Tensor& gt, double eps = kMetricEps);
/// Unweighted per-field mean.
DepthMetrics aggregate(const std::vector<DepthMetrics>& rows);

/// Column keys in table order.
const std::vector<std::string>& metric_columns();
nlohmann::ordered_json metrics_to_json(const DepthMetrics& m);
DepthMetrics metrics_from_json(const nlohmann::ordered_json& j);
/// Markdown table, one row per (label, metrics), values to 4 decimals.
std::string format_metrics_table(const std::vector<std::pair<std::string, DepthMetrics>>& rows);

}  // namespace lfd
