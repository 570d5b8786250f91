#include "lfdepth/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "lfdepth/errors.hpp"

namespace lfd {

DepthMetrics evaluate_depth(const Tensor& pred, const Tensor& gt, double eps) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("metrics: prediction " + to_string(pred.shape()) + " vs ground truth " + to_string(gt.shape()));
  }
  if (!(eps > 0.0)) throw DomainError("metrics: eps must be > 0");
  auto d = pred.data();
  auto g = gt.data();
  double se = 0.0, ar = 0.0, sr = 0.0;
  std::size_t n = 0, hit1 = 0, hit2 = 0, hit3 = 0;
  const double t1 = 1.25, t2 = 1.25 * 1.25, t3 = 1.25 * 1.25 * 1.25;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i]) || !std::isfinite(g[i])) throw DomainError("metrics: non-finite value");
    if (g[i] < 0.0) throw DomainError("metrics: negative ground truth");
    if (g[i] <= eps) continue;
    const double e = d[i] - g[i];
    se += e * e;
    ar += std::abs(e) / g[i];
    sr += e * e / g[i];
    const double ratio = d[i] > 0.0 ? std::max(d[i] / g[i], g[i] / d[i]) : std::numeric_limits<double>::infinity();
    hit1 += ratio < t1;
    hit2 += ratio < t2;
    hit3 += ratio < t3;
    ++n;
  }
  if (n == 0) throw EvaluationError("metrics: no ground-truth pixel above eps");
  const double count = static_cast<double>(n);
  return {std::sqrt(se / count), ar / count, sr / count, static_cast<double>(hit1) / count,
          static_cast<double>(hit2) / count, static_cast<double>(hit3) / count};
}

DepthMetrics aggregate(const std::vector<DepthMetrics>& rows) {
  if (rows.empty()) throw UsageError("aggregate of an empty metric list");
  DepthMetrics m;
  for (const auto& r : rows) {
    m.rms += r.rms;
    m.abs_rel += r.abs_rel;
    m.sq_rel += r.sq_rel;
    m.delta1 += r.delta1;
    m.delta2 += r.delta2;
    m.delta3 += r.delta3;
  }
  const double n = static_cast<double>(rows.size());
  return {m.rms / n, m.abs_rel / n, m.sq_rel / n, m.delta1 / n, m.delta2 / n, m.delta3 / n};
}

const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols = {"rms", "abs_rel", "sq_rel", "delta1", "delta2", "delta3"};
  return cols;
}

nlohmann::ordered_json metrics_to_json(const DepthMetrics& m) {
  nlohmann::ordered_json j;
  j["rms"] = m.rms;
  j["abs_rel"] = m.abs_rel;
  j["sq_rel"] = m.sq_rel;
  j["delta1"] = m.delta1;
  j["delta2"] = m.delta2;
  j["delta3"] = m.delta3;
  return j;
}

DepthMetrics metrics_from_json(const nlohmann::ordered_json& j) {
  return {j.at("rms").get<double>(),    j.at("abs_rel").get<double>(), j.at("sq_rel").get<double>(),
          j.at("delta1").get<double>(), j.at("delta2").get<double>(),  j.at("delta3").get<double>()};
}

std::string format_metrics_table(const std::vector<std::pair<std::string, DepthMetrics>>& rows) {
  std::string out = "| Method | rms | abs rel | sq rel | δ1 | δ2 | δ3 |\n|---|---|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& [label, m] : rows) {
    std::snprintf(buf, sizeof buf, "| %s | %.4f | %.4f | %.4f | %.4f | %.4f | %.4f |\n", label.c_str(), m.rms,
                  m.abs_rel, m.sq_rel, m.delta1, m.delta2, m.delta3);
    out += buf;
  }
  return out;
}

}  // namespace lfd
