#include "lfdepth/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "lfdepth/cmfa.hpp"
#include "lfdepth/cru.hpp"
#include "lfdepth/errors.hpp"

namespace lfd {

double GradcheckReport::max_rel() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel);
  return m;
}

bool GradcheckReport::passed() const {
  if (entries.empty()) return false;
  for (const auto& e : entries) {
    if (!(e.max_rel < tolerance) || e.checked == 0) return false;
  }
  return true;
}

std::size_t GradcheckReport::kink_skips() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.kink_skips;
  return n;
}

const std::vector<std::string>& gradcheck_scopes() {
  static const std::vector<std::string> s = {"ops", "cru", "cmfa", "model"};
  return s;
}

double gradient_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

std::vector<GradcheckEntry> check_gradients(const std::function<Tensor()>& loss_fn,
                                            const std::vector<std::pair<std::string, Tensor>>& wrt,
                                            std::size_t max_per_tensor, std::uint64_t seed, double step) {
  std::vector<std::pair<std::string, Tensor>> leaves = wrt;
  for (auto& [name, t] : leaves) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  const GradientMap grads = backward(loss_fn());
  std::uint64_t base_branches;
  {
    NoGradGuard guard;
    detail::BranchTrace trace;
    loss_fn();
    base_branches = trace.value();
  }
  Rng pick(seed);
  std::vector<GradcheckEntry> out;
  for (auto& [name, t] : leaves) {
    auto data = t.mutable_data();
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    const bool sampled = max_per_tensor && idx.size() > max_per_tensor;
    auto it = grads.find(t.id());
    GradcheckEntry e{name, 0.0, 0, 0, 0.0};
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (sampled) {
        if (e.checked == max_per_tensor) break;
        std::swap(idx[k], idx[k + static_cast<std::size_t>(pick() % (idx.size() - k))]);
      }
      const std::size_t i = idx[k];
      const double analytic = it == grads.end() ? 0.0 : it->second[i];
      const double orig = data[i];
      double h = step, fp = 0.0, fm = 0.0;
      bool same_branches = false;
      for (int attempt = 0; attempt < 3 && !same_branches; ++attempt, h /= 10.0) {
        NoGradGuard guard;
        detail::BranchTrace plus;
        data[i] = orig + h;
        fp = loss_fn().item();
        const std::uint64_t hp = plus.value();
        detail::BranchTrace minus;
        data[i] = orig - h;
        fm = loss_fn().item();
        data[i] = orig;
        same_branches = hp == base_branches && minus.value() == base_branches;
      }
      if (!same_branches) {
        ++e.kink_skips;
        continue;
      }
      h *= 10.0;
      const double numeric = (fp - fm) / (2.0 * h);
      e.max_rel = std::max(e.max_rel, gradient_rel_error(analytic, numeric));
      e.max_abs_grad = std::max(e.max_abs_grad, std::abs(analytic));
      ++e.checked;
    }
    out.push_back(e);
    t.zero_grad();
  }
  return out;
}

namespace {

using Named = std::vector<std::pair<std::string, Tensor>>;

Tensor random(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (double& x : v) x = lo + (hi - lo) * uniform01(rng);
  return Tensor(shape, std::move(v));
}

/// Uniform in [lo, hi] with a random sign: keeps values off kinks at zero.
Tensor off_zero(const Shape& shape, Rng& rng, double lo, double hi) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (double& x : v) x = (uniform01(rng) < 0.5 ? -1.0 : 1.0) * (lo + (hi - lo) * uniform01(rng));
  return Tensor(shape, std::move(v));
}

/// Moves zero-initialised biases off zero so no ReLU input starts exactly on its kink.
void jitter_biases(ModuleParams& p, Rng& rng) {
  for (auto& [path, t] : p.flatten()) {
    if (!path.ends_with("bias")) continue;
    for (double& e : t.mutable_data()) e = -0.05 + 0.1 * uniform01(rng);
  }
}

Named prefixed(const std::string& prefix, const Named& in) {
  Named out;
  for (const auto& [k, t] : in) out.emplace_back(prefix + k, t);
  return out;
}

class OpSuite {
 public:
  OpSuite(GradcheckReport& report, Rng& rng) : report_(report), rng_(rng) {}

  /// Checks `f(inputs)` read out through a fixed random projection.
  void check(const std::string& op, Named inputs, const std::function<Tensor()>& f) {
    Tensor probe;
    {
      NoGradGuard guard;
      probe = random(f().shape(), rng_);
    }
    auto entries = check_gradients([&] { return sum(mul(f(), probe)); }, prefixed("ops." + op + ".", inputs), 0,
                                   rng_());
    report_.entries.insert(report_.entries.end(), entries.begin(), entries.end());
  }

 private:
  GradcheckReport& report_;
  Rng& rng_;
};

void ops_scope(GradcheckReport& report, Rng& rng) {
  OpSuite s(report, rng);
  {
    Tensor a = random({3, 4}, rng), b = random({3, 4}, rng);
    s.check("add", {{"a", a}, {"b", b}}, [=] { return add(a, b); });
    s.check("sub", {{"a", a}, {"b", b}}, [=] { return sub(a, b); });
    s.check("mul", {{"a", a}, {"b", b}}, [=] { return mul(a, b); });
  }
  {
    Tensor a = random({3, 4}, rng), b = off_zero({3, 4}, rng, 0.5, 1.5);
    s.check("div", {{"a", a}, {"b", b}}, [=] { return div(a, b); });
  }
  {
    Tensor a = random({2, 3, 1}, rng), b = random({1, 4}, rng);
    s.check("broadcast_add", {{"a", a}, {"b", b}}, [=] { return add(a, b); });
    s.check("broadcast_mul", {{"a", a}, {"b", b}}, [=] { return mul(a, b); });
  }
  {
    Tensor x = random({5}, rng);
    s.check("scalar", {{"x", x}}, [=] { return add_scalar(mul_scalar(x, -1.7), 0.3); });
    s.check("square", {{"x", x}}, [=] { return square(x); });
    s.check("exp", {{"x", x}}, [=] { return exp(x); });
    s.check("sigmoid", {{"x", x}}, [=] { return sigmoid(mul_scalar(x, 3.0)); });
    s.check("neg", {{"x", x}}, [=] { return -x; });
  }
  {
    Tensor x = off_zero({6}, rng, 0.1, 1.0);
    s.check("abs", {{"x", x}}, [=] { return abs(x); });
    s.check("relu", {{"x", x}}, [=] { return relu(x); });
  }
  {
    Tensor x = random({6}, rng, 0.2, 2.0);
    s.check("sqrt", {{"x", x}}, [=] { return sqrt(x); });
  }
  {
    Tensor a = random({2, 3, 4}, rng), b = random({2, 4, 5}, rng), w = random({4, 2}, rng);
    s.check("matmul", {{"a", a}, {"b", b}}, [=] { return matmul(a, b); });
    s.check("matmul_shared", {{"a", a}, {"w", w}}, [=] { return matmul(a, w); });
  }
  {
    Tensor x = random({2, 3, 4}, rng);
    s.check("sum", {{"x", x}}, [=] { return sum(x, {0, 2}); });
    s.check("mean", {{"x", x}}, [=] { return mean(x, {1}, true); });
    s.check("max", {{"x", x}}, [=] { return reduce(x, {2}, ReduceOp::Max); });
    s.check("reshape", {{"x", x}}, [=] { return reshape(x, {6, 4}); });
    s.check("permute", {{"x", x}}, [=] { return permute(x, {2, 0, 1}); });
    s.check("transpose_last", {{"x", x}}, [=] { return transpose_last(x); });
    s.check("slice", {{"x", x}}, [=] { return slice(x, 1, 1, 2); });
  }
  {
    Tensor a = random({2, 3}, rng), b = random({2, 2}, rng);
    s.check("concat", {{"a", a}, {"b", b}}, [=] { return concat({a, b}, 1); });
    Tensor c = random({1, 3, 1}, rng);
    s.check("expand", {{"x", c}}, [=] { return expand(c, {2, 3, 4}); });
  }
  struct ConvCase {
    const char* name;
    Index stride, dilation;
    Padding padding;
  };
  for (const ConvCase& c : {ConvCase{"conv2d", 1, 1, Padding::Same}, ConvCase{"conv2d_dilated", 1, 2, Padding::Same},
                            ConvCase{"conv2d_strided", 2, 1, Padding::Same},
                            ConvCase{"conv2d_valid", 1, 1, Padding::Valid}}) {
    Tensor x = random({2, 3, 6, 6}, rng), w = random({4, 3, 3, 3}, rng), b = random({4}, rng);
    s.check(c.name, {{"x", x}, {"weight", w}, {"bias", b}},
            [=] { return conv2d(x, w, b, c.stride, c.dilation, c.padding); });
  }
  {
    ModuleParams p;
    Conv3Spec spec{.in_channels = 2, .out_channels = 3, .kd = 3, .kh = 3, .kw = 3};
    init_conv3d(p, spec, rng);
    jitter_biases(p, rng);
    Tensor x = random({1, 2, 4, 5, 5}, rng);
    Named in = p.flatten();
    in.emplace_back("x", x);
    s.check("conv3d", in, [=, &p] { return conv3d(x, spec, p); });
  }
  {
    ModuleParams p;
    init_fc(p, FcSpec{5, 3}, rng);
    jitter_biases(p, rng);
    Tensor x = random({4, 5}, rng);
    Named in = p.flatten();
    in.emplace_back("x", x);
    s.check("fc", in, [=, &p] { return fc(x, p); });
  }
  {
    Tensor x = random({2, 3, 4, 6}, rng);
    s.check("global_avg_pool", {{"x", x}}, [=] { return global_avg_pool(x); });
    s.check("max_pool2d", {{"x", x}}, [=] { return max_pool2d(x, 2); });
    s.check("upsample_bilinear", {{"x", x}}, [=] { return upsample_bilinear(x, 2); });
    const std::uint64_t mask_seed = rng();
    s.check("dropout", {{"x", x}}, [=] {
      Rng r(mask_seed);
      return dropout(x, 0.5, Mode::Train, r);
    });
  }
  {
    Tensor pred = random({1, 1, 5, 6}, rng, 0.1, 0.9), gt = random({1, 1, 5, 6}, rng, 0.1, 0.9);
    s.check("depth_loss", {{"pred", pred}}, [=] { return depth_loss(pred, gt, 1.0, 1.0, 1.0).total; });
  }
}

void cru_scope(GradcheckReport& report, Rng& rng) {
  ModuleParams p;
  Cru cru(CruConfig{.channels = 4}, p, rng);
  cru.prepare(6, 6);
  cru.freeze();
  jitter_biases(p, rng);
  Tensor x = random({3, 4, 6, 6}, rng);
  Tensor probe = random(x.shape(), rng);
  Named wrt = prefixed("cru.", p.flatten());
  wrt.emplace_back("cru.input", x);
  auto entries = check_gradients([&] { return sum(mul(cru.forward(x), probe)); }, wrt, 0, rng());
  report.entries.insert(report.entries.end(), entries.begin(), entries.end());
}

void cmfa_scope(GradcheckReport& report, Rng& rng) {
  ModuleParams p;
  Cmfa cmfa(CmfaConfig{.channels = 4}, p, rng);
  jitter_biases(p, rng);
  Tensor focal = random({5, 4, 4, 4}, rng);
  Tensor rgb = random({1, 4, 4, 4}, rng);
  Tensor probe = random({1, 4, 4, 4}, rng);
  const std::uint64_t mask_seed = rng();
  Named wrt = prefixed("cmfa.", p.flatten());
  wrt.emplace_back("cmfa.input.focal", focal);
  wrt.emplace_back("cmfa.input.rgb", rgb);
  auto entries = check_gradients(
      [&] {
        Rng r(mask_seed);
        return sum(mul(cmfa.forward(focal, rgb, Mode::Train, r), probe));
      },
      wrt, 0, rng());
  report.entries.insert(report.entries.end(), entries.begin(), entries.end());
}

void model_scope(GradcheckReport& report, Rng& rng, std::size_t samples) {
  const NetworkConfig c = gradcheck_model_config();
  DepthNet net(c, rng);
  jitter_biases(net.params(), rng);
  SceneInput in{random({1, 3, c.height, c.width}, rng, 0.0, 1.0),
                random({c.slices, 3, c.height, c.width}, rng, 0.0, 1.0)};
  Tensor gt = random({1, 1, c.height, c.width}, rng, 0.1, 0.9);
  const std::uint64_t mask_seed = rng();
  auto entries = check_gradients(
      [&] {
        Rng r(mask_seed);
        return prediction_loss(net.forward(in, Mode::Train, r), gt, c).total;
      },
      net.params().flatten(), samples, rng());
  report.entries.insert(report.entries.end(), entries.begin(), entries.end());
}

}  // namespace

NetworkConfig gradcheck_model_config() {
  NetworkConfig c;
  c.height = 32;
  c.width = 32;
  c.slices = 4;
  c.stage_channels = {2, 2, 4, 4, 4};
  c.decoder_channels = 4;
  return c;
}

GradcheckReport run_gradcheck(const std::string& scope, std::uint64_t seed, std::size_t model_samples) {
  GradcheckReport r;
  r.scope = scope;
  Rng rng(seed);
  if (scope == "ops") {
    ops_scope(r, rng);
  } else if (scope == "cru") {
    cru_scope(r, rng);
  } else if (scope == "cmfa") {
    cmfa_scope(r, rng);
  } else if (scope == "model") {
    model_scope(r, rng, model_samples);
  } else {
    throw UsageError("unknown gradcheck module '" + scope + "' (ops, cru, cmfa, model)");
  }
  return r;
}

nlohmann::ordered_json gradcheck_to_json(const GradcheckReport& report) {
  nlohmann::ordered_json j;
  j["scope"] = report.scope;
  j["tolerance"] = report.tolerance;
  j["passed"] = report.passed();
  j["max_rel"] = report.max_rel();
  j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : report.entries) {
    j["entries"].push_back({{"path", e.path}, {"max_rel", e.max_rel}, {"checked", e.checked},
                            {"kink_skips", e.kink_skips}, {"max_abs_grad", e.max_abs_grad}});
  }
  return j;
}

std::string format_gradcheck_report(const GradcheckReport& report) {
  std::string out;
  char buf[512];
  for (const auto& e : report.entries) {
    std::snprintf(buf, sizeof buf, "%-4s %-48s max_rel=%.3e checked=%zu kink_skips=%zu\n",
                  e.max_rel < report.tolerance && e.checked > 0 ? "ok" : "FAIL", e.path.c_str(), e.max_rel, e.checked,
                  e.kink_skips);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "%s: %s (max_rel=%.3e, tolerance=%.0e, %zu tensors, %zu kink skips)\n",
                report.scope.c_str(), report.passed() ? "PASS" : "FAIL", report.max_rel(), report.tolerance,
                report.entries.size(), report.kink_skips());
  out += buf;
  return out;
}

}  // namespace lfd
