// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "lfdepth/cmfa.hpp"
#include "lfdepth/cru.hpp"
#include "lfdepth/gradcheck.hpp"
#include "lfdepth/metrics.hpp"
#include "lfdepth/params.hpp"
#include "lfdepth/pnm.hpp"
#include "lfdepth/synthdata.hpp"
#include "lfdepth/train.hpp"
#include "support/temp_dir.hpp"

using namespace lfd;
using lfd::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (double& x : v) x = lo + (hi - lo) * uniform01(rng);
  return Tensor(shape, std::move(v));
}

void fill(Tensor t, double v) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), v);
}

void zero_all(ModuleParams& p) {
  for (auto& [path, t] : p.flatten()) fill(t, 0.0);
}

void identity_1x1(ModuleParams& p) {
  Tensor w = p.get("weight");
  fill(w, 0.0);
  fill(p.get("bias"), 0.0);
  const Index C = w.dim(0);
  auto d = w.mutable_data();
  for (Index c = 0; c < C; ++c) d[static_cast<std::size_t>(c * C + c)] = 1.0;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

std::vector<std::uint8_t> slurp(const fs::path& f) { return read_file(f.string()); }

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::size_t skips = 0;
  std::string failed;
  for (const auto& scope : gradcheck_scopes()) {
    const GradcheckReport r = run_gradcheck(scope, 1);
    worst = std::max(worst, r.max_rel());
    skips += r.kink_skips();
    if (!r.passed()) failed += " " + scope;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = failed.empty() && secs < 300.0;
  o.detail = "max_rel=" + fmt("%.3e", worst) + " kink_skips=" + std::to_string(skips) +
             " time=" + fmt("%.1fs", secs) + (failed.empty() ? "" : " failed:" + failed);
  return o;
}

Outcome identity_reductions() {
  Rng rng(21);
  double cru_diff = 0.0;
  for (Index S : {1, 3, 12}) {
    ModuleParams p;
    Cru cru(CruConfig{.channels = 8}, p, rng);
    zero_all(p.sub("fuse"));
    Tensor x = uniform({S, 8, 8, 8}, rng, -3.0, 3.0);
    cru_diff = std::max(cru_diff, max_abs_diff(cru.forward(x), x));
  }

  double cmfa_diff = 0.0;
  for (Index S : {2, 5, 12}) {
    ModuleParams p;
    Cmfa cmfa(CmfaConfig{.channels = 4}, p, rng);
    zero_all(p.sub("focal_to_rgb"));
    zero_all(p.sub("rgb_to_focal"));
    identity_1x1(p.sub("post_rgb"));
    identity_1x1(p.sub("post_focal"));
    zero_all(p.sub("gamma"));
    zero_all(p.sub("lambda"));
    Tensor focal = uniform({S, 4, 6, 6}, rng, -1.0, 1.0);
    Tensor rgb = uniform({1, 4, 6, 6}, rng, -1.0, 1.0);
    Tensor out = cmfa.forward(focal, rgb, Mode::Eval, rng);
    // Plain mean over the N = S + 1 bundle, paired with itself, then the final conv.
    const Index N = S + 1, plane = 4 * 36;
    std::vector<double> avg(static_cast<std::size_t>(plane), 0.0);
    for (Index j = 0; j < N; ++j) {
      const Tensor& src = j < S ? focal : rgb;
      const Index base = j < S ? j * plane : 0;
      for (Index i = 0; i < plane; ++i) avg[static_cast<std::size_t>(i)] += src.data()[static_cast<std::size_t>(base + i)];
    }
    for (double& v : avg) v /= static_cast<double>(N);
    Tensor a({1, 4, 6, 6}, avg);
    Tensor ref = conv2d(concat({a, a}, 1), Conv2Spec{8, 4, 3, 3}, p.child("fuse"));
    cmfa_diff = std::max(cmfa_diff, max_abs_diff(out, ref));
  }
  return {cru_diff == 0.0 && cmfa_diff < 1e-12,
          "cru max_abs_diff=" + fmt("%.3g", cru_diff) + " cmfa max_abs_diff=" + fmt("%.3g", cmfa_diff)};
}

Outcome convexity() {
  Rng rng(31);
  ModuleParams p;
  Cmfa cmfa(CmfaConfig{.channels = 3}, p, rng);
  std::size_t outside = 0, bad_weight = 0, bad_delta = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index N = 2 + static_cast<Index>(rng() % 12);
    Tensor bundle = uniform({N, 3, 4, 4}, rng, -5.0, 5.0);
    Tensor g = cmfa.self_attention(bundle, Mode::Eval, rng);
    Tensor f1 = global_aggregate(bundle, g);
    Tensor l = cmfa.relation_attention(bundle, f1, Mode::Eval, rng);
    Tensor f2 = relation_aggregate(bundle, f1, g, l);
    for (const Tensor* w : {&g, &l}) {
      for (double v : w->data()) bad_weight += !(v > 0.0 && v < 1.0);
    }
    Tensor pairs = pair_with_global(bundle, f1);
    for (auto [agg, family] : {std::pair{&f1, &bundle}, std::pair{&f2, &pairs}}) {
      const Index per = agg->numel();
      for (Index i = 0; i < per; ++i) {
        double lo = INFINITY, hi = -INFINITY;
        for (Index j = 0; j < family->dim(0); ++j) {
          const double v = family->data()[static_cast<std::size_t>(j * per + i)];
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
        const double v = agg->data()[static_cast<std::size_t>(i)];
        const double tol = 1e-14 * std::max(1.0, std::abs(v));
        outside += v < lo - tol || v > hi + tol;
      }
    }
  }
  for (int trial = 0; trial < 100; ++trial) {
    Tensor pred = uniform({1, 16, 16}, rng, 0.01, 1.0);
    Tensor gt = uniform({1, 16, 16}, rng, 0.01, 1.0);
    const DepthMetrics m = evaluate_depth(pred, gt);
    bad_delta += !(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
  }
  return {outside == 0 && bad_weight == 0 && bad_delta == 0,
          "outside_envelope=" + std::to_string(outside) + " weights_outside_(0,1)=" + std::to_string(bad_weight) +
              " delta_order_violations=" + std::to_string(bad_delta)};
}

Outcome node_counts() {
  std::size_t mismatches = 0, cases = 0;
  for (Index W = 2; W <= 64; ++W) {
    for (Index H = 2; H <= 64; ++H) {
      for (int i = 1; i <= 3; ++i, ++cases) {
        const double raw = std::floor(static_cast<double>(W * H) / (4.0 * std::pow(2.0, i - 1)));
        const auto expected = static_cast<Index>(std::max(raw, 1.0));
        mismatches += node_count(W, H, i) != expected;
      }
    }
  }
  return {mismatches == 0, std::to_string(cases) + " cases, " + std::to_string(mismatches) + " mismatches"};
}

/// Dense 2-D normalised Gaussian over the (2r+1)^2 window, clamp-to-edge.
Tensor dense_gaussian(const Tensor& rgb, double sigma) {
  const Index H = rgb.dim(1), W = rgb.dim(2);
  const auto r = static_cast<Index>(std::ceil(3.0 * sigma));
  std::vector<double> out(static_cast<std::size_t>(rgb.numel()));
  for (Index c = 0; c < 3; ++c) {
    for (Index y = 0; y < H; ++y) {
      for (Index x = 0; x < W; ++x) {
        double acc = 0.0, norm = 0.0;
        for (Index u = -r; u <= r; ++u) {
          for (Index v = -r; v <= r; ++v) {
            const double w = std::exp(-static_cast<double>(u * u + v * v) / (2.0 * sigma * sigma));
            acc += w * rgb.at({c, std::clamp(y + u, Index{0}, H - 1), std::clamp(x + v, Index{0}, W - 1)});
            norm += w;
          }
        }
        out[static_cast<std::size_t>((c * H + y) * W + x)] = acc / norm;
      }
    }
  }
  return Tensor(rgb.shape(), std::move(out));
}

Outcome defocus_oracle() {
  Rng rng(51);
  Tensor rgb = generate_texture(32, 32, TextureStyle::Noise, rng);
  const auto focus = focus_depths(6);
  double worst = 0.0;
  std::size_t inexact = 0;
  for (double d : {0.05, 0.4, 0.77}) {
    Tensor depth = Tensor::full({1, 32, 32}, d);
    for (double k : {1.0, 4.0, 6.5}) {
      for (double f : focus) {
        worst = std::max(worst, max_abs_diff(defocus(rgb, depth, f, k), dense_gaussian(rgb, k * std::abs(d - f))));
      }
      inexact += !same_bits(defocus(rgb, depth, d, k), rgb);
    }
    for (double f : focus) inexact += !same_bits(defocus(rgb, depth, f, 0.0), rgb);
  }
  return {worst < 1e-10 && inexact == 0,
          "max_abs_diff=" + fmt("%.3g", worst) + " inexact_in_focus_or_k0=" + std::to_string(inexact)};
}

std::vector<double> overfit_losses() {
  NetworkConfig net;
  net.height = 32;
  net.width = 32;
  net.slices = 6;
  TrainConfig sched;
  sched.epochs = 300;
  sched.lr_drop_epoch = 300;
  sched.augment = false;
  GenSpec spec{.height = 32, .width = 32, .slices = 6, .seed = 61};
  Trainer t(net, sched, 7);
  t.fit({NamedScene{"overfit", generate_scene(spec)}});
  std::vector<double> losses;
  for (const auto& s : t.log().steps) losses.push_back(s.loss);
  return losses;
}

Outcome overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto a = overfit_losses();
  const auto b = overfit_losses();
  const double secs = seconds_since(t0);
  const double first = a.front(), last = a.back();
  const bool deterministic = a == b;
  return {a.size() == 300 && last < 0.05 && last < 0.2 * first && deterministic && secs < 600.0,
          "initial=" + fmt("%.4f", first) + " final=" + fmt("%.4f", last) +
              " deterministic=" + (deterministic ? "yes" : "no") + " time=" + fmt("%.1fs", secs)};
}

Outcome ablation() {
  const auto t0 = std::chrono::steady_clock::now();
  TempDir dir;
  GenSpec spec;
  generate_dataset(dir.path("data"), 40, spec, worker_threads());
  const auto train = load_split(dir.path("data"), "train");
  const auto test = load_split(dir.path("data"), "test");

  NetworkConfig base;
  base.stage_channels = {8, 16, 32, 32, 32};
  base.decoder_channels = 32;
  TrainConfig sched;
  sched.epochs = 20;
  sched.lr_drop_epoch = 15;
  sched.augment = false;
  const std::vector<std::string> ladder = {"baseline", "cru", "cmfa", "full"};
  const auto rows = ablation_run(train, test, ladder, base, sched, 1, worker_threads());

  std::vector<std::pair<std::string, DepthMetrics>> table;
  std::string flags;
  bool all = rows.size() == ladder.size();
  for (const auto& r : rows) {
    table.emplace_back(r.label, r.metrics);
    flags += " " + r.id + "=" + (r.converged ? "converged" : "not-converged");
    all = all && r.converged;
  }
  std::printf("%s", format_metrics_table(table).c_str());
  std::fflush(stdout);
  return {all, "train=" + std::to_string(train.size()) + " test=" + std::to_string(test.size()) + flags +
                   " time=" + fmt("%.1fs", seconds_since(t0))};
}

Outcome round_trips() {
  TempDir dir;
  std::size_t failures = 0;

  GenSpec spec{.height = 32, .width = 48, .slices = 5, .seed = 81};
  const Scene scene = quantize_scene(generate_scene(spec));
  write_scene(scene, dir.path("a"));
  const Scene back = read_scene(dir.path("a"));
  failures += !same_bits(back.rgb, scene.rgb) || !same_bits(back.depth, scene.depth);
  for (std::size_t s = 0; s < scene.focal.size(); ++s) failures += !same_bits(back.focal[s], scene.focal[s]);
  write_scene(back, dir.path("b"));
  for (const auto& e : fs::directory_iterator(dir.path("a"))) {
    failures += slurp(e.path()) != slurp(fs::path(dir.path("b")) / e.path().filename());
  }

  NetworkConfig net = gradcheck_model_config();
  TrainConfig sched;
  sched.epochs = 1;
  Trainer t(net, sched, 3);
  GenSpec small{.height = net.height, .width = net.width, .slices = net.slices, .seed = 82};
  t.fit({NamedScene{"s", generate_scene(small)}});
  t.save(dir.path("ckpt"));
  const LoadedModel loaded = load_model(dir.path("ckpt"));
  const auto original = t.net().params().flatten();
  const auto restored = loaded.net->params().flatten();
  failures += original.size() != restored.size();
  for (std::size_t i = 0; i < std::min(original.size(), restored.size()); ++i) {
    failures += original[i].first != restored[i].first || !same_bits(original[i].second, restored[i].second);
  }
  save_container(dir.path("again.lfdp"), restored);
  failures += slurp(dir.path("again.lfdp")) != slurp(fs::path(dir.path("ckpt")) / "checkpoint.lfdp");

  Rng rng(83);
  std::size_t metric_failures = 0;
  const DepthMetrics perfect{0.0, 0.0, 0.0, 1.0, 1.0, 1.0};
  for (int trial = 0; trial < 100; ++trial) {
    Tensor d = uniform({1, 8 + static_cast<Index>(rng() % 25), 8 + static_cast<Index>(rng() % 25)}, rng, 0.002, 1.0);
    metric_failures += !(evaluate_depth(d, d) == perfect);
  }
  return {failures == 0 && metric_failures == 0,
          "format_mismatches=" + std::to_string(failures) + " metric_mismatches=" + std::to_string(metric_failures)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradients},
      {"identity reductions", identity_reductions},
      {"convex aggregation and metric ordering", convexity},
      {"node-count formula", node_counts},
      {"synthetic defocus oracle", defocus_oracle},
      {"overfit sanity", overfit},
      {"desk-scale ablation", ablation},
      {"format round trips", round_trips},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(n)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d (%s): %s  %s\n", n, criteria[i].first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
