#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "lfdepth/cru.hpp"
#include "lfdepth/errors.hpp"
#include "support/fd_oracle.hpp"

using namespace lfd;
using lfd::testing::finite_difference_check;
using lfd::testing::random_tensor;

namespace {

std::vector<double> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }
std::vector<double> vec(const Buffer& b) { return {b.begin(), b.end()}; }

void fill(Tensor t, double v) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), v);
}

void set(Tensor t, std::initializer_list<double> values) {
  auto d = t.mutable_data();
  REQUIRE(d.size() == values.size());
  std::copy(values.begin(), values.end(), d.begin());
}

void zero_all(ModuleParams& p) {
  for (auto& [path, t] : p.flatten()) fill(t, 0.0);
}

/// Sets a square [C,C,k,k] kernel to the identity on its centre tap.
void set_identity(Tensor w) {
  fill(w, 0.0);
  const Index C = w.dim(0), k = w.dim(2);
  auto d = w.mutable_data();
  for (Index c = 0; c < C; ++c) d[static_cast<std::size_t>(((c * C + c) * k + k / 2) * k + k / 2)] = 1.0;
}

/// Moves zero-initialised biases off the ReLU kink before a finite-difference check.
void jitter_biases(ModuleParams& p, Rng& rng) {
  for (auto& [path, t] : p.flatten()) {
    if (!path.ends_with("bias")) continue;
    auto d = t.mutable_data();
    std::uniform_real_distribution<double> u(-0.1, 0.1);
    for (double& e : d) e = u(rng);
  }
}

std::vector<std::pair<std::string, Tensor>> named(const ModuleParams& p) { return p.flatten(); }

}  // namespace

TEST_CASE("node_count formula and clamp") {
  CHECK(node_count(16, 16, 1) == 64);
  CHECK(node_count(16, 16, 3) == 16);
  CHECK(node_count(2, 2, 3) == 1);
  CHECK(node_count(8, 8, 2) == 8);
  for (Index w = 1; w <= 40; ++w)
    for (Index h = 1; h <= 40; ++h) {
      CHECK(node_count(w, h, 1) >= node_count(w, h, 2));
      CHECK(node_count(w, h, 2) >= node_count(w, h, 3));
    }
  CHECK_THROWS_AS(node_count(4, 4, 0), UsageError);
  CHECK_THROWS_AS(node_count(4, 4, 4), UsageError);
}

TEST_CASE("config validation") {
  ModuleParams p;
  Rng rng(1);
  CHECK_THROWS_AS(Cru(CruConfig{.channels = 5}, p, rng), ConfigError);
  CruConfig bad{.channels = 4};
  bad.dilations = {3, 0};
  ModuleParams q;
  CHECK_THROWS_AS(Cru(bad, q, rng), ConfigError);
}

TEST_CASE("graph_project: zero projections give zero features") {
  ModuleParams p;
  Rng rng(2);
  Cru cru(CruConfig{.channels = 8}, p, rng);
  cru.prepare(4, 4);
  zero_all(p);
  Tensor x = random_tensor({2, 8, 4, 4}, rng);
  auto [v, b] = cru.graph_project(x, 1);
  CHECK(v.shape() == Shape{2, 4, 2});
  CHECK(b.shape() == Shape{2, 4, 16});
  for (double e : v.data()) CHECK(e == 0.0);
  for (double e : b.data()) CHECK(e == 0.0);
}

TEST_CASE("graph_project: hand-set 1x1 kernels match a hand matrix product") {
  // S=1, C=2, H=W=2, branch 1 -> one node; C_i = 1.
  Tensor x = Tensor::from({1, 2, 2, 2}, {1, 2, 3, 4, 0, 1, 0, -1});
  for (bool normalize : {false, true}) {
    ModuleParams p;
    Rng rng(3);
    CruConfig cfg{.channels = 2};
    cfg.normalize_projection = normalize;
    cfg.use_dilated = false;
    Cru cru(cfg, p, rng);
    cru.prepare(2, 2);
    ModuleParams& b1 = p.sub("graph").sub("b1");
    set(b1.sub("r2x2").sub("phi").get("weight"), {1.0, 2.0});
    set(b1.sub("psi").get("weight"), {0.5, -1.0});
    auto [v, b] = cru.graph_project(x, 1);
    // B = phi x = [1, 4, 3, 2]; psi x = [0.5, 0, 1.5, 3]; V = B . psi = 11.
    CHECK(vec(b) == std::vector<double>{1, 4, 3, 2});
    REQUIRE(v.shape() == Shape{1, 1, 1});
    CHECK(v.item() == doctest::Approx(normalize ? 11.0 / 4.0 : 11.0));
  }
}

TEST_CASE("graph_project shape contract") {
  ModuleParams p;
  Rng rng(4);
  Cru cru(CruConfig{.channels = 8}, p, rng);
  Tensor x = random_tensor({12, 8, 8, 8}, rng);
  auto [v, b] = cru.graph_project(x, 2);
  CHECK(v.shape() == Shape{12, 8, 2});
  CHECK(b.shape() == Shape{12, 8, 64});
}

TEST_CASE("graph_project rebuilds per resolution, and refuses after freeze") {
  ModuleParams p;
  Rng rng(5);
  Cru cru(CruConfig{.channels = 4}, p, rng);
  cru.graph_project(random_tensor({1, 4, 8, 8}, rng), 1);
  cru.graph_project(random_tensor({1, 4, 4, 4}, rng), 1);
  const ModuleParams& b1 = p.child("graph").child("b1");
  CHECK(b1.has_sub("r8x8"));
  CHECK(b1.has_sub("r4x4"));
  CHECK(b1.child("r8x8").child("phi").get("weight").dim(0) == 16);
  CHECK(b1.child("r4x4").child("phi").get("weight").dim(0) == 4);
  cru.freeze();
  CHECK_NOTHROW(cru.forward(random_tensor({1, 4, 8, 8}, rng)));
  CHECK_THROWS_AS(cru.forward(random_tensor({1, 4, 6, 6}, rng)), UsageError);
}

TEST_CASE("graph_reason reductions and dense matrix oracle") {
  ModuleParams p;
  Rng rng(6);
  CruConfig cfg{.channels = 8, .reduced_channels = 2};
  Cru cru(cfg, p, rng);
  cru.prepare(3, 4);  // branch 1: floor(12/4) = 3 nodes
  ModuleParams& b1 = p.sub("graph").sub("b1");
  ModuleParams& node = b1.sub("r3x4").sub("node");
  ModuleParams& chan = b1.sub("channel");
  Tensor v = random_tensor({1, 3, 2}, rng);

  fill(node.get("weight"), 0.0);
  set(chan.get("weight"), {1, 0, 0, 1});
  CHECK(vec(cru.graph_reason(v, 1, 3, 4)) == vec(v));

  fill(chan.get("weight"), 0.0);
  Tensor annihilated = cru.graph_reason(v, 1, 3, 4);
  for (double e : annihilated.data()) CHECK(e == 0.0);

  Tensor a = random_tensor({3, 3}, rng);
  Tensor w = random_tensor({2, 2}, rng);
  set(node.get("weight"), {a.data()[0], a.data()[1], a.data()[2], a.data()[3], a.data()[4],
                           a.data()[5], a.data()[6], a.data()[7], a.data()[8]});
  set(chan.get("weight"), {w.data()[0], w.data()[1], w.data()[2], w.data()[3]});
  Tensor m = cru.graph_reason(v, 1, 3, 4);
  // M[n][c'] = sum_c (V - A V)[n][c] * Wconv[c'][c]
  for (Index n = 0; n < 3; ++n) {
    for (Index c2 = 0; c2 < 2; ++c2) {
      double ref = 0.0;
      for (Index c = 0; c < 2; ++c) {
        double av = 0.0;
        for (Index k = 0; k < 3; ++k) av += a.at({n, k}) * v.at({0, k, c});
        ref += (v.at({0, n, c}) - av) * w.at({c2, c});
      }
      CHECK(m.at({0, n, c2}) == doctest::Approx(ref).epsilon(1e-14));
    }
  }
}

TEST_CASE("graph_reproject contracts") {
  ModuleParams p;
  Rng rng(7);
  Cru cru(CruConfig{.channels = 4}, p, rng);
  cru.prepare(2, 2);
  ModuleParams& expand = p.sub("graph").sub("b1").sub("expand");
  Tensor b = random_tensor({1, 1, 4}, rng);

  // M = 0: bias-only map.
  const std::vector<double> bias{0.1, 0.2, 0.3, 0.4};
  set(expand.get("bias"), {0.1, 0.2, 0.3, 0.4});
  Tensor y0 = cru.graph_reproject(Tensor::zeros({1, 1, 1}), b, 1, 2, 2);
  CHECK(y0.shape() == Shape{1, 4, 2, 2});
  for (Index c = 0; c < 4; ++c)
    for (Index i = 0; i < 4; ++i) CHECK(y0.data()[static_cast<std::size_t>(c * 4 + i)] == bias[static_cast<std::size_t>(c)]);

  // One node, B = ones: the node feature reaches every pixel.
  fill(expand.get("bias"), 0.0);
  set(expand.get("weight"), {1.0, 2.0, 3.0, 4.0});
  Tensor y1 = cru.graph_reproject(Tensor::full({1, 1, 1}, 0.5), Tensor::ones({1, 1, 4}), 1, 2, 2);
  for (Index c = 0; c < 4; ++c)
    for (Index i = 0; i < 4; ++i) CHECK(y1.data()[static_cast<std::size_t>(c * 4 + i)] == 0.5 * (c + 1));

  CHECK_THROWS_AS(cru.graph_reproject(Tensor::zeros({1, 2, 1}), b, 1, 2, 2), ShapeError);
}

TEST_CASE("graph_reproject: several nodes, with and without 1/N scaling") {
  // C=4, H=W=4, branch 1 -> N=4 nodes, C_i=1. Identity-like expansion onto channel 0.
  Rng rng(9);
  Tensor m = random_tensor({1, 4, 1}, rng);
  Tensor b = random_tensor({1, 4, 16}, rng);
  for (bool normalize : {false, true}) {
    ModuleParams p;
    Rng init(7);
    CruConfig cfg{.channels = 4};
    cfg.normalize_reprojection = normalize;
    Cru cru(cfg, p, init);
    cru.prepare(4, 4);
    ModuleParams& expand = p.sub("graph").sub("b1").sub("expand");
    fill(expand.get("bias"), 0.0);
    set(expand.get("weight"), {1.0, 0.0, 0.0, 0.0});
    Tensor y = cru.graph_reproject(m, b, 1, 4, 4);
    for (Index px = 0; px < 16; ++px) {
      double want = 0.0;
      for (Index n = 0; n < 4; ++n) want += b.data()[static_cast<std::size_t>(n * 16 + px)] * m.data()[static_cast<std::size_t>(n)];
      if (normalize) want /= 4.0;
      CHECK(y.data()[static_cast<std::size_t>(px)] == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("multi_graph reduces to identity with zero branches and identity tail") {
  ModuleParams p;
  Rng rng(8);
  Cru cru(CruConfig{.channels = 4}, p, rng);
  Tensor x = random_tensor({2, 4, 4, 4}, rng);
  cru.prepare(4, 4);
  ModuleParams& g = p.sub("graph");
  for (int i = 1; i <= 3; ++i) zero_all(g.sub("b" + std::to_string(i)).sub("expand"));
  set_identity(g.sub("tail").get("weight"));
  fill(g.sub("tail").get("bias"), 0.0);
  CHECK(max_abs_diff(cru.multi_graph(x), x) == 0.0);
}

TEST_CASE("multi_graph gradient check and shape") {
  ModuleParams p;
  Rng rng(9);
  Cru cru(CruConfig{.channels = 4}, p, rng);
  Tensor x = random_tensor({2, 4, 4, 4}, rng);
  cru.prepare(4, 4);
  jitter_biases(p, rng);
  Tensor probe = random_tensor(x.shape(), rng);
  auto wrt = named(p.child("graph"));
  wrt.emplace_back("x", x);
  auto r = finite_difference_check([&] { return sum(mul(cru.multi_graph(x), probe)); }, wrt);
  INFO(r.worst);
  CHECK(r.max_rel < 1e-4);
  for (Index S : {1, 12}) CHECK(cru.multi_graph(random_tensor({S, 4, 4, 4}, rng)).shape() == Shape{S, 4, 4, 4});
}

TEST_CASE("multi_dilated") {
  ModuleParams p;
  Rng rng(10);
  Cru cru(CruConfig{.channels = 4}, p, rng);
  ModuleParams& d = p.sub("dilated");

  Tensor x = random_tensor({1, 4, 16, 16}, rng);
  CHECK(cru.multi_dilated(x).shape() == Shape{1, 4, 16, 16});

  zero_all(d.sub("fuse"));
  const Tensor zeroed = cru.multi_dilated(x);
  for (double e : zeroed.data()) CHECK(e == 0.0);

  // Constant input with all-ones kernels: every pixel far enough from the border
  // that all taps of the widest rate land inside equals 3 * (C/2) * 9 * C * c.
  const double c = 0.25;
  Tensor k = Tensor::full({1, 4, 16, 16}, c);
  zero_all(d);
  set_identity(d.sub("cross").get("weight"));
  for (const char* rate : {"d3", "d5", "d7"}) fill(d.sub(rate).get("weight"), 1.0);
  fill(d.sub("fuse").get("weight"), 1.0);
  Tensor y = cru.multi_dilated(k);
  const double interior = 3.0 * 2.0 * 9.0 * 4.0 * c;
  for (Index i = 7; i <= 8; ++i)
    for (Index j = 7; j <= 8; ++j) CHECK(y.at({0, 0, i, j}) == doctest::Approx(interior));
  CHECK(y.at({0, 0, 0, 0}) < interior);

  // Per-rate interior check against direct summation: each rate alone.
  for (const char* only : {"d3", "d5", "d7"}) {
    for (const char* rate : {"d3", "d5", "d7"}) fill(d.sub(rate).get("weight"), std::string(rate) == only ? 1.0 : 0.0);
    Tensor z = cru.multi_dilated(k);
    const Index r = std::stoi(std::string(only).substr(1));
    for (Index i = 0; i < 16; ++i) {
      for (Index j = 0; j < 16; ++j) {
        double taps = 0.0;
        for (Index u = -1; u <= 1; ++u)
          for (Index v = -1; v <= 1; ++v) {
            const Index yy = i + u * r, xx = j + v * r;
            if (yy >= 0 && yy < 16 && xx >= 0 && xx < 16) taps += 1.0;
          }
        CHECK(z.at({0, 0, i, j}) == doctest::Approx(2.0 * 4.0 * c * taps));
      }
    }
  }
}

TEST_CASE("cru_forward is exact identity with zeroed fusion") {
  Rng rng(11);
  for (Index S : {1, 3, 12}) {
    ModuleParams p;
    Cru cru(CruConfig{.channels = 8}, p, rng);
    zero_all(p.sub("fuse"));
    Tensor x = random_tensor({S, 8, 8, 8}, rng, -5.0, 5.0);
    Tensor y = cru.forward(x);
    CHECK(vec(y) == vec(x));
  }
}

TEST_CASE("cru_forward gradient checks") {
  for (Index S : {1, 3}) {
    ModuleParams p;
    Rng rng(12 + static_cast<unsigned>(S));
    Cru cru(CruConfig{.channels = 4}, p, rng);
    Tensor x = random_tensor({S, 4, 6, 6}, rng);
    cru.prepare(6, 6);
    jitter_biases(p, rng);
    Tensor probe = random_tensor(x.shape(), rng);
    auto wrt = named(p);
    wrt.emplace_back("x", x);
    auto r = finite_difference_check([&] { return sum(mul(cru.forward(x), probe)); }, wrt);
    INFO(r.worst);
    CHECK(r.max_rel < 1e-4);
  }
}

TEST_CASE("cru slice independence and permutation equivariance") {
  ModuleParams p;
  Rng rng(13);
  Cru cru(CruConfig{.channels = 4}, p, rng);
  Tensor x = random_tensor({3, 4, 6, 6}, rng);
  Tensor y = cru.forward(x);
  for (Index s = 0; s < 3; ++s) {
    Tensor ys = cru.forward(slice(x, 0, s, 1));
    CHECK(max_abs_diff(ys, slice(y, 0, s, 1)) < 1e-12);
  }
  Tensor perm = concat({slice(x, 0, 2, 1), slice(x, 0, 0, 1), slice(x, 0, 1, 1)}, 0);
  Tensor yp = cru.forward(perm);
  Tensor expected = concat({slice(y, 0, 2, 1), slice(y, 0, 0, 1), slice(y, 0, 1, 1)}, 0);
  CHECK(max_abs_diff(yp, expected) < 1e-12);
}

TEST_CASE("every cru parameter receives a nonzero gradient") {
  ModuleParams p;
  Rng rng(14);
  Cru cru(CruConfig{.channels = 4}, p, rng);
  Tensor x = random_tensor({2, 4, 8, 8}, rng);
  Tensor probe = random_tensor(x.shape(), rng);
  auto g = backward(sum(mul(cru.forward(x), probe)));
  for (const auto& [path, t] : p.flatten()) {
    auto it = g.find(t.id());
    REQUIRE_MESSAGE(it != g.end(), path);
    const bool any = std::any_of(it->second.begin(), it->second.end(), [](double v) { return v != 0.0; });
    CHECK_MESSAGE(any, path);
  }
}

TEST_CASE("ablated variants keep the residual contract") {
  Rng rng(15);
  for (auto [md, mg] : {std::pair{true, false}, std::pair{false, true}}) {
    ModuleParams p;
    CruConfig cfg{.channels = 4};
    cfg.use_dilated = md;
    cfg.use_graph = mg;
    Cru cru(cfg, p, rng);
    Tensor x = random_tensor({2, 4, 8, 8}, rng);
    CHECK(cru.forward(x).shape() == x.shape());
    CHECK(p.has_sub("dilated") == md);
    CHECK(p.has_sub("graph") == mg);
    zero_all(p.sub("fuse"));
    CHECK(vec(cru.forward(x)) == vec(x));
  }
}
