#include <doctest.h>

#include <set>

#include "lfdepth/cru.hpp"
#include "lfdepth/errors.hpp"
#include "lfdepth/gradcheck.hpp"

using namespace lfd;

namespace {

struct FaultGuard {
  explicit FaultGuard(detail::GradientFault f) { detail::set_gradient_fault(f); }
  ~FaultGuard() { detail::set_gradient_fault(detail::GradientFault::None); }
};

}  // namespace

TEST_CASE("relative error definition") {
  CHECK(gradient_rel_error(1.0, 1.0) == 0.0);
  CHECK(gradient_rel_error(2.0, 1.0) == 0.5);
  CHECK(gradient_rel_error(0.0, 1e-9) == doctest::Approx(1e-3));
}

TEST_CASE("check_gradients on a closed form") {
  Tensor x = Tensor::from({3}, {0.3, -0.7, 1.2});
  auto e = check_gradients([&] { return sum(mul(x, mul(x, x))); }, {{"x", x}}, 0, 1);
  REQUIRE(e.size() == 1);
  CHECK(e[0].checked == 3);
  CHECK(e[0].max_rel < 1e-8);
  CHECK(e[0].max_abs_grad == doctest::Approx(3 * 1.2 * 1.2));
  auto sampled = check_gradients([&] { return sum(mul(x, x)); }, {{"x", x}}, 2, 1);
  CHECK(sampled[0].checked == 2);
}

TEST_CASE("ops, cru and cmfa scopes pass with nonzero gradients") {
  for (const char* scope : {"ops", "cru", "cmfa"}) {
    const GradcheckReport r = run_gradcheck(scope, 1);
    INFO(format_gradcheck_report(r));
    CHECK(r.passed());
    for (const auto& e : r.entries) {
      CHECK(e.checked > 0);
      CHECK(e.max_abs_grad > 0.0);
    }
  }
}

TEST_CASE("cru report lists every parameter path") {
  const GradcheckReport r = run_gradcheck("cru", 2);
  std::set<std::string> got;
  for (const auto& e : r.entries) got.insert(e.path);
  ModuleParams p;
  Rng rng(0);
  Cru cru(CruConfig{.channels = 4}, p, rng);
  cru.prepare(6, 6);
  for (const auto& [path, t] : p.flatten()) CHECK(got.count("cru." + path) == 1);
  CHECK(got.count("cru.input") == 1);
  CHECK(got.size() == p.flatten().size() + 1);
  const std::string text = format_gradcheck_report(r);
  for (const auto& path : got) CHECK(text.find(path) != std::string::npos);
}

TEST_CASE("model scope, sampled") {
  const GradcheckReport r = run_gradcheck("model", 3, 2);
  INFO(format_gradcheck_report(r));
  CHECK(r.passed());
  Rng rng(0);
  DepthNet net(gradcheck_model_config(), rng);
  CHECK(r.entries.size() == net.params().flatten().size());
}

TEST_CASE("a corrupted backward rule is detected in every scope") {
  {
    FaultGuard fault(detail::GradientFault::Matmul);
    for (const char* scope : {"ops", "cru", "cmfa"}) CHECK_FALSE(run_gradcheck(scope, 1).passed());
    CHECK_FALSE(run_gradcheck("model", 1, 2).passed());
  }
  {
    FaultGuard fault(detail::GradientFault::Sigmoid);
    CHECK_FALSE(run_gradcheck("ops", 1).passed());
    CHECK_FALSE(run_gradcheck("cmfa", 1).passed());
  }
  CHECK(run_gradcheck("ops", 1).passed());
}

TEST_CASE("unknown scope") { CHECK_THROWS_AS(run_gradcheck("decoder", 1), UsageError); }
