#include "recoding/verifier.hpp"

#include <doctest.h>

#include <cmath>

using namespace recoding;
using namespace recoding::verifier;

namespace {

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

const ScalarField kQuadratic{[](const Vec& h) { return h.squaredNorm(); },
                             [](const Vec& h) { return Vec(2.0 * h); }};

}  // namespace

TEST_CASE("finite differences of simple functions") {
  const Vec g = finite_diff_grad(kQuadratic.value, vec2(1.0, 2.0));
  CHECK(g(0) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(g(1) == doctest::Approx(4.0).epsilon(1e-9));
  const Vec z = finite_diff_grad([](const Vec&) { return 3.0; }, vec2(1.0, 2.0));
  CHECK(z.norm() == 0.0);
  CHECK_THROWS_AS(finite_diff_grad([](const Vec&) { return std::nan(""); }, vec2(0, 0)), Error);
}

TEST_CASE("relative error and report") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == 0.5);
  CHECK(relative_error(1e-10, 0.0) == doctest::Approx(1e-2));
  const auto r = compare_gradients("x", vec2(1.0, 2.0), vec2(1.0, 2.1), 0.05);
  CHECK(r.worst_index == 1);
  CHECK(r.passed == (r.max_rel_err <= r.tolerance));
  CHECK(r.passed);
  CHECK_FALSE(compare_gradients("x", vec2(1.0, 2.0), vec2(1.0, 3.0), 0.05).passed);
}

TEST_CASE("Lipschitz estimates") {
  const std::vector<Vec> samples{vec2(0, 0), vec2(1, 2), vec2(-3, 0.5)};
  CHECK(estimate_lipschitz(kQuadratic.gradient, samples) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(estimate_lipschitz([](const Vec&) { return vec2(1, -1); }, samples) == 0.0);
  const std::vector<Vec> one{vec2(1, 1)};
  CHECK_THROWS_AS(estimate_lipschitz(kQuadratic.gradient, one), Error);
  const std::vector<Vec> same{vec2(1, 1), vec2(1, 1)};
  CHECK_THROWS_AS(estimate_lipschitz(kQuadratic.gradient, same), Error);
}

TEST_CASE("theorem 1 on a quadratic") {
  const Vec h = vec2(0.7, -1.3);
  const auto r = check_theorem1(kQuadratic, h, 0.5, 2.0);
  CHECK(r.delta_after == 0.0);
  CHECK(std::abs(r.improvement - h.squaredNorm()) <= 1e-12);
  CHECK(std::abs(r.improvement - r.bound) <= 1e-12);
  CHECK(r.bound >= 0.0);
  CHECK(r.descent);
  CHECK(r.heuristic);

  const auto still = check_theorem1(kQuadratic, h, 0.0, 2.0);
  CHECK(still.delta_after == still.delta_before);
  CHECK(still.improvement == 0.0);
}

TEST_CASE("theorem 2 pairing") {
  const auto p = toy_model(3);
  RecodingConfig c;
  c.signal = signals::SignalKind::surprisal;
  const std::vector<TokenId> in{1, 5, 3, 7, 2, 9};
  const std::vector<TokenId> out{5, 3, 7, 2, 9, 1};

  const auto zero = check_theorem2(p, c, in, out, 2, 1, 0.0, 4);
  CHECK(zero.difference() == 0.0);
  CHECK(zero.recoded == zero.baseline);

  const auto k0 = check_theorem2(p, c, in, out, 2, 0, 1e-3, 4);
  auto fixed = p;
  std::mt19937_64 rng(0);
  fixed.step = init_step_sizes(StepKind::fixed, p.dims.layers, p.dims.hidden_size, 1e-3, rng);
  recoder::Recoder hook(fixed, c, 4);
  hook.set_track_post(true);
  hook.set_active_steps(std::set<int>{2});
  const lm::IdGrid ids{in}, targets{out};
  lm::ForwardOptions fo;
  fo.hook = &hook;
  fo.targets = &targets;
  const auto r = lm::forward(fixed, ids, lm::RnnState::zeros(p.dims, 1), fo);
  CHECK(k0.baseline == r.steps[2].recoding->delta(0));
  CHECK(k0.recoded == r.steps[2].recoding->post_delta(0));

  CHECK_THROWS_AS(check_theorem2(p, c, in, out, 4, 2, 1e-3, 4), Error);
}

TEST_CASE("gradient suite passes on the toy model") {
  const auto reports = run_gradient_suite(2, 1e-4);
  CHECK(reports.size() >= 10);
  for (const auto& r : reports) {
    INFO(r.name << " " << r.max_rel_err);
    CHECK(r.passed);
    CHECK(r.checked > 0);
  }
}

TEST_CASE("surprisal Lipschitz estimate is positive and stable across seeds") {
  const auto p = toy_model(1, 0.5);
  const std::vector<TokenId> gold{3};
  const GradientFn grad = [&](const Vec& h) {
    return Vec(signals::surprisal_signal_at(h, gold, p.decoder).top_grad.col(0));
  };
  const auto estimate = [&](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<Vec> xs;
    for (int i = 0; i < 15; ++i) {  // 105 pairs
      Vec h(7);
      for (int j = 0; j < 7; ++j) {
        h(j) = u(rng);
      }
      xs.push_back(h);
    }
    return estimate_lipschitz(grad, xs);
  };
  const double a = estimate(1);
  const double b = estimate(2);
  CHECK(a > 0.0);
  CHECK(std::isfinite(a));
  CHECK(std::abs(a - b) <= 0.2 * std::max(a, b));
}
