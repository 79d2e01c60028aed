#include "recoding/recoder.hpp"
#include "recoding/verifier.hpp"

#include <doctest.h>

#include <cmath>

using namespace recoding;
using namespace recoding::recoder;

namespace {

Mat col(std::initializer_list<double> v) {
  Mat m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) {
    m(i++, 0) = x;
  }
  return m;
}

RecodingConfig fixed_surprisal(double alpha) {
  RecodingConfig c;
  c.signal = signals::SignalKind::surprisal;
  c.step_kind = StepKind::fixed;
  c.alpha = alpha;
  return c;
}

}  // namespace

TEST_CASE("recode arithmetic") {
  const Mat a = col({1.0, 1.0});
  const Mat g = col({2.0, -2.0});
  CHECK((recode(a, g, 0.0) - a).norm() == 0.0);
  CHECK((recode(a, g, 0.5) - col({0.0, 2.0})).norm() == 0.0);
  const Mat h = col({0.3, -1.7, 2.5});
  CHECK(recode(h, 2.0 * h, 0.5).norm() == 0.0);
  CHECK_THROWS_AS(recode(a, col({1.0}), 0.1), Error);
  CHECK_THROWS_AS(recode(a, g, -0.1), Error);
}

TEST_CASE("signal_gradients for one layer") {
  std::mt19937_64 rng(2);
  const auto p = init_parameters(ModelDims{6, 4, 3, 1}, rng, 0.7);
  const auto r = lm::forward(p, lm::IdGrid{{2, 4}}, lm::RnnState::zeros(p.dims, 1));
  const auto& layers = r.steps[1].layers;
  const Mat top = col({0.4, -0.2, 0.9});
  const auto g = signal_gradients(top, layers, p);
  CHECK((g.g_h[0] - top).norm() == 0.0);
  const Mat expected =
      top.cwiseProduct(layers[0].o).cwiseProduct((1.0 - layers[0].tanh_c.array().square()).matrix());
  CHECK((g.g_c[0] - expected).cwiseAbs().maxCoeff() <= 1e-15);

  const auto zero = signal_gradients(Mat::Zero(3, 1), layers, p);
  CHECK(zero.g_h[0].norm() == 0.0);
  CHECK(zero.g_c[0].norm() == 0.0);

  const std::vector<lm::LayerStepCache> none;
  CHECK_THROWS_AS(signal_gradients(top, none, p), Error);
}

TEST_CASE("step sizes") {
  std::mt19937_64 rng(1);
  const Mat h = col({0.1, -0.3, 0.8});
  auto fixed = init_step_sizes(StepKind::fixed, 2, 3, 5.0, rng);
  CHECK(step_size(fixed, 1, ActivationKind::cell, h)(0) == 5.0);

  auto learned = init_step_sizes(StepKind::learned, 2, 3, 1.0, rng);
  learned.raw.setZero();
  CHECK(step_size(learned, 0, ActivationKind::hidden, h)(0) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  learned.raw(0, 0) = 0.5;
  CHECK(step_size(learned, 0, ActivationKind::hidden, h)(0) >
        step_size(learned, 0, ActivationKind::cell, h)(0));

  auto predicted = init_step_sizes(StepKind::predicted, 1, 3, 1.0, rng);
  for (auto& q : predicted.predictors) {
    q.w1.setZero();
    q.b1.setZero();
    q.w2.setZero();
    q.b2.setZero();
    q.w3.setZero();
    q.b3.setZero();
  }
  CHECK(step_size(predicted, 0, ActivationKind::hidden, h)(0) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(step_size(predicted, 0, ActivationKind::hidden, 5.0 * h)(0) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("predicted step starts near the requested alpha") {
  std::mt19937_64 rng(3);
  const auto s = init_step_sizes(StepKind::predicted, 2, 4, 0.001, rng);
  const Mat h = Mat::Constant(4, 1, 0.2);
  const double a = step_size(s, 1, ActivationKind::cell, h)(0);
  CHECK(a > 0.0);
  CHECK(a == doctest::Approx(0.001).epsilon(0.5));
}

TEST_CASE("apply_recoding with zero steps is the identity") {
  std::mt19937_64 rng(4);
  const auto p = init_parameters(ModelDims{6, 4, 3, 2}, rng, 0.7);
  const auto r = lm::forward(p, lm::IdGrid{{1, 3}}, lm::RnnState::zeros(p.dims, 1));
  const auto& layers = r.steps[1].layers;
  const auto g = signal_gradients(col({0.5, 0.5, -0.5}), layers, p);
  std::vector<Mat> h{layers[0].h, layers[1].h}, c{layers[0].c, layers[1].c};
  const auto zero = init_step_sizes(StepKind::fixed, 2, 3, 0.0, rng);
  const auto same = apply_recoding(h, c, g, zero);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK((same.h[l] - h[l]).norm() == 0.0);
    CHECK((same.c[l] - c[l]).norm() == 0.0);
  }

  auto cells = zero;
  cells.fixed_alpha.col(1).setConstant(0.001);
  const auto only_c = apply_recoding(h, c, g, cells);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK((only_c.h[l] - h[l]).norm() == 0.0);
    CHECK((only_c.c[l] - (c[l] - 0.001 * g.g_c[l])).norm() == 0.0);
  }
}

TEST_CASE("zero step recoding leaves every probability bit-identical") {
  const auto p0 = verifier::toy_model(5);
  auto p = p0;
  std::mt19937_64 rng(0);
  p.step = init_step_sizes(StepKind::fixed, p.dims.layers, p.dims.hidden_size, 0.0, rng);
  const lm::IdGrid ids{{1, 2, 3, 4, 5}};
  const lm::IdGrid targets{{2, 3, 4, 5, 6}};
  Recoder hook(p, fixed_surprisal(0.0), 9);
  lm::ForwardOptions fo;
  fo.hook = &hook;
  fo.targets = &targets;
  const auto with = lm::forward(p, ids, lm::RnnState::zeros(p.dims, 1), fo);
  const auto without = lm::forward(p0, ids, lm::RnnState::zeros(p.dims, 1));
  for (std::size_t t = 0; t < 5; ++t) {
    CHECK(with.steps[t].recoding->applied);
    CHECK((with.steps[t].probs - without.steps[t].probs).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("surprisal recoding moves the gold probability away from 1/e") {
  // delta = p^-p - 1 peaks at 1/e, so descent raises p above 1/e and lowers it below.
  auto p = verifier::toy_model(8, 1.0);
  std::mt19937_64 rng(0);
  p.step = init_step_sizes(StepKind::fixed, p.dims.layers, p.dims.hidden_size, 1e-3, rng);
  const lm::IdGrid ids{{1, 4, 2, 8, 3, 0, 7, 5, 9, 10}};
  const lm::IdGrid targets{{4, 2, 8, 3, 0, 7, 5, 9, 10, 1}};
  Recoder hook(p, fixed_surprisal(1e-3), 2);
  hook.set_track_post(true);
  lm::ForwardOptions fo;
  fo.hook = &hook;
  fo.targets = &targets;
  const auto r = lm::forward(p, ids, lm::RnnState::zeros(p.dims, 1), fo);
  const double peak = std::exp(-1.0);
  for (std::size_t t = 0; t < r.steps.size(); ++t) {
    const auto& rec = *r.steps[t].recoding;
    const TokenId y = targets[0][t];
    const double before = r.steps[t].probs(y, 0);
    const double after = lm::decode(p.decoder, rec.recoded_h.back())(y, 0);
    CHECK(rec.post_delta(0) <= rec.delta(0));
    if (before > peak) {
      CHECK(after >= before);
    } else {
      CHECK(after <= before);
    }
  }
}

TEST_CASE("recoder honours active steps") {
  auto p = verifier::toy_model(2);
  std::mt19937_64 rng(0);
  p.step = init_step_sizes(StepKind::fixed, p.dims.layers, p.dims.hidden_size, 0.1, rng);
  const lm::IdGrid ids{{1, 2, 3, 4}};
  const lm::IdGrid targets{{2, 3, 4, 5}};
  Recoder hook(p, fixed_surprisal(0.1), 2);
  hook.set_active_steps(std::set<int>{1});
  hook.set_track_post(true);
  lm::ForwardOptions fo;
  fo.hook = &hook;
  fo.targets = &targets;
  const auto r = lm::forward(p, ids, lm::RnnState::zeros(p.dims, 1), fo);
  for (std::size_t t = 0; t < 4; ++t) {
    CHECK(r.steps[t].recoding->applied == (t == 1));
    if (t != 1) {
      CHECK(r.steps[t].recoding->post_delta(0) == r.steps[t].recoding->delta(0));
    }
  }
}

TEST_CASE("bae recoder needs an ensemble") {
  const auto p = verifier::toy_model(1);
  RecodingConfig c;
  c.signal = signals::SignalKind::bae;
  CHECK_THROWS_AS(Recoder(p, c, 1), Error);
}
