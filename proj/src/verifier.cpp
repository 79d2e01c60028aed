#include "recoding/verifier.hpp"

#include "reference_lm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace recoding::verifier {

Vec finite_diff_grad(const ScalarFn& f, const Vec& h, double eps) {
  if (!(eps > 0.0)) {
    throw Error("finite_diff_grad: eps must be positive");
  }
  Vec out(h.size());
  Vec x = h;
  for (Eigen::Index i = 0; i < h.size(); ++i) {
    x(i) = h(i) + eps;
    const double up = f(x);
    x(i) = h(i) - eps;
    const double down = f(x);
    x(i) = h(i);
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw Error("finite_diff_grad: non-finite function value");
    }
    out(i) = (up - down) / (2.0 * eps);
  }
  return out;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport compare_gradients(std::string name, const Vec& analytic, const Vec& numeric,
                                  double tolerance) {
  if (analytic.size() != numeric.size()) {
    throw Error("compare_gradients: size mismatch");
  }
  GradCheckReport r;
  r.name = std::move(name);
  r.tolerance = tolerance;
  r.analytic_norm = analytic.norm();
  r.numeric_norm = numeric.norm();
  r.checked = static_cast<std::size_t>(analytic.size());
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    double e = relative_error(analytic(i), numeric(i));
    if (std::isnan(e)) {
      e = std::numeric_limits<double>::infinity();
    }
    if (r.worst_index < 0 || e > r.max_rel_err) {
      r.max_rel_err = e;
      r.worst_index = i;
    }
  }
  r.passed = r.max_rel_err <= tolerance;
  return r;
}

GradCheckReport merge_reports(std::string name, std::span<const GradCheckReport> parts) {
  GradCheckReport r;
  r.name = std::move(name);
  double an = 0.0;
  double nn = 0.0;
  for (const auto& p : parts) {
    r.tolerance = p.tolerance;
    r.checked += p.checked;
    an += p.analytic_norm * p.analytic_norm;
    nn += p.numeric_norm * p.numeric_norm;
    if (r.worst_index < 0 || p.max_rel_err > r.max_rel_err) {
      r.max_rel_err = p.max_rel_err;
      r.worst_index = p.worst_index;
    }
  }
  r.analytic_norm = std::sqrt(an);
  r.numeric_norm = std::sqrt(nn);
  r.passed = r.max_rel_err <= r.tolerance;
  return r;
}

double estimate_lipschitz(const GradientFn& gradient, std::span<const Vec> samples) {
  if (samples.size() < 2) {
    throw Error("estimate_lipschitz: at least two samples required");
  }
  std::vector<Vec> grads;
  grads.reserve(samples.size());
  for (const auto& s : samples) {
    grads.push_back(gradient(s));
  }
  double best = 0.0;
  bool any_pair = false;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t j = i + 1; j < samples.size(); ++j) {
      const double dx = (samples[i] - samples[j]).norm();
      if (dx == 0.0) {
        continue;
      }
      any_pair = true;
      best = std::max(best, (grads[i] - grads[j]).norm() / dx);
    }
  }
  if (!any_pair) {
    throw Error("estimate_lipschitz: all samples are identical");
  }
  return best;
}

TheoremReport check_theorem1(const ScalarField& field, const Vec& h, double alpha,
                             double lipschitz) {
  TheoremReport r;
  const Vec g = field.gradient(h);
  r.delta_before = field.value(h);
  r.delta_after = field.value(h - alpha * g);
  r.improvement = r.delta_before - r.delta_after;
  r.alpha_used = alpha;
  r.lipschitz = lipschitz;
  r.bound = lipschitz > 0.0 ? g.squaredNorm() / (2.0 * lipschitz) : 0.0;
  r.bound_satisfied = r.improvement >= r.bound;
  r.descent = r.delta_after <= r.delta_before;
  return r;
}

namespace {

LmParameters with_fixed_alpha(const LmParameters& params, double alpha) {
  LmParameters p = params;
  p.step.kind = StepKind::fixed;
  p.step.fixed_alpha = Mat::Constant(p.dims.layers, 2, alpha);
  p.step.raw.resize(0, 0);
  p.step.predictors.clear();
  return p;
}

}  // namespace

PairedSignal check_theorem2(const LmParameters& params, const RecodingConfig& config,
                            const std::vector<TokenId>& inputs,
                            const std::vector<TokenId>& targets, int t, int k, double alpha,
                            std::uint64_t seed) {
  if (inputs.size() != targets.size()) {
    throw Error("check_theorem2: inputs and targets differ in length");
  }
  if (t < 0 || k < 0 || static_cast<std::size_t>(t + k) >= inputs.size()) {
    throw Error("check_theorem2: step t + k out of range");
  }
  const LmParameters p = with_fixed_alpha(params, alpha);
  RecodingConfig cfg = config;
  cfg.enabled = true;
  cfg.step_kind = StepKind::fixed;
  if (cfg.signal == signals::SignalKind::none) {
    cfg.signal = signals::SignalKind::surprisal;
  }
  const lm::IdGrid ids{inputs};
  const lm::IdGrid tg{targets};
  const auto run = [&](std::set<int> active) {
    recoder::Recoder hook(p, cfg, seed);
    hook.set_active_steps(std::move(active));
    hook.set_track_post(true);
    lm::ForwardOptions opts;
    opts.hook = &hook;
    opts.targets = &tg;
    return lm::forward(p, ids, lm::RnnState::zeros(p.dims, 1), opts);
  };
  const auto on = run({t});
  const auto off = run({});
  const auto at = static_cast<std::size_t>(t + k);
  PairedSignal out;
  out.baseline = off.steps[at].recoding->delta(0);
  out.recoded = k == 0 ? on.steps[at].recoding->post_delta(0) : on.steps[at].recoding->delta(0);
  return out;
}

DescentSweep descent_sweep(const LmParameters& params, const RecodingConfig& config,
                           const lm::IdGrid& inputs, const lm::IdGrid& targets,
                           std::uint64_t seed) {
  recoder::Recoder hook(params, config, seed);
  hook.set_track_post(true);
  lm::ForwardOptions opts;
  opts.hook = &hook;
  opts.targets = &targets;
  const auto r = lm::forward(params, inputs, lm::RnnState::zeros(params.dims, static_cast<int>(inputs.size())), opts);
  DescentSweep sweep;
  for (std::size_t t = 0; t < r.steps.size(); ++t) {
    const auto& rec = *r.steps[t].recoding;
    for (std::size_t b = 0; b < inputs.size(); ++b) {
      if (targets[b][t] < 0 || !rec.applied) {
        continue;
      }
      ++sweep.steps;
      const auto col = static_cast<Eigen::Index>(b);
      sweep.descents += rec.post_delta(col) <= rec.delta(col) ? 1 : 0;
    }
  }
  return sweep;
}

ModelDims toy_dims() { return ModelDims{11, 5, 7, 2}; }

LmParameters toy_model(std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  return init_parameters(toy_dims(), rng, scale);
}

namespace {

constexpr double kEps = 1e-5;
constexpr Eigen::Index kMaxCoordinates = 150;
constexpr Eigen::Index kMaxPredictorCoordinates = 40;

Mat uniform_mat(Eigen::Index rows, Eigen::Index cols, double scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      m(i, j) = u(rng);
    }
  }
  return m;
}

Vec column(const Mat& m) { return m.col(0); }

// Compares grads against central differences of the extended-precision
// reference loss over every trainable tensor; large tensors are subsampled.
std::vector<GradCheckReport> check_parameters(const LmParameters& params, const LmParameters& grads,
                                              const reference::Setup& setup, double tolerance,
                                              std::mt19937_64& rng) {
  reference::Params probe = reference::widen(params);
  std::vector<std::string> names;
  std::vector<std::span<long double>> spans;
  for_each_trainable(probe, [&](const std::string& n, auto& t) {
    names.push_back(n);
    spans.emplace_back(t.data(), static_cast<std::size_t>(t.size()));
  });
  const auto g = trainable_spans(grads);
  if (g.size() != spans.size()) {
    throw Error("gradient check: gradient layout does not match parameters");
  }
  const long double eps = kEps;
  reference::Setup fixed_steps = setup;
  fixed_steps.alphas = reference::alpha_table(probe, setup);
  std::vector<GradCheckReport> out;
  for (std::size_t s = 0; s < spans.size(); ++s) {
    const bool step_tensor = names[s].starts_with("step.");
    const reference::Setup& active = step_tensor ? setup : fixed_steps;
    const auto size = static_cast<Eigen::Index>(spans[s].size());
    const Eigen::Index cap = names[s].starts_with("step.predictor") ? kMaxPredictorCoordinates : kMaxCoordinates;
    std::vector<Eigen::Index> coords(static_cast<std::size_t>(size));
    for (Eigen::Index i = 0; i < size; ++i) {
      coords[static_cast<std::size_t>(i)] = i;
    }
    if (size > cap) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(cap));
    }
    Vec analytic(static_cast<Eigen::Index>(coords.size()));
    Vec numeric(analytic.size());
    for (std::size_t i = 0; i < coords.size(); ++i) {
      long double& x = spans[s][static_cast<std::size_t>(coords[i])];
      const long double saved = x;
      x = saved + eps;
      const long double up = reference::chunk_loss(probe, active);
      x = saved - eps;
      const long double down = reference::chunk_loss(probe, active);
      x = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw Error("gradient check: non-finite loss");
      }
      numeric(static_cast<Eigen::Index>(i)) = static_cast<double>((up - down) / (2.0L * eps));
      analytic(static_cast<Eigen::Index>(i)) = g[s][static_cast<std::size_t>(coords[i])];
    }
    out.push_back(compare_gradients(names[s], analytic, numeric, tolerance));
  }
  return out;
}

struct ToyBatch {
  lm::IdGrid ids, targets;
  lm::RnnState initial;
};

ToyBatch toy_batch(const ModelDims& dims, int batch, int steps, std::mt19937_64& rng) {
  std::uniform_int_distribution<TokenId> tok(0, dims.vocab_size - 1);
  ToyBatch b;
  b.ids.assign(static_cast<std::size_t>(batch), std::vector<TokenId>(static_cast<std::size_t>(steps)));
  b.targets = b.ids;
  for (int r = 0; r < batch; ++r) {
    for (int t = 0; t < steps; ++t) {
      b.ids[static_cast<std::size_t>(r)][static_cast<std::size_t>(t)] = tok(rng);
      b.targets[static_cast<std::size_t>(r)][static_cast<std::size_t>(t)] = tok(rng);
    }
  }
  b.initial = lm::RnnState::zeros(dims, batch);
  for (int l = 0; l < dims.layers; ++l) {
    b.initial.h[static_cast<std::size_t>(l)] = uniform_mat(dims.hidden_size, batch, 0.5, rng);
    b.initial.c[static_cast<std::size_t>(l)] = uniform_mat(dims.hidden_size, batch, 0.5, rng);
  }
  return b;
}

GradCheckReport check_field(const std::string& name, const ScalarField& field,
                            std::span<const Vec> points, double tolerance) {
  std::vector<GradCheckReport> parts;
  for (const auto& h : points) {
    parts.push_back(compare_gradients(name, field.gradient(h), finite_diff_grad(field.value, h, kEps),
                                      tolerance));
  }
  return merge_reports(name, parts);
}

// Top-layer signal checks at a handful of random hidden states.
void signal_checks(const LmParameters& params, double tolerance, std::mt19937_64& rng,
                   std::vector<GradCheckReport>& out) {
  const int n = params.dims.hidden_size;
  std::vector<Vec> points;
  for (int i = 0; i < 5; ++i) {
    points.push_back(column(uniform_mat(n, 1, 0.9, rng)));
  }
  std::uniform_int_distribution<TokenId> tok(0, params.dims.vocab_size - 1);
  const std::vector<TokenId> gold{tok(rng)};

  ScalarField surprisal{
      [&](const Vec& h) { return signals::surprisal_signal_at(h, gold, params.decoder).delta(0); },
      [&](const Vec& h) { return column(signals::surprisal_signal_at(h, gold, params.decoder).top_grad); }};
  out.push_back(check_field("signal.surprisal", surprisal, points, tolerance));

  const auto masks = signals::sample_dropout_decoders(params.decoder, 10, 0.42, rng());
  ScalarField mcd{
      [&](const Vec& h) { return signals::predictive_entropy_signal(h, masks).delta(0); },
      [&](const Vec& h) { return column(signals::predictive_entropy_signal(h, masks).top_grad); }};
  out.push_back(check_field("signal.mcd", mcd, points, tolerance));

  LmParameters with_ensemble = params;
  signals::init_ensemble(with_ensemble, 3, 0.29, false, rng);
  const auto& members = with_ensemble.ensemble;
  ScalarField bae{
      [&](const Vec& h) { return signals::bae_signal(h, members).delta(0); },
      [&](const Vec& h) { return column(signals::bae_signal(h, members).top_grad); }};
  out.push_back(check_field("signal.bae", bae, points, tolerance));
}

// signal_gradients against differences of the signal w.r.t. each layer's
// activations at one step, the rest of the step recomputed from the cache.
void chain_checks(const LmParameters& params, double tolerance, std::mt19937_64& rng,
                  std::vector<GradCheckReport>& out) {
  auto batch = toy_batch(params.dims, 1, 3, rng);
  const auto fwd = lm::forward(params, batch.ids, batch.initial);
  const auto& layers = fwd.steps.back().layers;
  const std::vector<TokenId> gold{batch.targets[0].back()};
  const std::size_t top = layers.size() - 1;

  const auto delta_from_top = [&](const Mat& h_top) {
    return signals::surprisal_signal_at(h_top, gold, params.decoder).delta(0);
  };
  // top hidden state after replacing layer l's h (or c) with v
  const auto propagate = [&](std::size_t l, bool cell, const Vec& v) {
    Mat h = cell ? Mat((layers[l].o.array() * v.array().tanh()).matrix()) : Mat(v);
    for (std::size_t above = l + 1; above <= top; ++above) {
      h = lm::lstm_step(params.layers[above], h, layers[above].h_prev, layers[above].c_prev).h;
    }
    return h;
  };

  const auto sig = signals::surprisal_signal_at(layers[top].h, gold, params.decoder);
  const auto grads = recoder::signal_gradients(sig.top_grad, layers, params);
  for (std::size_t l = 0; l <= top; ++l) {
    for (const bool cell : {false, true}) {
      const Vec at = column(cell ? layers[l].c : layers[l].h);
      const Vec analytic = column(cell ? grads.g_c[l] : grads.g_h[l]);
      const Vec numeric = finite_diff_grad(
          [&](const Vec& v) { return delta_from_top(propagate(l, cell, v)); }, at, kEps);
      out.push_back(compare_gradients(
          "signal_gradients.layer" + std::to_string(l) + (cell ? ".c" : ".h"), analytic, numeric,
          tolerance));
    }
  }
}

void bptt_checks(const LmParameters& params, double tolerance, std::mt19937_64& rng,
                 std::vector<GradCheckReport>& out) {
  const auto batch = toy_batch(params.dims, 2, 4, rng);
  const auto setup_for = [&](const lm::ForwardOptions& opts) {
    reference::Setup s;
    s.ids = batch.ids;
    s.targets = batch.targets;
    s.initial = batch.initial;
    s.loss_source = opts.loss_source;
    s.ensemble_loss = opts.ensemble_loss;
    if (opts.dropout_mask != nullptr) {
      s.dropout_mask = *opts.dropout_mask;
    }
    return s;
  };

  // plain chunk loss
  {
    const auto fwd = lm::forward(params, batch.ids, batch.initial);
    const auto grads = lm::backward_bptt(params, fwd, batch.targets);
    auto parts = check_parameters(params, grads.params, setup_for({}), tolerance, rng);
    out.push_back(merge_reports("bptt.plain", parts));
  }

  // ensemble loss on a dropped-out decoder input
  {
    LmParameters p0 = params;
    signals::init_ensemble(p0, 3, 0.29, false, rng);
    const Mat mask = lm::dropout_mask(p0.dims.hidden_size, 2, 0.15, rng);
    lm::ForwardOptions opts;
    opts.dropout_mask = &mask;
    opts.ensemble_loss = true;
    opts.loss_source = lm::LossSource::post_recoding;
    const auto fwd = lm::forward(p0, batch.ids, batch.initial, opts);
    const auto grads = lm::backward_bptt(p0, fwd, batch.targets);
    auto parts = check_parameters(p0, grads.params, setup_for(opts), tolerance, rng);
    out.push_back(merge_reports("bptt.ensemble_dropout", parts));
  }

  // recoded forward pass; the oracle replays the recoding gradients and
  // predictor inputs as constants
  struct ReplayCase {
    const char* name;
    signals::SignalKind signal;
    StepKind step;
  };
  const ReplayCase cases[] = {
      {"bptt.recoded.surprisal_learned", signals::SignalKind::surprisal, StepKind::learned},
      {"bptt.recoded.surprisal_predicted", signals::SignalKind::surprisal, StepKind::predicted},
      {"bptt.recoded.bae_learned", signals::SignalKind::bae, StepKind::learned},
      {"bptt.recoded.mcd_fixed", signals::SignalKind::mcd, StepKind::fixed},
  };
  for (const auto& rc : cases) {
    LmParameters p0 = params;
    p0.step = init_step_sizes(rc.step, p0.dims.layers, p0.dims.hidden_size, 0.5, rng);
    RecodingConfig cfg;
    cfg.signal = rc.signal;
    cfg.step_kind = rc.step;
    cfg.samples = 4;
    lm::ForwardOptions opts;
    opts.targets = &batch.targets;
    if (rc.signal != signals::SignalKind::surprisal) {
      opts.loss_source = lm::LossSource::post_recoding;
    }
    if (rc.signal == signals::SignalKind::bae) {
      signals::init_ensemble(p0, 3, 0.29, false, rng);
      opts.ensemble_loss = true;
    }
    recoder::Recoder hook(p0, cfg, rng());
    opts.hook = &hook;
    const auto fwd = lm::forward(p0, batch.ids, batch.initial, opts);
    auto grads = lm::backward_bptt(p0, fwd, batch.targets);
    recoder::accumulate_step_gradients(p0, fwd, grads, grads.params);

    const auto replay = reference::record_replay(fwd);
    auto setup = setup_for(opts);
    setup.replay = &replay;
    auto parts = check_parameters(p0, grads.params, setup, tolerance, rng);
    out.push_back(merge_reports(rc.name, parts));
  }
}

void anchor_checks(const LmParameters& params, double tolerance, std::mt19937_64& rng,
                   std::vector<GradCheckReport>& out) {
  for (const bool per_member : {false, true}) {
    LmParameters p0 = params;
    signals::init_ensemble(p0, 3, 0.29, per_member, rng);
    const double decay = 0.25;
    const std::size_t tokens = 8;
    LmParameters grads = zeros_like(p0);
    signals::accumulate_anchor_gradient(p0.ensemble, p0.anchors, decay, tokens, 1.0, grads.ensemble);
    const auto loss = [&](const LmParameters& p) {
      const auto v = signals::anchor_loss(p.ensemble, p0.anchors, decay, tokens);
      double s = 0.0;
      for (double x : v) {
        s += x;
      }
      return s;
    };
    std::vector<GradCheckReport> parts;
    for (std::size_t k = 0; k < p0.ensemble.size(); ++k) {
      const Mat& w = p0.ensemble[k].weight;
      const Vec flat = Eigen::Map<const Vec>(w.data(), w.size());
      const Vec numeric = finite_diff_grad(
          [&](const Vec& v) {
            LmParameters p = p0;
            p.ensemble[k].weight = Eigen::Map<const Mat>(v.data(), w.rows(), w.cols());
            return loss(p);
          },
          flat, kEps);
      const Mat& gw = grads.ensemble[k].weight;
      parts.push_back(compare_gradients("", Eigen::Map<const Vec>(gw.data(), gw.size()), numeric,
                                        tolerance));
    }
    out.push_back(merge_reports(per_member ? "anchor.per_member" : "anchor.shared", parts));
  }
}

}  // namespace

std::vector<GradCheckReport> run_gradient_suite(std::uint64_t seed, double tolerance) {
  std::mt19937_64 rng(mix_seed(seed, 0x9e37));
  const LmParameters params = toy_model(seed);
  std::vector<GradCheckReport> out;
  signal_checks(params, tolerance, rng, out);
  chain_checks(params, tolerance, rng, out);
  bptt_checks(params, tolerance, rng, out);
  anchor_checks(params, tolerance, rng, out);
  return out;
}

}  // namespace recoding::verifier
