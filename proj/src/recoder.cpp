#include "recoding/recoder.hpp"

#include <algorithm>
#include <cmath>

namespace recoding::recoder {

Mat recode(const Mat& activation, const Mat& grad, double alpha) {
  if (activation.rows() != grad.rows() || activation.cols() != grad.cols()) {
    throw Error("recode: shape mismatch between activation and gradient");
  }
  if (alpha < 0.0) {
    throw Error("recode: step size must be non-negative");
  }
  return activation - alpha * grad;
}

Mat recode(const Mat& activation, const Mat& grad, const RowVec& alpha) {
  if (activation.rows() != grad.rows() || activation.cols() != grad.cols() ||
      alpha.size() != activation.cols()) {
    throw Error("recode: shape mismatch between activation and gradient");
  }
  return activation - (grad.array().rowwise() * alpha.array()).matrix();
}

RecodingGradients signal_gradients(const Mat& top_grad, const std::vector<lm::LayerStepCache>& layers,
                                   const LmParameters& params) {
  if (layers.size() != params.layers.size() || layers.empty() || layers.back().h.size() == 0) {
    throw Error("signal_gradients: missing cache");
  }
  const std::size_t n_layers = layers.size();
  RecodingGradients out;
  out.g_h.resize(n_layers);
  out.g_c.resize(n_layers);
  Mat grad = top_grad;
  for (std::size_t l = n_layers; l-- > 0;) {
    const lm::LayerStepCache& s = layers[l];
    if (grad.rows() != s.h.rows() || grad.cols() != s.h.cols()) {
      throw Error("signal_gradients: gradient shape does not match the cached state");
    }
    out.g_h[l] = grad;
    out.g_c[l] = (grad.array() * s.o.array() * (1.0 - s.tanh_c.array().square())).matrix();
    if (l > 0) {
      grad = lm::lstm_step_backward(params.layers[l], s, grad, Mat::Zero(grad.rows(), grad.cols())).dx;
    }
  }
  return out;
}

RowVec predictor_output(const StepPredictor& q, const Mat& h, PredictorCache* cache) {
  if (q.w1.cols() != h.rows()) {
    throw Error("step predictor: input width mismatch");
  }
  Mat a1 = q.w1 * h;
  a1.colwise() += q.b1;
  a1 = a1.array().tanh().matrix();
  Mat a2 = q.w2 * a1;
  a2.colwise() += q.b2;
  a2 = a2.array().tanh().matrix();
  RowVec z = q.w3 * a2;
  z.array() += q.b3(0);
  if (cache != nullptr) {
    cache->a1 = std::move(a1);
    cache->a2 = std::move(a2);
    cache->z = z;
  }
  return z;
}

RowVec step_size(const StepSizeParams& step, int layer, ActivationKind kind, const Mat& h) {
  const auto col = static_cast<int>(kind);
  switch (step.kind) {
    case StepKind::fixed:
      return RowVec::Constant(h.cols(), step.fixed_alpha(layer, col));
    case StepKind::learned:
      return RowVec::Constant(h.cols(), softplus(step.raw(layer, col)));
    case StepKind::predicted: {
      const auto& q = step.predictors.at(static_cast<std::size_t>(StepSizeParams::index(layer, kind)));
      return predictor_output(q, h).unaryExpr([](double z) { return softplus(z); });
    }
  }
  return RowVec::Zero(h.cols());
}

RecodedState apply_recoding(const std::vector<Mat>& h, const std::vector<Mat>& c,
                            const RecodingGradients& grads, const StepSizeParams& step) {
  if (h.size() != c.size() || h.size() != grads.g_h.size() || h.size() != grads.g_c.size()) {
    throw Error("apply_recoding: layer count mismatch");
  }
  RecodedState out;
  for (std::size_t l = 0; l < h.size(); ++l) {
    const int layer = static_cast<int>(l);
    out.alpha_h.push_back(step_size(step, layer, ActivationKind::hidden, h[l]));
    out.alpha_c.push_back(step_size(step, layer, ActivationKind::cell, h[l]));
    out.h.push_back(recode(h[l], grads.g_h[l], out.alpha_h.back()));
    out.c.push_back(recode(c[l], grads.g_c[l], out.alpha_c.back()));
  }
  return out;
}

namespace {

void predictor_backward(const StepPredictor& q, const Mat& h, const RowVec& d_alpha,
                        StepPredictor& g) {
  PredictorCache cache;
  predictor_output(q, h, &cache);
  const RowVec dz = d_alpha.cwiseProduct(cache.z.unaryExpr([](double z) { return sigmoid(z); }));
  g.w3.noalias() += dz * cache.a2.transpose();
  g.b3(0) += dz.sum();
  const Mat d2 = ((q.w3.transpose() * dz).array() * (1.0 - cache.a2.array().square())).matrix();
  g.w2.noalias() += d2 * cache.a1.transpose();
  g.b2 += d2.rowwise().sum();
  const Mat d1 = ((q.w2.transpose() * d2).array() * (1.0 - cache.a1.array().square())).matrix();
  g.w1.noalias() += d1 * h.transpose();
  g.b1 += d1.rowwise().sum();
}

}  // namespace

void accumulate_step_gradients(const LmParameters& params, const lm::ForwardResult& result,
                               const lm::BpttGradients& bptt, LmParameters& grads) {
  if (params.step.kind == StepKind::fixed) {
    return;
  }
  for (std::size_t t = 0; t < result.steps.size(); ++t) {
    const auto& sc = result.steps[t];
    if (!sc.recoding.has_value() || !sc.recoding->applied || bptt.alpha_h[t].empty()) {
      continue;
    }
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
      const int layer = static_cast<int>(l);
      for (const auto kind : {ActivationKind::hidden, ActivationKind::cell}) {
        const RowVec& d_alpha =
            kind == ActivationKind::hidden ? bptt.alpha_h[t][l] : bptt.alpha_c[t][l];
        const auto col = static_cast<int>(kind);
        if (params.step.kind == StepKind::learned) {
          grads.step.raw(layer, col) += d_alpha.sum() * sigmoid(params.step.raw(layer, col));
        } else {
          const auto idx = static_cast<std::size_t>(StepSizeParams::index(layer, kind));
          predictor_backward(params.step.predictors[idx], sc.layers[l].h, d_alpha,
                             grads.step.predictors[idx]);
        }
      }
    }
  }
}

signals::SignalOutput evaluate_signal(const LmParameters& params, const RecodingConfig& config,
                                      const Mat& h_top, const std::vector<TokenId>* gold,
                                      std::uint64_t step_seed) {
  using signals::SignalKind;
  switch (config.signal) {
    case SignalKind::none:
    case SignalKind::surprisal: {
      if (gold == nullptr) {
        throw Error("surprisal signal requires gold tokens");
      }
      std::vector<TokenId> safe(*gold);
      for (auto& y : safe) {
        y = std::max<TokenId>(y, 0);
      }
      auto out = signals::surprisal_signal_at(h_top, safe, params.decoder);
      for (std::size_t b = 0; b < gold->size(); ++b) {
        if ((*gold)[b] < 0) {
          out.delta(static_cast<Eigen::Index>(b)) = 0.0;
          out.top_grad.col(static_cast<Eigen::Index>(b)).setZero();
        }
      }
      return out;
    }
    case SignalKind::mcd:
      return signals::mcd_signal(h_top, params.decoder, config.samples, config.mc_dropout,
                                 step_seed);
    case SignalKind::bae:
      return signals::bae_signal(h_top, params.ensemble);
  }
  throw Error("unknown signal kind");
}

Recoder::Recoder(const LmParameters& params, RecodingConfig config, std::uint64_t seed)
    : params_(params), config_(config), seed_(seed) {
  if (config_.signal == signals::SignalKind::bae && params_.ensemble.empty()) {
    throw Error("bae signal requires ensemble weights");
  }
}

std::optional<lm::RecodingRecord> Recoder::on_step(const lm::StepView& view) {
  const int position = offset_ + view.t;
  const std::uint64_t step_seed =
      mix_seed(mix_seed(seed_, stream_), static_cast<std::uint64_t>(position));
  const lm::LayerStepCache& top = view.layers.back();
  auto signal = evaluate_signal(params_, config_, top.h, view.gold, step_seed);

  lm::RecodingRecord rec;
  rec.delta = signal.delta;
  const bool apply = config_.active() && (!active_.has_value() || active_->count(position) > 0);
  if (!apply) {
    if (track_post_) {
      rec.post_delta = rec.delta;
    }
    return rec;
  }

  auto grads = signal_gradients(signal.top_grad, view.layers, params_);
  std::vector<Mat> h, c;
  for (const auto& layer : view.layers) {
    h.push_back(layer.h);
    c.push_back(layer.c);
  }
  auto recoded = apply_recoding(h, c, grads, params_.step);
  rec.applied = true;
  rec.grad_h = std::move(grads.g_h);
  rec.grad_c = std::move(grads.g_c);
  rec.alpha_h = std::move(recoded.alpha_h);
  rec.alpha_c = std::move(recoded.alpha_c);
  rec.recoded_h = std::move(recoded.h);
  rec.recoded_c = std::move(recoded.c);
  if (track_post_) {
    rec.post_delta = evaluate_signal(params_, config_, rec.recoded_h.back(), view.gold, step_seed).delta;
  }
  return rec;
}

}  // namespace recoding::recoder
