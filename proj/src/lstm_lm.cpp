#include "recoding/lstm_lm.hpp"

#include <cmath>

namespace recoding::lm {

namespace {

Mat sigmoid_of(const Mat& z) {
  return z.unaryExpr([](double v) { return sigmoid(v); });
}

void check_columns(const Mat& a, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (a.rows() != rows || a.cols() != cols) {
    throw Error(std::string("dimension mismatch: ") + what);
  }
}

Mat embed(const LmParameters& p, const IdGrid& ids, std::size_t t) {
  const auto batch = static_cast<Eigen::Index>(ids.size());
  Mat x(p.embeddings.cols(), batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const TokenId id = ids[static_cast<std::size_t>(b)][t];
    if (id < 0 || id >= p.embeddings.rows()) {
      throw Error("token id " + std::to_string(id) + " out of range");
    }
    x.col(b) = p.embeddings.row(id).transpose();
  }
  return x;
}

// (probs - onehot(target)) * scale per column; padding columns are zero.
Mat softmax_ce_grad(const Mat& probs, const IdGrid& targets, std::size_t t, double scale) {
  Mat d = probs * scale;
  for (Eigen::Index b = 0; b < probs.cols(); ++b) {
    const TokenId y = targets[static_cast<std::size_t>(b)][t];
    if (y < 0) {
      d.col(b).setZero();
    } else {
      d(y, b) -= scale;
    }
  }
  return d;
}

}  // namespace

RnnState RnnState::zeros(const ModelDims& dims, int batch) {
  RnnState s;
  for (int l = 0; l < dims.layers; ++l) {
    s.h.push_back(Mat::Zero(dims.hidden_size, batch));
    s.c.push_back(Mat::Zero(dims.hidden_size, batch));
  }
  return s;
}

LayerStepCache lstm_step(const LayerWeights& w, const Mat& x, const Mat& h, const Mat& c) {
  const Eigen::Index n = w.recurrent_weights.cols();
  const Eigen::Index batch = x.cols();
  if (w.input_weights.cols() != x.rows()) {
    throw Error("dimension mismatch: lstm input width");
  }
  check_columns(h, n, batch, "lstm hidden state");
  check_columns(c, n, batch, "lstm cell state");

  Mat pre = w.input_weights * x + w.recurrent_weights * h;
  pre.colwise() += w.bias;

  LayerStepCache s;
  s.x = x;
  s.h_prev = h;
  s.c_prev = c;
  s.f = sigmoid_of(pre.topRows(n));
  s.i = sigmoid_of(pre.middleRows(n, n));
  s.o = sigmoid_of(pre.middleRows(2 * n, n));
  s.g = pre.bottomRows(n).array().tanh().matrix();
  s.c = (s.f.array() * c.array() + s.i.array() * s.g.array()).matrix();
  s.tanh_c = s.c.array().tanh().matrix();
  s.h = (s.o.array() * s.tanh_c.array()).matrix();
  return s;
}

LayerStepGrads lstm_step_backward(const LayerWeights& w, const LayerStepCache& s, const Mat& dh,
                                  const Mat& dc, LayerWeights* weight_grads) {
  const Eigen::Index n = s.h.rows();
  const auto one = [](const Mat& m) { return Eigen::ArrayXXd::Ones(m.rows(), m.cols()); };

  const Eigen::ArrayXXd d_o = dh.array() * s.tanh_c.array();
  const Eigen::ArrayXXd dc_total =
      dc.array() + dh.array() * s.o.array() * (one(s.tanh_c) - s.tanh_c.array().square());

  Mat dgates(4 * n, s.h.cols());
  dgates.topRows(n) = (dc_total * s.c_prev.array() * s.f.array() * (one(s.f) - s.f.array())).matrix();
  dgates.middleRows(n, n) = (dc_total * s.g.array() * s.i.array() * (one(s.i) - s.i.array())).matrix();
  dgates.middleRows(2 * n, n) = (d_o * s.o.array() * (one(s.o) - s.o.array())).matrix();
  dgates.bottomRows(n) = (dc_total * s.i.array() * (one(s.g) - s.g.array().square())).matrix();

  if (weight_grads != nullptr) {
    weight_grads->input_weights.noalias() += dgates * s.x.transpose();
    weight_grads->recurrent_weights.noalias() += dgates * s.h_prev.transpose();
    weight_grads->bias += dgates.rowwise().sum();
  }

  LayerStepGrads g;
  g.dx.noalias() = w.input_weights.transpose() * dgates;
  g.dh_prev.noalias() = w.recurrent_weights.transpose() * dgates;
  g.dc_prev = (dc_total * s.f.array()).matrix();
  return g;
}

Mat decode_logits(const Decoder& d, const Mat& h) {
  if (d.weight.cols() != h.rows()) {
    throw Error("dimension mismatch: decoder input width");
  }
  Mat logits = d.weight * h;
  logits.colwise() += d.bias;
  return logits;
}

Mat decode(const Decoder& d, const Mat& h) { return softmax_columns(decode_logits(d, h)); }

ForwardResult forward(const LmParameters& params, const IdGrid& ids, const RnnState& initial,
                      const ForwardOptions& options) {
  if (ids.empty() || ids.front().empty()) {
    throw Error("forward: empty batch");
  }
  const std::size_t batch = ids.size();
  const std::size_t steps = ids.front().size();
  for (const auto& row : ids) {
    if (row.size() != steps) {
      throw Error("forward: ragged batch");
    }
  }
  if (initial.h.size() != params.layers.size() || initial.batch() != static_cast<int>(batch)) {
    throw Error("dimension mismatch: initial state");
  }
  if (options.ensemble_loss && params.ensemble.empty()) {
    throw Error("forward: ensemble loss requested without ensemble members");
  }

  ForwardResult r;
  r.ids = ids;
  r.loss_source = options.loss_source;
  r.ensemble_loss = options.ensemble_loss;
  if (options.dropout_mask != nullptr) {
    check_columns(*options.dropout_mask, params.dims.hidden_size, static_cast<Eigen::Index>(batch),
                  "dropout mask");
    r.dropout_mask = *options.dropout_mask;
  }
  r.steps.resize(steps);

  RnnState state = initial;
  std::vector<TokenId> gold(batch);
  const std::size_t top = params.layers.size() - 1;

  for (std::size_t t = 0; t < steps; ++t) {
    StepCache& sc = r.steps[t];
    sc.layers.resize(params.layers.size());
    Mat input = embed(params, ids, t);
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
      sc.layers[l] = lstm_step(params.layers[l], input, state.h[l], state.c[l]);
      input = sc.layers[l].h;
    }

    if (options.hook != nullptr) {
      const std::vector<TokenId>* gold_ptr = nullptr;
      if (options.targets != nullptr) {
        for (std::size_t b = 0; b < batch; ++b) {
          gold[b] = (*options.targets)[b][t];
        }
        gold_ptr = &gold;
      }
      sc.recoding = options.hook->on_step(StepView{static_cast<int>(t), sc.layers, gold_ptr});
    }

    const bool recoded = sc.recoding.has_value() && sc.recoding->applied;
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
      state.h[l] = recoded ? sc.recoding->recoded_h[l] : sc.layers[l].h;
      state.c[l] = recoded ? sc.recoding->recoded_c[l] : sc.layers[l].c;
    }

    const Mat& top_h =
        options.loss_source == LossSource::post_recoding ? state.h[top] : sc.layers[top].h;
    sc.loss_input = r.dropout_mask.size() > 0 ? Mat(top_h.cwiseProduct(r.dropout_mask)) : top_h;
    sc.probs = decode(params.decoder, sc.loss_input);
    if (options.ensemble_loss) {
      for (const auto& member : params.ensemble) {
        sc.member_probs.push_back(decode(member, sc.loss_input));
      }
    }
  }
  r.final_state = std::move(state);
  return r;
}

double cross_entropy(std::span<const Vec> probs, std::span<const TokenId> targets) {
  if (probs.size() != targets.size() || probs.empty()) {
    throw Error("cross_entropy: probabilities and targets differ in length");
  }
  double s = 0.0;
  for (std::size_t t = 0; t < probs.size(); ++t) {
    s -= safe_log(probs[t](targets[t]));
  }
  return s / static_cast<double>(probs.size());
}

Mat token_nll(const ForwardResult& result, const IdGrid& targets) {
  const auto steps = static_cast<Eigen::Index>(result.steps.size());
  const auto batch = static_cast<Eigen::Index>(targets.size());
  Mat nll = Mat::Zero(steps, batch);
  for (Eigen::Index t = 0; t < steps; ++t) {
    const Mat& probs = result.steps[static_cast<std::size_t>(t)].probs;
    for (Eigen::Index b = 0; b < batch; ++b) {
      const TokenId y = targets[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
      if (y >= 0) {
        nll(t, b) = -safe_log(probs(y, b));
      }
    }
  }
  return nll;
}

LossBreakdown chunk_loss(const ForwardResult& result, const IdGrid& targets) {
  LossBreakdown out;
  const std::size_t members =
      result.ensemble_loss && !result.steps.empty() ? result.steps.front().member_probs.size() : 0;
  out.members.assign(members, 0.0);
  double main = 0.0;
  for (std::size_t t = 0; t < result.steps.size(); ++t) {
    const StepCache& sc = result.steps[t];
    for (std::size_t b = 0; b < targets.size(); ++b) {
      const TokenId y = targets[b][t];
      if (y < 0) {
        continue;
      }
      ++out.tokens;
      main -= safe_log(sc.probs(y, static_cast<Eigen::Index>(b)));
      for (std::size_t k = 0; k < members; ++k) {
        out.members[k] -= safe_log(sc.member_probs[k](y, static_cast<Eigen::Index>(b)));
      }
    }
  }
  if (out.tokens == 0) {
    throw Error("chunk_loss: no target tokens");
  }
  const double n = static_cast<double>(out.tokens);
  out.main = main / n;
  out.total = out.main;
  for (auto& m : out.members) {
    m /= n;
    out.total += m / static_cast<double>(members);
  }
  return out;
}

BpttGradients backward_bptt(const LmParameters& params, const ForwardResult& result,
                            const IdGrid& targets) {
  if (result.steps.empty() || result.steps.front().layers.size() != params.layers.size() ||
      result.steps.front().probs.size() == 0) {
    throw Error("backward_bptt: missing cache");
  }
  const std::size_t steps = result.steps.size();
  const std::size_t layers = params.layers.size();
  const std::size_t top = layers - 1;
  const auto batch = static_cast<Eigen::Index>(targets.size());
  const int n = params.dims.hidden_size;

  std::size_t tokens = 0;
  for (const auto& row : targets) {
    for (TokenId y : row) {
      tokens += y >= 0 ? 1 : 0;
    }
  }
  if (tokens == 0) {
    throw Error("backward_bptt: no target tokens");
  }
  const double scale = 1.0 / static_cast<double>(tokens);
  const std::size_t members = result.ensemble_loss ? params.ensemble.size() : 0;

  BpttGradients out;
  out.params = zeros_like(params);
  out.alpha_h.assign(steps, {});
  out.alpha_c.assign(steps, {});

  // gradients w.r.t. the (possibly recoded) state handed to step t+1
  std::vector<Mat> d_state_h(layers, Mat::Zero(n, batch));
  std::vector<Mat> d_state_c(layers, Mat::Zero(n, batch));

  for (std::size_t t = steps; t-- > 0;) {
    const StepCache& sc = result.steps[t];
    if (sc.layers.size() != layers) {
      throw Error("backward_bptt: missing cache");
    }

    Mat dlogits = softmax_ce_grad(sc.probs, targets, t, scale);
    out.params.decoder.weight.noalias() += dlogits * sc.loss_input.transpose();
    out.params.decoder.bias += dlogits.rowwise().sum();
    Mat d_loss_input = params.decoder.weight.transpose() * dlogits;
    for (std::size_t k = 0; k < members; ++k) {
      Mat dk = softmax_ce_grad(sc.member_probs[k], targets, t, scale / static_cast<double>(members));
      out.params.ensemble[k].weight.noalias() += dk * sc.loss_input.transpose();
      out.params.ensemble[k].bias += dk.rowwise().sum();
      d_loss_input.noalias() += params.ensemble[k].weight.transpose() * dk;
    }
    if (result.dropout_mask.size() > 0) {
      d_loss_input = d_loss_input.cwiseProduct(result.dropout_mask);
    }
    if (result.loss_source == LossSource::post_recoding) {
      d_state_h[top] += d_loss_input;
    }

    // h' = h - alpha * g with g constant: identity w.r.t. h, -g w.r.t. alpha
    std::vector<Mat> dh = d_state_h;
    std::vector<Mat> dc = d_state_c;
    if (sc.recoding.has_value() && sc.recoding->applied) {
      const auto& rec = *sc.recoding;
      out.alpha_h[t].resize(layers);
      out.alpha_c[t].resize(layers);
      for (std::size_t l = 0; l < layers; ++l) {
        out.alpha_h[t][l] = -(d_state_h[l].cwiseProduct(rec.grad_h[l])).colwise().sum();
        out.alpha_c[t][l] = -(d_state_c[l].cwiseProduct(rec.grad_c[l])).colwise().sum();
      }
    }
    if (result.loss_source == LossSource::pre_recoding) {
      dh[top] += d_loss_input;
    }

    Mat d_input;
    for (std::size_t l = layers; l-- > 0;) {
      if (l < top) {
        dh[l] += d_input;
      }
      LayerStepGrads g =
          lstm_step_backward(params.layers[l], sc.layers[l], dh[l], dc[l], &out.params.layers[l]);
      d_state_h[l] = std::move(g.dh_prev);
      d_state_c[l] = std::move(g.dc_prev);
      d_input = std::move(g.dx);
    }
    for (Eigen::Index b = 0; b < batch; ++b) {
      const TokenId id = result.ids[static_cast<std::size_t>(b)][t];
      out.params.embeddings.row(id) += d_input.col(b).transpose();
    }
  }
  return out;
}

double sgd_step(LmParameters& params, const LmParameters& grads, double lr, double clip) {
  if (!(lr >= 0.0) || !(clip > 0.0)) {
    throw Error("sgd_step: lr must be non-negative and clip positive");
  }
  auto p = trainable_spans(params);
  auto g = trainable_spans(grads);
  if (p.size() != g.size()) {
    throw Error("sgd_step: gradient layout does not match parameters");
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i].size() != p[i].size()) {
      throw Error("sgd_step: gradient layout does not match parameters");
    }
    for (double v : g[i]) {
      sq += v * v;
    }
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    throw DivergenceError("divergence");
  }
  const double factor = norm > clip ? clip / norm : 1.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t j = 0; j < p[i].size(); ++j) {
      p[i][j] -= lr * factor * g[i][j];
    }
  }
  return norm;
}

double anneal_lr(std::span<const double> history, double lr) {
  if (history.empty()) {
    throw Error("anneal_lr: empty history");
  }
  if (history.size() == 1) {
    return lr;
  }
  double best = history.front();
  for (std::size_t i = 1; i + 1 < history.size(); ++i) {
    best = std::min(best, history[i]);
  }
  return history.back() < best ? lr : lr / 2.0;
}

Mat dropout_mask(int rows, int cols, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw Error("dropout rate must lie in [0, 1)");
  }
  Mat m(rows, cols);
  const double keep = 1.0 - rate;
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      m(i, j) = u < keep ? 1.0 / keep : 0.0;
    }
  }
  return m;
}

}  // namespace recoding::lm
