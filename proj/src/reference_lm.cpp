#include "reference_lm.hpp"

#include <cmath>

namespace recoding::reference {

namespace {

LMat wide(const Mat& m) { return m.cast<long double>(); }
LVec wide(const Vec& v) { return v.cast<long double>(); }

long double sigm(long double x) { return 1.0L / (1.0L + std::exp(-x)); }

long double softplus_l(long double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

long double alpha_at(const Step& step, int layer, int kind, const LMat& input, Eigen::Index col) {
  switch (step.kind) {
    case StepKind::fixed:
      return step.fixed_alpha(layer, kind);
    case StepKind::learned:
      return softplus_l(step.raw(layer, kind));
    case StepKind::predicted: {
      const Predictor& q = step.predictors[static_cast<std::size_t>(2 * layer + kind)];
      LVec a1 = q.w1 * input.col(col) + q.b1;
      a1 = a1.array().tanh().matrix();
      LVec a2 = q.w2 * a1 + q.b2;
      a2 = a2.array().tanh().matrix();
      return softplus_l((q.w3 * a2)(0) + q.b3(0));
    }
  }
  return 0.0L;
}

// -log softmax(logits)[y] via log-sum-exp
long double nll(const LVec& logits, TokenId y) {
  const long double m = logits.maxCoeff();
  long double s = 0.0L;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    s += std::exp(logits(i) - m);
  }
  return m + std::log(s) - logits(y);
}

}  // namespace

Params widen(const LmParameters& p) {
  Params w;
  w.embeddings = wide(p.embeddings);
  for (const auto& l : p.layers) {
    w.layers.push_back(Layer{wide(l.input_weights), wide(l.recurrent_weights), wide(l.bias)});
  }
  w.decoder = Head{wide(p.decoder.weight), wide(p.decoder.bias)};
  for (const auto& e : p.ensemble) {
    w.ensemble.push_back(Head{wide(e.weight), wide(e.bias)});
  }
  w.step.kind = p.step.kind;
  w.step.fixed_alpha = wide(p.step.fixed_alpha);
  w.step.raw = wide(p.step.raw);
  for (const auto& q : p.step.predictors) {
    w.step.predictors.push_back(
        Predictor{wide(q.w1), wide(q.b1), wide(q.w2), wide(q.b2), wide(q.w3), wide(q.b3)});
  }
  return w;
}

Replay record_replay(const lm::ForwardResult& result) {
  Replay r;
  for (const auto& s : result.steps) {
    const bool on = s.recoding.has_value() && s.recoding->applied;
    r.applied.push_back(on);
    r.grad_h.push_back(on ? s.recoding->grad_h : std::vector<Mat>{});
    r.grad_c.push_back(on ? s.recoding->grad_c : std::vector<Mat>{});
    std::vector<Mat> inputs;
    for (const auto& l : s.layers) {
      inputs.push_back(l.h);
    }
    r.inputs.push_back(std::move(inputs));
  }
  return r;
}

std::vector<long double> alpha_table(const Params& p, const Setup& s) {
  std::vector<long double> out;
  if (s.replay == nullptr) {
    return out;
  }
  for (std::size_t t = 0; t < s.replay->applied.size(); ++t) {
    if (!s.replay->applied[t]) {
      continue;
    }
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      const LMat input = wide(s.replay->inputs[t][l]);
      for (int kind = 0; kind < 2; ++kind) {
        for (Eigen::Index b = 0; b < input.cols(); ++b) {
          out.push_back(alpha_at(p.step, static_cast<int>(l), kind, input, b));
        }
      }
    }
  }
  return out;
}

long double chunk_loss(const Params& p, const Setup& s) {
  const auto batch = static_cast<Eigen::Index>(s.ids.size());
  const std::size_t steps = s.ids.front().size();
  const std::size_t layers = p.layers.size();
  std::vector<LMat> h, c;
  for (std::size_t l = 0; l < layers; ++l) {
    h.push_back(wide(s.initial.h[l]));
    c.push_back(wide(s.initial.c[l]));
  }
  const Eigen::Index n = h.front().rows();

  long double main = 0.0L;
  std::vector<long double> members(p.ensemble.size(), 0.0L);
  long double tokens = 0.0L;
  std::size_t next_alpha = 0;
  const auto alpha = [&](int layer, int kind, const LMat& input, Eigen::Index b) {
    return s.alphas.empty() ? alpha_at(p.step, layer, kind, input, b) : s.alphas.at(next_alpha++);
  };

  for (std::size_t t = 0; t < steps; ++t) {
    LMat x(p.embeddings.cols(), batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
      x.col(b) = p.embeddings.row(s.ids[static_cast<std::size_t>(b)][t]).transpose();
    }
    std::vector<LMat> new_h(layers), new_c(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      const Layer& w = p.layers[l];
      LMat pre = w.input_weights * x + w.recurrent_weights * h[l];
      pre.colwise() += w.bias;
      LMat hn(n, batch), cn(n, batch);
      for (Eigen::Index b = 0; b < batch; ++b) {
        for (Eigen::Index j = 0; j < n; ++j) {
          const long double f = sigm(pre(j, b));
          const long double i = sigm(pre(n + j, b));
          const long double o = sigm(pre(2 * n + j, b));
          const long double g = std::tanh(pre(3 * n + j, b));
          cn(j, b) = f * c[l](j, b) + i * g;
          hn(j, b) = o * std::tanh(cn(j, b));
        }
      }
      new_h[l] = hn;
      new_c[l] = cn;
      x = hn;
    }
    const LMat pre_top = new_h.back();

    if (s.replay != nullptr && s.replay->applied[t]) {
      for (std::size_t l = 0; l < layers; ++l) {
        const LMat input = wide(s.replay->inputs[t][l]);
        const LMat gh = wide(s.replay->grad_h[t][l]);
        const LMat gc = wide(s.replay->grad_c[t][l]);
        const int layer = static_cast<int>(l);
        for (Eigen::Index b = 0; b < batch; ++b) {
          new_h[l].col(b) -= alpha(layer, 0, input, b) * gh.col(b);
        }
        for (Eigen::Index b = 0; b < batch; ++b) {
          new_c[l].col(b) -= alpha(layer, 1, input, b) * gc.col(b);
        }
      }
    }
    h = new_h;
    c = new_c;

    LMat loss_input = s.loss_source == lm::LossSource::post_recoding ? h.back() : pre_top;
    if (s.dropout_mask.size() > 0) {
      loss_input = loss_input.cwiseProduct(wide(s.dropout_mask));
    }
    for (Eigen::Index b = 0; b < batch; ++b) {
      const TokenId y = s.targets[static_cast<std::size_t>(b)][t];
      if (y < 0) {
        continue;
      }
      tokens += 1.0L;
      main += nll(p.decoder.weight * loss_input.col(b) + p.decoder.bias, y);
      if (s.ensemble_loss) {
        for (std::size_t k = 0; k < p.ensemble.size(); ++k) {
          members[k] += nll(p.ensemble[k].weight * loss_input.col(b) + p.ensemble[k].bias, y);
        }
      }
    }
  }
  long double total = main / tokens;
  for (long double m : members) {
    total += m / (tokens * static_cast<long double>(members.size()));
  }
  return total;
}

}  // namespace recoding::reference
