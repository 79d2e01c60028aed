#include "recoding/parameters.hpp"

namespace recoding {

namespace {

void fill_uniform(Mat& m, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      m(i, j) = dist(rng);
    }
  }
}

}  // namespace

LmParameters zeros_like(const LmParameters& p) {
  LmParameters z = p;
  z.anchors.clear();
  for_each_tensor(z, [](const std::string&, auto& t) { t.setZero(); });
  return z;
}

std::vector<std::span<double>> trainable_spans(LmParameters& p) {
  std::vector<std::span<double>> out;
  for_each_trainable(p, [&](const std::string&, auto& t) {
    out.emplace_back(t.data(), static_cast<std::size_t>(t.size()));
  });
  return out;
}

std::vector<std::span<const double>> trainable_spans(const LmParameters& p) {
  std::vector<std::span<const double>> out;
  for_each_trainable(p, [&](const std::string&, const auto& t) {
    out.emplace_back(t.data(), static_cast<std::size_t>(t.size()));
  });
  return out;
}

double squared_norm(const LmParameters& p) {
  double s = 0.0;
  for_each_trainable(p, [&](const std::string&, const auto& t) { s += t.squaredNorm(); });
  return s;
}

bool all_finite(const LmParameters& p) {
  bool ok = true;
  for_each_trainable(p, [&](const std::string&, const auto& t) { ok = ok && t.allFinite(); });
  return ok;
}

std::size_t trainable_count(const LmParameters& p) {
  std::size_t n = 0;
  for_each_trainable(p, [&](const std::string&, const auto& t) {
    n += static_cast<std::size_t>(t.size());
  });
  return n;
}

LmParameters init_parameters(const ModelDims& dims, std::mt19937_64& rng, double scale) {
  if (dims.vocab_size < 2 || dims.embedding_size < 1 || dims.hidden_size < 1 || dims.layers < 1) {
    throw Error("init_parameters: invalid model dimensions");
  }
  const int n = dims.hidden_size;
  LmParameters p;
  p.dims = dims;
  p.embeddings.resize(dims.vocab_size, dims.embedding_size);
  fill_uniform(p.embeddings, rng, scale);
  p.layers.resize(static_cast<std::size_t>(dims.layers));
  for (int l = 0; l < dims.layers; ++l) {
    auto& lw = p.layers[static_cast<std::size_t>(l)];
    lw.input_weights.resize(4 * n, dims.input_size(l));
    lw.recurrent_weights.resize(4 * n, n);
    fill_uniform(lw.input_weights, rng, scale);
    fill_uniform(lw.recurrent_weights, rng, scale);
    lw.bias = Vec::Zero(4 * n);
  }
  p.decoder.weight.resize(dims.vocab_size, n);
  fill_uniform(p.decoder.weight, rng, scale);
  p.decoder.bias = Vec::Zero(dims.vocab_size);
  p.step.kind = StepKind::fixed;
  p.step.fixed_alpha = Mat::Zero(dims.layers, 2);
  return p;
}

StepPredictor init_predictor(int hidden_size, double initial_alpha, std::mt19937_64& rng,
                             double scale) {
  StepPredictor q;
  q.w1.resize(kPredictorHidden1, hidden_size);
  q.w2.resize(kPredictorHidden2, kPredictorHidden1);
  q.w3.resize(1, kPredictorHidden2);
  fill_uniform(q.w1, rng, scale);
  fill_uniform(q.w2, rng, scale);
  fill_uniform(q.w3, rng, scale);
  q.b1 = Vec::Zero(kPredictorHidden1);
  q.b2 = Vec::Zero(kPredictorHidden2);
  q.b3 = Vec::Constant(1, inverse_softplus(initial_alpha));
  return q;
}

StepSizeParams init_step_sizes(StepKind kind, int layers, int hidden_size, double initial_alpha,
                               std::mt19937_64& rng) {
  if (initial_alpha < 0.0) {
    throw Error("step size must be non-negative");
  }
  StepSizeParams s;
  s.kind = kind;
  s.fixed_alpha = Mat::Constant(layers, 2, initial_alpha);
  if (kind == StepKind::learned) {
    s.raw = Mat::Constant(layers, 2, inverse_softplus(initial_alpha));
  } else if (kind == StepKind::predicted) {
    for (int i = 0; i < 2 * layers; ++i) {
      s.predictors.push_back(init_predictor(hidden_size, initial_alpha, rng));
    }
  }
  return s;
}

}  // namespace recoding
