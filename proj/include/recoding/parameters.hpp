#pragma once

#include "recoding/common.hpp"

#include <random>
#include <span>
#include <string>
#include <vector>

namespace recoding {

struct ModelDims {
  int vocab_size = 0;
  int embedding_size = 0;
  int hidden_size = 0;
  int layers = 0;

  int input_size(int layer) const { return layer == 0 ? embedding_size : hidden_size; }
  bool operator==(const ModelDims&) const = default;
};

/// One LSTM layer. Gate rows are stacked as [forget; input; output; candidate],
/// each block N rows tall.
struct LayerWeights {
  Mat input_weights;      // 4N x in
  Mat recurrent_weights;  // 4N x N
  Vec bias;               // 4N
};

/// Affine softmax head: logits = weight * h + bias.
struct Decoder {
  Mat weight;  // |V| x N
  Vec bias;    // |V|
};

enum class StepKind { fixed, learned, predicted };
enum class ActivationKind { hidden = 0, cell = 1 };

inline constexpr int kPredictorHidden1 = 300;
inline constexpr int kPredictorHidden2 = 100;

/// Feed-forward step-size predictor N -> 300 -> 100 -> 1 (tanh hidden units).
/// The effective step is softplus of the scalar output.
struct StepPredictor {
  Mat w1;  // 300 x N
  Vec b1;
  Mat w2;  // 100 x 300
  Vec b2;
  Mat w3;  // 1 x 100
  Vec b3;  // 1
};

/// Step-size state for every (layer, activation kind) pair.
struct StepSizeParams {
  StepKind kind = StepKind::fixed;
  Mat fixed_alpha;                        // L x 2; column 0 hidden, column 1 cell
  Mat raw;                                // L x 2, learned mode only
  std::vector<StepPredictor> predictors;  // index 2 * layer + kind, predicted mode only

  static int index(int layer, ActivationKind kind) { return 2 * layer + static_cast<int>(kind); }
};

struct LmParameters {
  ModelDims dims;
  Mat embeddings;  // |V| x M
  std::vector<LayerWeights> layers;
  Decoder decoder;
  std::vector<Decoder> ensemble;  // anchored-ensemble members; empty unless initialised
  std::vector<Mat> anchors;       // one shared anchor, or one per member; never trained
  StepSizeParams step;
};

/// Visit every trainable tensor (anchors and fixed step sizes excluded).
/// fn(const std::string& name, auto& tensor) where tensor is Mat& or Vec&.
template <class Params, class Fn>
void for_each_trainable(Params& p, Fn&& fn) {
  fn(std::string("embeddings"), p.embeddings);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    fn(pre + "input_weights", p.layers[l].input_weights);
    fn(pre + "recurrent_weights", p.layers[l].recurrent_weights);
    fn(pre + "bias", p.layers[l].bias);
  }
  fn(std::string("decoder.weight"), p.decoder.weight);
  fn(std::string("decoder.bias"), p.decoder.bias);
  for (std::size_t k = 0; k < p.ensemble.size(); ++k) {
    const std::string pre = "ensemble" + std::to_string(k) + ".";
    fn(pre + "weight", p.ensemble[k].weight);
    fn(pre + "bias", p.ensemble[k].bias);
  }
  if (p.step.kind == StepKind::learned) {
    fn(std::string("step.raw"), p.step.raw);
  }
  if (p.step.kind == StepKind::predicted) {
    for (std::size_t i = 0; i < p.step.predictors.size(); ++i) {
      auto& q = p.step.predictors[i];
      const std::string pre = "step.predictor" + std::to_string(i) + ".";
      fn(pre + "w1", q.w1);
      fn(pre + "b1", q.b1);
      fn(pre + "w2", q.w2);
      fn(pre + "b2", q.b2);
      fn(pre + "w3", q.w3);
      fn(pre + "b3", q.b3);
    }
  }
}

/// Trainable tensors plus anchors and fixed step sizes; used for persistence.
template <class Params, class Fn>
void for_each_tensor(Params& p, Fn&& fn) {
  for_each_trainable(p, fn);
  for (std::size_t k = 0; k < p.anchors.size(); ++k) {
    fn("anchor" + std::to_string(k), p.anchors[k]);
  }
  fn(std::string("step.fixed_alpha"), p.step.fixed_alpha);
}

/// Flat views of the trainable tensors in for_each_trainable order.
std::vector<std::span<double>> trainable_spans(LmParameters& p);
std::vector<std::span<const double>> trainable_spans(const LmParameters& p);

/// Same shapes as p, all zero; anchors are dropped.
LmParameters zeros_like(const LmParameters& p);

double squared_norm(const LmParameters& p);
bool all_finite(const LmParameters& p);
std::size_t trainable_count(const LmParameters& p);

/// Uniform [-scale, scale] for all LSTM, embedding and decoder weights, zero biases.
LmParameters init_parameters(const ModelDims& dims, std::mt19937_64& rng, double scale = 0.1);

StepPredictor init_predictor(int hidden_size, double initial_alpha, std::mt19937_64& rng,
                             double scale = 0.1);

/// Step-size parameters with every (layer, kind) starting at initial_alpha.
StepSizeParams init_step_sizes(StepKind kind, int layers, int hidden_size, double initial_alpha,
                               std::mt19937_64& rng);

}  // namespace recoding
