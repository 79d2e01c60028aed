#pragma once

// Extended-precision re-implementation of the LM forward pass and chunk loss,
// used only as a finite-difference oracle.

#include "recoding/lstm_lm.hpp"

#include <vector>

namespace recoding::reference {

using LMat = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
using LVec = Eigen::Matrix<long double, Eigen::Dynamic, 1>;

struct Layer {
  LMat input_weights, recurrent_weights;
  LVec bias;
};

struct Head {
  LMat weight;
  LVec bias;
};

struct Predictor {
  LMat w1;
  LVec b1;
  LMat w2;
  LVec b2;
  LMat w3;
  LVec b3;
};

struct Step {
  StepKind kind = StepKind::fixed;
  LMat fixed_alpha, raw;
  std::vector<Predictor> predictors;
};

/// Same member names as LmParameters so for_each_trainable applies.
struct Params {
  LMat embeddings;
  std::vector<Layer> layers;
  Head decoder;
  std::vector<Head> ensemble;
  Step step;
};

Params widen(const LmParameters& p);

/// Recoding gradients and predictor inputs recorded from a production forward
/// pass; step sizes are recomputed from the parameters being evaluated.
struct Replay {
  std::vector<bool> applied;                    // [T]
  std::vector<std::vector<Mat>> grad_h, grad_c;  // [T][L]
  std::vector<std::vector<Mat>> inputs;         // [T][L] predictor inputs
};

Replay record_replay(const lm::ForwardResult& result);

struct Setup {
  lm::IdGrid ids, targets;
  lm::RnnState initial;
  lm::LossSource loss_source = lm::LossSource::pre_recoding;
  Mat dropout_mask;  // empty = none
  bool ensemble_loss = false;
  const Replay* replay = nullptr;
  std::vector<long double> alphas;  // optional precomputed step sizes, see alpha_table
};

/// Step sizes for every replayed (step, layer, kind, column), valid while the
/// step-size parameters are unchanged.
std::vector<long double> alpha_table(const Params& p, const Setup& s);

long double chunk_loss(const Params& p, const Setup& s);

}  // namespace recoding::reference
