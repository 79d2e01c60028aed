#pragma once

#include "recoding/common.hpp"
#include "recoding/corpus.hpp"
#include "recoding/parameters.hpp"

#include <optional>
#include <random>
#include <span>
#include <vector>

namespace recoding::lm {

using corpus::IdGrid;

/// Per-layer hidden and cell activations, one column per batch row.
struct RnnState {
  std::vector<Mat> h;
  std::vector<Mat> c;

  static RnnState zeros(const ModelDims& dims, int batch);
  int batch() const { return h.empty() ? 0 : static_cast<int>(h.front().cols()); }
};

/// Everything one layer computes in one time step.
struct LayerStepCache {
  Mat x, h_prev, c_prev;
  Mat f, i, o, g;  // gate activations; g is the tanh candidate
  Mat c, tanh_c, h;
};

struct LayerStepGrads {
  Mat dx;
  Mat dh_prev;
  Mat dc_prev;
};

LayerStepCache lstm_step(const LayerWeights& w, const Mat& x, const Mat& h, const Mat& c);

/// Backpropagates dh/dc (gradients w.r.t. this step's h and c) through one
/// cell. Weight gradients are accumulated into weight_grads when non-null.
LayerStepGrads lstm_step_backward(const LayerWeights& w, const LayerStepCache& cache, const Mat& dh,
                                  const Mat& dc, LayerWeights* weight_grads = nullptr);

Mat decode_logits(const Decoder& d, const Mat& h);
Mat decode(const Decoder& d, const Mat& h);

/// Result of a recoding hook at one time step.
struct RecodingRecord {
  bool applied = false;
  std::vector<Mat> grad_h, grad_c;       // per layer, N x B
  std::vector<RowVec> alpha_h, alpha_c;  // per layer, one step size per column
  std::vector<Mat> recoded_h, recoded_c;
  RowVec delta;
  RowVec post_delta;  // empty unless the hook tracks it
};

struct StepView {
  int t = 0;
  const std::vector<LayerStepCache>& layers;
  const std::vector<TokenId>* gold = nullptr;
};

/// Called after all layers of a step are computed and before the step's
/// state is handed to the next step.
class StepHook {
 public:
  virtual ~StepHook() = default;
  virtual std::optional<RecodingRecord> on_step(const StepView& view) = 0;
};

/// Which top-layer activation feeds the training/evaluation distribution.
enum class LossSource { pre_recoding, post_recoding };

struct ForwardOptions {
  StepHook* hook = nullptr;
  LossSource loss_source = LossSource::pre_recoding;
  const Mat* dropout_mask = nullptr;  // N x B, already scaled; applied to decoder input
  bool ensemble_loss = false;         // add mean member cross-entropy to the loss
  const IdGrid* targets = nullptr;    // gold tokens handed to the hook
};

struct StepCache {
  std::vector<LayerStepCache> layers;
  std::optional<RecodingRecord> recoding;
  Mat loss_input;  // decoder input after recoding selection and dropout
  Mat probs;       // loss distribution, |V| x B
  std::vector<Mat> member_probs;
};

struct ForwardResult {
  IdGrid ids;
  std::vector<StepCache> steps;
  RnnState final_state;
  LossSource loss_source = LossSource::pre_recoding;
  Mat dropout_mask;
  bool ensemble_loss = false;
};

ForwardResult forward(const LmParameters& params, const IdGrid& ids, const RnnState& initial,
                      const ForwardOptions& options = {});

/// Mean negative log-likelihood, probabilities floored at kProbFloor.
double cross_entropy(std::span<const Vec> probs, std::span<const TokenId> targets);

/// Per-token negative log-likelihood [T x B]; negative targets are padding and give 0.
Mat token_nll(const ForwardResult& result, const IdGrid& targets);

struct LossBreakdown {
  double main = 0.0;
  std::vector<double> members;
  double total = 0.0;
  std::size_t tokens = 0;
};

/// main cross-entropy plus, with ensemble_loss, the mean member cross-entropy.
LossBreakdown chunk_loss(const ForwardResult& result, const IdGrid& targets);

struct BpttGradients {
  LmParameters params;
  // d loss / d step size, [T][L], only filled where recoding was applied
  std::vector<std::vector<RowVec>> alpha_h, alpha_c;
};

/// Exact gradient of chunk_loss with the recoding gradients held constant.
/// Gradient flow stops at the chunk's initial state.
BpttGradients backward_bptt(const LmParameters& params, const ForwardResult& result,
                            const IdGrid& targets);

/// Global-norm clipping followed by plain SGD. Returns the pre-clip norm.
double sgd_step(LmParameters& params, const LmParameters& grads, double lr, double clip);

/// Halves lr when the latest value does not strictly improve on the best earlier one.
double anneal_lr(std::span<const double> history, double lr);

/// Inverted-dropout mask scaled by 1/(1-rate).
Mat dropout_mask(int rows, int cols, double rate, std::mt19937_64& rng);

}  // namespace recoding::lm
