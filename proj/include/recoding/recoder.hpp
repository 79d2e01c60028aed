#pragma once

#include "recoding/lstm_lm.hpp"
#include "recoding/parameters.hpp"
#include "recoding/signals.hpp"

#include <cstdint>
#include <optional>
#include <set>
#include <vector>

namespace recoding {

/// Signal and step-size settings. Step-size values themselves live in
/// LmParameters::step.
struct RecodingConfig {
  bool enabled = true;
  signals::SignalKind signal = signals::SignalKind::surprisal;
  StepKind step_kind = StepKind::fixed;
  double alpha = 10.19;
  int samples = 15;
  double mc_dropout = 0.42;
  double prior_scale = 0.29;
  double weight_decay = 4.82e-5;
  bool per_member_anchors = false;

  /// Recoding is a no-op when disabled or when no signal is configured.
  bool active() const { return enabled && signal != signals::SignalKind::none; }
};

namespace recoder {

/// activation - alpha * grad.
Mat recode(const Mat& activation, const Mat& grad, double alpha);

/// Column-wise variant: column b uses alpha(b).
Mat recode(const Mat& activation, const Mat& grad, const RowVec& alpha);

struct RecodingGradients {
  std::vector<Mat> g_h;
  std::vector<Mat> g_c;
};

/// Pushes the gradient of the signal w.r.t. the top hidden state down to every
/// layer's h and c within one time step.
RecodingGradients signal_gradients(const Mat& top_grad, const std::vector<lm::LayerStepCache>& layers,
                                   const LmParameters& params);

/// Effective step size per column of h (N x B).
RowVec step_size(const StepSizeParams& step, int layer, ActivationKind kind, const Mat& h);

struct PredictorCache {
  Mat a1, a2;
  RowVec z;
};

/// Raw (pre-softplus) predictor output for each column of h.
RowVec predictor_output(const StepPredictor& q, const Mat& h, PredictorCache* cache = nullptr);

struct RecodedState {
  std::vector<Mat> h, c;
  std::vector<RowVec> alpha_h, alpha_c;
};

/// Recodes every layer's h and c with its own step size. Predicted step sizes
/// read the layer's pre-recoding hidden activation.
RecodedState apply_recoding(const std::vector<Mat>& h, const std::vector<Mat>& c,
                            const RecodingGradients& grads, const StepSizeParams& step);

/// Adds dL/d(step-size parameters) to grads.step given the per-step dL/dalpha
/// from backward_bptt. No-op for fixed step sizes.
void accumulate_step_gradients(const LmParameters& params, const lm::ForwardResult& result,
                               const lm::BpttGradients& bptt, LmParameters& grads);

/// Signal value and top-layer gradient at h for the configured signal. Padding
/// gold entries (negative ids) give zero signal and gradient in their column.
signals::SignalOutput evaluate_signal(const LmParameters& params, const RecodingConfig& config,
                                      const Mat& h_top, const std::vector<TokenId>* gold,
                                      std::uint64_t step_seed);

/// Step hook that computes the configured error signal at every step and
/// recodes the state (optionally only at selected positions).
class Recoder : public lm::StepHook {
 public:
  Recoder(const LmParameters& params, RecodingConfig config, std::uint64_t seed);

  /// Positions (offset + t) at which recoding is applied; nullopt means all.
  void set_active_steps(std::optional<std::set<int>> steps) { active_ = std::move(steps); }
  /// Also evaluate the signal on the recoded top state (same masks).
  void set_track_post(bool on) { track_post_ = on; }
  /// Selects the RNG stream and the absolute position of the next chunk's first step.
  void set_stream(std::uint64_t stream, int offset = 0) {
    stream_ = stream;
    offset_ = offset;
  }
  void set_offset(int offset) { offset_ = offset; }

  const RecodingConfig& config() const { return config_; }

  std::optional<lm::RecodingRecord> on_step(const lm::StepView& view) override;

 private:
  const LmParameters& params_;
  RecodingConfig config_;
  std::uint64_t seed_;
  std::uint64_t stream_ = 0;
  int offset_ = 0;
  std::optional<std::set<int>> active_;
  bool track_post_ = false;
};

}  // namespace recoder
}  // namespace recoding
