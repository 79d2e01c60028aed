#pragma once

#include "recoding/checkpoint.hpp"
#include "recoding/config.hpp"
#include "recoding/corpus.hpp"
#include "recoding/lstm_lm.hpp"

#include <functional>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace recoding::harness {

/// pre-recoding for surprisal and none, post-recoding for the entropy signals.
lm::LossSource loss_source_for(const RecodingConfig& config);

/// Fresh parameters for cfg: LM weights, step sizes (with per-layer overrides)
/// and, for bae, an ensemble with anchors. Consumes rng identically whether or
/// not recoding is enabled.
LmParameters build_model(const TrainConfig& cfg, std::size_t vocab_size, std::mt19937_64& rng);

/// One sentence framed for evaluation: inputs [eos, w1..wn], targets [w1..wn, eos].
struct Sentence {
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
};

std::vector<Sentence> frame_sentences(std::span<const corpus::TokenLine> lines,
                                      const corpus::Vocabulary& vocab);

struct BatchRecord {
  int epoch = 0;
  long batch = 0;
  double loss = 0.0;
  double mean_delta = 0.0;
  double mean_alpha = 0.0;
  double lr = 0.0;
  double first_token_loss = 0.0;  // NLL of row 0, step 0
};

/// CSV header matching write_batch_row.
inline constexpr const char* kMetricsHeader = "epoch,batch,loss,mean_delta,mean_alpha,lr";
void write_batch_row(std::ostream& out, const BatchRecord& r);

struct TrainOptions {
  std::string checkpoint_path;  // empty = keep in memory only
  std::ostream* metrics = nullptr;
  std::function<void(const BatchRecord&)> on_batch;
};

struct TrainResult {
  Checkpoint best;           // best-validation model
  LmParameters final_params;
  std::vector<double> valid_ppl;  // one per epoch
  std::vector<double> epoch_lr;   // lr used in each epoch
  int best_epoch = 0;
};

/// Full training run. Throws DivergenceError on a non-finite loss or parameter.
TrainResult train(const TrainConfig& cfg, std::span<const corpus::TokenLine> train_lines,
                  std::span<const corpus::TokenLine> valid_lines, const TrainOptions& options = {});

struct EvalReport {
  double perplexity = 0.0;
  std::size_t tokens = 0;
  std::vector<double> batch_losses;  // mean NLL per evaluated chunk
  double tokens_per_second = 0.0;
  std::uint64_t mask_seed = 0;  // base seed of the evaluation signal streams
  double mean_delta = 0.0;
};

struct EvalOptions {
  std::optional<int> batch_size;  // default cfg.eval_batch_size
};

/// Sentence-level perplexity: each sentence starts from a zero state; groups of
/// B sentences are padded and run in chunks of cfg.seq_len with the state
/// carried across chunks. Recoding follows cfg.recoding.
EvalReport evaluate(const LmParameters& params, const TrainConfig& cfg,
                    std::span<const Sentence> sentences, const EvalOptions& options = {});

/// Loads, checks the vocabulary against the checkpoint and evaluates.
EvalReport evaluate_checkpoint(const Checkpoint& ckpt, std::span<const corpus::TokenLine> lines,
                               const EvalOptions& options = {});

struct TraceRecord {
  std::size_t sentence = 0;
  int position = 0;  // 1-based within the sentence
  std::string token;
  double surprisal_bits = 0.0;
  double delta = 0.0;
  double post_surprisal_bits = 0.0;
  double post_delta = 0.0;
  bool recoded = false;
};

inline constexpr const char* kTraceHeader =
    "sentence,position,token,surprisal_bits,delta,post_surprisal_bits,post_delta,recoded";
void write_trace_row(std::ostream& out, const TraceRecord& r);

/// One sentence at a time (batch 1, stream = sentence index). recode_at holds
/// 1-based positions; nullopt recodes every position.
std::vector<TraceRecord> trace(const LmParameters& params, const TrainConfig& cfg,
                               const corpus::Vocabulary& vocab,
                               std::span<const corpus::TokenLine> lines,
                               const std::optional<std::set<int>>& recode_at = std::nullopt);

/// Perplexity implied by trace records, using the distribution the loss reads.
double trace_perplexity(std::span<const TraceRecord> records, lm::LossSource source);

enum class AblateMode { strip, graft };
AblateMode parse_ablate_mode(std::string_view s);

struct AblateOptions {
  AblateMode mode = AblateMode::strip;
  signals::SignalKind signal = signals::SignalKind::surprisal;
  double alpha = 0.0;
  bool fresh_ensemble = false;  // allow grafting bae onto a model without an ensemble
  std::optional<int> batch_size;
};

struct AblateReport {
  EvalReport eval;
  bool ensemble_initialised_fresh = false;
  TrainConfig config;  // configuration actually evaluated
};

/// strip: evaluate with recoding disabled. graft: attach a fixed-step recoder
/// with the given signal at evaluation time only.
AblateReport ablate(const Checkpoint& ckpt, std::span<const corpus::TokenLine> lines,
                    const AblateOptions& options);

}  // namespace recoding::harness
