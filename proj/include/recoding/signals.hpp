#pragma once

#include "recoding/common.hpp"
#include "recoding/parameters.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace recoding::signals {

enum class SignalKind { none, surprisal, mcd, bae };

SignalKind parse_signal_kind(std::string_view s);
std::string to_string(SignalKind k);

/// Error signal per batch column together with its gradient w.r.t. the
/// top-layer hidden activation.
struct SignalOutput {
  RowVec delta;                 // 1 x B
  Mat top_grad;                 // N x B
  std::vector<Mat> aux_probs;   // K member distributions, or the single o_t
};

/// o^(-o) - 1 evaluated at the gold-token probability.
double surprisal_value(double gold_prob);

/// Gold-token surprisal signal from an already decoded distribution.
SignalOutput surprisal_signal(const Mat& probs, std::span<const TokenId> gold,
                              const Decoder& decoder);

/// Decodes h with the given decoder first.
SignalOutput surprisal_signal_at(const Mat& h, std::span<const TokenId> gold,
                                 const Decoder& decoder);

/// Entropy of the averaged member distributions and its exact gradient.
SignalOutput predictive_entropy_signal(const Mat& h, std::span<const Decoder> members);

/// K copies of the decoder with Bernoulli weight masks (keep probability 1-p,
/// no rescaling). Member k draws from sub-stream mix_seed(seed, k).
std::vector<Decoder> sample_dropout_decoders(const Decoder& decoder, int samples, double p,
                                             std::uint64_t seed);

SignalOutput mcd_signal(const Mat& h, const Decoder& decoder, int samples, double p,
                        std::uint64_t seed);

SignalOutput bae_signal(const Mat& h, std::span<const Decoder> ensemble);

/// Draws K members and anchors from N(0, prior_scale^2). With shared anchors a
/// single anchor is drawn for all members.
void init_ensemble(LmParameters& params, int members, double prior_scale, bool per_member_anchors,
                   std::mt19937_64& rng);

/// Anchor used by member k (the shared anchor when only one exists).
const Mat& anchor_for(std::span<const Mat> anchors, std::size_t member);

/// (1/N) * || sqrt(decay) * (W_k - anchor_k) || per member (Frobenius norm, weights only).
std::vector<double> anchor_loss(std::span<const Decoder> members, std::span<const Mat> anchors,
                                double decay, std::size_t n_tokens);

/// Adds weight * d anchor_loss_k / d W_k to grads[k].weight.
void accumulate_anchor_gradient(std::span<const Decoder> members, std::span<const Mat> anchors,
                                double decay, std::size_t n_tokens, double weight,
                                std::span<Decoder> grads);

/// (1/K) * sum_k (ce_k + anchor_k).
double amortized_total_loss(std::span<const double> ce, std::span<const double> anchor);

}  // namespace recoding::signals
