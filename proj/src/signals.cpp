#include "recoding/signals.hpp"

#include "recoding/lstm_lm.hpp"

#include <cmath>

namespace recoding::signals {

SignalKind parse_signal_kind(std::string_view s) {
  if (s == "none") return SignalKind::none;
  if (s == "surprisal") return SignalKind::surprisal;
  if (s == "mcd") return SignalKind::mcd;
  if (s == "bae") return SignalKind::bae;
  throw Error("unknown signal kind '" + std::string(s) + "'");
}

std::string to_string(SignalKind k) {
  switch (k) {
    case SignalKind::none:
      return "none";
    case SignalKind::surprisal:
      return "surprisal";
    case SignalKind::mcd:
      return "mcd";
    case SignalKind::bae:
      return "bae";
  }
  return "none";
}

double surprisal_value(double gold_prob) {
  return std::exp(-gold_prob * safe_log(gold_prob)) - 1.0;
}

SignalOutput surprisal_signal(const Mat& probs, std::span<const TokenId> gold,
                              const Decoder& decoder) {
  if (static_cast<Eigen::Index>(gold.size()) != probs.cols()) {
    throw Error("surprisal_signal: one gold token per column required");
  }
  SignalOutput out;
  out.delta.resize(probs.cols());
  Mat dlogits = Mat::Zero(probs.rows(), probs.cols());
  for (Eigen::Index b = 0; b < probs.cols(); ++b) {
    const TokenId y = gold[static_cast<std::size_t>(b)];
    if (y < 0 || y >= probs.rows()) {
      throw Error("surprisal_signal: gold token out of range");
    }
    const double p = probs(y, b);
    const double powered = std::exp(-p * safe_log(p));
    out.delta(b) = powered - 1.0;
    // d delta / d p, then through the softmax Jacobian p * (e_y - o)
    const double d_p = -(safe_log(p) + 1.0) * powered;
    dlogits.col(b) = -d_p * p * probs.col(b);
    dlogits(y, b) += d_p * p;
  }
  out.top_grad = decoder.weight.transpose() * dlogits;
  out.aux_probs.push_back(probs);
  return out;
}

SignalOutput surprisal_signal_at(const Mat& h, std::span<const TokenId> gold,
                                 const Decoder& decoder) {
  return surprisal_signal(lm::decode(decoder, h), gold, decoder);
}

SignalOutput predictive_entropy_signal(const Mat& h, std::span<const Decoder> members) {
  if (members.empty()) {
    throw Error("predictive_entropy_signal: at least one member required");
  }
  const double k_inv = 1.0 / static_cast<double>(members.size());
  SignalOutput out;
  Mat mean = Mat::Zero(members.front().weight.rows(), h.cols());
  for (const auto& m : members) {
    out.aux_probs.push_back(lm::decode(m, h));
    mean += out.aux_probs.back();
  }
  mean *= k_inv;
  out.delta = entropy_columns(mean);

  // u = d delta / d mean, pre-divided by K
  const Mat u = -k_inv * (mean.unaryExpr([](double p) { return safe_log(p); }).array() + 1.0).matrix();
  out.top_grad = Mat::Zero(h.rows(), h.cols());
  for (std::size_t k = 0; k < members.size(); ++k) {
    const Mat& o = out.aux_probs[k];
    const RowVec ou = o.cwiseProduct(u).colwise().sum();
    Mat v = o.cwiseProduct(u);
    v -= (o.array().rowwise() * ou.array()).matrix();
    out.top_grad.noalias() += members[k].weight.transpose() * v;
  }
  return out;
}

std::vector<Decoder> sample_dropout_decoders(const Decoder& decoder, int samples, double p,
                                             std::uint64_t seed) {
  if (samples < 1) {
    throw Error("mcd: sample count must be at least 1");
  }
  if (p < 0.0 || p >= 1.0) {
    throw Error("mcd: dropout rate must lie in [0, 1)");
  }
  std::vector<Decoder> out;
  out.reserve(static_cast<std::size_t>(samples));
  for (int k = 0; k < samples; ++k) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(k)));
    Decoder d{decoder.weight, decoder.bias};
    if (p > 0.0) {
      for (Eigen::Index j = 0; j < d.weight.cols(); ++j) {
        for (Eigen::Index i = 0; i < d.weight.rows(); ++i) {
          const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
          if (u < p) {
            d.weight(i, j) = 0.0;
          }
        }
      }
    }
    out.push_back(std::move(d));
  }
  return out;
}

SignalOutput mcd_signal(const Mat& h, const Decoder& decoder, int samples, double p,
                        std::uint64_t seed) {
  const auto members = sample_dropout_decoders(decoder, samples, p, seed);
  return predictive_entropy_signal(h, members);
}

SignalOutput bae_signal(const Mat& h, std::span<const Decoder> ensemble) {
  if (ensemble.empty()) {
    throw Error("bae: ensemble is not initialised");
  }
  return predictive_entropy_signal(h, ensemble);
}

void init_ensemble(LmParameters& params, int members, double prior_scale, bool per_member_anchors,
                   std::mt19937_64& rng) {
  if (members < 1) {
    throw Error("bae: ensemble size must be at least 1");
  }
  if (!(prior_scale > 0.0)) {
    throw Error("bae: prior scale must be positive");
  }
  std::normal_distribution<double> prior(0.0, prior_scale);
  const auto draw = [&]() {
    Mat w(params.dims.vocab_size, params.dims.hidden_size);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) {
        w(i, j) = prior(rng);
      }
    }
    return w;
  };
  params.ensemble.clear();
  params.anchors.clear();
  for (int k = 0; k < members; ++k) {
    params.ensemble.push_back(Decoder{draw(), Vec::Zero(params.dims.vocab_size)});
  }
  const int anchors = per_member_anchors ? members : 1;
  for (int k = 0; k < anchors; ++k) {
    params.anchors.push_back(draw());
  }
}

const Mat& anchor_for(std::span<const Mat> anchors, std::size_t member) {
  if (anchors.empty()) {
    throw Error("bae: anchors missing");
  }
  return anchors.size() == 1 ? anchors.front() : anchors[member];
}

std::vector<double> anchor_loss(std::span<const Decoder> members, std::span<const Mat> anchors,
                                double decay, std::size_t n_tokens) {
  if (n_tokens == 0) {
    throw Error("anchor_loss: token count must be positive");
  }
  std::vector<double> out;
  for (std::size_t k = 0; k < members.size(); ++k) {
    const double norm = (members[k].weight - anchor_for(anchors, k)).norm() * std::sqrt(decay);
    out.push_back(norm / static_cast<double>(n_tokens));
  }
  return out;
}

void accumulate_anchor_gradient(std::span<const Decoder> members, std::span<const Mat> anchors,
                                double decay, std::size_t n_tokens, double weight,
                                std::span<Decoder> grads) {
  if (grads.size() != members.size()) {
    throw Error("anchor gradient: member count mismatch");
  }
  for (std::size_t k = 0; k < members.size(); ++k) {
    const Mat diff = members[k].weight - anchor_for(anchors, k);
    const double norm = diff.norm();
    if (norm == 0.0 || decay == 0.0) {
      continue;  // subgradient 0 at the anchor
    }
    // d/dW ||sqrt(decay) (W - W0)|| = sqrt(decay) (W - W0) / ||W - W0||
    grads[k].weight += (weight * std::sqrt(decay) / (norm * static_cast<double>(n_tokens))) * diff;
  }
}

double amortized_total_loss(std::span<const double> ce, std::span<const double> anchor) {
  if (ce.size() != anchor.size() || ce.empty()) {
    throw Error("amortized_total_loss: length mismatch");
  }
  double s = 0.0;
  for (std::size_t k = 0; k < ce.size(); ++k) {
    s += ce[k] + anchor[k];
  }
  return s / static_cast<double>(ce.size());
}

}  // namespace recoding::signals
