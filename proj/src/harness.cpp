#include "recoding/harness.hpp"

#include "recoding/recoder.hpp"
#include "recoding/signals.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>

namespace recoding::harness {

namespace {

constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kEvalStream = 2;
constexpr std::uint64_t kGraftStream = 3;

std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

void check_ids(const LmParameters& params, std::span<const Sentence> sentences) {
  for (const auto& s : sentences) {
    for (TokenId id : s.inputs) {
      if (id < 0 || id >= params.dims.vocab_size) {
        throw Error("vocabulary mismatch: token id " + std::to_string(id) +
                    " is outside the model vocabulary of size " +
                    std::to_string(params.dims.vocab_size));
      }
    }
  }
}

void check_vocab(const Checkpoint& ckpt) {
  if (static_cast<int>(ckpt.vocab.size()) != ckpt.params.dims.vocab_size) {
    throw Error("vocabulary mismatch: checkpoint vocabulary has " +
                std::to_string(ckpt.vocab.size()) + " entries, model expects " +
                std::to_string(ckpt.params.dims.vocab_size));
  }
}

struct StepStats {
  double delta_sum = 0.0;
  std::size_t delta_n = 0;
  double alpha_sum = 0.0;
  std::size_t alpha_n = 0;

  void add(const lm::ForwardResult& fr, const lm::IdGrid& targets) {
    for (std::size_t t = 0; t < fr.steps.size(); ++t) {
      const auto& rec = fr.steps[t].recoding;
      if (!rec) {
        continue;
      }
      for (Eigen::Index b = 0; b < rec->delta.size(); ++b) {
        if (targets[static_cast<std::size_t>(b)][t] >= 0) {
          delta_sum += rec->delta(b);
          ++delta_n;
        }
      }
      if (!rec->applied) {
        continue;
      }
      for (const auto& a : rec->alpha_h) {
        alpha_sum += a.sum();
        alpha_n += static_cast<std::size_t>(a.size());
      }
      for (const auto& a : rec->alpha_c) {
        alpha_sum += a.sum();
        alpha_n += static_cast<std::size_t>(a.size());
      }
    }
  }
  double mean_delta() const { return delta_n == 0 ? 0.0 : delta_sum / static_cast<double>(delta_n); }
  double mean_alpha() const { return alpha_n == 0 ? 0.0 : alpha_sum / static_cast<double>(alpha_n); }
};

}  // namespace

lm::LossSource loss_source_for(const RecodingConfig& config) {
  switch (config.signal) {
    case signals::SignalKind::mcd:
    case signals::SignalKind::bae:
      return lm::LossSource::post_recoding;
    default:
      return lm::LossSource::pre_recoding;
  }
}

LmParameters build_model(const TrainConfig& cfg, std::size_t vocab_size, std::mt19937_64& rng) {
  ModelDims dims{static_cast<int>(vocab_size), cfg.embedding_size, cfg.hidden_size, cfg.layers};
  LmParameters params = init_parameters(dims, rng, cfg.init_scale);
  params.step = init_step_sizes(cfg.recoding.step_kind, cfg.layers, cfg.hidden_size,
                                cfg.initial_alpha(), rng);
  for (const auto& [key, value] : cfg.alpha_overrides) {
    const auto [layer, kind] = key;
    if (layer < 0 || layer >= cfg.layers) {
      throw Error("recoding.alpha override for layer " + std::to_string(layer) +
                  " but the model has " + std::to_string(cfg.layers) + " layers");
    }
    params.step.fixed_alpha(layer, kind) = value;
    if (params.step.kind == StepKind::learned) {
      params.step.raw(layer, kind) = inverse_softplus(value);
    } else if (params.step.kind == StepKind::predicted) {
      params.step.predictors[static_cast<std::size_t>(2 * layer + kind)].b3(0) =
          inverse_softplus(value);
    }
  }
  if (cfg.recoding.signal == signals::SignalKind::bae) {
    signals::init_ensemble(params, cfg.recoding.samples, cfg.recoding.prior_scale,
                           cfg.recoding.per_member_anchors, rng);
  }
  return params;
}

std::vector<Sentence> frame_sentences(std::span<const corpus::TokenLine> lines,
                                      const corpus::Vocabulary& vocab) {
  std::vector<Sentence> out;
  out.reserve(lines.size());
  for (const auto& line : lines) {
    Sentence s;
    s.targets = corpus::encode_line(line, vocab);
    s.inputs.push_back(vocab.eos_id());
    s.inputs.insert(s.inputs.end(), s.targets.begin(), s.targets.end() - 1);
    out.push_back(std::move(s));
  }
  return out;
}

void write_batch_row(std::ostream& out, const BatchRecord& r) {
  out << r.epoch << ',' << r.batch << ',' << fmt(r.loss) << ',' << fmt(r.mean_delta) << ','
      << fmt(r.mean_alpha) << ',' << fmt(r.lr) << '\n';
}

TrainResult train(const TrainConfig& cfg, std::span<const corpus::TokenLine> train_lines,
                  std::span<const corpus::TokenLine> valid_lines, const TrainOptions& options) {
  validate(cfg);
  const corpus::Vocabulary vocab = corpus::build_vocab(train_lines, static_cast<std::size_t>(cfg.min_count));
  std::mt19937_64 rng(cfg.seed);
  LmParameters params = build_model(cfg, vocab.size(), rng);

  const auto stream = corpus::encode(train_lines, vocab);
  const auto batched = corpus::batchify(stream, static_cast<std::size_t>(cfg.batch_size),
                                        static_cast<std::size_t>(cfg.seq_len));
  const auto valid = frame_sentences(valid_lines, vocab);
  if (valid.empty()) {
    throw Error("validation corpus is empty");
  }

  const auto source = loss_source_for(cfg.recoding);
  const bool use_hook = cfg.recoding.signal != signals::SignalKind::none;
  const std::size_t chunks =
      cfg.max_batches > 0 ? std::min(batched.num_chunks(), static_cast<std::size_t>(cfg.max_batches))
                          : batched.num_chunks();
  const std::size_t chunk_tokens = static_cast<std::size_t>(cfg.batch_size * cfg.seq_len);

  if (options.metrics != nullptr) {
    *options.metrics << kMetricsHeader << '\n';
  }

  TrainResult result;
  double lr = cfg.lr;
  double best = std::numeric_limits<double>::infinity();
  recoder::Recoder hook(params, cfg.recoding, mix_seed(cfg.seed, kTrainStream));

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    result.epoch_lr.push_back(lr);
    lm::RnnState state = lm::RnnState::zeros(params.dims, cfg.batch_size);
    for (std::size_t i = 0; i < chunks; ++i) {
      const auto& ids = batched.data[i];
      const auto& targets = batched.targets[i];
      hook.set_stream(static_cast<std::uint64_t>(epoch),
                      static_cast<int>(i) * cfg.seq_len);
      Mat mask;
      if (cfg.dropout > 0.0) {
        mask = lm::dropout_mask(cfg.hidden_size, cfg.batch_size, cfg.dropout, rng);
      }
      lm::ForwardOptions fo;
      fo.hook = use_hook ? &hook : nullptr;
      fo.loss_source = source;
      fo.dropout_mask = cfg.dropout > 0.0 ? &mask : nullptr;
      fo.ensemble_loss = !params.ensemble.empty();
      fo.targets = &targets;
      const auto fr = lm::forward(params, ids, state, fo);

      double loss = lm::chunk_loss(fr, targets).total;
      if (!params.ensemble.empty()) {
        const auto al = signals::anchor_loss(params.ensemble, params.anchors,
                                             cfg.recoding.weight_decay, chunk_tokens);
        for (double a : al) {
          loss += a / static_cast<double>(al.size());
        }
      }
      if (cfg.recoding.signal == signals::SignalKind::mcd) {
        loss += 0.5 * cfg.recoding.weight_decay * params.decoder.weight.squaredNorm();
      }
      if (!std::isfinite(loss)) {
        throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(i + 1));
      }

      auto grads = lm::backward_bptt(params, fr, targets);
      recoder::accumulate_step_gradients(params, fr, grads, grads.params);
      if (!params.ensemble.empty()) {
        signals::accumulate_anchor_gradient(params.ensemble, params.anchors,
                                            cfg.recoding.weight_decay, chunk_tokens,
                                            1.0 / static_cast<double>(params.ensemble.size()),
                                            grads.params.ensemble);
      }
      if (cfg.recoding.signal == signals::SignalKind::mcd) {
        grads.params.decoder.weight += cfg.recoding.weight_decay * params.decoder.weight;
      }
      lm::sgd_step(params, grads.params, lr, cfg.clip);
      if (!all_finite(params)) {
        throw DivergenceError("non-finite parameters after epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(i + 1));
      }
      state = fr.final_state;

      StepStats stats;
      stats.add(fr, targets);
      BatchRecord rec;
      rec.epoch = epoch;
      rec.batch = static_cast<long>(i + 1);
      rec.loss = loss;
      rec.mean_delta = stats.mean_delta();
      rec.mean_alpha = stats.mean_alpha();
      rec.lr = lr;
      rec.first_token_loss = -safe_log(fr.steps.front().probs(targets[0][0], 0));
      if (options.metrics != nullptr) {
        write_batch_row(*options.metrics, rec);
      }
      if (options.on_batch) {
        options.on_batch(rec);
      }
    }

    const double ppl = evaluate(params, cfg, valid).perplexity;
    if (!std::isfinite(ppl)) {
      throw DivergenceError("non-finite validation perplexity after epoch " + std::to_string(epoch));
    }
    result.valid_ppl.push_back(ppl);
    if (ppl < best) {
      best = ppl;
      result.best_epoch = epoch;
      result.best = Checkpoint{cfg, vocab, params};
      if (!options.checkpoint_path.empty()) {
        save_checkpoint(options.checkpoint_path, result.best);
      }
    }
    lr = lm::anneal_lr(result.valid_ppl, lr);
  }
  result.final_params = std::move(params);
  return result;
}

EvalReport evaluate(const LmParameters& params, const TrainConfig& cfg,
                    std::span<const Sentence> sentences, const EvalOptions& options) {
  const int batch = options.batch_size.value_or(cfg.eval_batch_size);
  if (batch < 1) {
    throw Error("evaluation batch size must be >= 1");
  }
  if (sentences.empty()) {
    throw Error("evaluation corpus is empty");
  }
  check_ids(params, sentences);

  EvalReport report;
  report.mask_seed = mix_seed(cfg.seed, kEvalStream);
  recoder::Recoder hook(params, cfg.recoding, report.mask_seed);
  lm::ForwardOptions fo;
  fo.hook = cfg.recoding.active() ? &hook : nullptr;
  fo.loss_source = loss_source_for(cfg.recoding);

  const auto start = std::chrono::steady_clock::now();
  const auto seq_len = static_cast<std::size_t>(cfg.seq_len);
  const TokenId pad = sentences.front().inputs.front();
  double total = 0.0;
  StepStats stats;
  for (std::size_t g = 0; g * static_cast<std::size_t>(batch) < sentences.size(); ++g) {
    const std::size_t first = g * static_cast<std::size_t>(batch);
    const std::size_t rows = std::min(static_cast<std::size_t>(batch), sentences.size() - first);
    std::size_t len = 0;
    for (std::size_t b = 0; b < rows; ++b) {
      len = std::max(len, sentences[first + b].inputs.size());
    }
    lm::RnnState state = lm::RnnState::zeros(params.dims, static_cast<int>(rows));
    hook.set_stream(g, 0);
    for (std::size_t s0 = 0; s0 < len; s0 += seq_len) {
      const std::size_t width = std::min(seq_len, len - s0);
      lm::IdGrid ids(rows, std::vector<TokenId>(width, pad));
      lm::IdGrid targets(rows, std::vector<TokenId>(width, -1));
      for (std::size_t b = 0; b < rows; ++b) {
        const auto& s = sentences[first + b];
        for (std::size_t t = 0; t < width && s0 + t < s.inputs.size(); ++t) {
          ids[b][t] = s.inputs[s0 + t];
          targets[b][t] = s.targets[s0 + t];
        }
      }
      hook.set_offset(static_cast<int>(s0));
      fo.targets = &targets;
      const auto fr = lm::forward(params, ids, state, fo);
      const Mat nll = lm::token_nll(fr, targets);
      std::size_t n = 0;
      for (std::size_t b = 0; b < rows; ++b) {
        for (std::size_t t = 0; t < width; ++t) {
          n += targets[b][t] >= 0 ? 1 : 0;
        }
      }
      if (n > 0) {
        total += nll.sum();
        report.tokens += n;
        report.batch_losses.push_back(nll.sum() / static_cast<double>(n));
      }
      stats.add(fr, targets);
      state = fr.final_state;
    }
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  report.perplexity = std::exp(total / static_cast<double>(report.tokens));
  report.tokens_per_second = secs > 0.0 ? static_cast<double>(report.tokens) / secs : 0.0;
  report.mean_delta = stats.mean_delta();
  return report;
}

EvalReport evaluate_checkpoint(const Checkpoint& ckpt, std::span<const corpus::TokenLine> lines,
                               const EvalOptions& options) {
  check_vocab(ckpt);
  const auto sentences = frame_sentences(lines, ckpt.vocab);
  return evaluate(ckpt.params, ckpt.config, sentences, options);
}

void write_trace_row(std::ostream& out, const TraceRecord& r) {
  out << r.sentence << ',' << r.position << ',' << r.token << ',' << fmt(r.surprisal_bits) << ','
      << fmt(r.delta) << ',' << fmt(r.post_surprisal_bits) << ',' << fmt(r.post_delta) << ','
      << (r.recoded ? 1 : 0) << '\n';
}

std::vector<TraceRecord> trace(const LmParameters& params, const TrainConfig& cfg,
                               const corpus::Vocabulary& vocab,
                               std::span<const corpus::TokenLine> lines,
                               const std::optional<std::set<int>>& recode_at) {
  const auto sentences = frame_sentences(lines, vocab);
  check_ids(params, sentences);
  recoder::Recoder hook(params, cfg.recoding, mix_seed(cfg.seed, kEvalStream));
  hook.set_track_post(true);
  if (recode_at) {
    std::set<int> zero_based;
    for (int p : *recode_at) {
      if (p < 1) {
        throw Error("recode-at positions are 1-based; got " + std::to_string(p));
      }
      zero_based.insert(p - 1);
    }
    hook.set_active_steps(std::move(zero_based));
  }
  const auto source = loss_source_for(cfg.recoding);
  lm::ForwardOptions fo;
  fo.hook = &hook;
  fo.loss_source = source;

  std::vector<TraceRecord> out;
  constexpr double kLn2 = 0.69314718055994530942;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const auto& s = sentences[i];
    const lm::IdGrid ids{s.inputs};
    const lm::IdGrid targets{s.targets};
    hook.set_stream(i, 0);
    fo.targets = &targets;
    const auto fr = lm::forward(params, ids, lm::RnnState::zeros(params.dims, 1), fo);
    for (std::size_t t = 0; t < fr.steps.size(); ++t) {
      const auto& step = fr.steps[t];
      const TokenId gold = s.targets[t];
      const auto& rec = step.recoding;
      const bool recoded = rec && rec->applied;
      const Mat pre = source == lm::LossSource::pre_recoding
                          ? step.probs
                          : lm::decode(params.decoder, step.layers.back().h);
      TraceRecord r;
      r.sentence = i + 1;
      r.position = static_cast<int>(t) + 1;
      r.token = vocab.token(gold);
      r.surprisal_bits = -safe_log(pre(gold, 0)) / kLn2;
      r.delta = rec ? rec->delta(0) : signals::surprisal_value(pre(gold, 0));
      if (recoded) {
        const Mat post = source == lm::LossSource::post_recoding
                             ? step.probs
                             : lm::decode(params.decoder, rec->recoded_h.back());
        r.post_surprisal_bits = -safe_log(post(gold, 0)) / kLn2;
        r.post_delta = rec->post_delta(0);
      } else {
        r.post_surprisal_bits = r.surprisal_bits;
        r.post_delta = r.delta;
      }
      r.recoded = recoded;
      out.push_back(std::move(r));
    }
  }
  return out;
}

double trace_perplexity(std::span<const TraceRecord> records, lm::LossSource source) {
  if (records.empty()) {
    throw Error("trace_perplexity: no records");
  }
  double bits = 0.0;
  for (const auto& r : records) {
    bits += source == lm::LossSource::post_recoding ? r.post_surprisal_bits : r.surprisal_bits;
  }
  return std::exp2(bits / static_cast<double>(records.size()));
}

AblateMode parse_ablate_mode(std::string_view s) {
  if (s == "strip") {
    return AblateMode::strip;
  }
  if (s == "graft") {
    return AblateMode::graft;
  }
  throw Error("unknown ablation mode '" + std::string(s) + "' (expected strip or graft)");
}

AblateReport ablate(const Checkpoint& ckpt, std::span<const corpus::TokenLine> lines,
                    const AblateOptions& options) {
  check_vocab(ckpt);
  AblateReport report;
  report.config = ckpt.config;
  LmParameters params = ckpt.params;
  if (options.mode == AblateMode::strip) {
    report.config.recoding.enabled = false;
  } else {
    if (options.signal == signals::SignalKind::none) {
      throw Error("graft: a signal kind is required");
    }
    if (!(options.alpha >= 0.0)) {
      throw Error("graft: alpha must be non-negative");
    }
    auto& rc = report.config.recoding;
    rc.enabled = true;
    rc.signal = options.signal;
    rc.step_kind = StepKind::fixed;
    rc.alpha = options.alpha;
    report.config.alpha = options.alpha;
    report.config.alpha_overrides.clear();
    std::mt19937_64 unused(0);
    params.step = init_step_sizes(StepKind::fixed, params.dims.layers, params.dims.hidden_size,
                                  options.alpha, unused);
    if (rc.signal == signals::SignalKind::bae && params.ensemble.empty()) {
      if (!options.fresh_ensemble) {
        throw Error(
            "graft: the bae signal needs ensemble decoders and this checkpoint has none; "
            "allow a fresh ensemble drawn from the config to proceed");
      }
      std::mt19937_64 rng(mix_seed(report.config.seed, kGraftStream));
      signals::init_ensemble(params, rc.samples, rc.prior_scale, rc.per_member_anchors, rng);
      report.ensemble_initialised_fresh = true;
    }
  }
  const auto sentences = frame_sentences(lines, ckpt.vocab);
  report.eval = evaluate(params, report.config, sentences, EvalOptions{options.batch_size});
  return report;
}

}  // namespace recoding::harness
