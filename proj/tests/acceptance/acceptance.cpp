// One PASS/FAIL line per acceptance criterion.

#include "recoding/harness.hpp"
#include "recoding/signals.hpp"
#include "recoding/verifier.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>

using namespace recoding;

namespace {

int failures = 0;

void report(int id, const char* name, bool ok, const std::string& detail) {
  std::printf("[%s] %2d %-28s %s\n", ok ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  failures += ok ? 0 : 1;
}

std::string f(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool starts_with(const std::string& s, const char* p) { return s.rfind(p, 0) == 0; }

LmParameters with_alpha(LmParameters p, double alpha) {
  std::mt19937_64 rng(0);
  p.step = init_step_sizes(StepKind::fixed, p.dims.layers, p.dims.hidden_size, alpha, rng);
  return p;
}

RecodingConfig surprisal_config(double alpha) {
  RecodingConfig c;
  c.signal = signals::SignalKind::surprisal;
  c.step_kind = StepKind::fixed;
  c.alpha = alpha;
  return c;
}

std::vector<TokenId> random_ids(std::size_t n, int vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, vocab - 1);
  std::vector<TokenId> out(n);
  for (auto& x : out) {
    x = u(rng);
  }
  return out;
}

void gradient_criteria() {
  const auto dims = verifier::toy_dims();
  const auto t0 = std::chrono::steady_clock::now();
  const auto reports = verifier::run_gradient_suite(1, 1e-4);
  const double secs = seconds_since(t0);

  double sig_err = 0.0, bptt_err = 0.0;
  bool sig_ok = true, bptt_ok = true;
  std::size_t sig_n = 0, bptt_n = 0;
  for (const auto& r : reports) {
    if (starts_with(r.name, "signal")) {
      sig_err = std::max(sig_err, r.max_rel_err);
      sig_ok = sig_ok && r.passed;
      ++sig_n;
    } else {
      bptt_err = std::max(bptt_err, r.max_rel_err);
      bptt_ok = bptt_ok && r.passed;
      ++bptt_n;
    }
  }
  const bool toy = dims.vocab_size == 11 && dims.hidden_size == 7 && dims.embedding_size == 5 &&
                   dims.layers == 2;
  report(1, "gradient oracles", toy && sig_ok && sig_n >= 7 && sig_err <= 1e-4 && secs < 60.0,
         std::to_string(sig_n) + " checks, max_rel_err=" + f(sig_err) + ", suite " + f(secs) + " s");
  report(2, "bptt gradient check", toy && bptt_ok && bptt_n >= 4 && bptt_err <= 1e-4 && secs < 120.0,
         std::to_string(bptt_n) + " checks, max_rel_err=" + f(bptt_err) + ", suite " + f(secs) + " s");
}

void theorem1_criterion() {
  const verifier::ScalarField quad{[](const Vec& h) { return h.squaredNorm(); },
                                   [](const Vec& h) { return Vec(2.0 * h); }};
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    Vec h(7);
    for (int j = 0; j < 7; ++j) {
      h(j) = u(rng);
    }
    const auto r = verifier::check_theorem1(quad, h, 0.5, 2.0);
    worst = std::max({worst, std::abs(r.improvement - r.bound), std::abs(r.delta_after)});
  }

  const double alpha = 1e-3;
  const auto p = with_alpha(verifier::toy_model(7, 1.0), alpha);
  lm::IdGrid ids, targets;
  for (int b = 0; b < 50; ++b) {
    auto seq = random_ids(21, p.dims.vocab_size, rng);
    ids.emplace_back(seq.begin(), seq.end() - 1);
    targets.emplace_back(seq.begin() + 1, seq.end());
  }
  const auto sweep = verifier::descent_sweep(p, surprisal_config(alpha), ids, targets, 11);
  const bool ok = worst <= 1e-12 && sweep.steps >= 1000 && sweep.rate() >= 0.99;
  report(3, "theorem A.1", ok,
         "quadratic gap " + f(worst) + "; descent " + std::to_string(sweep.descents) + "/" +
             std::to_string(sweep.steps) + " = " + f(sweep.rate()));
}

std::vector<corpus::TokenLine> grammar_sentences(int n, std::uint64_t seed) {
  const std::vector<corpus::TokenLine> subj{{"the", "cat"}, {"a", "dog"}};
  const std::vector<corpus::TokenLine> verb{{"sat", "on"}, {"ran", "to"}};
  const std::vector<corpus::TokenLine> obj{{"the", "mat"}, {"a", "tree"}};
  std::mt19937_64 rng(seed);
  std::vector<corpus::TokenLine> out;
  for (int i = 0; i < n; ++i) {
    corpus::TokenLine l;
    for (const auto* part : {&subj, &verb, &obj}) {
      const auto& w = (*part)[rng() % 2];
      l.insert(l.end(), w.begin(), w.end());
    }
    out.push_back(std::move(l));
  }
  return out;
}

// Toy-sized LM (M=5, N=7, L=2) trained briefly on a small grammar; an untrained
// random model has no temporal structure linking one step's signal to the next.
void theorem2_criterion() {
  TrainConfig cfg = desk_profile();
  cfg.embedding_size = 5;
  cfg.hidden_size = 7;
  cfg.batch_size = 4;
  cfg.seq_len = 10;
  cfg.epochs = 40;
  cfg.dropout = 0.0;
  cfg.init_scale = 0.5;
  cfg.recoding.enabled = false;
  const auto trained = harness::train(cfg, grammar_sentences(300, 5), grammar_sentences(20, 6));
  const auto& p = trained.final_params;
  const auto sentences = harness::frame_sentences(grammar_sentences(200, 7), trained.best.vocab);

  const auto rc = surprisal_config(1e-3);
  bool zero_exact = true;
  double sum = 0.0;
  int improved = 0;
  for (const auto& s : sentences) {
    const auto zero = verifier::check_theorem2(p, rc, s.inputs, s.targets, 2, 1, 0.0, 3);
    zero_exact = zero_exact && zero.recoded == zero.baseline;
    const auto d = verifier::check_theorem2(p, rc, s.inputs, s.targets, 2, 1, 1e-3, 3).difference();
    sum += d;
    improved += d <= 0.0 ? 1 : 0;
  }
  const double mean = sum / static_cast<double>(sentences.size());
  report(4, "theorem A.2", zero_exact && mean <= 0.0 && sentences.size() >= 200,
         std::string("alpha=0 ") + (zero_exact ? "bit-identical" : "differs") + "; mean(d*-d)=" +
             f(mean) + " over " + std::to_string(sentences.size()) + " sentences, " +
             std::to_string(improved) + " improved");
}

void entropy_criterion() {
  const auto p = verifier::toy_model(19, 1.0);
  std::mt19937_64 rng(23);
  std::normal_distribution<double> g(0.0, 2.0);
  const double ln_v = std::log(static_cast<double>(p.dims.vocab_size));
  bool bounded = true;
  const int n = 10000;
  Mat h(p.dims.hidden_size, 100);
  for (int batch = 0; batch < n / 100; ++batch) {
    for (Eigen::Index i = 0; i < h.size(); ++i) {
      h.data()[i] = g(rng);
    }
    const auto out = signals::mcd_signal(h, p.decoder, 5, 0.42, static_cast<std::uint64_t>(batch));
    bounded = bounded && out.delta.minCoeff() >= 0.0 && out.delta.maxCoeff() <= ln_v;
  }

  Vec h0(p.dims.hidden_size);
  for (Eigen::Index i = 0; i < h0.size(); ++i) {
    h0(i) = g(rng);
  }
  const auto a = signals::mcd_signal(h0, p.decoder, 1000, 0.42, 101);
  const auto b = signals::mcd_signal(h0, p.decoder, 1000, 0.42, 202);
  Vec per(1000);
  for (int k = 0; k < 1000; ++k) {
    per(k) = entropy_columns(a.aux_probs[static_cast<std::size_t>(k)])(0);
  }
  const double sd = std::sqrt((per.array() - per.mean()).square().sum() / 999.0);
  const double se = sd / std::sqrt(1000.0);
  const double diff = std::abs(a.delta(0) - b.delta(0));

  const std::vector<Decoder> one{p.decoder};
  const double bae = signals::bae_signal(h0, one).delta(0);
  const double single = entropy_columns(softmax_columns(p.decoder.weight * h0 + p.decoder.bias))(0);

  report(5, "entropy estimator", bounded && diff < 3.0 * se && bae == single,
         std::string(bounded ? "bounded" : "out of bounds") + " on 10^4 inputs; |d1-d2|=" + f(diff) +
             " vs 3SE=" + f(3.0 * se) + "; K=1 bae " + (bae == single ? "exact" : "differs"));
}

void surprisal_criterion() {
  const double d1 = signals::surprisal_value(1.0);
  const double dh = signals::surprisal_value(0.5);
  const double peak_p = std::exp(-1.0);
  const double dm = signals::surprisal_value(peak_p);
  bool is_max = true;
  for (int i = 1; i < 100000; ++i) {
    is_max = is_max && signals::surprisal_value(i / 100000.0) <= dm + 1e-15;
  }
  const double e1 = std::abs(dh - (std::sqrt(2.0) - 1.0));
  const double e2 = std::abs(dm - (std::exp(std::exp(-1.0)) - 1.0));
  report(6, "surprisal closed form", d1 == 0.0 && e1 <= 1e-12 && e2 <= 1e-9 && is_max,
         "d(1)=" + f(d1) + ", |d(.5)-(sqrt2-1)|=" + f(e1) + ", |d(1/e)-(e^(1/e)-1)|=" + f(e2));
}

std::vector<corpus::TokenLine> small_corpus(int lines, std::uint64_t seed) {
  const std::vector<std::string> words{"the", "cat", "dog", "sat", "ran", "on", "a", "mat", "tree", "and"};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> w(0, static_cast<int>(words.size()) - 1), len(2, 9);
  std::vector<corpus::TokenLine> out;
  for (int i = 0; i < lines; ++i) {
    corpus::TokenLine l;
    for (int j = len(rng); j > 0; --j) {
      l.push_back(words[static_cast<std::size_t>(w(rng))]);
    }
    out.push_back(std::move(l));
  }
  return out;
}

TrainConfig small_config() {
  TrainConfig c = desk_profile();
  c.embedding_size = 16;
  c.hidden_size = 16;
  c.batch_size = 4;
  c.seq_len = 10;
  c.epochs = 2;
  c.lr = 1.0;
  c.dropout = 0.0;
  c.eval_batch_size = 4;
  return c;
}

void perplexity_criterion() {
  const auto lines = small_corpus(30, 29);
  auto cfg = small_config();
  cfg.alpha = 0.05;
  const auto vocab = corpus::build_vocab(lines, 1);
  std::mt19937_64 rng(31);
  auto params = harness::build_model(cfg, vocab.size(), rng);
  const Checkpoint ck{cfg, vocab, params};

  Checkpoint flat = ck;
  flat.params.decoder.weight.setZero();
  flat.params.decoder.bias.setZero();
  const double uniform = harness::evaluate_checkpoint(flat, lines).perplexity;
  const double v = static_cast<double>(vocab.size());

  flat.params.decoder.bias(vocab.eos_id()) = 1000.0;
  const std::vector<harness::Sentence> eos_only(8, harness::Sentence{{vocab.eos_id()}, {vocab.eos_id()}});
  const double perfect = harness::evaluate(flat.params, flat.config, eos_only).perplexity;

  const auto records = harness::trace(ck.params, ck.config, ck.vocab, lines);
  const double from_trace = harness::trace_perplexity(records, harness::loss_source_for(cfg.recoding));
  const double evaluated = harness::evaluate_checkpoint(ck, lines).perplexity;
  const double gap = std::abs(from_trace - evaluated);

  report(7, "perplexity identities",
         std::abs(uniform - v) <= 1e-12 * v && perfect == 1.0 && gap <= 1e-9,
         "uniform " + f(uniform) + " (|V|=" + f(v) + "), one-hot " + f(perfect) +
             ", |trace-eval|=" + f(gap));
}

void overfit_criterion() {
  std::vector<corpus::TokenLine> lines(
      10, corpus::TokenLine{"we", "saw", "the", "old", "ship", "sail", "into", "grey", "fog"});
  TrainConfig cfg = desk_profile();
  cfg.batch_size = 2;
  cfg.seq_len = 10;
  cfg.epochs = 50;
  cfg.dropout = 0.0;
  cfg.recoding.enabled = false;
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = harness::train(cfg, lines, lines);
  const double ppl = harness::evaluate(result.final_params, cfg,
                                       harness::frame_sentences(lines, result.best.vocab))
                         .perplexity;
  const double secs = seconds_since(t0);
  report(8, "overfit sanity", ppl < 1.5 && secs < 120.0,
         "training ppl " + f(ppl) + " after 50 epochs in " + f(secs) + " s");
}

bool same(const LmParameters& a, const LmParameters& b) {
  const auto x = trainable_spans(a);
  const auto y = trainable_spans(b);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::equal(x[i].begin(), x[i].end(), y[i].begin(), y[i].end())) {
      return false;
    }
  }
  return x.size() == y.size();
}

void identity_criterion() {
  const auto train_lines = small_corpus(40, 37);
  const auto valid_lines = small_corpus(10, 41);
  auto off = small_config();
  off.recoding.enabled = false;
  auto zero = small_config();
  zero.alpha = 0.0;

  const auto a = harness::train(zero, train_lines, valid_lines);
  const auto b = harness::train(off, train_lines, valid_lines);
  const auto a2 = harness::train(zero, train_lines, valid_lines);

  const auto ev_zero = harness::evaluate_checkpoint(a.best, valid_lines);
  const auto ev_off = harness::evaluate_checkpoint(b.best, valid_lines);
  harness::AblateOptions strip;
  const auto ev_strip = harness::ablate(a.best, valid_lines, strip).eval;
  const auto ev_again = harness::evaluate_checkpoint(a2.best, valid_lines);

  const bool params_equal = same(a.final_params, b.final_params) && same(a.final_params, a2.final_params);
  const bool evals_equal = ev_zero.perplexity == ev_off.perplexity &&
                           ev_zero.perplexity == ev_strip.perplexity &&
                           ev_zero.batch_losses == ev_off.batch_losses &&
                           ev_zero.batch_losses == ev_strip.batch_losses &&
                           ev_zero.batch_losses == ev_again.batch_losses;
  report(9, "identity and ablation", params_equal && evals_equal,
         "ppl alpha=0 " + f(ev_zero.perplexity) + ", disabled " + f(ev_off.perplexity) + ", strip " +
             f(ev_strip.perplexity) + ", rerun " + f(ev_again.perplexity));
}

double first_token_loss(signals::SignalKind kind, double alpha) {
  const auto lines = small_corpus(40, 43);
  auto cfg = small_config();
  cfg.epochs = 1;
  cfg.max_batches = 1;
  cfg.recoding.signal = kind;
  cfg.recoding.samples = 4;
  cfg.alpha = alpha;
  double loss = std::numeric_limits<double>::quiet_NaN();
  harness::TrainOptions opts;
  opts.on_batch = [&](const harness::BatchRecord& r) {
    if (r.epoch == 1 && r.batch == 1) {
      loss = r.first_token_loss;
    }
  };
  harness::train(cfg, lines, lines, opts);
  return loss;
}

void wiring_criterion() {
  using signals::SignalKind;
  const double s1 = first_token_loss(SignalKind::surprisal, 0.01);
  const double s2 = first_token_loss(SignalKind::surprisal, 2.0);
  const double m1 = first_token_loss(SignalKind::mcd, 0.01);
  const double m2 = first_token_loss(SignalKind::mcd, 2.0);
  const double b1 = first_token_loss(SignalKind::bae, 0.01);
  const double b2 = first_token_loss(SignalKind::bae, 2.0);
  report(10, "loss wiring asymmetry", s1 == s2 && m1 != m2 && b1 != b2,
         "surprisal " + f(s1) + "/" + f(s2) + ", mcd " + f(m1) + "/" + f(m2) + ", bae " + f(b1) +
             "/" + f(b2));
}

}  // namespace

int main() {
  try {
    gradient_criteria();
    theorem1_criterion();
    theorem2_criterion();
    entropy_criterion();
    surprisal_criterion();
    perplexity_criterion();
    overfit_criterion();
    identity_criterion();
    wiring_criterion();
  } catch (const std::exception& e) {
    std::printf("[FAIL] aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
