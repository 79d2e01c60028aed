#include "recoding/checkpoint.hpp"
#include "recoding/config.hpp"
#include "recoding/corpus.hpp"
#include "recoding/harness.hpp"
#include "recoding/verifier.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

using namespace recoding;

namespace {

std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::set<int> parse_positions(const std::string& text) {
  std::set<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) {
      continue;
    }
    int v = 0;
    const auto r = std::from_chars(item.data(), item.data() + item.size(), v);
    if (r.ec != std::errc() || r.ptr != item.data() + item.size()) {
      throw Error("--recode-at: '" + item + "' is not an integer");
    }
    out.insert(v);
  }
  return out;
}

void print_eval(const harness::EvalReport& r) {
  std::cout << "perplexity " << num(r.perplexity) << '\n'
            << "tokens " << r.tokens << '\n'
            << "batches " << r.batch_losses.size() << '\n'
            << "tokens_per_second " << num(r.tokens_per_second) << '\n'
            << "mask_seed " << r.mask_seed << '\n';
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw Error("cannot write " + path);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LSTM language model with activation recoding"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train a model and keep the best-validation checkpoint");
  std::string config_path, train_path, valid_path, out_path, metrics_path;
  std::vector<std::string> overrides;
  train->add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);
  train->add_option("--train", train_path, "training corpus")->required()->check(CLI::ExistingFile);
  train->add_option("--valid", valid_path, "validation corpus")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out_path, "checkpoint path")->required();
  train->add_option("--metrics", metrics_path, "per-batch metrics CSV (default <out>.metrics.csv)");
  train->add_option("--set", overrides, "extra key=value settings applied after the config file");

  auto* eval = app.add_subcommand("eval", "perplexity of a checkpoint on a corpus");
  std::string ckpt_path, corpus_path;
  std::optional<int> eval_batch;
  eval->add_option("--ckpt", ckpt_path)->required()->check(CLI::ExistingFile);
  eval->add_option("--corpus", corpus_path)->required()->check(CLI::ExistingFile);
  eval->add_option("--batch-size", eval_batch, "override eval.batch_size");

  auto* tr = app.add_subcommand("trace", "per-token surprisal and signal trace as CSV");
  std::string sentences_path, recode_at, trace_out;
  tr->add_option("--ckpt", ckpt_path)->required()->check(CLI::ExistingFile);
  tr->add_option("--sentences", sentences_path)->required()->check(CLI::ExistingFile);
  tr->add_option("--recode-at", recode_at, "comma-separated 1-based positions (default: all)");
  tr->add_option("--out", trace_out, "CSV path (default stdout)");

  auto* gc = app.add_subcommand("gradcheck", "check analytic gradients against finite differences");
  double tol = 1e-4;
  std::uint64_t gc_seed = 1;
  gc->add_option("--tol", tol)->check(CLI::PositiveNumber);
  gc->add_option("--seed", gc_seed);

  auto* ab = app.add_subcommand("ablate", "evaluate with the recoder stripped or grafted");
  std::string mode = "strip", signal = "surprisal";
  double alpha = 0.0;
  bool fresh = false;
  ab->add_option("--ckpt", ckpt_path)->required()->check(CLI::ExistingFile);
  ab->add_option("--corpus", corpus_path)->required()->check(CLI::ExistingFile);
  ab->add_option("--mode", mode)->check(CLI::IsMember({"strip", "graft"}));
  ab->add_option("--signal", signal)->check(CLI::IsMember({"surprisal", "mcd", "bae"}));
  ab->add_option("--alpha", alpha);
  ab->add_flag("--fresh-ensemble", fresh, "graft bae onto a model without ensemble decoders");
  ab->add_option("--batch-size", eval_batch);

  auto* cf = app.add_subcommand("config", "print every config key with its default");
  std::string profile = "paper";
  cf->add_option("--profile", profile)->check(CLI::IsMember({"paper", "desk"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) {
      TrainConfig cfg = config_path.empty() ? paper_profile() : load_config(config_path);
      for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
          throw Error("--set expects key=value, got '" + kv + "'");
        }
        apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
      }
      validate(cfg);
      const auto train_lines = corpus::read_corpus(train_path);
      const auto valid_lines = corpus::read_corpus(valid_path);
      auto metrics = open_out(metrics_path.empty() ? out_path + ".metrics.csv" : metrics_path);
      harness::TrainOptions opts;
      opts.checkpoint_path = out_path;
      opts.metrics = &metrics;
      const auto result = harness::train(cfg, train_lines, valid_lines, opts);
      for (std::size_t e = 0; e < result.valid_ppl.size(); ++e) {
        std::cout << "epoch " << e + 1 << " lr " << num(result.epoch_lr[e]) << " valid_ppl "
                  << num(result.valid_ppl[e]) << '\n';
      }
      std::cout << "best_epoch " << result.best_epoch << '\n';
    } else if (*eval) {
      const auto ckpt = load_checkpoint(ckpt_path);
      print_eval(harness::evaluate_checkpoint(ckpt, corpus::read_corpus(corpus_path),
                                              harness::EvalOptions{eval_batch}));
    } else if (*tr) {
      const auto ckpt = load_checkpoint(ckpt_path);
      std::optional<std::set<int>> at;
      if (!recode_at.empty()) {
        at = parse_positions(recode_at);
      }
      const auto records = harness::trace(ckpt.params, ckpt.config, ckpt.vocab,
                                          corpus::read_corpus(sentences_path), at);
      std::ofstream file;
      if (!trace_out.empty()) {
        file = open_out(trace_out);
      }
      std::ostream& out = trace_out.empty() ? std::cout : file;
      out << harness::kTraceHeader << '\n';
      for (const auto& r : records) {
        harness::write_trace_row(out, r);
      }
    } else if (*gc) {
      const auto start = std::chrono::steady_clock::now();
      const auto reports = verifier::run_gradient_suite(gc_seed, tol);
      bool ok = true;
      for (const auto& r : reports) {
        std::cout << r.name << ' ' << num(r.max_rel_err) << ' ' << (r.passed ? "PASS" : "FAIL")
                  << '\n';
        ok = ok && r.passed;
      }
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::cout << "seconds " << num(secs) << '\n';
      return ok ? 0 : 1;
    } else if (*ab) {
      const auto ckpt = load_checkpoint(ckpt_path);
      harness::AblateOptions opts;
      opts.mode = harness::parse_ablate_mode(mode);
      opts.signal = signals::parse_signal_kind(signal);
      opts.alpha = alpha;
      opts.fresh_ensemble = fresh;
      opts.batch_size = eval_batch;
      const auto report = harness::ablate(ckpt, corpus::read_corpus(corpus_path), opts);
      std::cout << "mode " << mode << '\n';
      if (opts.mode == harness::AblateMode::graft) {
        std::cout << "signal " << signal << "\nalpha " << num(alpha) << '\n';
      }
      if (report.ensemble_initialised_fresh) {
        std::cout << "ensemble fresh (drawn from config, untrained)\n";
      }
      print_eval(report.eval);
    } else if (*cf) {
      for (const auto& k : documented_keys()) {
        std::cout << "# " << k.description << '\n';
        std::cout << k.key << '=' << k.default_value << "\n\n";
      }
      if (profile == "desk") {
        std::cout << "# effective desk profile\n" << to_text(desk_profile());
      }
    }
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
