#include "recoding/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace recoding {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) {
    return {};
  }
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw Error("config: invalid value '" + std::string(v) + "' for " + std::string(key));
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error("config: invalid boolean '" + std::string(v) + "' for " + std::string(key));
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

std::string to_string(StepKind k) {
  switch (k) {
    case StepKind::fixed:
      return "fixed";
    case StepKind::learned:
      return "learned";
    case StepKind::predicted:
      return "predicted";
  }
  return "fixed";
}

StepKind parse_step_kind(std::string_view s) {
  if (s == "fixed") return StepKind::fixed;
  if (s == "learned") return StepKind::learned;
  if (s == "predicted") return StepKind::predicted;
  throw Error("unknown step kind '" + std::string(s) + "'");
}

double TrainConfig::initial_alpha() const {
  if (alpha.has_value()) {
    return *alpha;
  }
  return recoding.signal == signals::SignalKind::surprisal ? 10.19 : 0.001;
}

TrainConfig paper_profile() { return TrainConfig{}; }

TrainConfig desk_profile() {
  TrainConfig c;
  c.profile = "desk";
  c.embedding_size = 64;
  c.hidden_size = 64;
  c.batch_size = 16;
  c.seq_len = 20;
  return c;
}

void apply_setting(TrainConfig& c, std::string_view key, std::string_view v) {
  using signals::parse_signal_kind;
  if (key == "profile") {
    if (v != "paper" && v != "desk") {
      throw Error("config: unknown profile '" + std::string(v) + "'");
    }
    c.profile = std::string(v);
  } else if (key == "seed") {
    c.seed = parse_number<std::uint64_t>(key, v);
  } else if (key == "model.layers") {
    c.layers = parse_number<int>(key, v);
  } else if (key == "model.embedding_size") {
    c.embedding_size = parse_number<int>(key, v);
  } else if (key == "model.hidden_size") {
    c.hidden_size = parse_number<int>(key, v);
  } else if (key == "model.init_scale") {
    c.init_scale = parse_number<double>(key, v);
  } else if (key == "train.batch_size") {
    c.batch_size = parse_number<int>(key, v);
  } else if (key == "train.seq_len") {
    c.seq_len = parse_number<int>(key, v);
  } else if (key == "train.epochs") {
    c.epochs = parse_number<int>(key, v);
  } else if (key == "train.lr") {
    c.lr = parse_number<double>(key, v);
  } else if (key == "train.clip") {
    c.clip = parse_number<double>(key, v);
  } else if (key == "train.dropout") {
    c.dropout = parse_number<double>(key, v);
  } else if (key == "train.max_batches") {
    c.max_batches = parse_number<long>(key, v);
  } else if (key == "eval.batch_size") {
    c.eval_batch_size = parse_number<int>(key, v);
  } else if (key == "corpus.min_count") {
    c.min_count = parse_number<int>(key, v);
  } else if (key == "recoding.enabled") {
    c.recoding.enabled = parse_bool(key, v);
  } else if (key == "recoding.step_kind") {
    c.recoding.step_kind = parse_step_kind(v);
  } else if (key == "recoding.alpha") {
    if (v == "auto") {
      c.alpha.reset();
    } else {
      c.alpha = parse_number<double>(key, v);
    }
  } else if (key.starts_with("recoding.alpha.")) {
    // recoding.alpha.<layer>.<h|c>
    const auto rest = key.substr(std::string_view("recoding.alpha.").size());
    const auto dot = rest.find('.');
    if (dot == std::string_view::npos || (rest.substr(dot + 1) != "h" && rest.substr(dot + 1) != "c")) {
      throw Error("config: malformed key " + std::string(key));
    }
    const int layer = parse_number<int>(key, rest.substr(0, dot));
    c.alpha_overrides[{layer, rest.substr(dot + 1) == "h" ? 0 : 1}] = parse_number<double>(key, v);
  } else if (key == "signal.kind") {
    c.recoding.signal = parse_signal_kind(v);
  } else if (key == "signal.k") {
    c.recoding.samples = parse_number<int>(key, v);
  } else if (key == "signal.mc_dropout") {
    c.recoding.mc_dropout = parse_number<double>(key, v);
  } else if (key == "signal.prior_scale") {
    c.recoding.prior_scale = parse_number<double>(key, v);
  } else if (key == "signal.weight_decay") {
    c.recoding.weight_decay = parse_number<double>(key, v);
  } else if (key == "signal.per_member_anchors") {
    c.recoding.per_member_anchors = parse_bool(key, v);
  } else {
    throw Error("config: unknown key '" + std::string(key) + "'");
  }
}

TrainConfig parse_config(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view s = line;
    if (const auto hash = s.find('#'); hash != std::string_view::npos) {
      s = s.substr(0, hash);
    }
    s = trim(s);
    if (s.empty()) {
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) {
      throw Error("config: line " + std::to_string(line_no) + " is not key=value");
    }
    entries.emplace_back(std::string(trim(s.substr(0, eq))), std::string(trim(s.substr(eq + 1))));
  }
  TrainConfig cfg = paper_profile();
  for (const auto& [k, v] : entries) {
    if (k == "profile") {
      apply_setting(cfg, k, v);
      cfg = v == "desk" ? desk_profile() : paper_profile();
    }
  }
  for (const auto& [k, v] : entries) {
    if (k != "profile") {
      apply_setting(cfg, k, v);
    }
  }
  validate(cfg);
  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("cannot open config file " + path);
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void validate(const TrainConfig& c) {
  const auto positive = [](int v, const char* name) {
    if (v < 1) {
      throw Error(std::string("config: ") + name + " must be at least 1");
    }
  };
  const auto rate = [](double v, const char* name) {
    if (!(v >= 0.0 && v < 1.0)) {
      throw Error(std::string("config: ") + name + " must lie in [0, 1)");
    }
  };
  positive(c.layers, "model.layers");
  positive(c.embedding_size, "model.embedding_size");
  positive(c.hidden_size, "model.hidden_size");
  positive(c.batch_size, "train.batch_size");
  positive(c.seq_len, "train.seq_len");
  positive(c.epochs, "train.epochs");
  positive(c.eval_batch_size, "eval.batch_size");
  positive(c.min_count, "corpus.min_count");
  positive(c.recoding.samples, "signal.k");
  rate(c.dropout, "train.dropout");
  rate(c.recoding.mc_dropout, "signal.mc_dropout");
  if (!(c.lr > 0.0) || !(c.clip > 0.0)) {
    throw Error("config: train.lr and train.clip must be positive");
  }
  if (!(c.init_scale > 0.0) || !(c.recoding.prior_scale > 0.0)) {
    throw Error("config: model.init_scale and signal.prior_scale must be positive");
  }
  if (c.recoding.weight_decay < 0.0 || c.max_batches < 0) {
    throw Error("config: signal.weight_decay and train.max_batches must be non-negative");
  }
  if (c.initial_alpha() < 0.0) {
    throw Error("config: recoding.alpha must be non-negative");
  }
  if (c.recoding.step_kind != StepKind::fixed && !(c.initial_alpha() > 0.0)) {
    throw Error("config: learned and predicted step sizes need a positive recoding.alpha");
  }
  for (const auto& [key, value] : c.alpha_overrides) {
    if (key.first < 0 || key.first >= c.layers || value < 0.0) {
      throw Error("config: recoding.alpha.<layer>.<h|c> out of range");
    }
  }
}

std::string to_text(const TrainConfig& c) {
  std::ostringstream o;
  o << "profile = " << c.profile << '\n'
    << "seed = " << c.seed << '\n'
    << "model.layers = " << c.layers << '\n'
    << "model.embedding_size = " << c.embedding_size << '\n'
    << "model.hidden_size = " << c.hidden_size << '\n'
    << "model.init_scale = " << fmt(c.init_scale) << '\n'
    << "train.batch_size = " << c.batch_size << '\n'
    << "train.seq_len = " << c.seq_len << '\n'
    << "train.epochs = " << c.epochs << '\n'
    << "train.lr = " << fmt(c.lr) << '\n'
    << "train.clip = " << fmt(c.clip) << '\n'
    << "train.dropout = " << fmt(c.dropout) << '\n'
    << "train.max_batches = " << c.max_batches << '\n'
    << "eval.batch_size = " << c.eval_batch_size << '\n'
    << "corpus.min_count = " << c.min_count << '\n'
    << "recoding.enabled = " << (c.recoding.enabled ? "true" : "false") << '\n'
    << "recoding.step_kind = " << to_string(c.recoding.step_kind) << '\n'
    << "recoding.alpha = " << (c.alpha ? fmt(*c.alpha) : std::string("auto")) << '\n';
  for (const auto& [key, value] : c.alpha_overrides) {
    o << "recoding.alpha." << key.first << '.' << (key.second == 0 ? 'h' : 'c') << " = "
      << fmt(value) << '\n';
  }
  o << "signal.kind = " << signals::to_string(c.recoding.signal) << '\n'
    << "signal.k = " << c.recoding.samples << '\n'
    << "signal.mc_dropout = " << fmt(c.recoding.mc_dropout) << '\n'
    << "signal.prior_scale = " << fmt(c.recoding.prior_scale) << '\n'
    << "signal.weight_decay = " << fmt(c.recoding.weight_decay) << '\n'
    << "signal.per_member_anchors = " << (c.recoding.per_member_anchors ? "true" : "false")
    << '\n';
  return o.str();
}

std::vector<ConfigKey> documented_keys() {
  return {
      {"profile", "paper", "base profile: paper or desk (desk: emb/hidden 64, batch 16, seq_len 20)"},
      {"seed", "1", "master seed for initialisation, dropout and signal sampling"},
      {"model.layers", "2", "LSTM layers"},
      {"model.embedding_size", "650", "embedding width M"},
      {"model.hidden_size", "650", "hidden width N"},
      {"model.init_scale", "0.1", "weights drawn uniformly from [-s, s]"},
      {"train.batch_size", "64", "batch rows B"},
      {"train.seq_len", "35", "BPTT chunk length T"},
      {"train.epochs", "8", "training epochs"},
      {"train.lr", "20", "SGD learning rate"},
      {"train.clip", "0.25", "global gradient-norm clip"},
      {"train.dropout", "0.15", "decoder-input dropout during training"},
      {"train.max_batches", "0", "cap on batches per epoch, 0 = no cap"},
      {"eval.batch_size", "10", "sentences evaluated in parallel"},
      {"corpus.min_count", "1", "tokens rarer than this map to <unk>"},
      {"recoding.enabled", "true", "apply recoding in training and evaluation"},
      {"recoding.step_kind", "fixed", "fixed, learned or predicted"},
      {"recoding.alpha", "auto", "initial step size; auto = 10.19 for surprisal, 0.001 otherwise"},
      {"recoding.alpha.<l>.<h|c>", "-", "fixed step override for one layer and activation"},
      {"signal.kind", "surprisal", "none, surprisal, mcd or bae"},
      {"signal.k", "15", "dropout samples or ensemble members"},
      {"signal.mc_dropout", "0.42", "decoder weight drop probability for mcd"},
      {"signal.prior_scale", "0.29", "std of ensemble members and anchors"},
      {"signal.weight_decay", "4.82e-05", "anchor decay coefficient"},
      {"signal.per_member_anchors", "false", "one anchor per ensemble member"},
  };
}

}  // namespace recoding
