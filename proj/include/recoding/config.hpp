#pragma once

#include "recoding/recoder.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace recoding {

struct TrainConfig {
  std::string profile = "paper";
  std::uint64_t seed = 1;

  int layers = 2;
  int embedding_size = 650;
  int hidden_size = 650;
  double init_scale = 0.1;

  int batch_size = 64;
  int seq_len = 35;
  int epochs = 8;
  double lr = 20.0;
  double clip = 0.25;
  double dropout = 0.15;
  long max_batches = 0;  // per epoch; 0 = whole corpus

  int eval_batch_size = 10;
  int min_count = 1;

  RecodingConfig recoding;
  std::optional<double> alpha;                       // nullopt = per-signal default
  std::map<std::pair<int, int>, double> alpha_overrides;  // (layer, 0=h / 1=c)

  /// Initial step size: the explicit value, else 10.19 for surprisal and 0.001 otherwise.
  double initial_alpha() const;
};

TrainConfig paper_profile();
/// Small CI-friendly sizes; not the paper's values.
TrainConfig desk_profile();

/// key=value lines; '#' starts a comment. A `profile` key selects the base
/// profile before the remaining keys are applied.
TrainConfig parse_config(std::string_view text);
TrainConfig load_config(const std::string& path);

/// Applies one key. Throws on unknown keys or malformed values.
void apply_setting(TrainConfig& cfg, std::string_view key, std::string_view value);

/// Throws when a count is < 1, a rate is outside [0, 1) or lr/clip are not positive.
void validate(const TrainConfig& cfg);

/// Round-trips through parse_config.
std::string to_text(const TrainConfig& cfg);

struct ConfigKey {
  std::string key;
  std::string default_value;
  std::string description;
};

/// Every recognised key with its paper-profile default.
std::vector<ConfigKey> documented_keys();

std::string to_string(StepKind k);
StepKind parse_step_kind(std::string_view s);

}  // namespace recoding
