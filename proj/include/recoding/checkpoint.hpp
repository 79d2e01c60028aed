#pragma once

#include "recoding/config.hpp"
#include "recoding/corpus.hpp"
#include "recoding/parameters.hpp"

#include <cstdint>
#include <string>

namespace recoding {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  corpus::Vocabulary vocab;
  LmParameters params;
};

/// Binary layout (little-endian):
///   "RECODELM" | u32 version | str config | u64 n, n x str vocab
///   | i32 V, M, N, L | u32 step kind | u32 ensemble, anchors, predictors
///   | u32 tensor count, per tensor: str name, u64 rows, u64 cols, rows*cols f64 (column-major)
///   | u64 FNV-1a hash of all preceding bytes
/// where str = u64 length + bytes.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace recoding
