#pragma once

#include "recoding/common.hpp"

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace recoding::corpus {

using TokenLine = std::vector<std::string>;
using IdStream = std::vector<TokenId>;
/// Row-major [B][T] grid of token ids.
using IdGrid = std::vector<std::vector<TokenId>>;

inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kEosToken = "<eos>";

/// Dense bidirectional token <-> id map. Ids 0 and 1 are always <unk> and <eos>.
class Vocabulary {
 public:
  Vocabulary();
  explicit Vocabulary(std::vector<std::string> tokens);

  TokenId id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const { return id_to_token_.size(); }
  TokenId unk_id() const { return unk_id_; }
  TokenId eos_id() const { return eos_id_; }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  TokenId add(const std::string& token);

  bool operator==(const Vocabulary& other) const { return id_to_token_ == other.id_to_token_; }

  /// One token per line, line number = id.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
  TokenId unk_id_ = 0;
  TokenId eos_id_ = 1;
};

struct BatchedCorpus {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<IdGrid> data;     // [num_chunks][B][T]
  std::vector<IdGrid> targets;  // same shape, shifted one token ahead

  std::size_t num_chunks() const { return data.size(); }
};

TokenLine tokenize(std::string_view line);
std::vector<TokenLine> read_corpus(const std::filesystem::path& path);

Vocabulary build_vocab(std::span<const TokenLine> lines, std::size_t min_count = 1);

/// Each line emits its ids followed by eos.
IdStream encode(std::span<const TokenLine> lines, const Vocabulary& vocab);
IdStream encode_line(const TokenLine& line, const Vocabulary& vocab);

/// Inverse of encode: splits at eos markers.
std::vector<TokenLine> decode(std::span<const TokenId> ids, const Vocabulary& vocab);

/// Contiguous LM batching: the stream is cut into B rows and each row is
/// continued by the same row of the next chunk. Trailing tokens that do not
/// fill a whole chunk are dropped.
BatchedCorpus batchify(std::span<const TokenId> ids, std::size_t batch_size, std::size_t seq_len);

}  // namespace recoding::corpus
