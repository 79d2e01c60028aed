#include "recoding/corpus.hpp"

#include <fstream>
#include <sstream>

namespace recoding::corpus {

Vocabulary::Vocabulary() {
  add(std::string(kUnkToken));
  add(std::string(kEosToken));
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
  for (auto& t : tokens) {
    if (token_to_id_.contains(t)) {
      throw Error("vocabulary: duplicate token '" + t + "'");
    }
    add(t);
  }
  if (!contains(kUnkToken) || !contains(kEosToken)) {
    throw Error("vocabulary: missing <unk> or <eos>");
  }
  unk_id_ = id(kUnkToken);
  eos_id_ = id(kEosToken);
}

TokenId Vocabulary::add(const std::string& token) {
  if (auto it = token_to_id_.find(token); it != token_to_id_.end()) {
    return it->second;
  }
  const auto id = static_cast<TokenId>(id_to_token_.size());
  id_to_token_.push_back(token);
  token_to_id_.emplace(token, id);
  return id;
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? unk_id_ : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return token_to_id_.contains(std::string(token));
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw Error("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) {
    throw Error("cannot write vocabulary file " + path.string());
  }
  for (const auto& t : id_to_token_) {
    out << t << '\n';
  }
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("cannot read vocabulary file " + path.string());
  }
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    tokens.push_back(line);
  }
  return Vocabulary(std::move(tokens));
}

TokenLine tokenize(std::string_view line) {
  TokenLine out;
  std::istringstream ss{std::string(line)};
  std::string tok;
  while (ss >> tok) {
    out.push_back(tok);
  }
  return out;
}

std::vector<TokenLine> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("cannot read corpus file " + path.string());
  }
  std::vector<TokenLine> lines;
  std::string line;
  while (std::getline(in, line)) {
    auto toks = tokenize(line);
    if (!toks.empty()) {
      lines.push_back(std::move(toks));
    }
  }
  return lines;
}

Vocabulary build_vocab(std::span<const TokenLine> lines, std::size_t min_count) {
  if (min_count < 1) {
    throw Error("build_vocab: min_count must be at least 1");
  }
  std::unordered_map<std::string, std::size_t> counts;
  std::vector<std::string> order;
  for (const auto& line : lines) {
    for (const auto& tok : line) {
      if (counts[tok]++ == 0) {
        order.push_back(tok);
      }
    }
  }
  if (order.empty()) {
    throw Error("empty corpus");
  }
  // first-appearance order keeps ids stable for a given corpus
  Vocabulary vocab;
  for (const auto& tok : order) {
    if (counts[tok] >= min_count) {
      vocab.add(tok);
    }
  }
  return vocab;
}

IdStream encode_line(const TokenLine& line, const Vocabulary& vocab) {
  IdStream ids;
  ids.reserve(line.size() + 1);
  for (const auto& tok : line) {
    ids.push_back(vocab.id(tok));
  }
  ids.push_back(vocab.eos_id());
  return ids;
}

IdStream encode(std::span<const TokenLine> lines, const Vocabulary& vocab) {
  IdStream ids;
  for (const auto& line : lines) {
    auto part = encode_line(line, vocab);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  return ids;
}

std::vector<TokenLine> decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::vector<TokenLine> lines;
  TokenLine current;
  for (TokenId id : ids) {
    if (id == vocab.eos_id()) {
      lines.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(vocab.token(id));
    }
  }
  if (!current.empty()) {
    lines.push_back(std::move(current));
  }
  return lines;
}

BatchedCorpus batchify(std::span<const TokenId> ids, std::size_t batch_size, std::size_t seq_len) {
  if (batch_size == 0 || seq_len == 0) {
    throw Error("batchify: batch size and sequence length must be positive");
  }
  if (ids.size() < batch_size * seq_len + 1) {
    throw Error("insufficient tokens");
  }
  const std::size_t row_len = (ids.size() - 1) / batch_size;
  const std::size_t chunks = row_len / seq_len;

  BatchedCorpus out;
  out.batch_size = batch_size;
  out.seq_len = seq_len;
  out.data.resize(chunks);
  out.targets.resize(chunks);
  for (std::size_t i = 0; i < chunks; ++i) {
    out.data[i].assign(batch_size, std::vector<TokenId>(seq_len));
    out.targets[i].assign(batch_size, std::vector<TokenId>(seq_len));
    for (std::size_t b = 0; b < batch_size; ++b) {
      const std::size_t base = b * row_len + i * seq_len;
      for (std::size_t t = 0; t < seq_len; ++t) {
        out.data[i][b][t] = ids[base + t];
        out.targets[i][b][t] = ids[base + t + 1];
      }
    }
  }
  return out;
}

}  // namespace recoding::corpus
