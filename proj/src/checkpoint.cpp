#include "recoding/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace recoding {

namespace {

constexpr char kMagic[8] = {'R', 'E', 'C', 'O', 'D', 'E', 'L', 'M'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  template <class T>
  void pod(T v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buf_.append(s);
  }
  void tensor(const std::string& name, const double* data, std::uint64_t rows, std::uint64_t cols) {
    str(name);
    pod(rows);
    pod(cols);
    buf_.append(reinterpret_cast<const char*>(data), rows * cols * sizeof(double));
  }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void doubles(double* out, std::uint64_t count) {
    if (count > (end_ - pos_) / sizeof(double)) {
      throw Error("corrupt checkpoint: truncated tensor data");
    }
    std::memcpy(out, bytes_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::uint64_t n) const {
    if (n > end_ - pos_) {
      throw Error("corrupt checkpoint: truncated");
    }
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = sizeof kMagic;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes().append(kMagic, sizeof kMagic);
  w.pod(kCheckpointVersion);
  w.str(to_text(ckpt.config));
  w.pod<std::uint64_t>(ckpt.vocab.size());
  for (const auto& t : ckpt.vocab.tokens()) {
    w.str(t);
  }
  const auto& p = ckpt.params;
  w.pod<std::int32_t>(p.dims.vocab_size);
  w.pod<std::int32_t>(p.dims.embedding_size);
  w.pod<std::int32_t>(p.dims.hidden_size);
  w.pod<std::int32_t>(p.dims.layers);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(p.step.kind));
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(p.ensemble.size()));
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(p.anchors.size()));
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(p.step.predictors.size()));
  std::uint32_t count = 0;
  for_each_tensor(p, [&](const std::string&, const auto&) { ++count; });
  w.pod(count);
  for_each_tensor(p, [&](const std::string& name, const auto& t) {
    w.tensor(name, t.data(), static_cast<std::uint64_t>(t.rows()), static_cast<std::uint64_t>(t.cols()));
  });
  const auto hash = fnv1a(w.bytes().data(), w.bytes().size());
  w.pod(hash);
  return std::move(w.bytes());
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw Error("not a recoding checkpoint (bad magic)");
  }
  if (bytes.size() < sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t)) {
    throw Error("corrupt checkpoint: truncated");
  }
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + sizeof kMagic, sizeof version);
  if (version != kCheckpointVersion) {
    throw Error("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, sizeof stored);
  if (stored != fnv1a(bytes.data(), body)) {
    throw Error("corrupt checkpoint: checksum mismatch (truncated or modified file)");
  }

  Reader r(bytes, body);
  r.pod<std::uint32_t>();
  Checkpoint ck;
  ck.config = parse_config(r.str());
  const auto n_tokens = r.pod<std::uint64_t>();
  std::vector<std::string> tokens;
  for (std::uint64_t i = 0; i < n_tokens; ++i) {
    tokens.push_back(r.str());
  }
  ck.vocab = corpus::Vocabulary(std::move(tokens));

  auto& p = ck.params;
  p.dims.vocab_size = r.pod<std::int32_t>();
  p.dims.embedding_size = r.pod<std::int32_t>();
  p.dims.hidden_size = r.pod<std::int32_t>();
  p.dims.layers = r.pod<std::int32_t>();
  const auto kind = r.pod<std::uint32_t>();
  if (kind > static_cast<std::uint32_t>(StepKind::predicted) || p.dims.layers < 1) {
    throw Error("corrupt checkpoint: invalid header");
  }
  p.step.kind = static_cast<StepKind>(kind);
  p.layers.resize(static_cast<std::size_t>(p.dims.layers));
  p.ensemble.resize(r.pod<std::uint32_t>());
  p.anchors.resize(r.pod<std::uint32_t>());
  p.step.predictors.resize(r.pod<std::uint32_t>());
  const auto count = r.pod<std::uint32_t>();
  std::uint32_t seen = 0;
  for_each_tensor(p, [&](const std::string& expected, auto& t) {
    const auto name = r.str();
    if (name != expected) {
      throw Error("corrupt checkpoint: expected tensor '" + expected + "', found '" + name + "'");
    }
    const auto rows = r.pod<std::uint64_t>();
    const auto cols = r.pod<std::uint64_t>();
    using T = std::decay_t<decltype(t)>;
    if (T::ColsAtCompileTime == 1 && cols != 1) {
      throw Error("corrupt checkpoint: tensor '" + name + "' is not a vector");
    }
    if (rows > (1ULL << 32) || cols > (1ULL << 32)) {
      throw Error("corrupt checkpoint: tensor '" + name + "' has an implausible shape");
    }
    t.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    r.doubles(t.data(), rows * cols);
    ++seen;
  });
  if (seen != count || !r.done()) {
    throw Error("corrupt checkpoint: tensor table does not match header");
  }
  if (static_cast<int>(ck.vocab.size()) != p.dims.vocab_size || p.embeddings.rows() != p.dims.vocab_size) {
    throw Error("corrupt checkpoint: vocabulary size does not match the embedding table");
  }
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw Error("cannot write checkpoint " + path);
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      throw Error("cannot write checkpoint " + path);
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw Error("cannot write checkpoint " + path);
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open checkpoint " + path);
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace recoding
