#include "recoding/corpus.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace recoding;
using namespace recoding::corpus;

TEST_CASE("build_vocab counts tokens and always has the specials") {
  const std::vector<TokenLine> lines{{"a", "b", "a"}};
  const auto v = build_vocab(lines, 1);
  CHECK(v.size() == 4);
  CHECK(v.contains("a"));
  CHECK(v.contains("b"));
  CHECK(v.unk_id() != v.eos_id());
  CHECK(v.token(v.unk_id()) == "<unk>");
  CHECK(v.token(v.eos_id()) == "<eos>");
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(v.id(v.token(static_cast<TokenId>(i))) == static_cast<TokenId>(i));
  }
}

TEST_CASE("build_vocab min_count drops rare tokens") {
  const std::vector<TokenLine> lines{{"a", "b", "a"}};
  const auto v = build_vocab(lines, 2);
  CHECK_FALSE(v.contains("b"));
  CHECK(v.id("b") == v.unk_id());
  const std::vector<TokenLine> two{{"a", "b", "c"}, {"d", "e", "a"}};
  CHECK(build_vocab(two, 1).size() == 7);
}

TEST_CASE("build_vocab rejects an empty corpus") {
  const std::vector<TokenLine> none;
  CHECK_THROWS_WITH_AS(build_vocab(none, 1), "empty corpus", Error);
}

TEST_CASE("encode appends eos and maps unknowns") {
  const std::vector<TokenLine> lines{{"a", "b"}};
  const auto v = build_vocab(lines, 1);
  CHECK(encode(lines, v) == IdStream{v.id("a"), v.id("b"), v.eos_id()});
  const std::vector<TokenLine> unknown{{"x"}};
  CHECK(encode(unknown, v) == IdStream{v.unk_id(), v.eos_id()});
  const std::vector<TokenLine> three{{"a", "b"}, {"b", "a"}, {"a", "a"}};
  CHECK(encode(three, v).size() == 9);
}

TEST_CASE("decode inverts encode") {
  const std::vector<TokenLine> lines{{"the", "cat"}, {"sat", "down", "here"}};
  const auto v = build_vocab(lines, 1);
  CHECK(decode(encode(lines, v), v) == lines);
}

TEST_CASE("batchify slices rows and shifts targets") {
  IdStream ids(21);
  for (int i = 0; i < 21; ++i) {
    ids[static_cast<std::size_t>(i)] = i;
  }
  const auto b = batchify(ids, 2, 5);
  REQUIRE(b.num_chunks() == 2);
  CHECK(b.data[0][0] == std::vector<TokenId>{0, 1, 2, 3, 4});
  CHECK(b.data[1][0] == std::vector<TokenId>{5, 6, 7, 8, 9});
  CHECK(b.data[0][1] == std::vector<TokenId>{10, 11, 12, 13, 14});
  CHECK(b.data[1][1] == std::vector<TokenId>{15, 16, 17, 18, 19});
  for (std::size_t i = 0; i < b.num_chunks(); ++i) {
    for (std::size_t r = 0; r < 2; ++r) {
      for (std::size_t t = 0; t < 5; ++t) {
        CHECK(b.targets[i][r][t] == b.data[i][r][t] + 1);
      }
    }
  }

  IdStream seven{0, 1, 2, 3, 4, 5, 6};
  const auto c = batchify(seven, 1, 3);
  CHECK(c.num_chunks() == 2);
  CHECK(c.targets[0][0] == std::vector<TokenId>{1, 2, 3});
  CHECK(c.data[1][0].front() == c.targets[0][0].back());
}

TEST_CASE("batchify rejects short streams") {
  IdStream five{0, 1, 2, 3, 4};
  CHECK_THROWS_WITH_AS(batchify(five, 2, 5), "insufficient tokens", Error);
}

TEST_CASE("vocabulary file round trip") {
  const std::vector<TokenLine> lines{{"a", "b", "c"}};
  const auto v = build_vocab(lines, 1);
  const auto path = std::filesystem::temp_directory_path() / "recoding_vocab_test.txt";
  v.save(path);
  CHECK(Vocabulary::load(path) == v);
  std::filesystem::remove(path);
}

TEST_CASE("tokenize splits on whitespace") {
  CHECK(tokenize("  the  cat\tsat ") == TokenLine{"the", "cat", "sat"});
  CHECK(tokenize("").empty());
}
