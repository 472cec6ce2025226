#include <algorithm>
#include <map>

#include "doctest.h"
#include "mnmt/error.hpp"
#include "mnmt/rng.hpp"
#include "mnmt/tokenizer.hpp"

using namespace mnmt;

namespace {

using Symbols = std::vector<std::string>;

Symbols initial_symbols(const std::string& word) {
  auto s = split_utf8(word);
  s.back() += std::string(kEndOfWord);
  return s;
}

// Recounts every adjacent pair from scratch before each merge.
std::vector<Merge> brute_force_learn(const std::vector<std::string>& corpus, std::size_t n) {
  std::vector<Symbols> words;
  for (const auto& w : corpus) words.push_back(initial_symbols(w));
  std::vector<Merge> merges;
  for (std::size_t round = 0; round < n; ++round) {
    std::map<std::pair<std::string, std::string>, std::size_t> counts;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.size(); ++i) ++counts[{w[i], w[i + 1]}];
    if (counts.empty()) break;
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it)
      if (it->second > best->second) best = it;
    merges.push_back({best->first.first, best->first.second});
    for (auto& w : words) {
      Symbols out;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (i + 1 < w.size() && w[i] == best->first.first && w[i + 1] == best->first.second) {
          out.push_back(w[i] + w[i + 1]);
          ++i;
        } else {
          out.push_back(w[i]);
        }
      }
      w = out;
    }
  }
  return merges;
}

std::string strip(std::vector<std::string> pieces) {
  std::string out;
  for (auto& p : pieces) out += p;
  out.resize(out.size() - kEndOfWord.size());
  return out;
}

std::string random_word(Rng& rng) {
  static const std::vector<std::string> alphabet{"a", "b", "c", "d", "e", "ä", "ß", "ж", "я"};
  std::string w;
  const auto len = 1 + uniform_index(rng, 9);
  for (std::uint64_t i = 0; i < len; ++i) w += alphabet[uniform_index(rng, alphabet.size())];
  return w;
}

}  // namespace

TEST_CASE("learn picks the most frequent pair") {
  const std::vector<std::string> corpus{"aaab"};
  auto model = BpeModel::learn(corpus, 1);
  REQUIRE(model.size() == 1);
  CHECK(model.merges()[0] == Merge{"a", "a"});
  CHECK(model.apply("aaab") == std::vector<std::string>{"aa", "a", "b</w>"});
}

TEST_CASE("learn with no merges segments into characters") {
  const std::vector<std::string> corpus{"cat"};
  auto model = BpeModel::learn(corpus, 0);
  CHECK(model.size() == 0);
  CHECK(model.apply("cat") == std::vector<std::string>{"c", "a", "t</w>"});
}

TEST_CASE("learn rejects an empty corpus") {
  const std::vector<std::string> corpus;
  CHECK_THROWS_AS(BpeModel::learn(corpus, 3), Error);
}

TEST_CASE("learn matches a brute-force recount") {
  const std::vector<std::string> corpus{"low", "lower"};
  for (std::size_t n = 0; n <= 6; ++n) CHECK(BpeModel::learn(corpus, n).merges() == brute_force_learn(corpus, n));

  auto rng = make_rng(3);
  std::vector<std::string> words;
  for (int i = 0; i < 200; ++i) words.push_back(random_word(rng));
  CHECK(BpeModel::learn(words, 40).merges() == brute_force_learn(words, 40));
}

TEST_CASE("learn stops when no pairs remain") {
  const std::vector<std::string> corpus{"ab"};
  CHECK(BpeModel::learn(corpus, 10).size() == 1);
}

TEST_CASE("segmentation reconstructs the word") {
  auto rng = make_rng(7);
  std::vector<std::string> train;
  for (int i = 0; i < 300; ++i) train.push_back(random_word(rng));
  auto model = BpeModel::learn(train, 60);
  for (int i = 0; i < 1000; ++i) {
    const auto w = random_word(rng);
    REQUIRE(strip(model.apply(w)) == w);
  }
}

TEST_CASE("segment count is non-increasing in the number of merges") {
  auto rng = make_rng(8);
  std::vector<std::string> train;
  for (int i = 0; i < 200; ++i) train.push_back(random_word(rng));
  auto full = BpeModel::learn(train, 80);
  for (int i = 0; i < 50; ++i) {
    const auto w = random_word(rng);
    std::size_t prev = SIZE_MAX;
    for (std::size_t n = 0; n <= 80; n += 5) {
      BpeModel partial(std::vector<Merge>(full.merges().begin(), full.merges().begin() + n));
      const auto count = partial.apply(w).size();
      REQUIRE(count <= prev);
      prev = count;
    }
  }
}

TEST_CASE("serialization is deterministic and round-trips") {
  const std::vector<std::string> corpus{"lower", "newest", "widest", "low", "low"};
  auto a = BpeModel::learn(corpus, 10);
  auto b = BpeModel::learn(corpus, 10);
  CHECK(a.serialize() == b.serialize());
  CHECK(a.serialize().rfind("bpe v1 10\n", 0) == 0);
  CHECK(BpeModel::parse(a.serialize()).merges() == a.merges());
  try {
    BpeModel::parse("bpe v1 2\na b\nbroken\n");
    FAIL("expected a parse error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Parse);
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("first subword index") {
  auto model = BpeModel(std::vector<Merge>{{"a", "b"}});
  const std::vector<std::string> words{"xyz", "ab", "cab"};
  CHECK(first_subword_index(model, words, 0) == 0);
  CHECK(first_subword_index(model, words, 1) == 3);
  CHECK(first_subword_index(model, words, 2) == 5);
  CHECK_THROWS_AS(first_subword_index(model, words, 3), Error);
}

TEST_CASE("detokenize and word ownership") {
  const std::vector<std::string> pieces{"ab", "c</w>", "d</w>", "e", "f</w>"};
  CHECK(detokenize(pieces) == "abc d ef");
  CHECK(subword_word_index(pieces) == std::vector<std::size_t>{0, 0, 1, 2, 2});
}

TEST_CASE("vocabulary from an empty corpus holds only specials") {
  const std::vector<std::vector<std::string>> none;
  const std::vector<std::string> langs{"de", "es"};
  auto v = Vocabulary::build(none, langs);
  CHECK(v.size() == 6);
  CHECK(v.token(Vocabulary::kPad) == "<pad>");
  CHECK(v.language_tag("es") == 5);
  CHECK_THROWS_AS(v.language_tag("ru"), Error);
}

TEST_CASE("vocabulary ids follow a frequency sort") {
  const std::vector<std::vector<std::string>> seg{{"b", "a", "c", "a"}, {"c", "d", "a", "b"}, {"e"}};
  auto v = Vocabulary::build(seg);
  std::map<std::string, int> freq;
  for (const auto& s : seg)
    for (const auto& t : s) ++freq[t];
  std::vector<std::pair<int, std::string>> order;
  for (const auto& [t, f] : freq) order.push_back({-f, t});
  std::sort(order.begin(), order.end());
  REQUIRE(v.size() == 4 + order.size());
  for (std::size_t i = 0; i < order.size(); ++i) CHECK(v.token(static_cast<int>(4 + i)) == order[i].second);
  CHECK(v.id("zzz") == Vocabulary::kUnk);
  CHECK(Vocabulary::parse(v.serialize()).serialize() == v.serialize());
  CHECK(Vocabulary::parse(v.serialize()).fingerprint() == v.fingerprint());
}

TEST_CASE("training corpus never maps to unk") {
  const std::vector<std::string> sentences{"der Arzt sagte er komme", "die Ärztin sagte sie komme", "кто-то знает"};
  std::vector<std::string> words;
  for (const auto& s : sentences)
    for (auto& w : split_words(s)) words.push_back(w);
  auto bpe = BpeModel::learn(words, 20);
  std::vector<std::vector<std::string>> seg;
  for (const auto& s : sentences) seg.push_back(bpe.apply_sentence(s));
  TextCodec codec{bpe, Vocabulary::build(seg)};
  for (const auto& s : sentences) {
    const auto ids = codec.encode(s);
    CHECK(std::find(ids.begin(), ids.end(), Vocabulary::kUnk) == ids.end());
    CHECK(codec.decode(ids) == s);
  }
}
