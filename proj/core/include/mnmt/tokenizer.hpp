#pragma once

// Byte-pair encoding over Unicode code points with an end-of-word marker
// glued to the final symbol, plus dense vocabularies with special tokens.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mnmt {

inline constexpr std::string_view kEndOfWord = "</w>";

// Code points of a UTF-8 word, each as its own string.
std::vector<std::string> split_utf8(std::string_view word);
std::vector<std::string> split_words(std::string_view sentence);
std::string join_words(std::span<const std::string> words);

struct Merge {
  std::string left;
  std::string right;
  friend bool operator==(const Merge&, const Merge&) = default;
};

class BpeModel {
 public:
  BpeModel() = default;
  explicit BpeModel(std::vector<Merge> merges);

  // Greedy learner: each round merges the most frequent adjacent pair,
  // ties going to the lexicographically smallest (left, right).
  static BpeModel learn(std::span<const std::string> words, std::size_t num_merges);
  static BpeModel learn(const std::map<std::string, std::size_t>& word_counts, std::size_t num_merges);

  // Replays merges by rank; the leftmost occurrence of the lowest-rank pair
  // is merged first.
  std::vector<std::string> apply(std::string_view word) const;
  std::vector<std::string> apply_sentence(std::string_view sentence) const;

  std::size_t size() const noexcept { return merges_.size(); }
  const std::vector<Merge>& merges() const noexcept { return merges_; }
  std::optional<std::size_t> rank(const std::string& left, const std::string& right) const;

  std::string serialize() const;
  static BpeModel parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static BpeModel load(const std::filesystem::path& path);

 private:
  std::vector<Merge> merges_;
  std::unordered_map<std::string, std::size_t> ranks_;
};

// Subword position of the first piece of words[word_index] in the
// concatenated segmentation of the whole sentence.
std::size_t first_subword_index(const BpeModel& model, std::span<const std::string> words, std::size_t word_index);

// Joins subwords back into whitespace-separated words using the marker.
std::string detokenize(std::span<const std::string> subwords);
// Word index owning each subword position.
std::vector<std::size_t> subword_word_index(std::span<const std::string> subwords);

std::string language_tag_token(std::string_view language);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocabulary();

  // Specials first (pad, bos, eos, unk, then one tag per language in the
  // given order); observed subwords follow by descending frequency, ties
  // broken lexicographically.
  static Vocabulary build(std::span<const std::vector<std::string>> segmented,
                          std::span<const std::string> languages = {});

  std::size_t size() const noexcept { return tokens_.size(); }
  int id(std::string_view token) const;
  std::optional<int> find(std::string_view token) const;
  const std::string& token(int id) const;
  int language_tag(std::string_view language) const;
  const std::vector<std::string>& languages() const noexcept { return languages_; }
  std::size_t num_specials() const noexcept { return 4 + languages_.size(); }

  std::vector<int> encode(std::span<const std::string> subwords) const;
  std::vector<std::string> decode(std::span<const int> ids) const;

  std::string serialize() const;
  static Vocabulary parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);
  // FNV-1a of the serialized form; recorded in checkpoint headers.
  std::uint64_t fingerprint() const;

 private:
  void add(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::vector<std::string> languages_;
};

// BPE model and vocabulary used together for one side of a model.
struct TextCodec {
  BpeModel bpe;
  Vocabulary vocab;

  std::vector<int> encode(std::string_view sentence) const;
  std::string decode(std::span<const int> ids) const;
};

}  // namespace mnmt
