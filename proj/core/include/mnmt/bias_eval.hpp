#pragma once

// Gender-accuracy scoring of challenge-set translations (Acc, ΔG, ΔS),
// entity alignment, and corpus BLEU.

#include <array>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mnmt/toy_corpus.hpp"
#include "mnmt/transformer.hpp"

namespace mnmt {

struct GenderReading {
  std::string lemma;
  Gender gender = Gender::Male;
};

// Target-side lexicon: surface form -> lemma and gender. Forms shared by
// both genders (masculine-only lemmas) are resolved by a determiner at most
// two words before the noun, else read as masculine.
class GenderDetector {
 public:
  explicit GenderDetector(const ToyGrammar& target);

  const std::string& language() const noexcept { return language_; }
  bool has_determiners() const noexcept { return !determiners_.masc.empty(); }
  bool is_determiner(const std::string& word) const;
  std::optional<std::string> lemma_of(const std::string& word) const;
  // Gender of the noun at words[index]; empty if it is not a lexicon noun.
  std::optional<GenderReading> read(std::span<const std::string> words, std::size_t index) const;
  // First word whose lemma is `lemma`.
  std::optional<std::size_t> find(std::span<const std::string> words, const std::string& lemma) const;

 private:
  struct Entry {
    std::string lemma;
    std::optional<Gender> gender;  // empty: form shared by both genders
  };
  std::string language_;
  Paradigm determiners_;
  std::map<std::string, Entry> forms_;
};

// Maps sentence k and its translated words to the word index holding the
// gold entity, or nothing.
using Aligner = std::function<std::optional<std::size_t>(std::size_t k, std::span<const std::string> words)>;

// Exact lemma match on the translation.
Aligner lexicon_aligner(const ChallengeSet& set, const GenderDetector& detector);

// argmax_t ‖α_{t,e} f(values_e)‖ at a 1-based decoder layer over the steps
// that emitted a token (the closing end-of-sentence step is skipped); ties to
// the lowest t. Throws Alignment on an empty translation.
std::size_t align_entity(const AttentionTrace& trace, std::size_t source_index, std::size_t layer);

struct AttentionAlignment {
  const AttentionTrace* trace = nullptr;
  std::vector<std::string> target_pieces;  // subwords of the translation
  std::size_t source_index = 0;            // encoder position of the entity's first subword
};

// Aligns through the attention trace and snaps a determiner onto the noun
// that follows it.
Aligner attention_aligner(std::vector<AttentionAlignment> alignments, const GenderDetector& detector, std::size_t layer);

struct Tally {
  std::size_t correct = 0, total = 0;
  double percent() const noexcept { return total ? 100.0 * static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
  friend bool operator==(const Tally&, const Tally&) = default;
};

struct BiasReport {
  Tally overall;
  std::map<Gender, Tally> by_gender;
  std::map<Stereotype, Tally> by_stereotype;
  std::map<std::string, Tally> by_entity;  // correct/total per gold lemma
  std::size_t lookup_failures = 0;
  double accuracy = 0.0;  // percent
  double delta_g = 0.0;   // percentage points
  double delta_s = 0.0;

  // Derives accuracy, delta_g and delta_s from the tallies.
  void finalize();
  std::size_t mispredicted(const std::string& lemma) const;
  // Adds the other report's counts (pooling seeds) and re-derives the metrics.
  void merge(const BiasReport& other);
};

void to_json(nlohmann::json& j, const BiasReport& r);
void from_json(const nlohmann::json& j, BiasReport& r);

BiasReport score_bias(std::span<const std::string> translations, const ChallengeSet& set, const GenderDetector& detector,
                      const Aligner& aligner);

struct ErrorEntry {
  std::string lemma;
  std::size_t count = 0;
  std::size_t total = 0;
  friend bool operator==(const ErrorEntry&, const ErrorEntry&) = default;
};

// Ranked by misprediction count, ties lexicographic; entities with no
// errors are left out.
std::vector<ErrorEntry> top_errors(const BiasReport& report, std::size_t k);
// Entities mispredicted in at least `threshold` of their sentences, by lemma.
std::vector<ErrorEntry> error_subset(const BiasReport& report, double threshold = 0.35);

struct EvalScore {
  double bleu = 0.0;
  std::array<double, 4> precisions{};  // percent
  double brevity_penalty = 0.0;
  std::size_t hyp_len = 0, ref_len = 0;
};

void to_json(nlohmann::json& j, const EvalScore& s);

// Corpus BLEU-4 on whitespace tokens, clipped counts, no smoothing.
EvalScore bleu(std::span<const std::string> hypotheses, std::span<const std::string> references);

struct ReportRow {
  std::string system;
  std::string pair;
  double bleu = 0.0;
  BiasReport bias;
};

// system,pair,BLEU,Acc,dG,dS with BLEU and Acc to two decimals, deltas to one.
std::string report_csv(std::span<const ReportRow> rows);

}  // namespace mnmt
