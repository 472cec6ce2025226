#pragma once

// Synthetic gendered languages: a JSON grammar per language (lexicon with
// stereotype tags, determiner and pronoun paradigms, sentence templates), a
// parallel corpus generator, and challenge sets in the WinoMT layout.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace mnmt {

enum class Gender { Male, Female, Neutral };
enum class Stereotype { Pro, Anti, Neutral };

std::string_view to_string(Gender g) noexcept;
std::string_view to_string(Stereotype s) noexcept;
Gender parse_gender(std::string_view s);
Stereotype parse_stereotype(std::string_view s);

struct Paradigm {
  std::string masc, fem, neutral;
  const std::string& form(Gender g) const;
};

struct NounEntry {
  std::string lemma;
  std::string masc, fem;   // for the ungendered entity: optional gendered readings
  std::string neutral;     // ungendered entity only
  Gender stereotype = Gender::Neutral;
  bool masculine_only = false;
  bool ungendered = false;
  const std::string& form(Gender g) const;
};

struct Template {
  std::string id;
  int coref = 1;  // 1 or 2: which entity slot the pronoun refers to
  std::string text;
};

class ToyGrammar {
 public:
  static ToyGrammar from_json(const nlohmann::json& j);
  static ToyGrammar load(const std::filesystem::path& path);

  const std::string& language() const noexcept { return language_; }
  const std::string& script() const noexcept { return script_; }
  const Paradigm& determiners() const noexcept { return determiners_; }
  const Paradigm& pronouns() const noexcept { return pronouns_; }
  const std::vector<NounEntry>& nouns() const noexcept { return nouns_; }
  const std::vector<Template>& templates() const noexcept { return templates_; }
  bool has_determiners() const noexcept { return !determiners_.masc.empty(); }

  const NounEntry& noun(std::string_view lemma) const;
  const Template& find_template(std::string_view id) const;
  // Occupation lemmas (gendered entries) in lexicon order.
  std::vector<std::string> occupations() const;
  std::vector<std::string> occupations(Gender stereotype) const;
  // The ungendered entity ("someone").
  const NounEntry& ungendered() const;

 private:
  std::string language_, script_;
  Paradigm determiners_, pronouns_;
  std::vector<NounEntry> nouns_;
  std::vector<Template> templates_;
};

// Language-independent description of one sentence.
struct SentenceSpec {
  std::string template_id;
  std::string e1, e2;  // lemmas
  Gender gender = Gender::Male;  // gender of the coreferent entity
};

struct RenderedSentence {
  std::string text;
  std::vector<std::string> words;
  std::size_t entity_index = 0;   // word index of the coreferent noun
  std::size_t pronoun_index = 0;
  std::size_t other_index = 0;    // word index of the other entity's noun
  std::optional<std::size_t> determiner_index;  // coreferent's determiner
};

// The non-coreferent entity takes its stereotypical gender (masculine for
// neutral-stereotype lemmas). Masculine-only lemmas keep the masculine noun
// form for a feminine referent but take the feminine determiner.
RenderedSentence render(const ToyGrammar& g, const SentenceSpec& spec);

struct ParallelOptions {
  double skew = 0.7;              // share of pro-stereotypical pronouns
  double neutral_fraction = 0.06; // share of sentences about the ungendered entity
};

struct ParallelCorpus {
  std::string src_lang, tgt_lang;
  std::vector<std::string> source, target;
  std::vector<SentenceSpec> specs;
  std::size_t size() const noexcept { return source.size(); }
  void save(const std::filesystem::path& src_path, const std::filesystem::path& tgt_path) const;
};

ParallelCorpus gen_parallel(const ToyGrammar& src, const ToyGrammar& tgt, std::size_t n, std::uint64_t seed,
                            const ParallelOptions& options = {});

// Reads two aligned text files.
ParallelCorpus load_parallel(const std::filesystem::path& src_path, const std::filesystem::path& tgt_path,
                             std::string src_lang = "", std::string tgt_lang = "");

struct ChallengeSentence {
  std::string text;
  std::size_t entity_index = 0;
  std::string lemma;
  Gender gold = Gender::Male;
  Stereotype stereotype = Stereotype::Neutral;
  friend bool operator==(const ChallengeSentence&, const ChallengeSentence&) = default;
};

struct Composition {
  std::size_t male = 0, female = 0, neutral = 0;
  std::size_t pro = 0, anti = 0, neutral_stereotype = 0;
  std::size_t total() const noexcept { return male + female + neutral; }
  friend bool operator==(const Composition&, const Composition&) = default;
  // 1826/1822/240 by gender, 1584/1584/720 by stereotype.
  static Composition paper_replica();
};

struct ChallengeSet {
  std::vector<ChallengeSentence> sentences;
  std::size_t size() const noexcept { return sentences.size(); }
  Composition composition() const;

  void save(const std::filesystem::path& path) const;
  static ChallengeSet load(const std::filesystem::path& path);
  std::string serialize() const;
  static ChallengeSet parse(std::string_view text);
};

// Pro/anti sentences come in pairs that differ only in the pronoun. Neutral
// gold sentences use the ungendered entity; male/female sentences beyond the
// pairs use neutral-stereotype occupations.
ChallengeSet gen_challenge(const ToyGrammar& grammar, const Composition& composition, std::uint64_t seed);

// Pronoun within two words after the entity noun.
bool pronoun_adjacent(const ToyGrammar& source_grammar, const ChallengeSentence& s);

std::map<std::string, ToyGrammar> load_grammars(const std::filesystem::path& dir, const std::vector<std::string>& languages);

}  // namespace mnmt
