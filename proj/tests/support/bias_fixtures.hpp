#pragma once

// Synthetic scored translations for the metric tests. Each fixture records
// what gender the translation was rendered with, so expected counts come
// from the construction rather than from the detector.

#include <string>
#include <vector>

#include "mnmt/bias_eval.hpp"
#include "mnmt/rng.hpp"
#include "mnmt/toy_corpus.hpp"

namespace mnmt::testing {

// Determiner plus noun as the target grammar writes it for gender g; the
// ungendered entity uses its gendered readings for male/female.
inline std::string entity_phrase(const ToyGrammar& g, const std::string& lemma, Gender gender) {
  const auto& n = g.noun(lemma);
  if (n.ungendered) return gender == Gender::Neutral ? n.neutral : gender == Gender::Male ? n.masc : n.fem;
  const auto& noun = gender == Gender::Female ? n.fem : n.masc;
  const auto& det = g.determiners().form(gender == Gender::Female ? Gender::Female : Gender::Male);
  return det.empty() ? noun : det + " " + noun;
}

struct ScoredFixture {
  ChallengeSet set;
  std::vector<std::string> translations;
  std::vector<Gender> rendered;  // gender each translation was written with
  std::vector<bool> dropped;     // entity left out of the translation
};

// n sentences over random lemmas; each rendered with a random gender, and
// about one in twenty with the entity missing.
inline ScoredFixture random_fixture(const ToyGrammar& target, std::size_t n, std::uint64_t seed) {
  auto rng = make_rng(seed, 0xb1a5);
  const auto occupations = target.occupations();
  const auto& someone = target.ungendered().lemma;
  ScoredFixture f;
  for (std::size_t k = 0; k < n; ++k) {
    ChallengeSentence s;
    const bool neutral = uniform_index(rng, 10) == 0;
    s.lemma = neutral ? someone : occupations[uniform_index(rng, occupations.size())];
    s.gold = neutral ? Gender::Neutral : uniform_index(rng, 2) ? Gender::Male : Gender::Female;
    const auto stereo = target.noun(s.lemma).stereotype;
    s.stereotype = neutral || stereo == Gender::Neutral ? Stereotype::Neutral
                   : stereo == s.gold                   ? Stereotype::Pro
                                                        : Stereotype::Anti;
    s.text = "x";
    const auto g = static_cast<Gender>(uniform_index(rng, 3));
    const bool drop = uniform_index(rng, 20) == 0;
    f.set.sentences.push_back(s);
    f.rendered.push_back(g);
    f.dropped.push_back(drop);
    f.translations.push_back(drop ? std::string("nichts hier") : "und " + entity_phrase(target, s.lemma, g) + " ging");
  }
  return f;
}

// Twenty hand-scored sentences. Male gold: 6 pro (5 right), 4 anti (2
// right). Female gold: 5 pro (4 right), 5 anti (1 right). So male 7/10,
// female 5/10, pro 9/11, anti 3/9; developer wrong 5 times, nurse 3.
inline ScoredFixture hand_fixture(const ToyGrammar& target) {
  ScoredFixture f;
  auto add = [&](const std::string& lemma, Gender gold, Stereotype st, bool right) {
    f.set.sentences.push_back({"x", 0, lemma, gold, st});
    const auto out = right ? gold : (gold == Gender::Male ? Gender::Female : Gender::Male);
    f.rendered.push_back(out);
    f.dropped.push_back(false);
    f.translations.push_back(entity_phrase(target, lemma, out) + " habló");
  };
  for (int i = 0; i < 6; ++i) add("developer", Gender::Male, Stereotype::Pro, i < 5);
  for (int i = 0; i < 4; ++i) add("nurse", Gender::Male, Stereotype::Anti, i < 2);
  for (int i = 0; i < 5; ++i) add("nurse", Gender::Female, Stereotype::Pro, i < 4);
  for (int i = 0; i < 5; ++i) add("developer", Gender::Female, Stereotype::Anti, i < 1);
  return f;
}

// What the detector should conclude for a rendered entity: masculine-only
// nouns without a distinguishing determiner read as masculine, occupations
// have no neutral form so Neutral renders masculine.
inline Gender expected_reading(const ToyGrammar& target, const std::string& lemma, Gender rendered) {
  const auto& n = target.noun(lemma);
  if (n.ungendered) return rendered;
  if (rendered == Gender::Neutral) return Gender::Male;
  if (rendered == Gender::Female && n.masc == n.fem && target.determiners().masc == target.determiners().fem) return Gender::Male;
  return rendered;
}

}  // namespace mnmt::testing
