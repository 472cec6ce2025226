#include <atomic>
#include <stdexcept>

#include "doctest.h"
#include "mnmt/error.hpp"
#include "mnmt/pipeline.hpp"
#include "mnmt/worker_pool.hpp"

using namespace mnmt;
using nlohmann::json;

namespace {

json small_manifest() {
  return json::parse(R"({
    "name": "t",
    "preset": "desk",
    "grammars": "g",
    "train": {"max_updates": 50},
    "model": {"model_dim": 16},
    "experiments": [
      {"name": "a", "languages": ["en", "de", "ru"], "systems": ["shared", "lang-spec"], "seeds": [1, 2]},
      {"name": "b", "languages": ["en", "fr"], "systems": ["bilingual"], "seeds": [3]}
    ],
    "analysis": {"cv_pairs": ["en-de"]}
  })");
}

}  // namespace

TEST_CASE("parallel_for keeps input order and rethrows the lowest failing index") {
  for (std::size_t threads : {1, 2, 5}) {
    const auto squares = parallel_map<std::size_t>(50, threads, [](std::size_t i) { return i * i; });
    for (std::size_t i = 0; i < squares.size(); ++i) CHECK(squares[i] == i * i);
    std::atomic<int> ran{0};
    try {
      parallel_for(20, threads, [&](std::size_t i) {
        ++ran;
        if (i == 7 || i == 13) throw std::runtime_error(std::to_string(i));
      });
      FAIL("expected an exception");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()) == "7");
    }
    CHECK(ran == 20);
  }
  parallel_for(0, 4, [](std::size_t) { FAIL("no work expected"); });
}

TEST_CASE("manifest: preset values with overrides, relative paths, derived pairs") {
  const auto m = ExperimentManifest::from_json(small_manifest(), "/base");
  CHECK(m.grammars == std::filesystem::path("/base/g"));
  CHECK(m.train.max_updates == 50);
  CHECK(m.train.lr == TrainSchedule::desk().lr);
  CHECK(m.model.model_dim == 16);
  CHECK(m.model.layers == TransformerConfig::desk().layers);
  REQUIRE(m.experiments.size() == 2);
  const auto& a = m.experiment("a");
  REQUIRE(a.languages.pairs.size() == 2);
  CHECK(a.languages.pairs[0] == LanguagePair{"en", "de"});
  CHECK(a.languages.pairs[1] == LanguagePair{"en", "ru"});
  CHECK(m.languages() == std::vector<std::string>{"en", "de", "ru", "fr"});
  CHECK(m.pairs().size() == 3);
  CHECK_THROWS_AS(m.experiment("zzz"), Error);

  // Round trip through the resolved form.
  const auto again = ExperimentManifest::from_json(m.to_json(), "/elsewhere");
  CHECK(again.to_json() == m.to_json());
}

TEST_CASE("manifest validation") {
  auto bad = [](auto edit) {
    auto j = small_manifest();
    edit(j);
    try {
      ExperimentManifest::from_json(j, ".").validate();
    } catch (const Error& e) {
      return e.kind() == ErrorKind::Config;
    }
    return false;
  };
  CHECK(bad([](json& j) { j["experiments"] = json::array(); }));
  CHECK(bad([](json& j) { j["experiments"][1]["name"] = "a"; }));
  CHECK(bad([](json& j) { j["experiments"][0]["name"] = "x/y"; }));
  CHECK(bad([](json& j) { j["experiments"][0]["seeds"] = json::array(); }));
  CHECK(bad([](json& j) { j["analysis"]["layers"] = {3}; }));
  CHECK(bad([](json& j) { j["analysis"]["probe_runs"] = 0; }));
  CHECK_FALSE(bad([](json&) {}));
}

TEST_CASE("job planning and workspace layout") {
  const auto m = ExperimentManifest::from_json(small_manifest(), ".");
  const auto all = plan_jobs(m);
  REQUIRE(all.size() == 5);
  CHECK(all[0].label() == "shared/a/seed1");
  CHECK(all[3].label() == "lang-spec/a/seed2");
  CHECK(all[4].label() == "bilingual/b/seed3");
  CHECK(plan_jobs(m, {SystemKind::LanguageSpecific, std::nullopt}).size() == 2);
  const auto seed9 = plan_jobs(m, {SystemKind::Shared, 9});
  REQUIRE(seed9.size() == 1);
  CHECK(seed9[0].seed == 9);

  const Workspace ws("/w");
  CHECK(ws.model(all[0]) == std::filesystem::path("/w/models/a/shared/seed1"));
  CHECK(ws.results(all[4]) == std::filesystem::path("/w/results/b/bilingual/seed3"));
  CHECK(ws.corpus({"en", "de"}, "train", "de") == std::filesystem::path("/w/corpus/en-de/train.de"));
  CHECK(ws.codecs("a", VocabRegime::Joint) == std::filesystem::path("/w/bpe/a/joint"));
  CHECK(vocab_regime(SystemKind::Shared) == VocabRegime::Joint);
  CHECK(vocab_regime(SystemKind::Bilingual) == VocabRegime::PerLanguage);
}
