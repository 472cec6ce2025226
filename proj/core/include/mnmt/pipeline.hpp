#pragma once

// Experiment manifest, workspace layout and the pipeline stages behind the
// mnmt subcommands. Every stage reads and writes plain files under the
// workspace; rerunning a stage with the same inputs rewrites the same bytes.
//
//   manifest.json                      resolved copy written by gen-corpus
//   corpus/<src>-<tgt>/{train,valid,test}.{<src>,<tgt>}
//   corpus/challenge.tsv
//   bpe/<experiment>/{joint,per-language}/
//   models/<experiment>/<system>/seed<k>/      assembly checkpoint
//   results/<experiment>/<system>/seed<k>/     logs, translations, scores
//   report/

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mnmt/assemblies.hpp"
#include "mnmt/toy_corpus.hpp"

namespace mnmt {

struct ExperimentSpec {
  std::string name;
  LanguageSet languages;
  std::vector<SystemKind> systems;
  std::vector<std::uint64_t> seeds;
};

struct AnalysisSpec {
  LanguagePair probe_pair{"en", "de"};
  std::size_t probe_train = 1000;
  std::size_t probe_test = 2888;
  std::size_t probe_runs = 10;
  std::vector<LanguagePair> cv_pairs{{"en", "de"}};
  std::size_t cv_sentences = 100;
  std::vector<std::size_t> layers{1, 2};
  std::size_t heatmap_sentence = 0;
};

struct ExperimentManifest {
  std::string name;
  std::string preset = "desk";
  std::filesystem::path grammars;
  std::string challenge_language = "en";
  std::uint64_t data_seed = 1;
  std::size_t train_sentences = 5000;
  std::size_t valid_sentences = 200;
  std::size_t test_sentences = 500;
  Composition challenge = Composition::paper_replica();
  std::size_t bpe_merges = 1000;
  TransformerConfig model;
  TrainSchedule train;
  std::vector<ExperimentSpec> experiments;
  AnalysisSpec analysis;

  // Relative paths resolve against base_dir. model/train keys override the
  // preset's values.
  static ExperimentManifest from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  static ExperimentManifest load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  void validate() const;
  // Replaces preset-derived model and schedule settings.
  void apply_preset(const std::string& name);

  // Union over experiments, in order of first appearance.
  std::vector<std::string> languages() const;
  std::vector<LanguagePair> pairs() const;
  const ExperimentSpec& experiment(const std::string& name) const;
};

struct Job {
  std::string experiment;
  SystemKind kind = SystemKind::Shared;
  std::uint64_t seed = 1;
  // "<system>/<experiment>/seed<k>"
  std::string label() const;
};

struct JobFilter {
  std::optional<SystemKind> system;
  std::optional<std::uint64_t> seed;  // also admits seeds missing from the manifest
};

std::vector<Job> plan_jobs(const ExperimentManifest& m, const JobFilter& filter = {});

class Workspace {
 public:
  explicit Workspace(std::filesystem::path root) : root_(std::move(root)) {}
  const std::filesystem::path& root() const noexcept { return root_; }

  std::filesystem::path manifest() const { return root_ / "manifest.json"; }
  std::filesystem::path corpus(const LanguagePair& pair, const std::string& split, const std::string& lang) const;
  std::filesystem::path challenge() const { return root_ / "corpus" / "challenge.tsv"; }
  std::filesystem::path codecs(const std::string& experiment, VocabRegime regime) const;
  std::filesystem::path model(const Job& job) const;
  std::filesystem::path results(const Job& job) const;
  std::filesystem::path results_root() const { return root_ / "results"; }
  std::filesystem::path report() const { return root_ / "report"; }

 private:
  std::filesystem::path root_;
};

struct StageOptions {
  std::size_t threads = 1;
  JobFilter filter;
  std::vector<std::size_t> layers;  // empty: the manifest's analysis layers
};

VocabRegime vocab_regime(SystemKind kind) noexcept;

void gen_corpus(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o);
void learn_bpe(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o);
void train_models(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o);
void translate_models(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o);
void score_bleu(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o);
void eval_bias(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o);
void probe_models(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o);
void analyze_attention(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o);
// Reads results/ only, so it also runs on a workspace holding nothing else.
void write_report(const Workspace& ws);

}  // namespace mnmt
