#pragma once

// Norm-based reading of encoder-decoder attention: the output at step t is
// Σ_i α_{t,i} f(values_i), so ‖α_{t,i} f(values_i)‖ measures how much
// source token i contributes. Layers are 1-based from the input side.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mnmt/transformer.hpp"

namespace mnmt {

class ModelAssembly;
struct LanguagePair;
struct ChallengeSet;
struct TranslationOutput;
class GenderDetector;

struct ContributionRow {
  std::size_t sentence = 0;
  std::size_t layer = 1;
  std::size_t step = 0;
  std::vector<double> c;  // one entry per source position
};

// Per-source vectors Σ_h α_{h,t,i} f_h(values_i): src_len rows of model_dim.
std::vector<std::vector<double>> contribution_vectors(const AttentionTrace& trace, std::size_t layer, std::size_t t);

// Euclidean norms of contribution_vectors.
ContributionRow contributions(const AttentionTrace& trace, std::size_t layer, std::size_t t, std::size_t sentence = 0);

// Population standard deviation over mean. Throws Degenerate when the mean is 0.
double coefficient_of_variation(std::span<const double> row);

struct CvRecord {
  std::size_t sentence = 0;
  std::size_t layer = 1;
  std::string model;
  std::optional<std::size_t> step;  // empty when the step could not be located
  std::optional<double> cv;
  bool noun_step = false;  // no determiner in the target: measured at the noun
};

// Decoding step that emits the coreferent's determiner (or the noun itself
// when the target has none), found by lexicon lookup on the translation.
std::optional<std::size_t> determiner_step(const TranslationOutput& translation, const ModelAssembly& assembly,
                                           const std::string& tgt_lang, const GenderDetector& detector,
                                           const std::string& lemma);

// c_v at the determiner step for the first n challenge sentences.
std::vector<CvRecord> cv_series(const ModelAssembly& assembly, const LanguagePair& pair, const ChallengeSet& set,
                                const GenderDetector& detector, std::size_t layer, std::size_t n, const std::string& model);

// cv.csv: sentence_id,layer,model,step,cv,note
std::string cv_csv(std::span<const CvRecord> records);

std::vector<CvRecord> parse_cv_csv(std::string_view text);

// Contribution norms for every step of one layer, with axis labels
// (positions stand in for missing labels).
struct ContributionGrid {
  std::vector<std::string> source, target;
  std::vector<std::vector<double>> cells;  // target step × source position
};

ContributionGrid contribution_grid(const AttentionTrace& trace, std::size_t layer, std::span<const std::string> source_labels = {},
                                   std::span<const std::string> target_labels = {});
void to_json(nlohmann::json& j, const ContributionGrid& g);
void from_json(const nlohmann::json& j, ContributionGrid& g);

// Rows are target steps, columns source tokens; cell shade ∝ contribution
// normalised by the largest cell in the figure.
std::string heatmap_svg(const ContributionGrid& grid);
std::string heatmap_svg(const AttentionTrace& trace, std::size_t layer, std::span<const std::string> source_labels,
                        std::span<const std::string> target_labels);
// One bar per sentence, one group per model.
std::string cv_bars_svg(std::span<const CvRecord> records);

void export_heatmap(const AttentionTrace& trace, std::size_t layer, const std::filesystem::path& path,
                    std::span<const std::string> source_labels = {}, std::span<const std::string> target_labels = {});
void export_cv_bars(std::span<const CvRecord> records, const std::filesystem::path& path);

}  // namespace mnmt
