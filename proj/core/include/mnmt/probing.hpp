#pragma once

// Gender probing of source contextual embeddings with an RBF-kernel SVM
// trained by SMO.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mnmt/toy_corpus.hpp"

namespace mnmt {

class ModelAssembly;
struct LanguagePair;

using Matrix = std::vector<std::vector<double>>;

double rbf_kernel(std::span<const double> a, std::span<const double> b, double gamma);
// 1 / (dim · variance of all entries); 1 when the variance is zero.
double default_gamma(const Matrix& x);

struct SvmOptions {
  double c = 1.0;
  std::optional<double> gamma;  // default_gamma(X) when empty
  double tol = 1e-3;
  std::size_t max_iter = 1000000;
};

struct SvmModel {
  Matrix support_vectors;
  std::vector<double> alpha;  // dual coefficient of each support vector, in (0, C]
  std::vector<int> labels;    // ±1 for each support vector
  double bias = 0.0;
  double gamma = 1.0;
  double c = 1.0;
  std::size_t iterations = 0;
  std::size_t dim() const noexcept { return support_vectors.empty() ? 0 : support_vectors.front().size(); }
};

struct SvmPrediction {
  int label = 1;
  double margin = 0.0;  // Σ α_i y_i K(x_i, x) + b
};

// SMO on the dual with maximal-violating-pair selection (lowest index on
// ties) until the KKT gap drops below tol. Throws Domain on one-class input.
SvmModel svm_train(const Matrix& x, std::span<const int> y, const SvmOptions& options = {});
SvmPrediction svm_predict(const SvmModel& model, std::span<const double> x);

// Largest KKT violation of the model's dual solution on its training data
// (coefficients of non-support points are zero).
double kkt_gap(const SvmModel& model, const Matrix& x, std::span<const int> y);

enum class ProbeWord { Determiner, Occupation };
std::string_view to_string(ProbeWord w) noexcept;
ProbeWord parse_probe_word(std::string_view s);

// Encoder output at the first subword of words[word_index] (eval mode),
// behind the target tag for the Shared system. Throws Extraction when the
// index is past the sentence.
std::vector<double> extract_embedding(const ModelAssembly& assembly, const LanguagePair& pair, const std::string& sentence,
                                      std::size_t word_index);

struct ProbeProtocol {
  ProbeWord word = ProbeWord::Determiner;
  std::size_t train_size = 1000;
  std::size_t test_size = 2888;  // capped by what remains after training
  std::size_t runs = 10;
  std::uint64_t seed = 1;
  bool shuffle_labels = false;   // permutation control
  SvmOptions svm;
  void validate(std::size_t available) const;
};

struct ProbeRun {
  double accuracy = 0.0;  // percent
  std::size_t train_male = 0, train_female = 0;
  std::size_t test_size = 0;
  double kkt_gap = 0.0;
};

struct ProbeResult {
  ProbeWord word = ProbeWord::Determiner;
  bool shuffled = false;  // label-permutation control
  std::vector<ProbeRun> runs;
  double mean = 0.0;
  double stddev = 0.0;  // sample (n-1) deviation
  std::map<std::string, std::size_t> misclassified;  // entity lemma -> test misses over all runs

  void summarize();
};

struct ProbeItem {
  std::vector<double> embedding;
  int label = 1;  // +1 male, -1 female
  std::string lemma;
};

// Embeds the chosen word of every non-neutral challenge sentence.
std::vector<ProbeItem> probe_items(const ModelAssembly& assembly, const LanguagePair& pair, const ChallengeSet& set, ProbeWord word);
ProbeResult run_probe(std::span<const ProbeItem> items, const ProbeProtocol& protocol);
ProbeResult run_probe(const ModelAssembly& assembly, const LanguagePair& pair, const ChallengeSet& set, const ProbeProtocol& protocol);

struct ProbeRow {
  std::string system;
  ProbeResult result;
};

// probe.csv: system,word_type,run,accuracy; the control's word type carries
// a "-shuffled" suffix.
std::string probe_csv(std::span<const ProbeRow> rows);
// Inverse of probe_csv (per-run accuracies only), rows in first-seen order.
std::vector<ProbeRow> parse_probe_csv(std::string_view text);
// probe_errors.csv: rank,word,count
std::string probe_errors_csv(const ProbeResult& result, std::size_t k = 20);
// Mean accuracy with ±σ whiskers per system and word type.
std::string probe_bars_svg(std::span<const ProbeRow> rows);

}  // namespace mnmt
