#pragma once

// The three system types over a language set: Bilingual (one pair),
// Shared (one encoder and decoder for everything, target chosen by a tag
// prepended to the source) and LanguageSpecific (an encoder and a decoder
// per language, nothing shared). Training alternates over pairs.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mnmt/tokenizer.hpp"
#include "mnmt/transformer.hpp"

namespace mnmt {

enum class SystemKind { Bilingual, Shared, LanguageSpecific };
std::string_view to_string(SystemKind k) noexcept;
// Accepts "bilingual", "shared", "lang-spec".
SystemKind parse_system_kind(std::string_view s);

struct LanguagePair {
  std::string src, tgt;
  std::string name() const { return src + "-" + tgt; }
  friend bool operator==(const LanguagePair&, const LanguagePair&) = default;
  friend auto operator<=>(const LanguagePair&, const LanguagePair&) = default;
};

struct LanguageSet {
  std::vector<std::string> languages;
  std::vector<LanguagePair> pairs;
  void validate() const;
  bool contains(std::string_view lang) const;
};

void to_json(nlohmann::json& j, const LanguageSet& s);
void from_json(const nlohmann::json& j, LanguageSet& s);

enum class VocabRegime { Joint, PerLanguage };

// One codec per language; under the joint regime every language maps to the
// same codec, whose vocabulary also holds one tag per language.
struct Codecs {
  VocabRegime regime = VocabRegime::Joint;
  std::map<std::string, TextCodec> by_language;
  const TextCodec& at(const std::string& lang) const;
};

Codecs learn_codecs(VocabRegime regime, const std::vector<std::string>& languages,
                    const std::map<std::string, std::vector<std::string>>& text, std::size_t num_merges);
// <dir>/{joint|<lang>}.{bpe,vocab}
void save_codecs(const Codecs& codecs, const std::filesystem::path& dir);
Codecs load_codecs(const std::filesystem::path& dir, VocabRegime regime, const std::vector<std::string>& languages);

struct TrainSchedule {
  double lr = 1e-3;
  std::size_t warmup = 4000;
  std::size_t batch_tokens = 4096;  // target tokens per update
  std::size_t max_updates = 200000;
  std::size_t patience = 5;         // evaluations without improvement
  std::size_t eval_every = 1000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  std::uint64_t seed = 1;
  void validate() const;

  // 2000 updates of 400 target tokens, lr 3e-3 with 300 warmup steps.
  static TrainSchedule desk();
  // lr 1e-3, 4000 warmup, 32k-token batches, 200k updates.
  static TrainSchedule paper();
  static TrainSchedule preset(const std::string& name);
};

void to_json(nlohmann::json& j, const TrainSchedule& s);
void from_json(const nlohmann::json& j, TrainSchedule& s);

// lr · min(step / warmup, sqrt(warmup / step)); step counts from 1.
double learning_rate(const TrainSchedule& s, std::size_t step);

class Adam {
 public:
  Adam(ParamStore& params, double beta1, double beta2, double eps);
  void step(double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  ParamStore* params_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

class ModelAssembly {
 public:
  static ModelAssembly build(SystemKind kind, const LanguageSet& languages, TransformerConfig config, Codecs codecs,
                             std::uint64_t seed);

  SystemKind kind() const noexcept { return kind_; }
  const LanguageSet& languages() const noexcept { return languages_; }
  const TransformerConfig& config() const noexcept { return config_; }
  const Codecs& codecs() const noexcept { return codecs_; }
  std::uint64_t seed() const noexcept { return seed_; }

  bool supports(const LanguagePair& pair) const;
  // Throws a routing error when the pair cannot be served.
  void check_route(const LanguagePair& pair) const;

  Encoder& encoder(const std::string& src);
  const Encoder& encoder(const std::string& src) const;
  Decoder& decoder(const std::string& tgt);
  const Decoder& decoder(const std::string& tgt) const;
  std::size_t num_encoders() const noexcept { return encoders_.size(); }
  std::size_t num_decoders() const noexcept { return decoders_.size(); }
  // Module keys: a language code, or "shared".
  std::vector<std::string> encoder_keys() const;
  std::vector<std::string> decoder_keys() const;

  const TextCodec& source_codec(const std::string& src) const;
  const TextCodec& target_codec(const std::string& tgt) const;
  // Source ids for a pair; the Shared system prepends the target tag.
  std::vector<int> source_ids(const LanguagePair& pair, std::string_view sentence) const;
  // Number of ids before the first source subword (1 for Shared, else 0).
  std::size_t source_offset() const noexcept { return kind_ == SystemKind::Shared ? 1 : 0; }

  std::size_t param_count() const;

  // <dir>/assembly.json, <dir>/vocab/*, <dir>/ckpt/<kind>/<key>/{encoder,decoder}.bin
  void save(const std::filesystem::path& dir, std::uint64_t step = 0) const;
  static ModelAssembly load(const std::filesystem::path& dir);

 private:
  std::string encoder_key(const std::string& src) const;
  std::string decoder_key(const std::string& tgt) const;

  SystemKind kind_ = SystemKind::Shared;
  LanguageSet languages_;
  TransformerConfig config_;
  Codecs codecs_;
  std::uint64_t seed_ = 0;
  std::map<std::string, std::unique_ptr<Encoder>> encoders_;
  std::map<std::string, std::unique_ptr<Decoder>> decoders_;
};

struct ParallelText {
  LanguagePair pair;
  std::vector<std::string> source, target;
};

struct LossPoint {
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
};

struct TrainReport {
  std::vector<LossPoint> curve;
  std::size_t steps = 0;
  std::size_t best_step = 0;
  double best_val_loss = 0.0;
  bool early_stopped = false;
};

// Pair used by update `step` (1-based) under round-robin alternation.
std::size_t round_robin_pair(std::size_t step, std::size_t num_pairs);

TrainReport train(ModelAssembly& assembly, const TrainSchedule& schedule, std::span<const ParallelText> data,
                  std::span<const ParallelText> validation);

// Mean token cross-entropy in evaluation mode.
double evaluation_loss(const ModelAssembly& assembly, std::span<const ParallelText> data);

struct TranslationOutput {
  std::string text;
  std::vector<int> source_ids;  // as fed to the encoder (with the tag for Shared)
  std::vector<int> ids;         // emitted target ids without bos/eos
  AttentionTrace trace;
};

std::vector<TranslationOutput> translate_corpus(const ModelAssembly& assembly, const LanguagePair& pair,
                                                std::span<const std::string> sentences, bool capture = false);

}  // namespace mnmt
