#include "mnmt/assemblies.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <spdlog/spdlog.h>

#include "mnmt/checkpoint.hpp"
#include "mnmt/error.hpp"
#include "mnmt/rng.hpp"

namespace mnmt {

std::string_view to_string(SystemKind k) noexcept {
  switch (k) {
    case SystemKind::Bilingual: return "bilingual";
    case SystemKind::Shared: return "shared";
    case SystemKind::LanguageSpecific: return "lang-spec";
  }
  return "?";
}

SystemKind parse_system_kind(std::string_view s) {
  if (s == "bilingual") return SystemKind::Bilingual;
  if (s == "shared") return SystemKind::Shared;
  if (s == "lang-spec" || s == "language-specific") return SystemKind::LanguageSpecific;
  fail(ErrorKind::Config, "unknown system kind '" + std::string(s) + "'");
}

void LanguageSet::validate() const {
  if (languages.size() < 2) fail(ErrorKind::Config, "a language set needs at least two languages");
  std::set<std::string> seen;
  for (const auto& l : languages)
    if (!seen.insert(l).second) fail(ErrorKind::Config, "language '" + l + "' declared twice");
  std::set<LanguagePair> pseen;
  for (const auto& p : pairs) {
    if (!contains(p.src) || !contains(p.tgt)) fail(ErrorKind::Config, "pair " + p.name() + " uses an undeclared language");
    if (p.src == p.tgt) fail(ErrorKind::Config, "pair " + p.name() + " translates a language into itself");
    if (!pseen.insert(p).second) fail(ErrorKind::Config, "pair " + p.name() + " listed twice");
  }
}

bool LanguageSet::contains(std::string_view lang) const {
  return std::find(languages.begin(), languages.end(), lang) != languages.end();
}

void to_json(nlohmann::json& j, const LanguageSet& s) {
  j["languages"] = s.languages;
  auto& pairs = j["pairs"] = nlohmann::json::array();
  for (const auto& p : s.pairs) pairs.push_back(p.name());
}

void from_json(const nlohmann::json& j, LanguageSet& s) {
  s.languages = j.at("languages").get<std::vector<std::string>>();
  s.pairs.clear();
  for (const auto& p : j.at("pairs")) {
    const auto name = p.get<std::string>();
    const auto dash = name.find('-');
    if (dash == std::string::npos) fail(ErrorKind::Config, "pair '" + name + "' is not of the form src-tgt");
    s.pairs.push_back({name.substr(0, dash), name.substr(dash + 1)});
  }
}

const TextCodec& Codecs::at(const std::string& lang) const {
  const auto it = by_language.find(lang);
  if (it == by_language.end()) fail(ErrorKind::Routing, "no codec for language '" + lang + "'");
  return it->second;
}

Codecs learn_codecs(VocabRegime regime, const std::vector<std::string>& languages,
                    const std::map<std::string, std::vector<std::string>>& text, std::size_t num_merges) {
  auto learn = [&](const std::vector<std::string>& langs, std::span<const std::string> tags) {
    std::map<std::string, std::size_t> counts;
    for (const auto& l : langs) {
      const auto it = text.find(l);
      if (it == text.end()) continue;
      for (const auto& s : it->second)
        for (const auto& w : split_words(s)) ++counts[w];
    }
    auto bpe = BpeModel::learn(counts, num_merges);
    std::vector<std::vector<std::string>> segmented;
    for (const auto& l : langs) {
      const auto it = text.find(l);
      if (it == text.end()) continue;
      for (const auto& s : it->second) segmented.push_back(bpe.apply_sentence(s));
    }
    return TextCodec{std::move(bpe), Vocabulary::build(segmented, tags)};
  };
  Codecs c;
  c.regime = regime;
  if (regime == VocabRegime::Joint) {
    const auto codec = learn(languages, languages);
    for (const auto& l : languages) c.by_language.emplace(l, codec);
  } else {
    for (const auto& l : languages) c.by_language.emplace(l, learn({l}, {}));
  }
  return c;
}

TrainSchedule TrainSchedule::desk() {
  TrainSchedule s;
  s.lr = 3e-3;
  s.warmup = 300;
  s.batch_tokens = 400;
  s.max_updates = 2000;
  s.eval_every = 250;
  s.patience = 4;
  return s;
}

TrainSchedule TrainSchedule::paper() {
  TrainSchedule s;
  s.lr = 1e-3;
  s.warmup = 4000;
  s.batch_tokens = 32000;
  s.max_updates = 200000;
  s.eval_every = 1000;
  s.patience = 10;
  return s;
}

TrainSchedule TrainSchedule::preset(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  fail(ErrorKind::Config, "unknown preset '" + name + "'");
}

void TrainSchedule::validate() const {
  require(warmup >= 1, ErrorKind::Config, "warmup must be >= 1");
  require(batch_tokens >= 1, ErrorKind::Config, "batch_tokens must be >= 1");
  require(lr > 0, ErrorKind::Config, "learning rate must be positive");
  require(eval_every >= 1, ErrorKind::Config, "eval_every must be >= 1");
  require(patience >= 1, ErrorKind::Config, "patience must be >= 1");
}

void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = {{"lr", s.lr},           {"warmup", s.warmup},     {"batch_tokens", s.batch_tokens}, {"max_updates", s.max_updates},
       {"patience", s.patience}, {"eval_every", s.eval_every}, {"beta1", s.beta1}, {"beta2", s.beta2},
       {"eps", s.eps},         {"seed", s.seed}};
}

// Keys absent from j keep s's current values, so overrides layer onto a preset.
void from_json(const nlohmann::json& j, TrainSchedule& s) {
  const TrainSchedule d = s;
  s.lr = j.value("lr", d.lr);
  s.warmup = j.value("warmup", d.warmup);
  s.batch_tokens = j.value("batch_tokens", d.batch_tokens);
  s.max_updates = j.value("max_updates", d.max_updates);
  s.patience = j.value("patience", d.patience);
  s.eval_every = j.value("eval_every", d.eval_every);
  s.beta1 = j.value("beta1", d.beta1);
  s.beta2 = j.value("beta2", d.beta2);
  s.eps = j.value("eps", d.eps);
  s.seed = j.value("seed", d.seed);
}

double learning_rate(const TrainSchedule& s, std::size_t step) {
  require(step >= 1, ErrorKind::Domain, "learning-rate steps count from 1");
  const double st = static_cast<double>(step), w = static_cast<double>(s.warmup);
  return s.lr * std::min(st / w, std::sqrt(w / st));
}

Adam::Adam(ParamStore& params, double beta1, double beta2, double eps)
    : params_(&params), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [name, t] : params) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::size_t k = 0;
  for (auto& [name, t] : *params_) {
    auto& m = m_[k];
    auto& v = v_[k];
    ++k;
    if (!t.has_grad()) continue;
    const auto g = t.grad();
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

// ------------------------------------------------------------- assembly

namespace {

constexpr const char* kSharedKey = "shared";

std::string module_tag(const char* kind, const std::string& key) { return std::string(kind) + ":" + key; }

}  // namespace

ModelAssembly ModelAssembly::build(SystemKind kind, const LanguageSet& languages, TransformerConfig config, Codecs codecs,
                                   std::uint64_t seed) {
  languages.validate();
  config.validate();
  if (kind == SystemKind::Bilingual) {
    if (languages.languages.size() != 2) fail(ErrorKind::Config, "a bilingual system needs exactly two languages");
    if (languages.pairs.size() != 1) fail(ErrorKind::Config, "a bilingual system translates exactly one pair");
  }
  if (kind == SystemKind::Shared && codecs.regime != VocabRegime::Joint) {
    fail(ErrorKind::Config, "the shared system needs the joint vocabulary regime");
  }
  for (const auto& l : languages.languages) codecs.at(l);

  ModelAssembly a;
  a.kind_ = kind;
  a.languages_ = languages;
  a.codecs_ = std::move(codecs);
  a.seed_ = seed;
  auto vocab_of = [&](const std::string& l) { return a.codecs_.at(l).vocab.size(); };
  switch (kind) {
    case SystemKind::Shared: {
      const auto v = vocab_of(languages.languages.front());
      config.src_vocab = config.tgt_vocab = v;
      a.encoders_.emplace(kSharedKey, std::make_unique<Encoder>(config, v, seed, module_tag("encoder", kSharedKey)));
      a.decoders_.emplace(kSharedKey, std::make_unique<Decoder>(config, v, seed, module_tag("decoder", kSharedKey)));
      break;
    }
    case SystemKind::Bilingual: {
      const auto& p = languages.pairs.front();
      config.src_vocab = vocab_of(p.src);
      config.tgt_vocab = vocab_of(p.tgt);
      a.encoders_.emplace(p.src, std::make_unique<Encoder>(config, config.src_vocab, seed, module_tag("encoder", p.src)));
      a.decoders_.emplace(p.tgt, std::make_unique<Decoder>(config, config.tgt_vocab, seed, module_tag("decoder", p.tgt)));
      break;
    }
    case SystemKind::LanguageSpecific: {
      config.src_vocab = config.tgt_vocab = 0;  // per module
      for (const auto& l : languages.languages) {
        a.encoders_.emplace(l, std::make_unique<Encoder>(config, vocab_of(l), seed, module_tag("encoder", l)));
        a.decoders_.emplace(l, std::make_unique<Decoder>(config, vocab_of(l), seed, module_tag("decoder", l)));
      }
      break;
    }
  }
  a.config_ = config;
  return a;
}

bool ModelAssembly::supports(const LanguagePair& pair) const {
  if (!languages_.contains(pair.src) || !languages_.contains(pair.tgt) || pair.src == pair.tgt) return false;
  if (kind_ == SystemKind::Bilingual) return pair == languages_.pairs.front();
  return true;
}

void ModelAssembly::check_route(const LanguagePair& pair) const {
  if (!languages_.contains(pair.src)) fail(ErrorKind::Routing, "unknown source language '" + pair.src + "'");
  if (!languages_.contains(pair.tgt)) fail(ErrorKind::Routing, "unknown target language '" + pair.tgt + "'");
  if (!supports(pair)) fail(ErrorKind::Routing, std::string(to_string(kind_)) + " system cannot translate " + pair.name());
}

std::string ModelAssembly::encoder_key(const std::string& src) const {
  if (!languages_.contains(src)) fail(ErrorKind::Routing, "unknown source language '" + src + "'");
  if (kind_ == SystemKind::Shared) return kSharedKey;
  if (!encoders_.count(src)) fail(ErrorKind::Routing, "no encoder for '" + src + "'");
  return src;
}

std::string ModelAssembly::decoder_key(const std::string& tgt) const {
  if (!languages_.contains(tgt)) fail(ErrorKind::Routing, "unknown target language '" + tgt + "'");
  if (kind_ == SystemKind::Shared) return kSharedKey;
  if (!decoders_.count(tgt)) fail(ErrorKind::Routing, "no decoder for '" + tgt + "'");
  return tgt;
}

Encoder& ModelAssembly::encoder(const std::string& src) { return *encoders_.at(encoder_key(src)); }
const Encoder& ModelAssembly::encoder(const std::string& src) const { return *encoders_.at(encoder_key(src)); }
Decoder& ModelAssembly::decoder(const std::string& tgt) { return *decoders_.at(decoder_key(tgt)); }
const Decoder& ModelAssembly::decoder(const std::string& tgt) const { return *decoders_.at(decoder_key(tgt)); }

std::vector<std::string> ModelAssembly::encoder_keys() const {
  std::vector<std::string> k;
  for (const auto& [key, e] : encoders_) k.push_back(key);
  return k;
}

std::vector<std::string> ModelAssembly::decoder_keys() const {
  std::vector<std::string> k;
  for (const auto& [key, d] : decoders_) k.push_back(key);
  return k;
}

const TextCodec& ModelAssembly::source_codec(const std::string& src) const { return codecs_.at(src); }
const TextCodec& ModelAssembly::target_codec(const std::string& tgt) const { return codecs_.at(tgt); }

std::vector<int> ModelAssembly::source_ids(const LanguagePair& pair, std::string_view sentence) const {
  check_route(pair);
  auto ids = source_codec(pair.src).encode(sentence);
  if (kind_ == SystemKind::Shared) ids.insert(ids.begin(), source_codec(pair.src).vocab.language_tag(pair.tgt));
  return ids;
}

std::size_t ModelAssembly::param_count() const {
  std::size_t n = 0;
  for (const auto& [k, e] : encoders_) n += e->params().count();
  for (const auto& [k, d] : decoders_) n += d->params().count();
  return n;
}

void save_codecs(const Codecs& codecs, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [l, c] : codecs.by_language) {
    const auto name = codecs.regime == VocabRegime::Joint ? std::string("joint") : l;
    c.bpe.save(dir / (name + ".bpe"));
    c.vocab.save(dir / (name + ".vocab"));
  }
}

Codecs load_codecs(const std::filesystem::path& dir, VocabRegime regime, const std::vector<std::string>& languages) {
  Codecs codecs;
  codecs.regime = regime;
  for (const auto& l : languages) {
    const auto name = regime == VocabRegime::Joint ? std::string("joint") : l;
    codecs.by_language.emplace(l, TextCodec{BpeModel::load(dir / (name + ".bpe")), Vocabulary::load(dir / (name + ".vocab"))});
  }
  return codecs;
}

void ModelAssembly::save(const std::filesystem::path& dir, std::uint64_t step) const {
  std::filesystem::create_directories(dir / "vocab");
  nlohmann::json j;
  j["kind"] = std::string(to_string(kind_));
  j["languages"] = languages_.languages;
  nlohmann::json ls = languages_;
  j["pairs"] = ls["pairs"];
  j["model"] = config_;
  j["seed"] = seed_;
  j["vocab"] = codecs_.regime == VocabRegime::Joint ? "joint" : "per-language";
  {
    std::ofstream out(dir / "assembly.json", std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot write " + (dir / "assembly.json").string());
    out << j.dump(2) << '\n';
  }
  save_codecs(codecs_, dir / "vocab");
  const auto root = dir / "ckpt" / std::string(to_string(kind_));
  auto fingerprint = [&](const std::string& key) {
    return (key == kSharedKey ? codecs_.by_language.begin()->second : codecs_.at(key)).vocab.fingerprint();
  };
  for (const auto& [key, e] : encoders_) save_checkpoint(root / key / "encoder.bin", e->params(), {config_, fingerprint(key), step, "encoder"});
  for (const auto& [key, d] : decoders_) save_checkpoint(root / key / "decoder.bin", d->params(), {config_, fingerprint(key), step, "decoder"});
}

ModelAssembly ModelAssembly::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "assembly.json");
  if (!in) fail(ErrorKind::MissingInput, "no assembly at " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, (dir / "assembly.json").string() + ": " + e.what());
  }
  const auto kind = parse_system_kind(j.at("kind").get<std::string>());
  const auto langs = j.get<LanguageSet>();
  auto config = j.at("model").get<TransformerConfig>();
  const auto seed = j.at("seed").get<std::uint64_t>();
  const auto regime = j.value("vocab", "joint") == "joint" ? VocabRegime::Joint : VocabRegime::PerLanguage;
  auto a = build(kind, langs, config, load_codecs(dir / "vocab", regime, langs.languages), seed);
  const auto root = dir / "ckpt" / std::string(to_string(kind));
  for (auto& [key, e] : a.encoders_) load_checkpoint(root / key / "encoder.bin", e->params());
  for (auto& [key, d] : a.decoders_) load_checkpoint(root / key / "decoder.bin", d->params());
  return a;
}

// ------------------------------------------------------------- training

std::size_t round_robin_pair(std::size_t step, std::size_t num_pairs) {
  require(num_pairs >= 1, ErrorKind::Config, "no pairs to train on");
  require(step >= 1, ErrorKind::Domain, "steps count from 1");
  return (step - 1) % num_pairs;
}

namespace {

struct Example {
  std::vector<int> src, tgt_in, tgt_out;
};

std::vector<Example> tokenize(const ModelAssembly& a, const ParallelText& text) {
  require(text.source.size() == text.target.size(), ErrorKind::Dimension, "parallel text sides differ in length");
  std::vector<Example> out;
  const auto& tcodec = a.target_codec(text.pair.tgt);
  const auto max_len = a.config().max_len;
  for (std::size_t i = 0; i < text.source.size(); ++i) {
    Example e;
    e.src = a.source_ids(text.pair, text.source[i]);
    const auto y = tcodec.encode(text.target[i]);
    e.tgt_in.push_back(Vocabulary::kBos);
    e.tgt_in.insert(e.tgt_in.end(), y.begin(), y.end());
    e.tgt_out = y;
    e.tgt_out.push_back(Vocabulary::kEos);
    if (e.src.empty() || e.src.size() > max_len || e.tgt_in.size() > max_len) {
      fail(ErrorKind::Length, text.pair.name() + " sentence " + std::to_string(i) + " does not fit max_len " + std::to_string(max_len));
    }
    out.push_back(std::move(e));
  }
  return out;
}

// Returns (summed token loss, token count) for a list of examples.
std::pair<Tensor, std::size_t> batch_loss(const Encoder& enc, const Decoder& dec, const std::vector<const Example*>& batch,
                                          const RunContext& ctx) {
  std::vector<std::vector<int>> src, in;
  std::vector<int> targets;
  for (const auto* e : batch) {
    src.push_back(e->src);
    in.push_back(e->tgt_in);
    targets.insert(targets.end(), e->tgt_out.begin(), e->tgt_out.end());
  }
  std::vector<Segment> segs;
  auto memory = enc.forward(src, segs, ctx);
  auto logits = dec.forward(memory, segs, in, ctx);
  return {ops::cross_entropy_with_logits(logits, targets), targets.size()};
}

class Sampler {
 public:
  Sampler(const std::vector<Example>* data, std::uint64_t seed, std::size_t pair_index)
      : data_(data), seed_(seed), pair_(pair_index) {
    order_.resize(data->size());
    reshuffle();
  }

  std::vector<const Example*> next(std::size_t budget) {
    std::vector<const Example*> batch;
    std::size_t tokens = 0;
    while (tokens < budget) {
      if (cursor_ == order_.size()) {
        ++epoch_;
        reshuffle();
        if (!batch.empty()) break;
      }
      const auto* e = &(*data_)[order_[cursor_++]];
      batch.push_back(e);
      tokens += e->tgt_out.size();
    }
    return batch;
  }

 private:
  void reshuffle() {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    auto rng = make_rng(seed_, hash_combine(pair_, epoch_));
    stable_shuffle(order_.begin(), order_.end(), rng);
    cursor_ = 0;
  }

  const std::vector<Example>* data_;
  std::uint64_t seed_;
  std::size_t pair_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

std::vector<ParamStore*> all_params(ModelAssembly& a) {
  std::vector<ParamStore*> out;
  for (const auto& k : a.encoder_keys()) out.push_back(&a.encoder(k == "shared" ? a.languages().languages.front() : k).params());
  for (const auto& k : a.decoder_keys()) out.push_back(&a.decoder(k == "shared" ? a.languages().languages.front() : k).params());
  return out;
}

std::vector<std::vector<double>> snapshot(const std::vector<ParamStore*>& stores) {
  std::vector<std::vector<double>> s;
  for (const auto* ps : stores)
    for (const auto& [name, t] : *ps) s.emplace_back(t.data().begin(), t.data().end());
  return s;
}

void restore(const std::vector<ParamStore*>& stores, const std::vector<std::vector<double>>& s) {
  std::size_t k = 0;
  for (auto* ps : stores)
    for (auto& [name, t] : *ps) {
      const auto& src = s[k++];
      std::copy(src.begin(), src.end(), t.mutable_data().begin());
    }
}

double eval_examples(const ModelAssembly& a, const LanguagePair& pair, const std::vector<Example>& data, std::size_t& tokens) {
  NoGradGuard guard;
  const auto& enc = a.encoder(pair.src);
  const auto& dec = a.decoder(pair.tgt);
  double total = 0.0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t i = 0; i < data.size(); i += kChunk) {
    std::vector<const Example*> batch;
    for (std::size_t j = i; j < std::min(data.size(), i + kChunk); ++j) batch.push_back(&data[j]);
    auto [loss, n] = batch_loss(enc, dec, batch, RunContext{});
    total += loss.item() * static_cast<double>(n);
    tokens += n;
  }
  return total;
}

}  // namespace

double evaluation_loss(const ModelAssembly& assembly, std::span<const ParallelText> data) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& text : data) total += eval_examples(assembly, text.pair, tokenize(assembly, text), tokens);
  if (tokens == 0) fail(ErrorKind::Domain, "evaluation data is empty");
  return total / static_cast<double>(tokens);
}

TrainReport train(ModelAssembly& assembly, const TrainSchedule& schedule, std::span<const ParallelText> data,
                  std::span<const ParallelText> validation) {
  schedule.validate();
  require(!data.empty(), ErrorKind::Config, "no training data");
  std::vector<std::vector<Example>> examples;
  for (const auto& text : data) {
    assembly.check_route(text.pair);
    examples.push_back(tokenize(assembly, text));
    require(!examples.back().empty(), ErrorKind::Config, "pair " + text.pair.name() + " has no training sentences");
  }
  std::vector<std::vector<Example>> val_examples;
  for (const auto& text : validation) val_examples.push_back(tokenize(assembly, text));

  std::vector<Sampler> samplers;
  for (std::size_t p = 0; p < examples.size(); ++p) samplers.emplace_back(&examples[p], schedule.seed, p);

  // One optimizer state per module.
  std::map<std::string, Adam> adam;
  auto optimizer = [&](const std::string& key, ParamStore& ps) -> Adam& {
    auto it = adam.find(key);
    if (it == adam.end()) it = adam.emplace(key, Adam(ps, schedule.beta1, schedule.beta2, schedule.eps)).first;
    return it->second;
  };

  const auto stores = all_params(assembly);
  TrainReport report;
  std::optional<std::vector<std::vector<double>>> best;
  std::size_t bad_evals = 0;
  double running = 0.0;
  std::size_t running_n = 0;

  for (std::size_t step = 1; step <= schedule.max_updates; ++step) {
    const auto p = round_robin_pair(step, data.size());
    const auto& pair = data[p].pair;
    auto& enc = assembly.encoder(pair.src);
    auto& dec = assembly.decoder(pair.tgt);
    enc.params().zero_grad();
    dec.params().zero_grad();
    const RunContext ctx{true, schedule.seed, step};
    auto [loss, n] = batch_loss(enc, dec, samplers[p].next(schedule.batch_tokens), ctx);
    const double value = loss.item();
    if (!std::isfinite(value)) fail(ErrorKind::Training, "loss diverged at step " + std::to_string(step));
    loss.backward();
    const double lr = learning_rate(schedule, step);
    const auto enc_key = assembly.kind() == SystemKind::Shared ? std::string("enc:shared") : "enc:" + pair.src;
    const auto dec_key = assembly.kind() == SystemKind::Shared ? std::string("dec:shared") : "dec:" + pair.tgt;
    optimizer(enc_key, enc.params()).step(lr);
    optimizer(dec_key, dec.params()).step(lr);
    running += value;
    ++running_n;
    report.steps = step;

    if (step % schedule.eval_every == 0 || step == schedule.max_updates) {
      LossPoint point{step, lr, running / static_cast<double>(running_n), std::nullopt};
      running = 0.0;
      running_n = 0;
      if (!val_examples.empty()) {
        double total = 0.0;
        std::size_t tokens = 0;
        for (std::size_t v = 0; v < val_examples.size(); ++v) total += eval_examples(assembly, validation[v].pair, val_examples[v], tokens);
        const double val = total / static_cast<double>(std::max<std::size_t>(tokens, 1));
        if (!std::isfinite(val)) fail(ErrorKind::Training, "validation loss diverged at step " + std::to_string(step));
        point.val_loss = val;
        if (!best || val < report.best_val_loss) {
          best = snapshot(stores);
          report.best_val_loss = val;
          report.best_step = step;
          bad_evals = 0;
        } else if (++bad_evals >= schedule.patience) {
          report.early_stopped = true;
        }
      }
      spdlog::info("step {} lr {:.6f} train {:.4f}{}", step, lr, point.train_loss,
                   point.val_loss ? fmt::format(" val {:.4f}", *point.val_loss) : std::string());
      report.curve.push_back(point);
      if (report.early_stopped) break;
    }
  }
  if (best) restore(stores, *best);
  if (!best) report.best_step = report.steps;
  return report;
}

std::vector<TranslationOutput> translate_corpus(const ModelAssembly& assembly, const LanguagePair& pair,
                                                std::span<const std::string> sentences, bool capture) {
  assembly.check_route(pair);
  const auto& enc = assembly.encoder(pair.src);
  const auto& dec = assembly.decoder(pair.tgt);
  const auto& tcodec = assembly.target_codec(pair.tgt);
  const auto max_len = assembly.config().max_len;
  std::vector<TranslationOutput> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) {
    TranslationOutput t;
    t.source_ids = assembly.source_ids(pair, s);
    auto tr = dec.greedy(enc.encode(t.source_ids), std::min(max_len - 1, 2 * t.source_ids.size() + 8), capture);
    t.ids = std::move(tr.ids);
    t.trace = std::move(tr.trace);
    t.text = tcodec.decode(t.ids);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace mnmt
