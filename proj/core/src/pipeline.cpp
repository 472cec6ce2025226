#include "mnmt/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <set>
#include <tuple>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "mnmt/attention_analysis.hpp"
#include "mnmt/bias_eval.hpp"
#include "mnmt/error.hpp"
#include "mnmt/io.hpp"
#include "mnmt/probing.hpp"
#include "mnmt/rng.hpp"
#include "mnmt/worker_pool.hpp"

namespace mnmt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

LanguagePair parse_pair(const std::string& s) {
  const auto dash = s.find('-');
  if (dash == std::string::npos || dash == 0 || dash + 1 == s.size()) fail(ErrorKind::Config, "bad language pair '" + s + "'");
  return {s.substr(0, dash), s.substr(dash + 1)};
}

json parse_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string seed_dir(std::uint64_t seed) { return "seed" + std::to_string(seed); }

template <typename T>
void append_unique(std::vector<T>& v, const T& x) {
  if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
}

}  // namespace

// ------------------------------------------------------------ manifest

ExperimentManifest ExperimentManifest::from_json(const json& j, const fs::path& base_dir) {
  ExperimentManifest m;
  try {
    m.name = j.at("name").get<std::string>();
    m.apply_preset(j.value("preset", std::string("desk")));
    const fs::path grammars = j.value("grammars", std::string("grammars"));
    m.grammars = grammars.is_absolute() ? grammars : (base_dir / grammars).lexically_normal();
    m.challenge_language = j.value("challenge_language", m.challenge_language);
    m.data_seed = j.value("data_seed", m.data_seed);
    if (j.contains("corpus")) {
      const auto& c = j["corpus"];
      m.train_sentences = c.value("train", m.train_sentences);
      m.valid_sentences = c.value("valid", m.valid_sentences);
      m.test_sentences = c.value("test", m.test_sentences);
    }
    if (j.contains("challenge")) {
      const auto& c = j["challenge"];
      if (c.is_string()) {
        if (c.get<std::string>() != "paper_replica") fail(ErrorKind::Config, "unknown challenge composition " + c.dump());
      } else {
        m.challenge = {c.at("male"), c.at("female"), c.at("neutral"), c.at("pro"), c.at("anti"), c.at("neutral_stereotype")};
      }
    }
    m.bpe_merges = j.value("bpe_merges", m.bpe_merges);
    if (j.contains("model")) mnmt::from_json(j["model"], m.model);
    if (j.contains("train")) mnmt::from_json(j["train"], m.train);
    for (const auto& e : j.at("experiments")) {
      ExperimentSpec x;
      x.name = e.at("name").get<std::string>();
      x.languages.languages = e.at("languages").get<std::vector<std::string>>();
      if (e.contains("pairs")) {
        for (const auto& p : e["pairs"]) x.languages.pairs.push_back(parse_pair(p.get<std::string>()));
      } else {
        // Default: the first language into every other one.
        for (std::size_t i = 1; i < x.languages.languages.size(); ++i)
          x.languages.pairs.push_back({x.languages.languages[0], x.languages.languages[i]});
      }
      for (const auto& s : e.at("systems")) x.systems.push_back(parse_system_kind(s.get<std::string>()));
      x.seeds = e.value("seeds", std::vector<std::uint64_t>{1});
      m.experiments.push_back(std::move(x));
    }
    if (j.contains("analysis")) {
      const auto& a = j["analysis"];
      auto& s = m.analysis;
      if (a.contains("probe_pair")) s.probe_pair = parse_pair(a["probe_pair"].get<std::string>());
      s.probe_train = a.value("probe_train", s.probe_train);
      s.probe_test = a.value("probe_test", s.probe_test);
      s.probe_runs = a.value("probe_runs", s.probe_runs);
      if (a.contains("cv_pairs")) {
        s.cv_pairs.clear();
        for (const auto& p : a["cv_pairs"]) s.cv_pairs.push_back(parse_pair(p.get<std::string>()));
      }
      s.cv_sentences = a.value("cv_sentences", s.cv_sentences);
      s.layers = a.value("layers", s.layers);
      s.heatmap_sentence = a.value("heatmap_sentence", s.heatmap_sentence);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

ExperimentManifest ExperimentManifest::load(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::MissingInput, "manifest not found: " + path.string());
  return from_json(parse_json(path), fs::absolute(path).parent_path());
}

json ExperimentManifest::to_json() const {
  json j;
  j["name"] = name;
  j["preset"] = preset;
  j["grammars"] = grammars.string();
  j["challenge_language"] = challenge_language;
  j["data_seed"] = data_seed;
  j["corpus"] = {{"train", train_sentences}, {"valid", valid_sentences}, {"test", test_sentences}};
  j["challenge"] = {{"male", challenge.male},   {"female", challenge.female}, {"neutral", challenge.neutral},
                    {"pro", challenge.pro},     {"anti", challenge.anti},     {"neutral_stereotype", challenge.neutral_stereotype}};
  j["bpe_merges"] = bpe_merges;
  j["model"] = model;
  j["train"] = train;
  for (const auto& e : experiments) {
    json x;
    x["name"] = e.name;
    x["languages"] = e.languages.languages;
    for (const auto& p : e.languages.pairs) x["pairs"].push_back(p.name());
    for (auto k : e.systems) x["systems"].push_back(std::string(to_string(k)));
    x["seeds"] = e.seeds;
    j["experiments"].push_back(x);
  }
  auto& a = j["analysis"];
  a["probe_pair"] = analysis.probe_pair.name();
  a["probe_train"] = analysis.probe_train;
  a["probe_test"] = analysis.probe_test;
  a["probe_runs"] = analysis.probe_runs;
  a["cv_pairs"] = json::array();
  for (const auto& p : analysis.cv_pairs) a["cv_pairs"].push_back(p.name());
  a["cv_sentences"] = analysis.cv_sentences;
  a["layers"] = analysis.layers;
  a["heatmap_sentence"] = analysis.heatmap_sentence;
  return j;
}

void ExperimentManifest::apply_preset(const std::string& p) {
  model = TransformerConfig::preset(p);
  train = TrainSchedule::preset(p);
  preset = p;
}

void ExperimentManifest::validate() const {
  require(!name.empty(), ErrorKind::Config, "manifest needs a name");
  require(!experiments.empty(), ErrorKind::Config, "manifest lists no experiments");
  require(train_sentences >= 1 && valid_sentences >= 1 && test_sentences >= 1, ErrorKind::Config, "corpus splits must be non-empty");
  model.validate();
  train.validate();
  std::set<std::string> names;
  for (const auto& e : experiments) {
    require(!e.name.empty() && e.name.find('/') == std::string::npos, ErrorKind::Config, "bad experiment name '" + e.name + "'");
    require(names.insert(e.name).second, ErrorKind::Config, "duplicate experiment '" + e.name + "'");
    e.languages.validate();
    require(!e.systems.empty() && !e.seeds.empty(), ErrorKind::Config, "experiment '" + e.name + "' needs systems and seeds");
  }
  for (auto l : analysis.layers)
    require(l >= 1 && l <= model.layers, ErrorKind::Config, fmt::format("analysis layer {} outside 1..{}", l, model.layers));
  require(analysis.probe_runs >= 1, ErrorKind::Config, "probe needs at least one run");
}

std::vector<std::string> ExperimentManifest::languages() const {
  std::vector<std::string> out;
  append_unique(out, challenge_language);
  for (const auto& e : experiments)
    for (const auto& l : e.languages.languages) append_unique(out, l);
  return out;
}

std::vector<LanguagePair> ExperimentManifest::pairs() const {
  std::vector<LanguagePair> out;
  for (const auto& e : experiments)
    for (const auto& p : e.languages.pairs) append_unique(out, p);
  return out;
}

const ExperimentSpec& ExperimentManifest::experiment(const std::string& n) const {
  for (const auto& e : experiments)
    if (e.name == n) return e;
  fail(ErrorKind::Config, "no experiment named '" + n + "'");
}

std::string Job::label() const { return fmt::format("{}/{}/seed{}", to_string(kind), experiment, seed); }

std::vector<Job> plan_jobs(const ExperimentManifest& m, const JobFilter& filter) {
  std::vector<Job> jobs;
  for (const auto& e : m.experiments) {
    for (auto k : e.systems) {
      if (filter.system && *filter.system != k) continue;
      const auto seeds = filter.seed ? std::vector<std::uint64_t>{*filter.seed} : e.seeds;
      for (auto s : seeds) jobs.push_back({e.name, k, s});
    }
  }
  return jobs;
}

// ----------------------------------------------------------- workspace

fs::path Workspace::corpus(const LanguagePair& pair, const std::string& split, const std::string& lang) const {
  return root_ / "corpus" / pair.name() / (split + "." + lang);
}

fs::path Workspace::codecs(const std::string& experiment, VocabRegime regime) const {
  return root_ / "bpe" / experiment / (regime == VocabRegime::Joint ? "joint" : "per-language");
}

fs::path Workspace::model(const Job& job) const { return root_ / "models" / job.experiment / std::string(to_string(job.kind)) / seed_dir(job.seed); }

fs::path Workspace::results(const Job& job) const {
  return root_ / "results" / job.experiment / std::string(to_string(job.kind)) / seed_dir(job.seed);
}

VocabRegime vocab_regime(SystemKind kind) noexcept { return kind == SystemKind::Shared ? VocabRegime::Joint : VocabRegime::PerLanguage; }

// -------------------------------------------------------------- stages

namespace {

struct Timer {
  std::string what;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  ~Timer() {
    spdlog::info("{} done in {:.1f}s", what, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
};

std::uint64_t pair_seed(std::uint64_t data_seed, const LanguagePair& p) { return fnv1a(fmt::format("{}:{}", data_seed, p.name())); }

ParallelText load_split(const Workspace& ws, const LanguagePair& p, const std::string& split) {
  return {p, read_lines(ws.corpus(p, split, p.src)), read_lines(ws.corpus(p, split, p.tgt))};
}

// Pairs of the job's experiment that read the challenge language.
std::vector<LanguagePair> challenge_pairs(const ExperimentManifest& m, const ExperimentSpec& e) {
  std::vector<LanguagePair> out;
  for (const auto& p : e.languages.pairs)
    if (p.src == m.challenge_language) out.push_back(p);
  return out;
}

bool serves(const ExperimentSpec& e, const LanguagePair& p) {
  return std::find(e.languages.pairs.begin(), e.languages.pairs.end(), p) != e.languages.pairs.end();
}

fs::path hyp_path(const Workspace& ws, const Job& j, const LanguagePair& p, const std::string& what) {
  return ws.results(j) / "translations" / (p.name() + "." + what + ".txt");
}

struct JobPair {
  Job job;
  LanguagePair pair;
};

std::vector<JobPair> job_pairs(const ExperimentManifest& m, const StageOptions& o, bool challenge_only) {
  std::vector<JobPair> out;
  for (const auto& j : plan_jobs(m, o.filter)) {
    const auto& e = m.experiment(j.experiment);
    for (const auto& p : challenge_only ? challenge_pairs(m, e) : e.languages.pairs) out.push_back({j, p});
  }
  return out;
}

std::vector<std::string> texts(const ChallengeSet& set) {
  std::vector<std::string> out;
  for (const auto& s : set.sentences) out.push_back(s.text);
  return out;
}

}  // namespace

void gen_corpus(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o) {
  Timer timer{"gen-corpus"};
  const auto grammars = load_grammars(m.grammars, m.languages());
  const auto pairs = m.pairs();
  const auto n = m.train_sentences + m.valid_sentences + m.test_sentences;
  parallel_for(pairs.size(), o.threads, [&](std::size_t k) {
    const auto& p = pairs[k];
    const auto c = gen_parallel(grammars.at(p.src), grammars.at(p.tgt), n, pair_seed(m.data_seed, p));
    auto slice = [&](const std::vector<std::string>& v, std::size_t from, std::size_t len) {
      return std::vector<std::string>(v.begin() + static_cast<std::ptrdiff_t>(from), v.begin() + static_cast<std::ptrdiff_t>(from + len));
    };
    const std::pair<const char*, std::pair<std::size_t, std::size_t>> splits[] = {
        {"train", {0, m.train_sentences}},
        {"valid", {m.train_sentences, m.valid_sentences}},
        {"test", {m.train_sentences + m.valid_sentences, m.test_sentences}}};
    for (const auto& [name, range] : splits) {
      write_lines(ws.corpus(p, name, p.src), slice(c.source, range.first, range.second));
      write_lines(ws.corpus(p, name, p.tgt), slice(c.target, range.first, range.second));
    }
    spdlog::info("corpus {}: {} sentence pairs", p.name(), n);
  });
  const auto set = gen_challenge(grammars.at(m.challenge_language), m.challenge, m.data_seed);
  write_text(ws.challenge(), set.serialize());
  write_json(ws.manifest(), m.to_json());
  spdlog::info("challenge set: {} sentences", set.size());
}

void learn_bpe(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o) {
  Timer timer{"learn-bpe"};
  std::vector<std::pair<const ExperimentSpec*, VocabRegime>> units;
  for (const auto& e : m.experiments) {
    std::vector<VocabRegime> regimes;
    for (auto k : e.systems)
      if (!o.filter.system || *o.filter.system == k) append_unique(regimes, vocab_regime(k));
    for (auto r : regimes) units.emplace_back(&e, r);
  }
  parallel_for(units.size(), o.threads, [&](std::size_t k) {
    const auto& [e, regime] = units[k];
    std::map<std::string, std::vector<std::string>> text;
    for (const auto& p : e->languages.pairs) {
      for (auto& s : read_lines(ws.corpus(p, "train", p.src))) text[p.src].push_back(std::move(s));
      for (auto& s : read_lines(ws.corpus(p, "train", p.tgt))) text[p.tgt].push_back(std::move(s));
    }
    const auto codecs = learn_codecs(regime, e->languages.languages, text, m.bpe_merges);
    const auto dir = ws.codecs(e->name, regime);
    std::error_code ec;
    fs::remove_all(dir, ec);
    save_codecs(codecs, dir);
    spdlog::info("bpe {}/{}: vocab {}", e->name, regime == VocabRegime::Joint ? "joint" : "per-language",
                 codecs.by_language.begin()->second.vocab.size());
  });
}

void train_models(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o) {
  Timer timer{"train"};
  const auto jobs = plan_jobs(m, o.filter);
  parallel_for(jobs.size(), o.threads, [&](std::size_t k) {
    const auto& job = jobs[k];
    const auto& e = m.experiment(job.experiment);
    auto assembly = ModelAssembly::build(job.kind, e.languages, m.model,
                                         load_codecs(ws.codecs(e.name, vocab_regime(job.kind)), vocab_regime(job.kind), e.languages.languages),
                                         job.seed);
    std::vector<ParallelText> data, valid;
    for (const auto& p : e.languages.pairs) {
      data.push_back(load_split(ws, p, "train"));
      valid.push_back(load_split(ws, p, "valid"));
    }
    auto schedule = m.train;
    schedule.seed = job.seed;
    spdlog::info("training {} ({} parameters)", job.label(), assembly.param_count());
    const auto report = train(assembly, schedule, data, valid);
    const auto dir = ws.model(job);
    std::error_code ec;
    fs::remove_all(dir, ec);
    assembly.save(dir, report.steps);
    std::string log = "step,lr,train_loss,val_loss\n";
    for (const auto& pt : report.curve)
      log += fmt::format("{},{:.8f},{:.6f},{}\n", pt.step, pt.lr, pt.train_loss, pt.val_loss ? fmt::format("{:.6f}", *pt.val_loss) : "");
    write_text(ws.results(job) / "train_log.csv", log);
    spdlog::info("trained {}: {} steps, best val {:.4f} at {}", job.label(), report.steps, report.best_val_loss, report.best_step);
  });
}

void translate_models(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o) {
  Timer timer{"translate"};
  const auto units = job_pairs(m, o, false);
  const auto set = ChallengeSet::load(ws.challenge());
  const auto challenge_text = texts(set);
  parallel_for(units.size(), o.threads, [&](std::size_t k) {
    const auto& [job, pair] = units[k];
    const auto assembly = ModelAssembly::load(ws.model(job));
    auto run = [&](std::span<const std::string> src, const std::string& what) {
      std::vector<std::string> hyp;
      for (auto& t : translate_corpus(assembly, pair, src)) hyp.push_back(std::move(t.text));
      write_lines(hyp_path(ws, job, pair, what), hyp);
    };
    run(read_lines(ws.corpus(pair, "test", pair.src)), "test");
    if (pair.src == m.challenge_language) run(challenge_text, "challenge");
    spdlog::info("translated {} {}", job.label(), pair.name());
  });
}

void score_bleu(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o) {
  Timer timer{"bleu"};
  const auto units = job_pairs(m, o, false);
  parallel_for(units.size(), o.threads, [&](std::size_t k) {
    const auto& [job, pair] = units[k];
    const auto hyp = read_lines(hyp_path(ws, job, pair, "test"));
    const auto ref = read_lines(ws.corpus(pair, "test", pair.tgt));
    const auto score = bleu(hyp, ref);
    write_json(ws.results(job) / ("bleu_" + pair.name() + ".json"), score);
    spdlog::info("BLEU {} {}: {:.2f}", job.label(), pair.name(), score.bleu);
  });
}

void eval_bias(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o) {
  Timer timer{"eval-bias"};
  const auto units = job_pairs(m, o, true);
  const auto set = ChallengeSet::load(ws.challenge());
  const auto grammars = load_grammars(m.grammars, m.languages());
  const auto& source = grammars.at(m.challenge_language);
  ChallengeSet adjacent;
  std::vector<std::size_t> adjacent_index;
  for (std::size_t k = 0; k < set.size(); ++k) {
    if (pronoun_adjacent(source, set.sentences[k])) {
      adjacent.sentences.push_back(set.sentences[k]);
      adjacent_index.push_back(k);
    }
  }
  parallel_for(units.size(), o.threads, [&](std::size_t k) {
    const auto& [job, pair] = units[k];
    const auto hyp = read_lines(hyp_path(ws, job, pair, "challenge"));
    const GenderDetector det(grammars.at(pair.tgt));
    const auto all = score_bias(hyp, set, det, lexicon_aligner(set, det));
    std::vector<std::string> hyp_adj;
    for (auto i : adjacent_index) hyp_adj.push_back(hyp.at(i));
    const auto adj = score_bias(hyp_adj, adjacent, det, lexicon_aligner(adjacent, det));
    write_json(ws.results(job) / ("bias_" + pair.name() + ".json"), json{{"all", all}, {"adjacent", adj}});
    spdlog::info("bias {} {}: Acc {:.2f} dG {:.1f} dS {:.1f}, adjacent Acc {:.2f}", job.label(), pair.name(), all.accuracy, all.delta_g,
                 all.delta_s, adj.accuracy);
  });
}

void probe_models(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o) {
  Timer timer{"probe"};
  std::vector<Job> jobs;
  for (const auto& j : plan_jobs(m, o.filter))
    if (serves(m.experiment(j.experiment), m.analysis.probe_pair)) jobs.push_back(j);
  const auto set = ChallengeSet::load(ws.challenge());
  parallel_for(jobs.size(), o.threads, [&](std::size_t k) {
    const auto& job = jobs[k];
    const auto assembly = ModelAssembly::load(ws.model(job));
    ProbeProtocol protocol;
    protocol.train_size = m.analysis.probe_train;
    protocol.test_size = m.analysis.probe_test;
    protocol.runs = m.analysis.probe_runs;
    protocol.seed = job.seed;
    std::vector<ProbeRow> rows;
    for (auto word : {ProbeWord::Determiner, ProbeWord::Occupation}) {
      protocol.word = word;
      const auto items = probe_items(assembly, m.analysis.probe_pair, set, word);
      protocol.shuffle_labels = false;
      rows.push_back({job.label(), run_probe(items, protocol)});
      write_text(ws.results(job) / fmt::format("probe_errors_{}.csv", to_string(word)),
                 probe_errors_csv(rows.back().result, rows.back().result.misclassified.size()));
      if (word == ProbeWord::Determiner) {
        protocol.shuffle_labels = true;
        rows.push_back({job.label(), run_probe(items, protocol)});
      }
    }
    write_text(ws.results(job) / "probe.csv", probe_csv(rows));
    for (const auto& r : rows)
      spdlog::info("probe {} {}{}: {:.2f} ± {:.2f}", job.label(), to_string(r.result.word), r.result.shuffled ? " (shuffled)" : "",
                   r.result.mean, r.result.stddev);
  });
}

void analyze_attention(const ExperimentManifest& m, const Workspace& ws, const StageOptions& o) {
  Timer timer{"analyze-attn"};
  const auto layers = o.layers.empty() ? m.analysis.layers : o.layers;
  for (auto l : layers) require(l >= 1 && l <= m.model.layers, ErrorKind::Config, fmt::format("layer {} outside 1..{}", l, m.model.layers));
  std::vector<JobPair> units;
  for (const auto& j : plan_jobs(m, o.filter))
    for (const auto& p : m.analysis.cv_pairs)
      if (serves(m.experiment(j.experiment), p)) units.push_back({j, p});
  const auto set = ChallengeSet::load(ws.challenge());
  const auto grammars = load_grammars(m.grammars, m.languages());
  require(m.analysis.heatmap_sentence < set.size(), ErrorKind::Config, "heatmap sentence outside the challenge set");
  parallel_for(units.size(), o.threads, [&](std::size_t k) {
    const auto& [job, pair] = units[k];
    const auto assembly = ModelAssembly::load(ws.model(job));
    const GenderDetector det(grammars.at(pair.tgt));
    std::vector<CvRecord> records;
    for (auto l : layers) {
      auto r = cv_series(assembly, pair, set, det, l, std::min(m.analysis.cv_sentences, set.size()), job.label());
      records.insert(records.end(), r.begin(), r.end());
    }
    write_text(ws.results(job) / ("cv_" + pair.name() + ".csv"), cv_csv(records));

    const std::string sentence = set.sentences[m.analysis.heatmap_sentence].text;
    const auto out = translate_corpus(assembly, pair, std::span(&sentence, 1), true).front();
    std::vector<std::string> src_labels, tgt_labels;
    const auto& sv = assembly.source_codec(pair.src).vocab;
    const auto& tv = assembly.target_codec(pair.tgt).vocab;
    for (int id : out.source_ids) src_labels.push_back(sv.token(id));
    for (int id : out.ids) tgt_labels.push_back(tv.token(id));
    while (tgt_labels.size() < out.trace.num_steps()) tgt_labels.push_back(tv.token(Vocabulary::kEos));
    for (auto l : layers) {
      write_json(ws.results(job) / fmt::format("contrib_{}_L{}.json", pair.name(), l),
                 contribution_grid(out.trace, l, src_labels, tgt_labels));
    }
    spdlog::info("attention {} {}: {} records", job.label(), pair.name(), records.size());
  });
}

// -------------------------------------------------------------- report

namespace {

struct ResultDir {
  std::string experiment;
  SystemKind kind;
  std::uint64_t seed;
  fs::path path;
  std::string label() const { return Job{experiment, kind, seed}.label(); }
  std::string group() const { return fmt::format("{}/{}", to_string(kind), experiment); }
};

std::vector<ResultDir> scan_results(const fs::path& root) {
  if (!fs::is_directory(root)) fail(ErrorKind::MissingInput, "no results directory at " + root.string());
  std::vector<ResultDir> out;
  for (const auto& e : fs::directory_iterator(root)) {
    if (!e.is_directory()) continue;
    for (const auto& s : fs::directory_iterator(e.path())) {
      if (!s.is_directory()) continue;
      const auto kind = parse_system_kind(s.path().filename().string());
      for (const auto& d : fs::directory_iterator(s.path())) {
        const auto name = d.path().filename().string();
        if (!d.is_directory() || !name.starts_with("seed")) continue;
        out.push_back({e.path().filename().string(), kind, std::stoull(name.substr(4)), d.path()});
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const ResultDir& a, const ResultDir& b) {
    return std::tie(a.experiment, a.kind, a.seed) < std::tie(b.experiment, b.kind, b.seed);
  });
  return out;
}

// Files in dir named <prefix><pair><suffix>, as pair names in sorted order.
std::vector<std::string> pair_files(const fs::path& dir, const std::string& prefix, const std::string& suffix) {
  std::vector<std::string> out;
  for (const auto& f : fs::directory_iterator(dir)) {
    const auto n = f.path().filename().string();
    if (n.size() > prefix.size() + suffix.size() && n.starts_with(prefix) && n.ends_with(suffix))
      out.push_back(n.substr(prefix.size(), n.size() - prefix.size() - suffix.size()));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string safe_name(std::string s) {
  std::replace(s.begin(), s.end(), '/', '_');
  return s;
}

}  // namespace

void write_report(const Workspace& ws) {
  Timer timer{"report"};
  const auto dirs = scan_results(ws.results_root());
  require(!dirs.empty(), ErrorKind::MissingInput, "no results under " + ws.results_root().string());
  const auto out = ws.report();
  std::error_code ec;
  fs::remove_all(out, ec);
  fs::create_directories(out);

  json summary;
  summary["jobs"] = json::array();

  // Table 1: per seed, and pooled over seeds per system/experiment.
  std::vector<ReportRow> per_seed;
  std::map<std::pair<std::string, std::string>, std::pair<ReportRow, std::size_t>> pooled;
  std::vector<std::pair<std::string, std::string>> pooled_order;
  std::string adjacent_csv = "system,experiment,seed,pair,correct,total,accuracy\n";
  std::map<std::string, std::vector<ProbeRow>> probes_by_group;
  std::vector<std::string> group_order;
  std::vector<ProbeRow> probe_rows;
  std::map<std::string, std::map<std::string, std::size_t>> errors_by_group;
  std::vector<CvRecord> all_cv;
  std::string cv_summary = "system,experiment,seed,pair,layer,mean_cv,n,missing\n";

  for (const auto& d : dirs) {
    json job{{"label", d.label()}, {"experiment", d.experiment}, {"system", std::string(to_string(d.kind))}, {"seed", d.seed}};
    append_unique(group_order, d.group());
    for (const auto& pair : pair_files(d.path, "bias_", ".json")) {
      const auto j = parse_json(d.path / ("bias_" + pair + ".json"));
      const auto all = j.at("all").get<BiasReport>();
      const auto adj = j.at("adjacent").get<BiasReport>();
      double b = 0.0;
      if (fs::exists(d.path / ("bleu_" + pair + ".json"))) b = parse_json(d.path / ("bleu_" + pair + ".json")).at("bleu").get<double>();
      per_seed.push_back({d.label(), pair, b, all});
      const auto key = std::make_pair(d.group(), pair);
      auto [it, fresh] = pooled.try_emplace(key, ReportRow{d.group(), pair, 0.0, {}}, 0);
      if (fresh) pooled_order.push_back(key);
      it->second.first.bleu += b;
      it->second.first.bias.merge(all);
      ++it->second.second;
      adjacent_csv += fmt::format("{},{},{},{},{},{},{:.2f}\n", to_string(d.kind), d.experiment, d.seed, pair, adj.overall.correct,
                                  adj.overall.total, adj.accuracy);
      job["pairs"][pair] = {{"bleu", b},           {"accuracy", all.accuracy},          {"delta_g", all.delta_g},
                            {"delta_s", all.delta_s}, {"adjacent_accuracy", adj.accuracy}, {"adjacent_total", adj.overall.total}};
    }
    if (fs::exists(d.path / "probe.csv")) {
      for (auto& row : parse_probe_csv(read_text(d.path / "probe.csv"))) {
        const auto word = std::string(to_string(row.result.word)) + (row.result.shuffled ? "-shuffled" : "");
        job["probe"][word] = {{"mean", row.result.mean}, {"sd", row.result.stddev}, {"runs", row.result.runs.size()}};
        auto& group = probes_by_group[d.group()];
        auto g = std::find_if(group.begin(), group.end(), [&](const ProbeRow& r) {
          return r.result.word == row.result.word && r.result.shuffled == row.result.shuffled;
        });
        if (g == group.end()) {
          group.push_back({d.group(), {}});
          g = group.end() - 1;
          g->result.word = row.result.word;
          g->result.shuffled = row.result.shuffled;
        }
        g->result.runs.insert(g->result.runs.end(), row.result.runs.begin(), row.result.runs.end());
        probe_rows.push_back(std::move(row));
      }
      const auto errors = d.path / "probe_errors_determiner.csv";
      if (fs::exists(errors)) {
        const auto lines = read_lines(errors);
        for (std::size_t i = 1; i < lines.size(); ++i) {
          const auto c1 = lines[i].find(','), c2 = lines[i].rfind(',');
          if (c1 == std::string::npos || c1 == c2) fail(ErrorKind::Parse, errors.string() + ": bad line " + std::to_string(i + 1));
          errors_by_group[d.group()][lines[i].substr(c1 + 1, c2 - c1 - 1)] += std::stoul(lines[i].substr(c2 + 1));
        }
      }
    }
    for (const auto& pair : pair_files(d.path, "cv_", ".csv")) {
      auto records = parse_cv_csv(read_text(d.path / ("cv_" + pair + ".csv")));
      std::map<std::size_t, std::pair<double, std::size_t>> by_layer;
      std::map<std::size_t, std::size_t> missing;
      for (auto& r : records) {
        if (r.cv) {
          by_layer[r.layer].first += *r.cv;
          ++by_layer[r.layer].second;
        } else {
          ++missing[r.layer];
          by_layer.try_emplace(r.layer, 0.0, 0);
        }
        r.model = d.label() + "/" + pair;
        all_cv.push_back(r);
      }
      for (const auto& [layer, acc] : by_layer) {
        const double mean = acc.second ? acc.first / static_cast<double>(acc.second) : 0.0;
        cv_summary += fmt::format("{},{},{},{},{},{:.6f},{},{}\n", to_string(d.kind), d.experiment, d.seed, pair, layer, mean, acc.second,
                                  missing[layer]);
        job["cv"][pair][std::to_string(layer)] = {{"mean", mean}, {"n", acc.second}};
      }
    }
    summary["jobs"].push_back(job);
  }

  std::vector<ReportRow> table;
  for (const auto& key : pooled_order) {
    auto row = pooled.at(key).first;
    row.bleu /= static_cast<double>(pooled.at(key).second);
    table.push_back(row);
  }
  write_text(out / "table1.csv", report_csv(table));
  write_text(out / "table1_seeds.csv", report_csv(per_seed));
  write_text(out / "adjacent.csv", adjacent_csv);

  if (!probe_rows.empty()) {
    write_text(out / "probe.csv", probe_csv(probe_rows));
    std::vector<ProbeRow> fig1;
    std::string probe_summary = "system,word_type,mean,sd,runs\n";
    for (const auto& g : group_order) {
      if (!probes_by_group.count(g)) continue;
      for (auto& row : probes_by_group.at(g)) {
        row.result.summarize();
        probe_summary += fmt::format("{},{}{},{:.4f},{:.4f},{}\n", g, to_string(row.result.word), row.result.shuffled ? "-shuffled" : "",
                                     row.result.mean, row.result.stddev, row.result.runs.size());
        fig1.push_back(row);
      }
    }
    write_text(out / "probe_summary.csv", probe_summary);
    write_text(out / "fig1_probe.svg", probe_bars_svg(fig1));
    for (const auto& [g, counts] : errors_by_group) {
      ProbeResult r;
      r.misclassified = counts;
      write_text(out / ("probe_errors_" + safe_name(g) + ".csv"), probe_errors_csv(r, 20));
    }
  }

  if (!all_cv.empty()) {
    write_text(out / "cv.csv", cv_csv(all_cv));
    write_text(out / "cv_summary.csv", cv_summary);
    // Fig. 5: one chart per experiment, pair and layer, lowest seed of each system.
    std::map<std::string, std::uint64_t> first_seed;
    for (const auto& d : dirs) first_seed.try_emplace(d.group(), d.seed);
    std::map<std::string, std::vector<CvRecord>> charts;
    for (const auto& d : dirs) {
      if (first_seed.at(d.group()) != d.seed) continue;
      for (const auto& pair : pair_files(d.path, "cv_", ".csv")) {
        for (auto r : parse_cv_csv(read_text(d.path / ("cv_" + pair + ".csv")))) {
          r.model = d.group();
          charts[fmt::format("fig5_cv_{}_{}_L{}.svg", d.experiment, pair, r.layer)].push_back(r);
        }
      }
      for (const auto& f : fs::directory_iterator(d.path)) {
        const auto n = f.path().filename().string();
        if (!n.starts_with("contrib_") || !n.ends_with(".json")) continue;
        const auto grid = parse_json(f.path()).get<ContributionGrid>();
        const auto stem = n.substr(std::string_view("contrib_").size(), n.size() - 13);
        write_text(out / fmt::format("fig4_heatmap_{}_{}_{}.svg", d.experiment, to_string(d.kind), stem), heatmap_svg(grid));
      }
    }
    for (const auto& [name, records] : charts) write_text(out / name, cv_bars_svg(records));
  }
  write_json(out / "summary.json", summary);
  spdlog::info("report written to {}", out.string());
}

}  // namespace mnmt
