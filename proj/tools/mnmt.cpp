// mnmt: command-line driver for the bias lab pipeline.
//
// Exit status: 0 on success, 2 when inputs are missing or invalid (files,
// manifest, flags), 1 for any other failure.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "mnmt/bias_eval.hpp"
#include "mnmt/error.hpp"
#include "mnmt/io.hpp"
#include "mnmt/pipeline.hpp"
#include "mnmt/worker_pool.hpp"

#ifndef MNMT_DEFAULT_DATA_DIR
#define MNMT_DEFAULT_DATA_DIR "data"
#endif

namespace fs = std::filesystem;
using namespace mnmt;

namespace {

struct Flags {
  std::string manifest;
  std::string workspace = "workspace";
  std::optional<std::uint64_t> seed;
  std::string preset;
  std::optional<std::size_t> layer;
  std::string system;
  std::size_t threads = 0;
  // eval-bias / bleu on explicit files
  std::string challenge, translations, lang, grammars = std::string(MNMT_DEFAULT_DATA_DIR) + "/grammars", out;
  std::string hyp, ref;
};

void configure_logging() {
  auto logger = spdlog::stderr_color_mt("mnmt");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("MNMT_LOG")) spdlog::set_level(spdlog::level::from_str(env));
}

ExperimentManifest load_manifest(const Flags& f) {
  const fs::path path = f.manifest.empty() ? Workspace(f.workspace).manifest() : fs::path(f.manifest);
  if (!fs::exists(path)) fail(ErrorKind::MissingInput, "manifest not found: " + path.string() + " (pass --manifest)");
  auto j = nlohmann::json::parse(read_text(path), nullptr, false);
  if (j.is_discarded()) fail(ErrorKind::Parse, "manifest is not valid JSON: " + path.string());
  if (!f.preset.empty()) j["preset"] = f.preset;
  return ExperimentManifest::from_json(j, fs::absolute(path).parent_path());
}

StageOptions stage_options(const Flags& f) {
  StageOptions o;
  o.threads = f.threads ? f.threads : default_threads();
  if (!f.system.empty()) o.filter.system = parse_system_kind(f.system);
  o.filter.seed = f.seed;
  if (f.layer) o.layers = {*f.layer};
  return o;
}

using Stage = void (*)(const ExperimentManifest&, const Workspace&, const StageOptions&);

int run_stage(const Flags& f, Stage stage) {
  stage(load_manifest(f), Workspace(f.workspace), stage_options(f));
  return 0;
}

int run_all(const Flags& f) {
  const auto m = load_manifest(f);
  const Workspace ws(f.workspace);
  const auto o = stage_options(f);
  const auto start = std::chrono::steady_clock::now();
  for (auto stage : {gen_corpus, learn_bpe, train_models, translate_models, score_bleu, eval_bias, probe_models, analyze_attention})
    stage(m, ws, o);
  write_report(ws);
  spdlog::info("pipeline finished in {:.1f}s with {} worker(s)",
               std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), o.threads);
  return 0;
}

int eval_bias_files(const Flags& f) {
  if (f.translations.empty() || f.lang.empty()) fail(ErrorKind::MissingInput, "eval-bias on files needs --challenge, --translations and --lang");
  const auto set = ChallengeSet::load(f.challenge);
  const auto grammars = load_grammars(f.grammars, {f.lang});
  const GenderDetector det(grammars.at(f.lang));
  const auto hyp = read_lines(f.translations);
  const auto r = score_bias(hyp, set, det, lexicon_aligner(set, det));
  std::cout << fmt::format("Acc {:.2f}\ndG {:.1f}\ndS {:.1f}\n", r.accuracy, r.delta_g, r.delta_s);
  if (!f.out.empty()) write_text(f.out, nlohmann::json(r).dump(2) + "\n");
  return 0;
}

int bleu_files(const Flags& f) {
  const auto s = bleu(read_lines(f.hyp), read_lines(f.ref));
  std::cout << fmt::format("BLEU {:.2f}\n", s.bleu);
  return 0;
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::MissingInput:
    case ErrorKind::Config:
    case ErrorKind::Parse:
      return 2;
    default:
      return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  Flags f;
  CLI::App app{"Gender-bias lab for multilingual translation models"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  auto common = [&](CLI::App* sub) {
    sub->add_option("--manifest", f.manifest, "Experiment manifest (default: <workspace>/manifest.json)");
    sub->add_option("--workspace", f.workspace, "Workspace directory");
    sub->add_option("--seed", f.seed, "Run only this model seed");
    sub->add_option("--preset", f.preset, "Model and schedule preset")->check(CLI::IsMember({"paper", "desk"}));
    sub->add_option("--layer", f.layer, "Decoder layer for attention analysis")->check(CLI::Range(1, 64));
    sub->add_option("--system", f.system, "Restrict to one system")->check(CLI::IsMember({"bilingual", "shared", "lang-spec"}));
    sub->add_option("--threads", f.threads, "Worker threads (default: MNMT_THREADS or all cores)");
  };

  std::vector<std::pair<CLI::App*, std::function<int()>>> handlers;
  auto stage = [&](const char* name, const char* help, Stage s) {
    auto* sub = app.add_subcommand(name, help);
    common(sub);
    handlers.emplace_back(sub, [&f, s] { return run_stage(f, s); });
    return sub;
  };
  stage("gen-corpus", "Generate parallel toy corpora and the challenge set", gen_corpus);
  stage("learn-bpe", "Learn BPE vocabularies per experiment", learn_bpe);
  stage("train", "Train every system and seed in the manifest", train_models);
  stage("translate", "Translate test sets and the challenge set", translate_models);
  stage("probe", "Gender probes on source embeddings", probe_models);
  stage("analyze-attn", "Contribution norms and c_v of cross-attention", analyze_attention);

  auto* bleu_cmd = app.add_subcommand("bleu", "Corpus BLEU of the test translations, or of --hyp against --ref");
  common(bleu_cmd);
  bleu_cmd->add_option("--hyp", f.hyp, "Hypothesis file");
  bleu_cmd->add_option("--ref", f.ref, "Reference file");
  handlers.emplace_back(bleu_cmd, [&] { return f.hyp.empty() ? run_stage(f, score_bleu) : bleu_files(f); });

  auto* bias_cmd = app.add_subcommand("eval-bias", "Gender accuracy on the challenge set, or on explicit files");
  common(bias_cmd);
  bias_cmd->add_option("--challenge", f.challenge, "Challenge set TSV");
  bias_cmd->add_option("--translations", f.translations, "One translation per challenge sentence");
  bias_cmd->add_option("--lang", f.lang, "Target language of the translations");
  bias_cmd->add_option("--grammars", f.grammars, "Grammar directory");
  bias_cmd->add_option("--out", f.out, "Write the full report as JSON");
  handlers.emplace_back(bias_cmd, [&] { return f.challenge.empty() ? run_stage(f, eval_bias) : eval_bias_files(f); });

  auto* report_cmd = app.add_subcommand("report", "Assemble tables and figures from workspace results");
  common(report_cmd);
  handlers.emplace_back(report_cmd, [&] {
    write_report(Workspace(f.workspace));
    return 0;
  });

  auto* all_cmd = app.add_subcommand("all", "Run every stage from gen-corpus to report");
  common(all_cmd);
  handlers.emplace_back(all_cmd, [&] { return run_all(f); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  try {
    for (auto& [sub, fn] : handlers)
      if (sub->parsed()) return fn();
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return 1;
  }
  return 1;
}
