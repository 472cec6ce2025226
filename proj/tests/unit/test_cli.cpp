#include <array>
#include <cstdio>
#include <filesystem>
#include <string>

#include <sys/wait.h>

#include "bias_fixtures.hpp"
#include "doctest.h"
#include "mnmt/io.hpp"
#include "mnmt/toy_corpus.hpp"

namespace fs = std::filesystem;
using namespace mnmt;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run_cli(const std::string& args) {
  const auto cmd = std::string("\"") + MNMT_BINARY + "\" " + args + " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  while (auto n = std::fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("mnmt_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("exit codes") {
  const auto dir = scratch("codes");
  CHECK(run_cli("").code == 2);
  CHECK(run_cli("train --bogus").code == 2);
  CHECK(run_cli("train --system nonsense").code == 2);
  CHECK(run_cli("train --manifest " + (dir / "missing.json").string()).code == 2);
  write_text(dir / "bad.json", "{ not json");
  CHECK(run_cli("gen-corpus --manifest " + (dir / "bad.json").string()).code == 2);
  write_text(dir / "empty.json", "{\"experiments\": []}");
  CHECK(run_cli("gen-corpus --workspace " + (dir / "ws").string() + " --manifest " + (dir / "empty.json").string()).code == 2);
  CHECK(run_cli("report --workspace " + (dir / "nothing").string()).code == 2);
  CHECK(run_cli("--help").code == 0);
}

TEST_CASE("eval-bias on an all-masculine translation prints 46.97") {
  const auto dir = scratch("bias");
  const auto grammars = load_grammars(MNMT_TEST_DATA_DIR "/grammars", {"en", "de"});
  const auto set = gen_challenge(grammars.at("en"), Composition::paper_replica(), 3);
  set.save(dir / "challenge.tsv");
  std::vector<std::string> tr;
  for (const auto& s : set.sentences) tr.push_back(testing::entity_phrase(grammars.at("de"), s.lemma, Gender::Male) + " kam");
  write_lines(dir / "hyp.txt", tr);
  const auto r = run_cli("eval-bias --challenge " + (dir / "challenge.tsv").string() + " --translations " + (dir / "hyp.txt").string() +
                      " --lang de --grammars " MNMT_TEST_DATA_DIR "/grammars --out " + (dir / "r.json").string());
  CHECK(r.code == 0);
  CHECK(r.out.starts_with("Acc 46.97\ndG 100.0\ndS "));
  CHECK(fs::exists(dir / "r.json"));
  CHECK(run_cli("eval-bias --challenge " + (dir / "challenge.tsv").string() + " --lang de").code == 2);
}

TEST_CASE("bleu on explicit files") {
  const auto dir = scratch("bleu");
  write_lines(dir / "ref.txt", std::vector<std::string>{"the cat sat on a mat", "a dog runs fast"});
  write_lines(dir / "hyp.txt", std::vector<std::string>{"the cat sat on the mat", "a dog runs very fast"});
  CHECK(run_cli("bleu --hyp " + (dir / "ref.txt").string() + " --ref " + (dir / "ref.txt").string()).out == "BLEU 100.00\n");
  CHECK(run_cli("bleu --hyp " + (dir / "hyp.txt").string() + " --ref " + (dir / "ref.txt").string()).out == "BLEU 44.43\n");
  CHECK(run_cli("bleu --hyp " + (dir / "none.txt").string() + " --ref " + (dir / "ref.txt").string()).code == 2);
}

TEST_CASE("report reproduces the golden outputs from results alone") {
  const fs::path fixture = MNMT_TEST_FIXTURE_DIR "/report_ws";
  const auto ws = scratch("report");
  fs::copy(fixture / "results", ws / "results", fs::copy_options::recursive);
  REQUIRE(run_cli("report --workspace " + ws.string()).code == 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(fixture / "expected")) {
    CAPTURE(e.path().filename().string());
    const auto got = ws / "report" / e.path().filename();
    REQUIRE(fs::exists(got));
    CHECK(read_text(got) == read_text(e.path()));
    ++files;
  }
  std::size_t produced = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(ws / "report")) ++produced;
  CHECK(produced == files);
}
