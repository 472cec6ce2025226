#include "mnmt/attention_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "mnmt/assemblies.hpp"
#include "mnmt/bias_eval.hpp"
#include "mnmt/error.hpp"
#include "mnmt/svg.hpp"

namespace mnmt {

std::vector<std::vector<double>> contribution_vectors(const AttentionTrace& trace, std::size_t layer, std::size_t t) {
  if (layer == 0 || layer > trace.layers) fail(ErrorKind::Bounds, "decoder layer " + std::to_string(layer) + " out of range");
  if (t >= trace.num_steps()) fail(ErrorKind::Bounds, "step " + std::to_string(t) + " beyond " + std::to_string(trace.num_steps()));
  const auto d = trace.model_dim;
  std::vector<std::vector<double>> out(trace.src_len, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < trace.heads; ++h) {
    const auto f = head_transform(trace, layer - 1, h);
    const auto fd = f.data();
    for (std::size_t i = 0; i < trace.src_len; ++i) {
      const double a = trace.alpha(layer - 1, h, t, i);
      for (std::size_t j = 0; j < d; ++j) out[i][j] += a * fd[i * d + j];
    }
  }
  return out;
}

ContributionRow contributions(const AttentionTrace& trace, std::size_t layer, std::size_t t, std::size_t sentence) {
  ContributionRow row{sentence, layer, t, {}};
  for (const auto& v : contribution_vectors(trace, layer, t)) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    row.c.push_back(std::sqrt(sq));
  }
  return row;
}

double coefficient_of_variation(std::span<const double> row) {
  if (row.empty()) fail(ErrorKind::Degenerate, "coefficient of variation of an empty row");
  double sum = 0.0;
  for (double x : row) sum += x;
  const double n = static_cast<double>(row.size());
  const double mean = sum / n;
  if (mean == 0.0) fail(ErrorKind::Degenerate, "coefficient of variation with zero mean");
  double ss = 0.0;
  for (double x : row) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / n) / mean;
}

std::optional<std::size_t> determiner_step(const TranslationOutput& translation, const ModelAssembly& assembly,
                                           const std::string& tgt_lang, const GenderDetector& detector,
                                           const std::string& lemma) {
  const auto pieces = assembly.target_codec(tgt_lang).vocab.decode(translation.ids);
  const auto owner = subword_word_index(pieces);
  const auto words = split_words(detokenize(pieces));
  const auto noun = detector.find(words, lemma);
  if (!noun) return std::nullopt;
  std::size_t target = *noun;
  if (detector.has_determiners()) {
    if (target == 0 || !detector.is_determiner(words[target - 1])) return std::nullopt;
    --target;
  }
  for (std::size_t p = 0; p < owner.size(); ++p)
    if (owner[p] == target) return p;
  return std::nullopt;
}

std::vector<CvRecord> cv_series(const ModelAssembly& assembly, const LanguagePair& pair, const ChallengeSet& set,
                                const GenderDetector& detector, std::size_t layer, std::size_t n, const std::string& model) {
  if (n > set.size()) fail(ErrorKind::Bounds, fmt::format("{} sentences requested from a set of {}", n, set.size()));
  std::vector<std::string> texts;
  for (std::size_t k = 0; k < n; ++k) texts.push_back(set.sentences[k].text);
  const auto outputs = translate_corpus(assembly, pair, texts, true);
  std::vector<CvRecord> records;
  for (std::size_t k = 0; k < n; ++k) {
    CvRecord r{k, layer, model, std::nullopt, std::nullopt, !detector.has_determiners()};
    r.step = determiner_step(outputs[k], assembly, pair.tgt, detector, set.sentences[k].lemma);
    if (r.step && *r.step < outputs[k].trace.num_steps()) {
      try {
        r.cv = coefficient_of_variation(contributions(outputs[k].trace, layer, *r.step, k).c);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::Degenerate) throw;
      }
    }
    records.push_back(std::move(r));
  }
  return records;
}

std::string cv_csv(std::span<const CvRecord> records) {
  std::string out = "sentence_id,layer,model,step,cv,note\n";
  for (const auto& r : records) {
    std::string note = r.noun_step ? "noun-step" : "";
    if (!r.cv) note += note.empty() ? "missing" : ";missing";
    out += fmt::format("{},{},{},{},{},{}\n", r.sentence, r.layer, r.model, r.step ? std::to_string(*r.step) : "",
                       r.cv ? fmt::format("{:.6f}", *r.cv) : "", note);
  }
  return out;
}

std::vector<CvRecord> parse_cv_csv(std::string_view text) {
  std::vector<CvRecord> out;
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    start = end + 1;
    if (line_no++ == 0 || line.empty()) continue;
    std::vector<std::string> f;
    std::size_t p = 0;
    while (true) {
      const auto q = line.find(',', p);
      f.emplace_back(line.substr(p, q == std::string_view::npos ? std::string_view::npos : q - p));
      if (q == std::string_view::npos) break;
      p = q + 1;
    }
    if (f.size() != 6) fail(ErrorKind::Parse, fmt::format("cv.csv line {}: expected 6 fields, got {}", line_no, f.size()));
    try {
      CvRecord r;
      r.sentence = std::stoul(f[0]);
      r.layer = std::stoul(f[1]);
      r.model = f[2];
      if (!f[3].empty()) r.step = std::stoul(f[3]);
      if (!f[4].empty()) r.cv = std::stod(f[4]);
      r.noun_step = f[5].find("noun-step") != std::string::npos;
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      fail(ErrorKind::Parse, fmt::format("cv.csv line {}: bad number", line_no));
    }
  }
  return out;
}

ContributionGrid contribution_grid(const AttentionTrace& trace, std::size_t layer, std::span<const std::string> source_labels,
                                   std::span<const std::string> target_labels) {
  ContributionGrid g;
  auto label = [](std::span<const std::string> labels, std::size_t k) { return k < labels.size() ? labels[k] : std::to_string(k); };
  for (std::size_t i = 0; i < trace.src_len; ++i) g.source.push_back(label(source_labels, i));
  for (std::size_t t = 0; t < trace.num_steps(); ++t) {
    g.target.push_back(label(target_labels, t));
    g.cells.push_back(contributions(trace, layer, t).c);
  }
  return g;
}

void to_json(nlohmann::json& j, const ContributionGrid& g) { j = {{"source", g.source}, {"target", g.target}, {"cells", g.cells}}; }

void from_json(const nlohmann::json& j, ContributionGrid& g) {
  j.at("source").get_to(g.source);
  j.at("target").get_to(g.target);
  j.at("cells").get_to(g.cells);
  require(g.cells.size() == g.target.size(), ErrorKind::Parse, "contribution grid rows do not match target labels");
  for (const auto& row : g.cells)
    require(row.size() == g.source.size(), ErrorKind::Parse, "contribution grid row does not match source labels");
}

std::string heatmap_svg(const ContributionGrid& grid) {
  const std::size_t rows = grid.cells.size(), cols = grid.source.size();
  double peak = 0.0;
  for (const auto& row : grid.cells)
    for (double c : row) peak = std::max(peak, c);
  const double cell = 24.0, left = 90.0, top = 90.0;
  SvgDoc svg(left + cell * static_cast<double>(cols) + 10.0, top + cell * static_cast<double>(rows) + 10.0);
  for (std::size_t i = 0; i < cols; ++i) {
    svg.text(left + cell * (static_cast<double>(i) + 0.5), top - 6.0, grid.source[i], 10.0, "start", -60.0);
  }
  for (std::size_t t = 0; t < rows; ++t) {
    const double y = top + cell * static_cast<double>(t);
    svg.text(left - 6.0, y + cell * 0.65, grid.target[t], 10.0, "end");
    for (std::size_t i = 0; i < cols; ++i) {
      const double v = peak > 0.0 ? grid.cells[t][i] / peak : 0.0;
      svg.rect(left + cell * static_cast<double>(i), y, cell, cell, grey(v), fmt::format("t={} i={} c={:.6f}", t, i, grid.cells[t][i]));
    }
  }
  return svg.str();
}

std::string heatmap_svg(const AttentionTrace& trace, std::size_t layer, std::span<const std::string> source_labels,
                        std::span<const std::string> target_labels) {
  return heatmap_svg(contribution_grid(trace, layer, source_labels, target_labels));
}

std::string cv_bars_svg(std::span<const CvRecord> records) {
  std::vector<std::string> models;
  for (const auto& r : records)
    if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
  double peak = 0.0;
  for (const auto& r : records)
    if (r.cv) peak = std::max(peak, *r.cv);
  if (peak == 0.0) peak = 1.0;
  const double bar = 6.0, gap = 24.0, left = 50.0, top = 30.0, height = 200.0;
  std::vector<std::vector<const CvRecord*>> groups(models.size());
  for (const auto& r : records) groups[std::find(models.begin(), models.end(), r.model) - models.begin()].push_back(&r);
  double width = left;
  for (const auto& g : groups) width += bar * static_cast<double>(g.size()) + gap;
  SvgDoc svg(width + 10.0, top + height + 40.0);
  svg.line(left - 4.0, top, left - 4.0, top + height);
  svg.line(left - 4.0, top + height, width, top + height);
  svg.text(left - 8.0, top + 4.0, fmt::format("{:.2f}", peak), 9.0, "end");
  svg.text(left - 8.0, top + height, "0", 9.0, "end");
  static constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  double x = left;
  for (std::size_t m = 0; m < groups.size(); ++m) {
    const auto colour = kPalette[m % std::size(kPalette)];
    const double start = x;
    for (const auto* r : groups[m]) {
      if (r->cv) {
        const double h = height * *r->cv / peak;
        svg.rect(x, top + height - h, bar - 1.0, h, colour, fmt::format("{} sentence {} cv={:.6f}", r->model, r->sentence, *r->cv));
      }
      x += bar;
    }
    svg.text((start + x) / 2.0, top + height + 16.0, models[m], 11.0, "middle");
    x += gap;
  }
  svg.text(left, 16.0, "coefficient of variation at the determiner step", 12.0);
  return svg.str();
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& s) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << s;
  if (!out) fail(ErrorKind::Io, "failed writing " + path.string());
}

}  // namespace

void export_heatmap(const AttentionTrace& trace, std::size_t layer, const std::filesystem::path& path,
                    std::span<const std::string> source_labels, std::span<const std::string> target_labels) {
  write_text(path, heatmap_svg(trace, layer, source_labels, target_labels));
}

void export_cv_bars(std::span<const CvRecord> records, const std::filesystem::path& path) { write_text(path, cv_bars_svg(records)); }

}  // namespace mnmt
