#include "mnmt/probing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "mnmt/assemblies.hpp"
#include "mnmt/error.hpp"
#include "mnmt/rng.hpp"
#include "mnmt/svg.hpp"
#include "mnmt/tensor.hpp"

namespace mnmt {

double rbf_kernel(std::span<const double> a, std::span<const double> b, double gamma) {
  require(a.size() == b.size(), ErrorKind::Dimension, fmt::format("kernel of {}- and {}-dimensional vectors", a.size(), b.size()));
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  return std::exp(-gamma * sq);
}

double default_gamma(const Matrix& x) {
  if (x.empty() || x.front().empty()) return 1.0;
  double sum = 0.0, n = 0.0;
  for (const auto& r : x)
    for (double v : r) sum += v, n += 1.0;
  const double mean = sum / n;
  double ss = 0.0;
  for (const auto& r : x)
    for (double v : r) ss += (v - mean) * (v - mean);
  const double var = ss / n;
  return var > 0.0 ? 1.0 / (static_cast<double>(x.front().size()) * var) : 1.0;
}

namespace {

void check_inputs(const Matrix& x, std::span<const int> y) {
  require(x.size() == y.size(), ErrorKind::Dimension, fmt::format("{} rows but {} labels", x.size(), y.size()));
  require(x.size() >= 2, ErrorKind::Domain, "an SVM needs at least two training points");
  const auto d = x.front().size();
  bool pos = false, neg = false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    require(x[i].size() == d, ErrorKind::Dimension, "ragged training matrix");
    require(y[i] == 1 || y[i] == -1, ErrorKind::Domain, "labels must be +1 or -1");
    (y[i] > 0 ? pos : neg) = true;
  }
  require(pos && neg, ErrorKind::Domain, "SVM training data has a single class");
}

bool in_up(double a, int y, double c) { return (y > 0 && a < c) || (y < 0 && a > 0.0); }
bool in_low(double a, int y, double c) { return (y > 0 && a > 0.0) || (y < 0 && a < c); }

// m(α) − M(α) with G the dual gradient Qα − e.
double violation(std::span<const double> alpha, std::span<const int> y, std::span<const double> g, double c) {
  double up = -std::numeric_limits<double>::infinity(), low = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < alpha.size(); ++t) {
    const double v = -y[t] * g[t];
    if (in_up(alpha[t], y[t], c)) up = std::max(up, v);
    if (in_low(alpha[t], y[t], c)) low = std::min(low, v);
  }
  return up - low;
}

}  // namespace

SvmModel svm_train(const Matrix& x, std::span<const int> y, const SvmOptions& options) {
  check_inputs(x, y);
  require(options.c > 0.0, ErrorKind::Config, "SVM C must be positive");
  const std::size_t n = x.size();
  const double c = options.c;
  const double gamma = options.gamma ? *options.gamma : default_gamma(x);

  std::vector<double> k(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    k[i * n + i] = 1.0;
    for (std::size_t j = 0; j < i; ++j) k[i * n + j] = k[j * n + i] = rbf_kernel(x[i], x[j], gamma);
  }
  auto q = [&](std::size_t i, std::size_t j) { return y[i] * y[j] * k[i * n + j]; };

  std::vector<double> alpha(n, 0.0), g(n, -1.0);
  std::size_t iter = 0;
  for (; iter < options.max_iter; ++iter) {
    // Maximal violating pair; strict comparisons keep the lowest index.
    std::size_t i = n, j = n;
    double up = -std::numeric_limits<double>::infinity(), low = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < n; ++t) {
      const double v = -y[t] * g[t];
      if (in_up(alpha[t], y[t], c) && v > up) up = v, i = t;
      if (in_low(alpha[t], y[t], c) && v < low) low = v, j = t;
    }
    if (i == n || j == n || up - low < options.tol) break;

    const double ai = alpha[i], aj = alpha[j];
    if (y[i] != y[j]) {
      double quad = k[i * n + i] + k[j * n + j] + 2.0 * k[i * n + j];
      if (quad <= 0.0) quad = 1e-12;
      const double delta = (-g[i] - g[j]) / quad;
      const double diff = ai - aj;
      alpha[i] += delta;
      alpha[j] += delta;
      if (diff > 0.0) {
        if (alpha[j] < 0.0) alpha[j] = 0.0, alpha[i] = diff;
      } else if (alpha[i] < 0.0) {
        alpha[i] = 0.0, alpha[j] = -diff;
      }
      if (diff > 0.0) {
        if (alpha[i] > c) alpha[i] = c, alpha[j] = c - diff;
      } else if (alpha[j] > c) {
        alpha[j] = c, alpha[i] = c + diff;
      }
    } else {
      double quad = k[i * n + i] + k[j * n + j] - 2.0 * k[i * n + j];
      if (quad <= 0.0) quad = 1e-12;
      const double delta = (g[i] - g[j]) / quad;
      const double sum = ai + aj;
      alpha[i] -= delta;
      alpha[j] += delta;
      if (sum > c) {
        if (alpha[i] > c) alpha[i] = c, alpha[j] = sum - c;
      } else if (alpha[j] < 0.0) {
        alpha[j] = 0.0, alpha[i] = sum;
      }
      if (sum > c) {
        if (alpha[j] > c) alpha[j] = c, alpha[i] = sum - c;
      } else if (alpha[i] < 0.0) {
        alpha[i] = 0.0, alpha[j] = sum;
      }
    }
    const double di = alpha[i] - ai, dj = alpha[j] - aj;
    for (std::size_t t = 0; t < n; ++t) g[t] += q(t, i) * di + q(t, j) * dj;
  }
  if (iter == options.max_iter) spdlog::warn("SMO stopped at the iteration cap ({}) with gap {:.3g}", iter, violation(alpha, y, g, c));

  // b from the free support vectors, or the middle of the feasible interval.
  double sum_free = 0.0, ub = std::numeric_limits<double>::infinity(), lb = -std::numeric_limits<double>::infinity();
  std::size_t free = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double v = -y[t] * g[t];
    if (alpha[t] > 0.0 && alpha[t] < c) {
      sum_free += v;
      ++free;
    } else if ((alpha[t] >= c && y[t] < 0) || (alpha[t] <= 0.0 && y[t] > 0)) {
      ub = std::min(ub, v);
    } else {
      lb = std::max(lb, v);
    }
  }
  SvmModel m;
  m.bias = free ? sum_free / static_cast<double>(free) : (ub + lb) / 2.0;
  m.gamma = gamma;
  m.c = c;
  m.iterations = iter;
  for (std::size_t t = 0; t < n; ++t) {
    if (alpha[t] > 0.0) {
      m.support_vectors.push_back(x[t]);
      m.alpha.push_back(alpha[t]);
      m.labels.push_back(y[t]);
    }
  }
  return m;
}

SvmPrediction svm_predict(const SvmModel& model, std::span<const double> x) {
  require(model.support_vectors.empty() || x.size() == model.dim(), ErrorKind::Dimension,
          fmt::format("model expects {} features, got {}", model.dim(), x.size()));
  double f = model.bias;
  for (std::size_t i = 0; i < model.support_vectors.size(); ++i)
    f += model.alpha[i] * model.labels[i] * rbf_kernel(model.support_vectors[i], x, model.gamma);
  return {f >= 0.0 ? 1 : -1, f};
}

double kkt_gap(const SvmModel& model, const Matrix& x, std::span<const int> y) {
  check_inputs(x, y);
  // Recover α for each training row by matching it against the support vectors.
  std::vector<double> alpha(x.size(), 0.0), g(x.size());
  std::vector<bool> used(model.support_vectors.size(), false);
  for (std::size_t t = 0; t < x.size(); ++t) {
    for (std::size_t s = 0; s < model.support_vectors.size(); ++s) {
      if (!used[s] && model.labels[s] == y[t] && model.support_vectors[s] == x[t]) {
        alpha[t] = model.alpha[s];
        used[s] = true;
        break;
      }
    }
  }
  for (std::size_t t = 0; t < x.size(); ++t) g[t] = y[t] * (svm_predict(model, x[t]).margin - model.bias) - 1.0;
  return std::max(0.0, violation(alpha, y, g, model.c));
}

std::string_view to_string(ProbeWord w) noexcept { return w == ProbeWord::Determiner ? "determiner" : "occupation"; }

ProbeWord parse_probe_word(std::string_view s) {
  if (s == "determiner") return ProbeWord::Determiner;
  if (s == "occupation") return ProbeWord::Occupation;
  fail(ErrorKind::Config, "unknown probe word type '" + std::string(s) + "'");
}

std::vector<double> extract_embedding(const ModelAssembly& assembly, const LanguagePair& pair, const std::string& sentence,
                                      std::size_t word_index) {
  const auto words = split_words(sentence);
  if (word_index >= words.size()) {
    fail(ErrorKind::Extraction, fmt::format("word {} not in \"{}\" ({} words)", word_index, sentence, words.size()));
  }
  const auto pos = first_subword_index(assembly.source_codec(pair.src).bpe, words, word_index) + assembly.source_offset();
  NoGradGuard no_grad;
  const auto states = assembly.encoder(pair.src).encode(assembly.source_ids(pair, sentence));
  const auto d = states.states.dim(1);
  const auto row = states.states.data().subspan(pos * d, d);
  return {row.begin(), row.end()};
}

void ProbeProtocol::validate(std::size_t available) const {
  require(runs >= 1, ErrorKind::Config, "a probe needs at least one run");
  require(train_size >= 2, ErrorKind::Config, "probe train size must be at least 2");
  require(train_size < available, ErrorKind::Config,
          fmt::format("probe train size {} leaves no test data among {} labelled sentences", train_size, available));
}

void ProbeResult::summarize() {
  const double n = static_cast<double>(runs.size());
  double sum = 0.0;
  for (const auto& r : runs) sum += r.accuracy;
  mean = runs.empty() ? 0.0 : sum / n;
  double ss = 0.0;
  for (const auto& r : runs) ss += (r.accuracy - mean) * (r.accuracy - mean);
  stddev = runs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
}

std::vector<ProbeItem> probe_items(const ModelAssembly& assembly, const LanguagePair& pair, const ChallengeSet& set, ProbeWord word) {
  std::vector<ProbeItem> items;
  for (const auto& s : set.sentences) {
    if (s.gold == Gender::Neutral) continue;
    std::size_t index = s.entity_index;
    if (word == ProbeWord::Determiner) {
      if (index == 0) fail(ErrorKind::Extraction, "no determiner before the entity in \"" + s.text + "\"");
      --index;
    }
    items.push_back({extract_embedding(assembly, pair, s.text, index), s.gold == Gender::Male ? 1 : -1, s.lemma});
  }
  return items;
}

ProbeResult run_probe(std::span<const ProbeItem> items, const ProbeProtocol& protocol) {
  protocol.validate(items.size());
  ProbeResult result;
  for (std::size_t run = 0; run < protocol.runs; ++run) {
    auto rng = make_rng(protocol.seed, 0x9e0b0000 + run);
    std::vector<std::size_t> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    stable_shuffle(order.begin(), order.end(), rng);
    const auto train_n = protocol.train_size;
    const auto test_n = std::min(protocol.test_size, items.size() - train_n);
    Matrix x;
    std::vector<int> y;
    ProbeRun r;
    for (std::size_t i = 0; i < train_n; ++i) {
      x.push_back(items[order[i]].embedding);
      y.push_back(items[order[i]].label);
    }
    if (protocol.shuffle_labels) stable_shuffle(y.begin(), y.end(), rng);
    for (int l : y) (l > 0 ? r.train_male : r.train_female)++;
    auto options = protocol.svm;
    const auto model = svm_train(x, y, options);
    r.kkt_gap = kkt_gap(model, x, y);
    std::size_t correct = 0;
    for (std::size_t i = train_n; i < train_n + test_n; ++i) {
      const auto& it = items[order[i]];
      if (svm_predict(model, it.embedding).label == it.label) {
        ++correct;
      } else {
        ++result.misclassified[it.lemma];
      }
    }
    r.test_size = test_n;
    r.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(test_n);
    spdlog::debug("probe run {}: {:.2f}% ({} SVs, {} iterations, train {}m/{}f)", run, r.accuracy, model.alpha.size(), model.iterations,
                  r.train_male, r.train_female);
    result.runs.push_back(r);
  }
  result.word = protocol.word;
  result.shuffled = protocol.shuffle_labels;
  result.summarize();
  return result;
}

ProbeResult run_probe(const ModelAssembly& assembly, const LanguagePair& pair, const ChallengeSet& set, const ProbeProtocol& protocol) {
  const auto items = probe_items(assembly, pair, set, protocol.word);
  return run_probe(items, protocol);
}

std::string probe_csv(std::span<const ProbeRow> rows) {
  std::string out = "system,word_type,run,accuracy\n";
  for (const auto& row : rows)
    for (std::size_t r = 0; r < row.result.runs.size(); ++r)
      out += fmt::format("{},{}{},{},{:.4f}\n", row.system, to_string(row.result.word), row.result.shuffled ? "-shuffled" : "", r,
                         row.result.runs[r].accuracy);
  return out;
}

std::vector<ProbeRow> parse_probe_csv(std::string_view text) {
  std::vector<ProbeRow> rows;
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string line(text.substr(start, end - start));
    start = end + 1;
    if (line_no++ == 0 || line.empty()) continue;
    const auto c1 = line.find(','), c2 = line.find(',', c1 + 1), c3 = line.find(',', c2 + 1);
    if (c3 == std::string::npos || line.find(',', c3 + 1) != std::string::npos)
      fail(ErrorKind::Parse, fmt::format("probe.csv line {}: expected 4 fields", line_no));
    const auto system = line.substr(0, c1);
    auto word = line.substr(c1 + 1, c2 - c1 - 1);
    const bool shuffled = word.ends_with("-shuffled");
    if (shuffled) word.resize(word.size() - std::string_view("-shuffled").size());
    ProbeRun run;
    try {
      run.accuracy = std::stod(line.substr(c3 + 1));
    } catch (const std::logic_error&) {
      fail(ErrorKind::Parse, fmt::format("probe.csv line {}: bad accuracy", line_no));
    }
    const auto w = parse_probe_word(word);
    auto it = std::find_if(rows.begin(), rows.end(),
                           [&](const ProbeRow& r) { return r.system == system && r.result.word == w && r.result.shuffled == shuffled; });
    if (it == rows.end()) {
      rows.push_back({system, {}});
      it = rows.end() - 1;
      it->result.word = w;
      it->result.shuffled = shuffled;
    }
    it->result.runs.push_back(run);
  }
  for (auto& r : rows) r.result.summarize();
  return rows;
}

std::string probe_errors_csv(const ProbeResult& result, std::size_t k) {
  std::vector<std::pair<std::string, std::size_t>> ranked(result.misclassified.begin(), result.misclassified.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > k) ranked.resize(k);
  std::string out = "rank,word,count\n";
  for (std::size_t i = 0; i < ranked.size(); ++i) out += fmt::format("{},{},{}\n", i + 1, ranked[i].first, ranked[i].second);
  return out;
}

std::string probe_bars_svg(std::span<const ProbeRow> rows) {
  const double bar = 28.0, gap = 10.0, left = 50.0, top = 30.0, height = 220.0;
  SvgDoc svg(left + (bar + gap) * static_cast<double>(rows.size()) + 20.0, top + height + 90.0);
  auto y_of = [&](double acc) { return top + height * (1.0 - acc / 100.0); };
  for (int tick = 0; tick <= 100; tick += 25) {
    svg.line(left - 4.0, y_of(tick), left + (bar + gap) * static_cast<double>(rows.size()), y_of(tick), "#ddd");
    svg.text(left - 8.0, y_of(tick) + 3.0, std::to_string(tick), 9.0, "end");
  }
  double x = left;
  for (const auto& row : rows) {
    const auto& r = row.result;
    const auto colour = r.shuffled ? "#999999" : r.word == ProbeWord::Determiner ? "#1f77b4" : "#ff7f0e";
    const auto word = std::string(to_string(r.word)) + (r.shuffled ? "-shuffled" : "");
    svg.rect(x, y_of(r.mean), bar, height * r.mean / 100.0, colour, fmt::format("{} {} mean={:.2f} sd={:.2f}", row.system, word, r.mean, r.stddev));
    const double cx = x + bar / 2.0;
    svg.line(cx, y_of(std::min(100.0, r.mean + r.stddev)), cx, y_of(std::max(0.0, r.mean - r.stddev)));
    svg.text(cx, top + height + 12.0, fmt::format("{} ({})", row.system, word), 9.0, "end", -45.0);
    x += bar + gap;
  }
  svg.text(left, 16.0, "probe accuracy (%), mean and standard deviation over runs", 12.0);
  return svg.str();
}

}  // namespace mnmt
