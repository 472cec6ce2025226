#include "mnmt/tokenizer.hpp"

#include <algorithm>

#include "mnmt/error.hpp"
#include "mnmt/io.hpp"

namespace mnmt {

namespace {

std::string pair_key(const std::string& l, const std::string& r) {
  std::string k;
  k.reserve(l.size() + r.size() + 1);
  k += l;
  k += '\x1f';
  k += r;
  return k;
}

bool ends_with_marker(std::string_view s) {
  return s.size() >= kEndOfWord.size() && s.substr(s.size() - kEndOfWord.size()) == kEndOfWord;
}

std::vector<std::string> initial_symbols(std::string_view word) {
  auto syms = split_utf8(word);
  if (!syms.empty()) syms.back() += kEndOfWord;
  return syms;
}

// Merges every non-overlapping occurrence of (l, r), scanning left to right.
void merge_in_place(std::vector<std::string>& syms, const std::string& l, const std::string& r) {
  std::vector<std::string> out;
  out.reserve(syms.size());
  for (std::size_t i = 0; i < syms.size();) {
    if (i + 1 < syms.size() && syms[i] == l && syms[i + 1] == r) {
      out.push_back(l + r);
      i += 2;
    } else {
      out.push_back(std::move(syms[i]));
      ++i;
    }
  }
  syms = std::move(out);
}

}  // namespace

std::vector<std::string> split_utf8(std::string_view word) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < word.size();) {
    const auto c = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    len = std::min(len, word.size() - i);
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  return out;
}

std::vector<std::string> split_words(std::string_view sentence) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < sentence.size()) {
    while (i < sentence.size() && (sentence[i] == ' ' || sentence[i] == '\t' || sentence[i] == '\n' || sentence[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < sentence.size() && !(sentence[j] == ' ' || sentence[j] == '\t' || sentence[j] == '\n' || sentence[j] == '\r')) ++j;
    if (j > i) out.emplace_back(sentence.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

BpeModel::BpeModel(std::vector<Merge> merges) : merges_(std::move(merges)) {
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    auto [it, inserted] = ranks_.emplace(pair_key(merges_[i].left, merges_[i].right), i);
    if (!inserted) fail(ErrorKind::Parse, "duplicate merge '" + merges_[i].left + " " + merges_[i].right + "'");
  }
}

BpeModel BpeModel::learn(std::span<const std::string> words, std::size_t num_merges) {
  std::map<std::string, std::size_t> counts;
  for (const auto& w : words)
    if (!w.empty()) ++counts[w];
  return learn(counts, num_merges);
}

BpeModel BpeModel::learn(const std::map<std::string, std::size_t>& word_counts, std::size_t num_merges) {
  if (word_counts.empty()) fail(ErrorKind::Domain, "cannot learn BPE from an empty corpus");
  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  words.reserve(word_counts.size());
  for (const auto& [w, c] : word_counts) words.emplace_back(initial_symbols(w), c);

  std::vector<Merge> merges;
  while (merges.size() < num_merges) {
    std::map<std::pair<std::string, std::string>, std::size_t> pair_counts;
    for (const auto& [syms, c] : words)
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) pair_counts[{syms[i], syms[i + 1]}] += c;
    if (pair_counts.empty()) break;
    // std::map iterates pairs in lexicographic order, so the first maximum
    // is the lexicographic tie winner.
    auto best = pair_counts.begin();
    for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it)
      if (it->second > best->second) best = it;
    const auto [l, r] = best->first;
    merges.push_back({l, r});
    for (auto& [syms, c] : words) merge_in_place(syms, l, r);
  }
  return BpeModel(std::move(merges));
}

std::optional<std::size_t> BpeModel::rank(const std::string& left, const std::string& right) const {
  auto it = ranks_.find(pair_key(left, right));
  if (it == ranks_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> BpeModel::apply(std::string_view word) const {
  auto syms = initial_symbols(word);
  while (syms.size() > 1) {
    std::size_t best_rank = merges_.size();
    std::size_t best_pos = 0;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto it = ranks_.find(pair_key(syms[i], syms[i + 1]));
      if (it != ranks_.end() && it->second < best_rank) {
        best_rank = it->second;
        best_pos = i;
      }
    }
    if (best_rank == merges_.size()) break;
    syms[best_pos] += syms[best_pos + 1];
    syms.erase(syms.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
  }
  return syms;
}

std::vector<std::string> BpeModel::apply_sentence(std::string_view sentence) const {
  std::vector<std::string> out;
  for (const auto& w : split_words(sentence)) {
    auto pieces = apply(w);
    out.insert(out.end(), std::make_move_iterator(pieces.begin()), std::make_move_iterator(pieces.end()));
  }
  return out;
}

std::string BpeModel::serialize() const {
  std::string out = "bpe v1 " + std::to_string(merges_.size()) + "\n";
  for (const auto& m : merges_) out += m.left + " " + m.right + "\n";
  return out;
}

BpeModel BpeModel::parse(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::Parse, "empty BPE model");
  std::istringstream header(line);
  std::string magic, version;
  std::size_t n = 0;
  if (!(header >> magic >> version >> n) || magic != "bpe" || version != "v1") {
    fail(ErrorKind::Parse, "line 1: expected 'bpe v1 <n_merges>'");
  }
  std::vector<Merge> merges;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto parts = split_words(line);
    if (parts.size() != 2) fail(ErrorKind::Parse, "line " + std::to_string(lineno) + ": expected '<left> <right>'");
    merges.push_back({parts[0], parts[1]});
  }
  if (merges.size() != n) {
    fail(ErrorKind::Parse, "header declares " + std::to_string(n) + " merges, found " + std::to_string(merges.size()));
  }
  return BpeModel(std::move(merges));
}

void BpeModel::save(const std::filesystem::path& path) const { write_text(path, serialize()); }
BpeModel BpeModel::load(const std::filesystem::path& path) { return parse(read_text(path)); }

std::size_t first_subword_index(const BpeModel& model, std::span<const std::string> words, std::size_t word_index) {
  if (word_index >= words.size()) {
    fail(ErrorKind::Extraction, "word index " + std::to_string(word_index) + " outside sentence of " +
                                    std::to_string(words.size()) + " words");
  }
  std::size_t pos = 0;
  for (std::size_t i = 0; i < word_index; ++i) pos += model.apply(words[i]).size();
  return pos;
}

std::string detokenize(std::span<const std::string> subwords) {
  std::string out;
  std::string current;
  for (const auto& s : subwords) {
    if (ends_with_marker(s)) {
      current += s.substr(0, s.size() - kEndOfWord.size());
      if (!out.empty()) out += ' ';
      out += current;
      current.clear();
    } else {
      current += s;
    }
  }
  if (!current.empty()) {
    if (!out.empty()) out += ' ';
    out += current;
  }
  return out;
}

std::vector<std::size_t> subword_word_index(std::span<const std::string> subwords) {
  std::vector<std::size_t> out;
  out.reserve(subwords.size());
  std::size_t w = 0;
  for (const auto& s : subwords) {
    out.push_back(w);
    if (ends_with_marker(s)) ++w;
  }
  return out;
}

std::string language_tag_token(std::string_view language) { return "<2" + std::string(language) + ">"; }

Vocabulary::Vocabulary() {
  for (const char* s : {"<pad>", "<s>", "</s>", "<unk>"}) add(s);
}

void Vocabulary::add(std::string token) {
  const int id = static_cast<int>(tokens_.size());
  auto [it, inserted] = ids_.emplace(token, id);
  if (!inserted) fail(ErrorKind::Vocab, "duplicate token '" + token + "'");
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::build(std::span<const std::vector<std::string>> segmented, std::span<const std::string> languages) {
  Vocabulary v;
  for (const auto& lang : languages) {
    v.add(language_tag_token(lang));
    v.languages_.push_back(lang);
  }
  std::map<std::string, std::size_t> freq;
  for (const auto& sent : segmented)
    for (const auto& tok : sent) ++freq[tok];
  std::vector<std::pair<std::string, std::size_t>> ordered(freq.begin(), freq.end());
  std::stable_sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  for (auto& [tok, c] : ordered)
    if (!v.ids_.count(tok)) v.add(tok);
  return v;
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id(std::string_view token) const { return find(token).value_or(kUnk); }

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    fail(ErrorKind::Vocab, "id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::language_tag(std::string_view language) const {
  auto f = find(language_tag_token(language));
  if (!f) fail(ErrorKind::Routing, "vocabulary has no tag for language '" + std::string(language) + "'");
  return *f;
}

std::vector<int> Vocabulary::encode(std::span<const std::string> subwords) const {
  std::vector<int> out;
  out.reserve(subwords.size());
  for (const auto& s : subwords) out.push_back(id(s));
  return out;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (std::size_t i = 0; i < tokens_.size(); ++i) out += tokens_[i] + "\t" + std::to_string(i) + "\n";
  return out;
}

Vocabulary Vocabulary::parse(std::string_view text) {
  Vocabulary v;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) fail(ErrorKind::Parse, "vocab line " + std::to_string(lineno) + ": missing tab");
    const std::string tok = line.substr(0, tab);
    int id = -1;
    try {
      id = std::stoi(line.substr(tab + 1));
    } catch (const std::exception&) {
      fail(ErrorKind::Parse, "vocab line " + std::to_string(lineno) + ": bad id");
    }
    if (static_cast<std::size_t>(id) < 4) {
      if (v.tokens_[static_cast<std::size_t>(id)] != tok) fail(ErrorKind::Parse, "vocab line " + std::to_string(lineno) + ": special mismatch");
      continue;
    }
    if (static_cast<std::size_t>(id) != v.tokens_.size()) {
      fail(ErrorKind::Parse, "vocab line " + std::to_string(lineno) + ": ids must be dense and ascending");
    }
    const bool is_tag = tok.size() > 3 && tok.rfind("<2", 0) == 0 && tok.back() == '>';
    if (is_tag && v.tokens_.size() == v.num_specials()) v.languages_.push_back(tok.substr(2, tok.size() - 3));
    v.add(tok);
  }
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const { write_text(path, serialize()); }
Vocabulary Vocabulary::load(const std::filesystem::path& path) { return parse(read_text(path)); }

std::uint64_t Vocabulary::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : serialize()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<int> TextCodec::encode(std::string_view sentence) const { return vocab.encode(bpe.apply_sentence(sentence)); }

std::string TextCodec::decode(std::span<const int> ids) const {
  std::vector<std::string> pieces;
  for (int id : ids) {
    if (id == Vocabulary::kEos) break;
    if (static_cast<std::size_t>(id) < vocab.num_specials()) continue;
    pieces.push_back(vocab.token(id));
  }
  return detokenize(pieces);
}

}  // namespace mnmt
