#include "mnmt/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mnmt/error.hpp"
#include "mnmt/rng.hpp"
#include "mnmt/tokenizer.hpp"

namespace mnmt {

namespace {

std::uint64_t tag_hash(const std::string& tag) { return fnv1a(tag); }

Tensor uniform_param(Rng& rng, Shape shape, double bound) {
  const auto n = shape_numel(shape);
  std::vector<double> d(n);
  for (auto& v : d) v = (2.0 * uniform_real(rng) - 1.0) * bound;
  return Tensor(std::move(shape), std::move(d), true);
}

Tensor xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  return uniform_param(rng, {fan_in, fan_out}, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
}

void add_attention(ParamStore& ps, Rng& rng, const std::string& prefix, std::size_t d) {
  ps.add(prefix + ".wq", xavier(rng, d, d));
  ps.add(prefix + ".bq", Tensor::zeros({d}, true));
  ps.add(prefix + ".wk", xavier(rng, d, d));
  ps.add(prefix + ".bk", Tensor::zeros({d}, true));
  ps.add(prefix + ".wv", xavier(rng, d, d));
  ps.add(prefix + ".bv", Tensor::zeros({d}, true));
  ps.add(prefix + ".wo", xavier(rng, d, d));
}

void add_ffn(ParamStore& ps, Rng& rng, const std::string& prefix, std::size_t d, std::size_t ff) {
  ps.add(prefix + ".w1", xavier(rng, d, ff));
  ps.add(prefix + ".b1", Tensor::zeros({ff}, true));
  ps.add(prefix + ".w2", xavier(rng, ff, d));
  ps.add(prefix + ".b2", Tensor::zeros({d}, true));
}

void add_ln(ParamStore& ps, const std::string& prefix, std::size_t d) {
  ps.add(prefix + ".gain", Tensor::full({d}, 1.0, true));
  ps.add(prefix + ".bias", Tensor::zeros({d}, true));
}

AttentionParams bind_attention(ParamStore& ps, const std::string& prefix) {
  return {ps.get(prefix + ".wq"), ps.get(prefix + ".bq"), ps.get(prefix + ".wk"), ps.get(prefix + ".bk"),
          ps.get(prefix + ".wv"), ps.get(prefix + ".bv"), ps.get(prefix + ".wo")};
}

FeedForwardParams bind_ffn(ParamStore& ps, const std::string& prefix) {
  return {ps.get(prefix + ".w1"), ps.get(prefix + ".b1"), ps.get(prefix + ".w2"), ps.get(prefix + ".b2")};
}

LayerNormParams bind_ln(ParamStore& ps, const std::string& prefix) {
  return {ps.get(prefix + ".gain"), ps.get(prefix + ".bias")};
}

std::string layer_prefix(std::size_t l) { return "layers." + std::to_string(l); }

Tensor ln(const LayerNormParams& p, const Tensor& x) { return ops::layer_norm(x, p.gain, p.bias); }

Tensor ffn(const FeedForwardParams& p, const Tensor& x) {
  auto h = ops::relu(ops::add(ops::matmul(x, p.w1), p.b1));
  return ops::add(ops::matmul(h, p.w2), p.b2);
}

DropoutKey key_for(const RunContext& ctx, std::uint64_t site_base, std::size_t layer, std::size_t site) {
  return {ctx.seed, hash_combine(site_base, layer * 16 + site), ctx.step};
}

Tensor embed_tokens(const Tensor& table, std::span<const int> ids, std::size_t dim, std::size_t offset) {
  auto e = ops::scale(ops::embedding(table, ids), std::sqrt(static_cast<double>(dim)));
  return ops::add(e, positional_encoding(ids.size(), dim, offset));
}

Tensor embed_packed(const Tensor& table, std::span<const std::vector<int>> batch, std::size_t dim, std::size_t max_len,
                    std::vector<Segment>& segments) {
  std::vector<int> flat;
  std::vector<double> pos;
  segments.clear();
  for (const auto& seq : batch) {
    if (seq.empty()) fail(ErrorKind::Length, "empty sequence in batch");
    if (seq.size() > max_len) {
      fail(ErrorKind::Length, "sequence of length " + std::to_string(seq.size()) + " exceeds max_len " + std::to_string(max_len));
    }
    segments.push_back({flat.size(), flat.size() + seq.size()});
    flat.insert(flat.end(), seq.begin(), seq.end());
    auto p = positional_encoding(seq.size(), dim);
    pos.insert(pos.end(), p.data().begin(), p.data().end());
  }
  auto e = ops::scale(ops::embedding(table, flat), std::sqrt(static_cast<double>(dim)));
  return ops::add(e, Tensor({flat.size(), dim}, std::move(pos)));
}

std::size_t argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace

void TransformerConfig::validate() const {
  require(layers >= 1 && heads >= 1 && model_dim >= 1 && ff_dim >= 1 && max_len >= 1, ErrorKind::Config,
          "transformer counts must all be >= 1");
  require(model_dim % heads == 0, ErrorKind::Config,
          "model_dim " + std::to_string(model_dim) + " not divisible by heads " + std::to_string(heads));
  require(dropout >= 0.0 && dropout < 1.0, ErrorKind::Config, "dropout must lie in [0,1)");
}

TransformerConfig TransformerConfig::desk() {
  TransformerConfig c;
  c.layers = 2;
  c.heads = 2;
  c.model_dim = 64;
  c.ff_dim = 128;
  c.dropout = 0.1;
  c.max_len = 64;
  return c;
}

TransformerConfig TransformerConfig::paper() {
  TransformerConfig c;
  c.layers = 6;
  c.heads = 8;
  c.model_dim = 512;
  c.ff_dim = 2048;
  c.dropout = 0.3;
  c.max_len = 256;
  return c;
}

TransformerConfig TransformerConfig::preset(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  fail(ErrorKind::Config, "unknown preset '" + name + "'");
}

void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = nlohmann::json{{"layers", c.layers},   {"heads", c.heads},         {"model_dim", c.model_dim},
                     {"ff_dim", c.ff_dim},   {"dropout", c.dropout},     {"max_len", c.max_len},
                     {"src_vocab", c.src_vocab}, {"tgt_vocab", c.tgt_vocab}};
}

void from_json(const nlohmann::json& j, TransformerConfig& c) {
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.dropout = j.value("dropout", c.dropout);
  c.max_len = j.value("max_len", c.max_len);
  c.src_vocab = j.value("src_vocab", c.src_vocab);
  c.tgt_vocab = j.value("tgt_vocab", c.tgt_vocab);
}

Tensor& ParamStore::add(std::string name, Tensor t) {
  for (const auto& [n, _] : entries_)
    if (n == name) fail(ErrorKind::Contract, "duplicate parameter '" + name + "'");
  entries_.emplace_back(std::move(name), std::move(t));
  return entries_.back().second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  fail(ErrorKind::Contract, "no parameter named '" + name + "'");
}

Tensor& ParamStore::get(const std::string& name) {
  for (auto& [n, t] : entries_)
    if (n == name) return t;
  fail(ErrorKind::Contract, "no parameter named '" + name + "'");
}

std::size_t ParamStore::count() const noexcept {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

Tensor positional_encoding(std::size_t len, std::size_t dim, std::size_t offset) {
  std::vector<double> d(len * dim);
  for (std::size_t p = 0; p < len; ++p) {
    const double pos = static_cast<double>(p + offset);
    for (std::size_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      d[p * dim + i] = std::sin(pos * freq);
      if (i + 1 < dim) d[p * dim + i + 1] = std::cos(pos * freq);
    }
  }
  return Tensor({len, dim}, std::move(d));
}

Tensor multi_head_attention(const AttentionParams& p, const Tensor& query_in, const Tensor& kv_in, std::size_t heads,
                            std::span<const Segment> q_segments, std::span<const Segment> kv_segments, bool causal,
                            ops::AttentionWeights* weights) {
  auto q = ops::add(ops::matmul(query_in, p.wq), p.bq);
  auto k = ops::add(ops::matmul(kv_in, p.wk), p.bk);
  auto v = ops::add(ops::matmul(kv_in, p.wv), p.bv);
  auto z = ops::attention(q, k, v, heads, q_segments, kv_segments, causal, weights);
  return ops::matmul(z, p.wo);
}

double AttentionTrace::alpha(std::size_t layer, std::size_t head, std::size_t t, std::size_t i) const {
  if (t >= steps.size() || layer >= layers || head >= heads || i >= src_len) {
    fail(ErrorKind::Bounds, "trace index (layer " + std::to_string(layer) + ", head " + std::to_string(head) + ", step " +
                                std::to_string(t) + ", source " + std::to_string(i) + ") out of range");
  }
  return steps[t].alpha[layer][head][i];
}

void AttentionTrace::validate(double tol) const {
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const auto& s = steps[t];
    require(s.alpha.size() == layers && s.output.size() == layers, ErrorKind::Contract, "trace step has wrong layer count");
    for (std::size_t l = 0; l < layers; ++l) {
      require(s.alpha[l].size() == heads, ErrorKind::Contract, "trace step has wrong head count");
      for (const auto& row : s.alpha[l]) {
        require(row.size() == src_len, ErrorKind::Contract, "inconsistent src_len in trace");
        double z = 0.0;
        for (double a : row) z += a;
        require(std::abs(z - 1.0) <= tol, ErrorKind::Contract, "attention row does not sum to 1");
      }
    }
  }
}

Tensor head_transform(const AttentionTrace& trace, std::size_t layer, std::size_t head) {
  if (layer >= trace.layers || head >= trace.heads) fail(ErrorKind::Bounds, "head_transform index out of range");
  const auto d = trace.model_dim, dh = d / trace.heads;
  const auto& p = trace.projections[layer];
  NoGradGuard guard;
  const auto cols_begin = head * dh, cols_end = (head + 1) * dh;
  auto bias = ops::slice_cols(ops::reshape(p.bv, {1, d}), cols_begin, cols_end);
  auto v = ops::add(ops::matmul(trace.values, ops::slice_cols(p.wv, cols_begin, cols_end)), bias);
  return ops::matmul(v, ops::slice_rows(p.wo, head * dh, (head + 1) * dh));
}

std::vector<double> reconstruct_attention(const AttentionTrace& trace, std::size_t layer, std::size_t t) {
  const auto d = trace.model_dim;
  std::vector<double> out(d, 0.0);
  for (std::size_t h = 0; h < trace.heads; ++h) {
    const auto f = head_transform(trace, layer, h);
    for (std::size_t i = 0; i < trace.src_len; ++i) {
      const double a = trace.alpha(layer, h, t, i);
      for (std::size_t j = 0; j < d; ++j) out[j] += a * f.at(i, j);
    }
  }
  return out;
}

// ---------------------------------------------------------------- Encoder

Encoder::Encoder(const TransformerConfig& config, std::size_t vocab, std::uint64_t seed, std::string tag)
    : config_(config), vocab_(vocab), site_base_(tag_hash(tag)) {
  config_.validate();
  require(vocab >= 1, ErrorKind::Config, "encoder vocabulary must be non-empty");
  auto rng = make_rng(seed, site_base_);
  const auto d = config_.model_dim;
  params_.add("embed", uniform_param(rng, {vocab, d}, std::sqrt(3.0 / static_cast<double>(d))));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const auto p = layer_prefix(l);
    add_ln(params_, p + ".ln_attn", d);
    add_attention(params_, rng, p + ".self_attn", d);
    add_ln(params_, p + ".ln_ffn", d);
    add_ffn(params_, rng, p + ".ffn", d, config_.ff_dim);
  }
  add_ln(params_, "final_ln", d);
  bind();
}

void Encoder::bind() {
  embed_ = params_.get("embed");
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const auto p = layer_prefix(l);
    ln1_.push_back(bind_ln(params_, p + ".ln_attn"));
    attn_.push_back(bind_attention(params_, p + ".self_attn"));
    ln2_.push_back(bind_ln(params_, p + ".ln_ffn"));
    ffn_.push_back(bind_ffn(params_, p + ".ffn"));
  }
  final_ln_ = bind_ln(params_, "final_ln");
}

std::size_t Encoder::param_count(const TransformerConfig& c, std::size_t vocab) {
  const auto d = c.model_dim, ff = c.ff_dim;
  const auto attn = 4 * d * d + 3 * d;
  const auto ffn = 2 * d * ff + ff + d;
  const auto lnp = 2 * d;
  return vocab * d + c.layers * (attn + ffn + 2 * lnp) + lnp;
}

Tensor Encoder::forward(std::span<const std::vector<int>> batch, std::vector<Segment>& segments, const RunContext& ctx) const {
  const auto d = config_.model_dim;
  auto x = embed_packed(embed_, batch, d, config_.max_len, segments);
  x = ops::dropout(x, config_.dropout, ctx.training, key_for(ctx, site_base_, 99, 0));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    auto h = ln(ln1_[l], x);
    auto a = multi_head_attention(attn_[l], h, h, config_.heads, segments, segments, false);
    x = ops::add(x, ops::dropout(a, config_.dropout, ctx.training, key_for(ctx, site_base_, l, 1)));
    auto f = ffn(ffn_[l], ln(ln2_[l], x));
    x = ops::add(x, ops::dropout(f, config_.dropout, ctx.training, key_for(ctx, site_base_, l, 2)));
  }
  return ln(final_ln_, x);
}

EncoderStates Encoder::encode(std::span<const int> ids) const {
  if (ids.empty()) fail(ErrorKind::Length, "cannot encode an empty source");
  NoGradGuard guard;
  std::vector<std::vector<int>> batch{std::vector<int>(ids.begin(), ids.end())};
  std::vector<Segment> segs;
  auto out = forward(batch, segs, RunContext{});
  return EncoderStates{out, batch[0]};
}

// ---------------------------------------------------------------- Decoder

Decoder::Decoder(const TransformerConfig& config, std::size_t vocab, std::uint64_t seed, std::string tag)
    : config_(config), vocab_(vocab), site_base_(tag_hash(tag)) {
  config_.validate();
  require(vocab >= 1, ErrorKind::Config, "decoder vocabulary must be non-empty");
  auto rng = make_rng(seed, site_base_);
  const auto d = config_.model_dim;
  params_.add("embed", uniform_param(rng, {vocab, d}, std::sqrt(3.0 / static_cast<double>(d))));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const auto p = layer_prefix(l);
    add_ln(params_, p + ".ln_self", d);
    add_attention(params_, rng, p + ".self_attn", d);
    add_ln(params_, p + ".ln_cross", d);
    add_attention(params_, rng, p + ".cross_attn", d);
    add_ln(params_, p + ".ln_ffn", d);
    add_ffn(params_, rng, p + ".ffn", d, config_.ff_dim);
  }
  add_ln(params_, "final_ln", d);
  bind();
}

void Decoder::bind() {
  embed_ = params_.get("embed");
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const auto p = layer_prefix(l);
    ln1_.push_back(bind_ln(params_, p + ".ln_self"));
    self_attn_.push_back(bind_attention(params_, p + ".self_attn"));
    ln2_.push_back(bind_ln(params_, p + ".ln_cross"));
    cross_attn_.push_back(bind_attention(params_, p + ".cross_attn"));
    ln3_.push_back(bind_ln(params_, p + ".ln_ffn"));
    ffn_.push_back(bind_ffn(params_, p + ".ffn"));
  }
  final_ln_ = bind_ln(params_, "final_ln");
}

std::size_t Decoder::param_count(const TransformerConfig& c, std::size_t vocab) {
  const auto d = c.model_dim, ff = c.ff_dim;
  const auto attn = 4 * d * d + 3 * d;
  const auto ffn = 2 * d * ff + ff + d;
  const auto lnp = 2 * d;
  return vocab * d + c.layers * (2 * attn + ffn + 3 * lnp) + lnp;
}

Tensor Decoder::forward(const Tensor& memory, std::span<const Segment> memory_segments,
                        std::span<const std::vector<int>> inputs, const RunContext& ctx) const {
  const auto d = config_.model_dim;
  std::vector<Segment> segs;
  auto y = embed_packed(embed_, inputs, d, config_.max_len, segs);
  require(segs.size() == memory_segments.size(), ErrorKind::Dimension, "decoder batch and memory batch sizes differ");
  y = ops::dropout(y, config_.dropout, ctx.training, key_for(ctx, site_base_, 99, 0));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    auto h = ln(ln1_[l], y);
    auto a = multi_head_attention(self_attn_[l], h, h, config_.heads, segs, segs, true);
    y = ops::add(y, ops::dropout(a, config_.dropout, ctx.training, key_for(ctx, site_base_, l, 1)));
    auto c = multi_head_attention(cross_attn_[l], ln(ln2_[l], y), memory, config_.heads, segs, memory_segments, false);
    y = ops::add(y, ops::dropout(c, config_.dropout, ctx.training, key_for(ctx, site_base_, l, 2)));
    auto f = ffn(ffn_[l], ln(ln3_[l], y));
    y = ops::add(y, ops::dropout(f, config_.dropout, ctx.training, key_for(ctx, site_base_, l, 3)));
  }
  return ops::matmul_nt(ln(final_ln_, y), embed_);
}

AttentionTrace Decoder::empty_trace(const EncoderStates& source) const {
  AttentionTrace tr;
  tr.layers = config_.layers;
  tr.heads = config_.heads;
  tr.model_dim = config_.model_dim;
  tr.src_len = source.size();
  tr.values = source.states;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    tr.projections.push_back({cross_attn_[l].wv, cross_attn_[l].bv, cross_attn_[l].wo});
  }
  return tr;
}

StepOutput Decoder::decode_step(const EncoderStates& source, std::span<const int> prefix, bool capture) const {
  if (prefix.empty()) fail(ErrorKind::Contract, "decode prefix must start with bos");
  if (prefix.size() > config_.max_len) {
    fail(ErrorKind::Length, "prefix of length " + std::to_string(prefix.size()) + " exceeds max_len " + std::to_string(config_.max_len));
  }
  NoGradGuard guard;
  const auto d = config_.model_dim;
  const auto t = prefix.size() - 1;
  const Segment qseg{0, prefix.size()}, mseg{0, source.size()};
  auto y = embed_tokens(embed_, prefix, d, 0);
  TraceStep step;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    auto h = ln(ln1_[l], y);
    y = ops::add(y, multi_head_attention(self_attn_[l], h, h, config_.heads, {&qseg, 1}, {&qseg, 1}, true));
    ops::AttentionWeights w;
    auto c = multi_head_attention(cross_attn_[l], ln(ln2_[l], y), source.states, config_.heads, {&qseg, 1}, {&mseg, 1},
                                  false, capture ? &w : nullptr);
    if (capture) {
      const auto kl = source.size(), ql = prefix.size();
      std::vector<std::vector<double>> heads(config_.heads);
      for (std::size_t hh = 0; hh < config_.heads; ++hh) {
        const auto* row = w.per_segment[0].data() + (hh * ql + t) * kl;
        heads[hh].assign(row, row + kl);
      }
      step.alpha.push_back(std::move(heads));
      const auto cd = c.data();
      step.output.emplace_back(cd.begin() + static_cast<std::ptrdiff_t>(t * d), cd.begin() + static_cast<std::ptrdiff_t>((t + 1) * d));
    }
    y = ops::add(y, c);
    y = ops::add(y, ffn(ffn_[l], ln(ln3_[l], y)));
  }
  auto last = ops::slice_rows(ln(final_ln_, y), t, t + 1);
  auto logits = ops::matmul_nt(last, embed_);
  StepOutput out;
  out.logits.assign(logits.data().begin(), logits.data().end());
  if (capture) {
    auto tr = empty_trace(source);
    step.token = static_cast<int>(argmax_lowest(out.logits));
    tr.steps.push_back(std::move(step));
    out.trace = std::move(tr);
  }
  return out;
}

Translation Decoder::greedy(const EncoderStates& source, std::size_t max_len, bool capture) const {
  NoGradGuard guard;
  const auto d = config_.model_dim;
  const auto L = config_.layers;
  const std::size_t limit = std::min(max_len, config_.max_len - 1);
  const Segment one{0, 1}, mseg{0, source.size()};

  // Cross-attention keys/values depend only on the source.
  std::vector<Tensor> cross_k, cross_v;
  for (std::size_t l = 0; l < L; ++l) {
    cross_k.push_back(ops::add(ops::matmul(source.states, cross_attn_[l].wk), cross_attn_[l].bk));
    cross_v.push_back(ops::add(ops::matmul(source.states, cross_attn_[l].wv), cross_attn_[l].bv));
  }
  std::vector<std::vector<Tensor>> self_k(L), self_v(L);

  Translation result;
  if (capture) result.trace = empty_trace(source);
  int token = Vocabulary::kBos;
  for (std::size_t t = 0; t <= limit; ++t) {
    const int tok_arr[1] = {token};
    auto y = embed_tokens(embed_, tok_arr, d, t);
    TraceStep step;
    for (std::size_t l = 0; l < L; ++l) {
      const auto& sa = self_attn_[l];
      auto h = ln(ln1_[l], y);
      self_k[l].push_back(ops::add(ops::matmul(h, sa.wk), sa.bk));
      self_v[l].push_back(ops::add(ops::matmul(h, sa.wv), sa.bv));
      auto K = ops::concat(self_k[l], 0);
      auto V = ops::concat(self_v[l], 0);
      const Segment kseg{0, t + 1};
      auto q = ops::add(ops::matmul(h, sa.wq), sa.bq);
      auto a = ops::matmul(ops::attention(q, K, V, config_.heads, {&one, 1}, {&kseg, 1}, true), sa.wo);
      y = ops::add(y, a);

      const auto& ca = cross_attn_[l];
      auto cq = ops::add(ops::matmul(ln(ln2_[l], y), ca.wq), ca.bq);
      ops::AttentionWeights w;
      auto c = ops::matmul(ops::attention(cq, cross_k[l], cross_v[l], config_.heads, {&one, 1}, {&mseg, 1}, false,
                                          capture ? &w : nullptr),
                           ca.wo);
      if (capture) {
        std::vector<std::vector<double>> heads(config_.heads);
        for (std::size_t hh = 0; hh < config_.heads; ++hh) {
          const auto* row = w.per_segment[0].data() + hh * source.size();
          heads[hh].assign(row, row + source.size());
        }
        step.alpha.push_back(std::move(heads));
        step.output.emplace_back(c.data().begin(), c.data().end());
      }
      y = ops::add(y, c);
      y = ops::add(y, ffn(ffn_[l], ln(ln3_[l], y)));
    }
    auto logits = ops::matmul_nt(ln(final_ln_, y), embed_);
    // The final position may only close the sentence.
    const auto next = static_cast<int>(argmax_lowest(logits.data()));
    if (capture) {
      step.token = next;
      result.trace.steps.push_back(std::move(step));
    }
    if (next == Vocabulary::kEos || t == limit) break;
    result.ids.push_back(next);
    token = next;
  }
  // Trace steps correspond to emitted tokens plus the closing step, if any.
  if (capture && result.trace.steps.size() > result.ids.size()) {
    const bool closed = result.trace.steps.back().token == Vocabulary::kEos;
    if (!closed) result.trace.steps.pop_back();
  }
  return result;
}

std::vector<int> Decoder::beam_search(const EncoderStates& source, std::size_t max_len, std::size_t width) const {
  require(width >= 1, ErrorKind::Config, "beam width must be >= 1");
  struct Hyp {
    std::vector<int> prefix;
    double score;
  };
  const std::size_t limit = std::min(max_len, config_.max_len - 1);
  std::vector<Hyp> beam{{{Vocabulary::kBos}, 0.0}};
  std::vector<Hyp> finished;
  for (std::size_t t = 0; t <= limit && !beam.empty(); ++t) {
    std::vector<Hyp> cand;
    for (const auto& h : beam) {
      auto out = decode_step(source, h.prefix, false);
      const auto& lg = out.logits;
      const double mx = *std::max_element(lg.begin(), lg.end());
      double z = 0.0;
      for (double v : lg) z += std::exp(v - mx);
      const double lse = mx + std::log(z);
      // Rank tokens by logit with lowest-id tie-break, keep `width` of them.
      std::vector<std::size_t> order(lg.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lg[a] > lg[b]; });
      for (std::size_t r = 0; r < std::min(width, order.size()); ++r) {
        Hyp n = h;
        n.prefix.push_back(static_cast<int>(order[r]));
        n.score += lg[order[r]] - lse;
        cand.push_back(std::move(n));
      }
    }
    std::stable_sort(cand.begin(), cand.end(), [](const Hyp& a, const Hyp& b) { return a.score > b.score; });
    if (cand.size() > width) cand.resize(width);
    beam.clear();
    for (auto& c : cand) {
      if (c.prefix.back() == Vocabulary::kEos) {
        finished.push_back(std::move(c));
      } else if (t == limit) {
        // Same cap as greedy: the last position may only close the sentence.
        c.prefix.pop_back();
        finished.push_back(std::move(c));
      } else {
        beam.push_back(std::move(c));
      }
    }
    if (!finished.empty() && !beam.empty()) {
      const auto best_done = std::max_element(finished.begin(), finished.end(),
                                              [](const Hyp& a, const Hyp& b) { return a.score < b.score; });
      // Scores only fall as hypotheses grow.
      if (best_done->score >= beam.front().score) break;
    }
  }
  for (auto& b : beam) finished.push_back(std::move(b));
  auto best = std::max_element(finished.begin(), finished.end(), [](const Hyp& a, const Hyp& b) { return a.score < b.score; });
  std::vector<int> ids(best->prefix.begin() + 1, best->prefix.end());
  if (!ids.empty() && ids.back() == Vocabulary::kEos) ids.pop_back();
  return ids;
}

Translation greedy_translate(const Encoder& encoder, const Decoder& decoder, std::span<const int> source_ids,
                             std::size_t max_len, bool capture) {
  if (source_ids.size() > encoder.config().max_len) {
    fail(ErrorKind::Length, "source of length " + std::to_string(source_ids.size()) + " exceeds max_len");
  }
  return decoder.greedy(encoder.encode(source_ids), max_len, capture);
}

}  // namespace mnmt
