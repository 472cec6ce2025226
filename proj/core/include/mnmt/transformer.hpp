#pragma once

// Pre-layer-norm encoder-decoder transformer. The encoder-decoder attention
// of every decoder layer can be captured as an AttentionTrace holding the
// weights, the value-side inputs, and the projection matrices needed to
// rewrite the attention output as a sum of per-source-token vectors.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mnmt/tensor.hpp"

namespace mnmt {

struct TransformerConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t model_dim = 64;
  std::size_t ff_dim = 128;
  double dropout = 0.1;
  std::size_t max_len = 64;
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;

  void validate() const;

  static TransformerConfig desk();
  // 6 layers, 8 heads, 512-dim embeddings, dropout 0.3.
  static TransformerConfig paper();
  static TransformerConfig preset(const std::string& name);

  friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);

// Ordered named parameters; the order is the checkpoint blob order.
class ParamStore {
 public:
  Tensor& add(std::string name, Tensor t);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t count() const noexcept;  // total scalars
  void zero_grad();

  auto begin() noexcept { return entries_.begin(); }
  auto end() noexcept { return entries_.end(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

struct RunContext {
  bool training = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo;  // wo has no bias
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct LayerNormParams {
  Tensor gain, bias;
};

// Contextual vectors for one source sentence (rows = subword positions).
struct EncoderStates {
  Tensor states;  // src_len × model_dim
  std::vector<int> ids;
  std::size_t size() const { return ids.size(); }
};

// Encoder-decoder attention of one decoder layer as seen by the trace:
// handles to the live parameters, not copies.
struct CrossAttentionRefs {
  Tensor wv;  // d × d
  Tensor bv;  // d
  Tensor wo;  // d × d; rows [h*dh, (h+1)*dh) belong to head h
};

struct TraceStep {
  // alpha[layer][head][i]
  std::vector<std::vector<std::vector<double>>> alpha;
  // Encoder-decoder attention sublayer output (before the residual) per layer.
  std::vector<std::vector<double>> output;
  int token = -1;  // id emitted at this step (argmax), -1 if not decided
};

struct AttentionTrace {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t model_dim = 0;
  std::size_t src_len = 0;
  Tensor values;  // src_len × model_dim: the encoder outputs feeding K and V
  std::vector<CrossAttentionRefs> projections;  // per decoder layer
  std::vector<TraceStep> steps;

  std::size_t num_steps() const noexcept { return steps.size(); }
  double alpha(std::size_t layer, std::size_t head, std::size_t t, std::size_t i) const;
  // Checks α rows sum to one and lengths agree; throws Contract otherwise.
  void validate(double tol = 1e-9) const;
};

// f_h(values_i) = (values_i W^V_h + b^V_h) W^O_h for every source position:
// src_len × model_dim.
Tensor head_transform(const AttentionTrace& trace, std::size_t layer, std::size_t head);
// Σ_h Σ_i α_{h,t,i} f_h(values_i); equals the captured sublayer output.
std::vector<double> reconstruct_attention(const AttentionTrace& trace, std::size_t layer, std::size_t t);

class Encoder {
 public:
  Encoder(const TransformerConfig& config, std::size_t vocab, std::uint64_t seed, std::string tag = "encoder");
  Encoder(const Encoder&) = delete;
  Encoder& operator=(const Encoder&) = delete;
  Encoder(Encoder&&) = default;
  Encoder& operator=(Encoder&&) = default;

  const TransformerConfig& config() const noexcept { return config_; }
  std::size_t vocab_size() const noexcept { return vocab_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  // Packed forward over a batch; segments receives the row range of each
  // sentence in the returned matrix.
  Tensor forward(std::span<const std::vector<int>> batch, std::vector<Segment>& segments, const RunContext& ctx) const;

  EncoderStates encode(std::span<const int> ids) const;

  static std::size_t param_count(const TransformerConfig& config, std::size_t vocab);

 private:
  void bind();

  TransformerConfig config_;
  std::size_t vocab_;
  std::uint64_t site_base_;
  ParamStore params_;
  Tensor embed_;
  std::vector<AttentionParams> attn_;
  std::vector<FeedForwardParams> ffn_;
  std::vector<LayerNormParams> ln1_, ln2_;
  LayerNormParams final_ln_;
};

struct StepOutput {
  std::vector<double> logits;
  std::optional<AttentionTrace> trace;  // one step, when captured
};

struct Translation {
  std::vector<int> ids;  // without bos/eos
  AttentionTrace trace;
};

class Decoder {
 public:
  Decoder(const TransformerConfig& config, std::size_t vocab, std::uint64_t seed, std::string tag = "decoder");
  Decoder(const Decoder&) = delete;
  Decoder& operator=(const Decoder&) = delete;
  Decoder(Decoder&&) = default;
  Decoder& operator=(Decoder&&) = default;

  const TransformerConfig& config() const noexcept { return config_; }
  std::size_t vocab_size() const noexcept { return vocab_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  // Teacher-forced logits for every input position of every sentence.
  Tensor forward(const Tensor& memory, std::span<const Segment> memory_segments,
                 std::span<const std::vector<int>> inputs, const RunContext& ctx) const;

  // Full recomputation over the prefix; logits for the next position.
  StepOutput decode_step(const EncoderStates& source, std::span<const int> prefix, bool capture) const;

  // Argmax decoding with cached keys/values; stops at eos or max_len tokens.
  Translation greedy(const EncoderStates& source, std::size_t max_len, bool capture = true) const;
  std::vector<int> beam_search(const EncoderStates& source, std::size_t max_len, std::size_t width) const;

  AttentionTrace empty_trace(const EncoderStates& source) const;

  static std::size_t param_count(const TransformerConfig& config, std::size_t vocab);

 private:
  void bind();

  TransformerConfig config_;
  std::size_t vocab_;
  std::uint64_t site_base_;
  ParamStore params_;
  Tensor embed_;  // tied with the output projection
  std::vector<AttentionParams> self_attn_, cross_attn_;
  std::vector<FeedForwardParams> ffn_;
  std::vector<LayerNormParams> ln1_, ln2_, ln3_;
  LayerNormParams final_ln_;
};

// Sinusoidal position signal for rows [offset, offset+len).
Tensor positional_encoding(std::size_t len, std::size_t dim, std::size_t offset = 0);

// Multi-head attention sublayer without the residual.
Tensor multi_head_attention(const AttentionParams& p, const Tensor& query_in, const Tensor& kv_in, std::size_t heads,
                            std::span<const Segment> q_segments, std::span<const Segment> kv_segments, bool causal,
                            ops::AttentionWeights* weights = nullptr);

// Greedy translation of one sentence.
Translation greedy_translate(const Encoder& encoder, const Decoder& decoder, std::span<const int> source_ids,
                             std::size_t max_len, bool capture = true);

}  // namespace mnmt
