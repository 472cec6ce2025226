#pragma once

// Dense float64 tensors with tape-free reverse-mode autodiff. Every op that
// sees an input with requires_grad (while grad mode is on) records its
// parents and a backward rule on the output node; backward() walks that DAG
// once in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mnmt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_str(const Shape& shape);

class Tensor {
 public:
  struct Node;

  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data, bool requires_grad = false);
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept;
  std::size_t rank() const noexcept { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept;
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  std::span<const double> data() const noexcept;
  // Direct write access; intended for parameter updates and test fixtures,
  // never for tensors that already feed a recorded graph.
  std::span<double> mutable_data() noexcept;
  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

  bool requires_grad() const noexcept;
  void set_requires_grad(bool on);
  bool has_grad() const noexcept;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Populates grad on every requires_grad leaf reachable from this scalar.
  void backward() const;

  // Same value, cut from the graph.
  Tensor detach() const;
  Tensor clone() const;

  bool same_storage(const Tensor& other) const noexcept { return node_ == other.node_; }
  bool defined() const noexcept { return static_cast<bool>(node_); }
  const std::string& op_name() const noexcept;

  std::shared_ptr<Node> node() const noexcept { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

struct Tensor::Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Receives this node (with its grad filled) and accumulates into parents.
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

// Grad recording is per thread. Inference wraps work in NoGradGuard so no
// graph is retained.
bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// When on, every op checks its output for NaN/Inf and throws a Numeric
// error naming the op. Also switched on by MNMT_CHECK_FINITE=1.
void set_finite_checks(bool on) noexcept;
bool finite_checks() noexcept;

// Key for the counter-based dropout mask: identical keys give identical masks.
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t site = 0;
  std::uint64_t step = 0;
};

// Sequence boundaries for packed batches: rows [begin, end) of a matrix
// belong to one sentence.
struct Segment {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
};

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b);
// a · bᵀ without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// Same-shape add, or row-broadcast when b is [n] or [1×n] and a is [m×n].
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// axis indexes the shape; for a 2-D tensor axis 1 normalizes each row.
Tensor softmax(const Tensor& x, std::size_t axis);
// Normalizes over the last dimension, then applies gain and bias ([n] each).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
// Inverted dropout. p == 0 or !training returns x unchanged.
Tensor dropout(const Tensor& x, double p, bool training, const DropoutKey& key);
// Mean token cross-entropy of row-wise logits against target ids; rows whose
// target equals ignore_id are skipped.
Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int> targets, int ignore_id = -1);

// Scaled dot-product attention over packed sequences with `heads` column
// groups. q rows are split by q_segments, k/v rows by kv_segments (paired by
// index). With causal set, query row r of a segment attends to key columns
// c <= r + (kv_len - q_len), so a single trailing query sees every key.
// When weights is non-null it receives
// the attention weights laid out [segment][head][query][key].
struct AttentionWeights {
  std::vector<std::vector<double>> per_segment;  // heads × q_len × kv_len each
};
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const Segment> q_segments, std::span<const Segment> kv_segments, bool causal,
                 AttentionWeights* weights = nullptr);

}  // namespace ops

}  // namespace mnmt
