#include "mnmt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <cstdlib>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "mnmt/error.hpp"
#include "mnmt/rng.hpp"

namespace mnmt {

namespace {

thread_local bool g_grad_enabled = true;

bool env_finite_checks() {
  const char* v = std::getenv("MNMT_CHECK_FINITE");
  return v != nullptr && std::string(v) == "1";
}

std::atomic<bool> g_finite_checks{env_finite_checks()};

using NodePtr = std::shared_ptr<Tensor::Node>;

NodePtr make_node(Shape shape, std::vector<double> data, std::string op) {
  auto node = std::make_shared<Tensor::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = std::move(op);
  return node;
}

void check_finite(const Tensor::Node& node) {
  if (!g_finite_checks.load(std::memory_order_relaxed)) return;
  for (double v : node.data) {
    if (!std::isfinite(v)) fail(ErrorKind::Numeric, "non-finite value produced by op '" + node.op + "'");
  }
}

// Builds the output tensor; records parents/backward only when some input
// participates in differentiation.
Tensor finish(NodePtr out, std::initializer_list<const Tensor*> inputs, std::function<void(Tensor::Node&)> backward) {
  check_finite(*out);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (any) {
      out->requires_grad = true;
      for (const Tensor* t : inputs) out->parents.push_back(t->node());
      out->backward = std::move(backward);
    }
  }
  return Tensor(std::move(out));
}

Tensor finish_many(NodePtr out, std::span<const Tensor> inputs, std::function<void(Tensor::Node&)> backward) {
  check_finite(*out);
  if (g_grad_enabled) {
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      out->requires_grad = true;
      for (const Tensor& t : inputs) out->parents.push_back(t.node());
      out->backward = std::move(backward);
    }
  }
  return Tensor(std::move(out));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    fail(ErrorKind::Dimension, std::string(op) + " expects rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

// All kernels accumulate into C in place, adding the k products of every
// output element in ascending order, so blocking never changes a result bit.
// A is addressed through (row, col) strides so the transposed-A case shares
// the kernel without a copy.
struct StridedA {
  const double* a;
  std::size_t rs, cs;
  double at(std::size_t i, std::size_t p) const { return a[i * rs + p * cs]; }
};

// 8 × 8 register tile held in GCC vector types; the autovectorizer is
// too erratic on the plain loop.
typedef double v4d __attribute__((vector_size(32)));
constexpr std::size_t kMr = 8, kNr = 8, kLanes = 4, kVecs = kNr / kLanes;

inline v4d load4(const double* p) {
  v4d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

void micro_kernel(const StridedA& a, std::size_t i0, const double* b, std::size_t ldb, double* c, std::size_t ldc, std::size_t j0,
                  std::size_t k) {
  v4d acc[kMr][kVecs];
  for (std::size_t r = 0; r < kMr; ++r)
    for (std::size_t v = 0; v < kVecs; ++v) acc[r][v] = load4(c + (i0 + r) * ldc + j0 + v * kLanes);
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = b + p * ldb + j0;
    v4d bv[kVecs];
    for (std::size_t v = 0; v < kVecs; ++v) bv[v] = load4(bp + v * kLanes);
    for (std::size_t r = 0; r < kMr; ++r) {
      const double av = a.at(i0 + r, p);
      for (std::size_t v = 0; v < kVecs; ++v) acc[r][v] += av * bv[v];
    }
  }
  for (std::size_t r = 0; r < kMr; ++r)
    for (std::size_t v = 0; v < kVecs; ++v) std::memcpy(c + (i0 + r) * ldc + j0 + v * kLanes, &acc[r][v], sizeof(v4d));
}

// C[m×n] += A · B[k×n]
void gemm_strided(const StridedA& a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::size_t mb = m - m % kMr, nb = n - n % kNr;
  for (std::size_t i = 0; i < mb; i += kMr)
    for (std::size_t j = 0; j < nb; j += kNr) micro_kernel(a, i, b, n, c, n, j, k);
  // Ragged edges: right columns of the blocked rows, then the leftover rows.
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j_from = i < mb ? nb : 0;
    if (j_from == n) continue;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      const double* bp = b + p * n;
      for (std::size_t j = j_from; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m×n] += A[m×k] · B[k×n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_strided({a, k, 1}, b, c, m, k, n);
}

std::vector<double> transposed(const double* a, std::size_t m, std::size_t n) {
  std::vector<double> t(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  return t;
}

// C[m×n] += A[m×k] · B[n×k]ᵀ. Single rows (incremental decoding) use dot
// products; the rest go through a transposed copy of B.
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  if (m >= kMr) {
    const auto bt = transposed(b, n, k);
    gemm_nn(a, bt.data(), c, m, k, n);
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = c[i * n + j];
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] = s;
    }
  }
}

// C[k×n] += A[m×k]ᵀ · B[m×n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_strided({a, 1, k}, b, c, k, m, n);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void set_finite_checks(bool on) noexcept { g_finite_checks.store(on); }
bool finite_checks() noexcept { return g_finite_checks.load(); }

Tensor::Tensor() : node_(make_node({}, {0.0}, "leaf")) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    fail(ErrorKind::Dimension, "shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) + " values");
  }
  node_ = make_node(std::move(shape), std::move(data), "leaf");
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data, bool requires_grad) {
  return Tensor({rows, cols}, std::move(data), requires_grad);
}

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return matrix(n, n, std::move(d));
}

const Shape& Tensor::shape() const noexcept { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) fail(ErrorKind::Dimension, "axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

std::size_t Tensor::numel() const noexcept { return node_->data.size(); }
std::span<const double> Tensor::data() const noexcept { return node_->data; }
std::span<double> Tensor::mutable_data() noexcept { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) fail(ErrorKind::Contract, "item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const noexcept { return node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (node_->backward) fail(ErrorKind::Contract, "requires_grad can only be set on leaf tensors");
  node_->requires_grad = on;
}

bool Tensor::has_grad() const noexcept { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) fail(ErrorKind::Contract, "tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

const std::string& Tensor::op_name() const noexcept { return node_->op; }

Tensor Tensor::detach() const {
  auto n = make_node(node_->shape, node_->data, "detach");
  return Tensor(std::move(n));
}

Tensor Tensor::clone() const { return detach(); }

void Tensor::backward() const {
  if (numel() != 1) fail(ErrorKind::Contract, "backward() requires a scalar loss, got " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; each node is emitted once.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) {
      n->ensure_grad();
      n->backward(*n);
    }
  }
}

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    fail(ErrorKind::Dimension, "matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  auto out = make_node({m, n}, std::vector<double>(m * n, 0.0), "matmul");
  gemm_nn(a.data().data(), b.data().data(), out->data.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return finish(std::move(out), {&a, &b}, [an, bn, m, k, n](Tensor::Node& self) {
    if (an->requires_grad) gemm_nt(self.grad.data(), bn->data.data(), an->ensure_grad().data(), m, n, k);
    if (bn->requires_grad) gemm_tn(an->data.data(), self.grad.data(), bn->ensure_grad().data(), m, k, n);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    fail(ErrorKind::Dimension, "matmul_nt shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  auto out = make_node({m, n}, std::vector<double>(m * n, 0.0), "matmul_nt");
  gemm_nt(a.data().data(), b.data().data(), out->data.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return finish(std::move(out), {&a, &b}, [an, bn, m, k, n](Tensor::Node& self) {
    // dA = G·B, dB = Gᵀ·A
    if (an->requires_grad) gemm_nn(self.grad.data(), bn->data.data(), an->ensure_grad().data(), m, n, k);
    if (bn->requires_grad) gemm_tn(self.grad.data(), an->data.data(), bn->ensure_grad().data(), m, n, k);
  });
}

namespace {

bool is_row_broadcast(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2) return false;
  const auto n = a.dim(1);
  return (b.rank() == 1 && b.dim(0) == n) || (b.rank() == 2 && b.dim(0) == 1 && b.dim(1) == n && a.dim(0) != 1);
}

Tensor add_sub(const Tensor& a, const Tensor& b, double sign, const char* name) {
  if (a.shape() == b.shape()) {
    std::vector<double> d(a.numel());
    const auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = ad[i] + sign * bd[i];
    auto an = a.node(), bn = b.node();
    return finish(make_node(a.shape(), std::move(d), name), {&a, &b}, [an, bn, sign](Tensor::Node& self) {
      if (an->requires_grad) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
      }
    });
  }
  if (!is_row_broadcast(a, b)) {
    fail(ErrorKind::Dimension, std::string(name) + " shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto m = a.dim(0), n = a.dim(1);
  std::vector<double> d(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) d[i * n + j] = ad[i * n + j] + sign * bd[j];
  auto an = a.node(), bn = b.node();
  return finish(make_node(a.shape(), std::move(d), name), {&a, &b}, [an, bn, sign, m, n](Tensor::Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += sign * self.grad[i * n + j];
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_sub(a, b, 1.0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_sub(a, b, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Dimension, "mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> d(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = ad[i] * bd[i];
  auto an = a.node(), bn = b.node();
  return finish(make_node(a.shape(), std::move(d), "mul"), {&a, &b}, [an, bn](Tensor::Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> d(a.data().begin(), a.data().end());
  for (auto& v : d) v *= factor;
  auto an = a.node();
  return finish(make_node(a.shape(), std::move(d), "scale"), {&a}, [an, factor](Tensor::Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> d(a.data().begin(), a.data().end());
  for (auto& v : d) v = v > 0.0 ? v : 0.0;
  auto an = a.node();
  return finish(make_node(a.shape(), std::move(d), "relu"), {&a}, [an](Tensor::Node& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (an->data[i] > 0.0) g[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto an = a.node();
  return finish(make_node({}, {s}, "sum"), {&a}, [an](Tensor::Node& self) {
    auto& g = an->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) fail(ErrorKind::Domain, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) fail(ErrorKind::Dimension, "softmax axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  const auto len = x.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  std::vector<double> y(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xd[base + i * inner]);
      if (mx == -std::numeric_limits<double>::infinity()) {
        fail(ErrorKind::Domain, "softmax over a slice that is entirely -inf");
      }
      double z = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double e = std::exp(xd[base + i * inner] - mx);
        y[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < len; ++i) y[base + i * inner] /= z;
    }
  }
  auto xn = x.node();
  auto out = make_node(x.shape(), std::move(y), "softmax");
  Tensor::Node* raw = out.get();
  return finish(std::move(out), {&x}, [xn, raw, outer, inner, len](Tensor::Node& self) {
    auto& g = xn->ensure_grad();
    const auto& yv = raw->data;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < len; ++i) dot += self.grad[base + i * inner] * yv[base + i * inner];
        for (std::size_t i = 0; i < len; ++i) {
          const auto idx = base + i * inner;
          g[idx] += yv[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0) fail(ErrorKind::Dimension, "layer_norm on a scalar");
  const auto n = x.shape().back();
  if (gain.numel() != n || bias.numel() != n) {
    fail(ErrorKind::Dimension, "layer_norm gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                                   " do not match " + shape_str(x.shape()));
  }
  const auto rows = x.numel() / n;
  std::vector<double> xhat(x.numel()), y(x.numel()), inv_std(rows);
  const auto xd = x.data(), gd = gain.data(), bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xr[j] - mu) * is;
      y[r * n + j] = xhat[r * n + j] * gd[j] + bd[j];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return finish(make_node(x.shape(), std::move(y), "layer_norm"), {&x, &gain, &bias},
                [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, n](Tensor::Node& self) {
                  if (gn->requires_grad) {
                    auto& g = gn->ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j] * xhat[r * n + j];
                  }
                  if (bn->requires_grad) {
                    auto& g = bn->ensure_grad();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
                  }
                  if (xn->requires_grad) {
                    auto& g = xn->ensure_grad();
                    const double inv_n = 1.0 / static_cast<double>(n);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        const double dxh = self.grad[r * n + j] * gn->data[j];
                        m1 += dxh;
                        m2 += dxh * xhat[r * n + j];
                      }
                      m1 *= inv_n;
                      m2 *= inv_n;
                      for (std::size_t j = 0; j < n; ++j) {
                        const double dxh = self.grad[r * n + j] * gn->data[j];
                        g[r * n + j] += inv_std[r] * (dxh - m1 - xhat[r * n + j] * m2);
                      }
                    }
                  }
                });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  const auto vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      fail(ErrorKind::Vocab, "token id " + std::to_string(ids[r]) + " outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(td.data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
  }
  auto tn = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return finish(make_node({ids.size(), d}, std::move(out), "embedding"), {&table},
                [tn, idv = std::move(idv), d](Tensor::Node& self) {
                  auto& g = tn->ensure_grad();
                  for (std::size_t r = 0; r < idv.size(); ++r) {
                    double* gr = g.data() + static_cast<std::size_t>(idv[r]) * d;
                    for (std::size_t j = 0; j < d; ++j) gr[j] += self.grad[r * d + j];
                  }
                });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    fail(ErrorKind::Dimension, "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  auto xn = x.node();
  std::vector<double> d(x.data().begin(), x.data().end());
  return finish(make_node(std::move(shape), std::move(d), "reshape"), {&x}, [xn](Tensor::Node& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const auto m = x.dim(0), n = x.dim(1);
  std::vector<double> d(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) d[j * m + i] = xd[i * n + j];
  auto xn = x.node();
  return finish(make_node({n, m}, std::move(d), "transpose"), {&x}, [xn, m, n](Tensor::Node& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) fail(ErrorKind::Dimension, "concat of zero tensors");
  for (const auto& p : parts) require_rank(p, 2, "concat");
  if (axis > 1) fail(ErrorKind::Dimension, "concat axis must be 0 or 1");
  const auto other = 1 - axis;
  const auto fixed = parts[0].dim(other);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.dim(other) != fixed) {
      fail(ErrorKind::Dimension, "concat mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    total += p.dim(axis);
  }
  Shape shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
  std::vector<double> d(shape_numel(shape));
  std::vector<std::shared_ptr<Tensor::Node>> nodes;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    offsets.push_back(off);
    const auto pd = p.data();
    if (axis == 0) {
      std::copy(pd.begin(), pd.end(), d.begin() + static_cast<std::ptrdiff_t>(off * fixed));
    } else {
      const auto w = p.dim(1);
      for (std::size_t r = 0; r < fixed; ++r)
        std::copy_n(pd.data() + r * w, w, d.data() + r * total + off);
    }
    off += p.dim(axis);
  }
  return finish_many(make_node(std::move(shape), std::move(d), "concat"), parts,
                     [nodes, offsets, axis, fixed, total](Tensor::Node& self) {
                       for (std::size_t k = 0; k < nodes.size(); ++k) {
                         auto& pn = nodes[k];
                         if (!pn->requires_grad) continue;
                         auto& g = pn->ensure_grad();
                         if (axis == 0) {
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] * fixed + i];
                         } else {
                           const auto w = pn->shape[1];
                           for (std::size_t r = 0; r < fixed; ++r)
                             for (std::size_t j = 0; j < w; ++j) g[r * w + j] += self.grad[r * total + offsets[k] + j];
                         }
                       }
                     });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_rows");
  if (begin > end || end > x.dim(0)) {
    fail(ErrorKind::Bounds, "row slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(x.shape()));
  }
  const auto n = x.dim(1);
  const auto xd = x.data();
  std::vector<double> d(xd.begin() + static_cast<std::ptrdiff_t>(begin * n), xd.begin() + static_cast<std::ptrdiff_t>(end * n));
  auto xn = x.node();
  return finish(make_node({end - begin, n}, std::move(d), "slice_rows"), {&x}, [xn, begin, n](Tensor::Node& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_cols");
  if (begin > end || end > x.dim(1)) {
    fail(ErrorKind::Bounds, "column slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(x.shape()));
  }
  const auto m = x.dim(0), n = x.dim(1), w = end - begin;
  const auto xd = x.data();
  std::vector<double> d(m * w);
  for (std::size_t r = 0; r < m; ++r) std::copy_n(xd.data() + r * n + begin, w, d.data() + r * w);
  auto xn = x.node();
  return finish(make_node({m, w}, std::move(d), "slice_cols"), {&x}, [xn, begin, m, n, w](Tensor::Node& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < w; ++j) g[r * n + begin + j] += self.grad[r * w + j];
  });
}

Tensor dropout(const Tensor& x, double p, bool training, const DropoutKey& key) {
  if (p < 0.0 || p >= 1.0) fail(ErrorKind::Domain, "dropout probability must lie in [0,1)");
  if (!training || p == 0.0) return x;
  const std::uint64_t base = hash_combine(hash_combine(key.seed, key.site), key.step);
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  std::vector<double> d(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    mask[i] = counter_uniform(hash_combine(base, i)) >= p ? keep_scale : 0.0;
    d[i] = xd[i] * mask[i];
  }
  auto xn = x.node();
  return finish(make_node(x.shape(), std::move(d), "dropout"), {&x}, [xn, mask = std::move(mask)](Tensor::Node& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int> targets, int ignore_id) {
  require_rank(logits, 2, "cross_entropy_with_logits");
  const auto m = logits.dim(0), v = logits.dim(1);
  if (targets.size() != m) {
    fail(ErrorKind::Dimension, "cross entropy: " + std::to_string(targets.size()) + " targets for logits " + shape_str(logits.shape()));
  }
  std::vector<double> probs(logits.numel());
  const auto ld = logits.data();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < m; ++r) {
    const double* lr = ld.data() + r * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, lr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = std::exp(lr[j] - mx);
      z += probs[r * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
    if (targets[r] == ignore_id) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
      fail(ErrorKind::Vocab, "target id " + std::to_string(targets[r]) + " outside " + std::to_string(v) + " classes");
    }
    total += (mx + std::log(z)) - lr[targets[r]];
    ++count;
  }
  if (count == 0) fail(ErrorKind::Domain, "cross entropy over zero counted targets");
  const double loss = total / static_cast<double>(count);
  auto ln = logits.node();
  std::vector<int> tv(targets.begin(), targets.end());
  return finish(make_node({}, {loss}, "cross_entropy"), {&logits},
                [ln, probs = std::move(probs), tv = std::move(tv), m, v, count, ignore_id](Tensor::Node& self) {
                  auto& g = ln->ensure_grad();
                  const double s = self.grad[0] / static_cast<double>(count);
                  for (std::size_t r = 0; r < m; ++r) {
                    if (tv[r] == ignore_id) continue;
                    for (std::size_t j = 0; j < v; ++j) g[r * v + j] += s * probs[r * v + j];
                    g[r * v + static_cast<std::size_t>(tv[r])] -= s;
                  }
                });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const Segment> q_segments, std::span<const Segment> kv_segments, bool causal,
                 AttentionWeights* weights) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_rank(v, 2, "attention");
  const auto d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || k.dim(0) != v.dim(0)) {
    fail(ErrorKind::Dimension, "attention shapes q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) + " v" + shape_str(v.shape()));
  }
  if (heads == 0 || d % heads != 0) fail(ErrorKind::Dimension, "model dim " + std::to_string(d) + " not divisible by heads");
  if (q_segments.size() != kv_segments.size()) fail(ErrorKind::Dimension, "attention segment count mismatch");
  const auto dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto qd = q.data(), kd = k.data(), vd = v.data();

  std::vector<double> out(q.numel(), 0.0);
  std::vector<std::vector<double>> alphas(q_segments.size());
  for (std::size_t s = 0; s < q_segments.size(); ++s) {
    const auto qs = q_segments[s], ks = kv_segments[s];
    if (qs.end > q.dim(0) || ks.end > k.dim(0) || qs.begin > qs.end || ks.begin > ks.end) {
      fail(ErrorKind::Bounds, "attention segment outside packed rows");
    }
    const auto ql = qs.size(), kl = ks.size();
    if (causal && ql > kl) fail(ErrorKind::Dimension, "causal attention with more queries than keys");
    auto& a = alphas[s];
    a.assign(heads * ql * kl, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t r = 0; r < ql; ++r) {
        const double* qr = qd.data() + (qs.begin + r) * d + h * dh;
        const std::size_t visible = causal ? r + (kl - ql) + 1 : kl;
        if (visible == 0) fail(ErrorKind::Domain, "attention row with no visible keys");
        double* ar = a.data() + (h * ql + r) * kl;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < visible; ++c) {
          const double* kc = kd.data() + (ks.begin + c) * d + h * dh;
          double dot = 0.0;
          for (std::size_t j = 0; j < dh; ++j) dot += qr[j] * kc[j];
          ar[c] = dot * inv_sqrt;
          mx = std::max(mx, ar[c]);
        }
        double z = 0.0;
        for (std::size_t c = 0; c < visible; ++c) {
          ar[c] = std::exp(ar[c] - mx);
          z += ar[c];
        }
        for (std::size_t c = 0; c < visible; ++c) ar[c] /= z;
        double* orow = out.data() + (qs.begin + r) * d + h * dh;
        for (std::size_t c = 0; c < visible; ++c) {
          const double* vc = vd.data() + (ks.begin + c) * d + h * dh;
          for (std::size_t j = 0; j < dh; ++j) orow[j] += ar[c] * vc[j];
        }
      }
    }
  }
  if (weights != nullptr) weights->per_segment = alphas;

  auto qn = q.node(), kn = k.node(), vn = v.node();
  std::vector<Segment> qsv(q_segments.begin(), q_segments.end()), ksv(kv_segments.begin(), kv_segments.end());
  return finish(make_node(q.shape(), std::move(out), "attention"), {&q, &k, &v},
                [qn, kn, vn, alphas = std::move(alphas), qsv = std::move(qsv), ksv = std::move(ksv), heads, d, dh,
                 inv_sqrt](Tensor::Node& self) {
                  std::vector<double> dalpha;
                  for (std::size_t s = 0; s < qsv.size(); ++s) {
                    const auto qs = qsv[s], ks = ksv[s];
                    const auto ql = qs.size(), kl = ks.size();
                    const auto& a = alphas[s];
                    dalpha.assign(kl, 0.0);
                    for (std::size_t h = 0; h < heads; ++h) {
                      for (std::size_t r = 0; r < ql; ++r) {
                        const double* ar = a.data() + (h * ql + r) * kl;
                        const double* go = self.grad.data() + (qs.begin + r) * d + h * dh;
                        double dot = 0.0;
                        for (std::size_t c = 0; c < kl; ++c) {
                          const double* vc = vn->data.data() + (ks.begin + c) * d + h * dh;
                          double da = 0.0;
                          for (std::size_t j = 0; j < dh; ++j) da += go[j] * vc[j];
                          dalpha[c] = da;
                          dot += da * ar[c];
                        }
                        if (vn->requires_grad) {
                          auto& gv = vn->ensure_grad();
                          for (std::size_t c = 0; c < kl; ++c) {
                            double* gvc = gv.data() + (ks.begin + c) * d + h * dh;
                            for (std::size_t j = 0; j < dh; ++j) gvc[j] += ar[c] * go[j];
                          }
                        }
                        const double* qr = qn->data.data() + (qs.begin + r) * d + h * dh;
                        for (std::size_t c = 0; c < kl; ++c) {
                          const double ds = ar[c] * (dalpha[c] - dot) * inv_sqrt;
                          if (ds == 0.0) continue;
                          if (qn->requires_grad) {
                            double* gq = qn->ensure_grad().data() + (qs.begin + r) * d + h * dh;
                            const double* kc = kn->data.data() + (ks.begin + c) * d + h * dh;
                            for (std::size_t j = 0; j < dh; ++j) gq[j] += ds * kc[j];
                          }
                          if (kn->requires_grad) {
                            double* gk = kn->ensure_grad().data() + (ks.begin + c) * d + h * dh;
                            for (std::size_t j = 0; j < dh; ++j) gk[j] += ds * qr[j];
                          }
                        }
                      }
                    }
                  }
                });
}

}  // namespace ops

}  // namespace mnmt
