#include "encforge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "encforge/errors.hpp"

namespace encforge {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using NodeT = detail::Node<T>;

template <typename T>
void check_finite(const std::vector<T>& data, const char* op) {
  for (T v : data) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (!g_grad_enabled) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Wraps op output into a node; attaches history only when `record` is set.
template <typename T>
Tensor<T> finish(Shape shape, std::vector<T> data, bool record,
                 std::initializer_list<const Tensor<T>*> inputs,
                 std::function<void(NodeT<T>&)> backward, const char* op) {
  check_finite(data, op);
  auto node = std::make_shared<NodeT<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (record) {
    node->requires_grad = true;
    for (const auto* t : inputs) node->parents.push_back(t->node());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                         shape_str(s));
  }
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  }
  return out;
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt = transpose(b, n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }
double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- Tensor --------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<detail::Node<T>>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("zero-sized dimension in " + shape_str(shape));
  }
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<detail::Node<T>>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("zero-sized dimension in " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  check_finite(values, "tensor construction");
  node_->shape = std::move(shape);
  node_->data = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

template <typename T>
std::span<T> Tensor<T>::grad() {
  node_->ensure_grad();
  return node_->grad;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw DimensionError("backward() needs a scalar, got " + shape_str(shape()));
  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = node_->shape;
  node->data = node_->data;
  node->requires_grad = node_->requires_grad && node_->parents.empty();
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

// ---- ops -----------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  const bool rec = recording({&a, &b});
  auto an = a.node(), bn = b.node();
  return finish<T>(
      {m, n}, std::move(out), rec, {&a, &b},
      [an, bn, m, k, n](NodeT<T>& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          gemm_nt(self.grad.data(), bn->data.data(), an->grad.data(), m, n, k);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          gemm_tn(an->data.data(), self.grad.data(), bn->grad.data(), m, k, n);
        }
      },
      "matmul");
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul_nt");
  require_rank(b.shape(), 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  std::vector<T> out(m * n, T(0));
  gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  const bool rec = recording({&a, &b});
  auto an = a.node(), bn = b.node();
  return finish<T>(
      {m, n}, std::move(out), rec, {&a, &b},
      [an, bn, m, k, n](NodeT<T>& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          gemm_nn(self.grad.data(), bn->data.data(), an->grad.data(), m, n, k);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          gemm_tn(self.grad.data(), an->data.data(), bn->grad.data(), m, n, k);
        }
      },
      "matmul_nt");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  const bool rec = recording({&a, &b});
  auto an = a.node(), bn = b.node();
  return finish<T>(
      a.shape(), std::move(out), rec, {&a, &b},
      [an, bn](NodeT<T>& self) {
        for (auto* p : {an.get(), bn.get()}) {
          if (!p->requires_grad) continue;
          p->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
      },
      "add");
}

template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& bias) {
  require_rank(x.shape(), 2, "add_rowvec");
  require_rank(bias.shape(), 1, "add_rowvec");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (bias.dim(0) != d) {
    throw DimensionError("add_rowvec " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto bd = bias.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bd[j];
  }
  const bool rec = recording({&x, &bias});
  auto xn = x.node(), bn = bias.node();
  return finish<T>(
      x.shape(), std::move(out), rec, {&x, &bias},
      [xn, bn, n, d](NodeT<T>& self) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) bn->grad[j] += self.grad[i * d + j];
          }
        }
      },
      "add_rowvec");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  std::vector<T> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  const bool rec = recording({&a, &b});
  auto an = a.node(), bn = b.node();
  return finish<T>(
      a.shape(), std::move(out), rec, {&a, &b},
      [an, bn](NodeT<T>& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->data[i];
        }
      },
      "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
  const bool rec = recording({&x});
  auto xn = x.node();
  return finish<T>(
      x.shape(), std::move(out), rec, {&x},
      [xn, factor](NodeT<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * factor;
      },
      "scale");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double total = 0.0;
  for (T v : x.data()) total += v;
  const bool rec = recording({&x});
  auto xn = x.node();
  return finish<T>(
      {1}, {static_cast<T>(total)}, rec, {&x},
      [xn](NodeT<T>& self) {
        xn->ensure_grad();
        for (auto& g : xn->grad) g += self.grad[0];
      },
      "sum");
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, double eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm on scalar");
  const std::size_t d = x.shape().back();
  if (d == 0) throw DimensionError("layer_norm over empty dimension");
  if (!(eps > 0.0)) throw ConfigError("layer_norm eps must be positive");
  if (gamma.rank() != 1 || gamma.dim(0) != d) {
    throw DimensionError("layer_norm gamma " + shape_str(gamma.shape()) + " for input " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xd = x.data();
  auto gd = gamma.data();
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    rstd[r] = static_cast<T>(inv);
    for (std::size_t j = 0; j < d; ++j) {
      T h = static_cast<T>((row[j] - mean) * inv);
      xhat[r * d + j] = h;
      out[r * d + j] = h * gd[j];
    }
  }
  const bool rec = recording({&x, &gamma});
  auto xn = x.node(), gn = gamma.node();
  if (!rec) xhat.clear();
  return finish<T>(
      x.shape(), std::move(out), rec, {&x, &gamma},
      [xn, gn, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](NodeT<T>& self) {
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) gn->grad[j] += self.grad[r * d + j] * xhat[r * d + j];
          }
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          std::vector<double> dxhat(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dx = 0.0, mean_dx_xhat = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = static_cast<double>(self.grad[r * d + j]) * gn->data[j];
              mean_dx += dxhat[j];
              mean_dx_xhat += dxhat[j] * xhat[r * d + j];
            }
            mean_dx /= static_cast<double>(d);
            mean_dx_xhat /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              xn->grad[r * d + j] += static_cast<T>(
                  rstd[r] * (dxhat[j] - mean_dx - xhat[r * d + j] * mean_dx_xhat));
            }
          }
        }
      },
      "layer_norm");
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  auto xd = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xd[i];
    out[i] = static_cast<T>(v * normal_cdf(v));
  }
  const bool rec = recording({&x});
  auto xn = x.node();
  return finish<T>(
      x.shape(), std::move(out), rec, {&x},
      [xn](NodeT<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const double v = xn->data[i];
          xn->grad[i] += static_cast<T>(self.grad[i] * (normal_cdf(v) + v * normal_pdf(v)));
        }
      },
      "gelu");
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.rank() < 1) throw DimensionError("softmax_rows on scalar");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  auto xd = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * d;
    T* o = out.data() + r * d;
    const T mx = *std::max_element(row, row + d);
    T total = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = std::exp(row[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < d; ++j) o[j] /= total;
  }
  const bool rec = recording({&x});
  auto xn = x.node();
  return finish<T>(
      x.shape(), std::move(out), rec, {&x},
      [xn, rows, d](NodeT<T>& self) {
        xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* y = self.data.data() + r * d;
          const T* g = self.grad.data() + r * d;
          T dot = T(0);
          for (std::size_t j = 0; j < d; ++j) dot += y[j] * g[j];
          for (std::size_t j = 0; j < d; ++j) xn->grad[r * d + j] += y[j] * (g[j] - dot);
        }
      },
      "softmax_rows");
}

template <typename T>
Tensor<T> cross_entropy_masked(const Tensor<T>& logits, std::span<const std::int32_t> labels,
                               std::optional<double> normalizer) {
  require_rank(logits.shape(), 2, "cross_entropy_masked");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("cross_entropy_masked: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
  }
  std::size_t labeled = 0;
  for (std::int32_t l : labels) {
    if (l == kIgnoreLabel) continue;
    if (l < 0 || static_cast<std::size_t>(l) >= v) {
      throw InputError("label " + std::to_string(l) + " outside vocabulary of " + std::to_string(v));
    }
    ++labeled;
  }
  if (!normalizer && labeled == 0) throw EmptyLossError("every label is ignored");
  if (normalizer && !(*normalizer > 0.0)) throw InputError("loss normalizer must be positive");
  const double denom = normalizer ? *normalizer : static_cast<double>(labeled);

  auto ld = logits.data();
  double total = 0.0;
  // Softmax rows kept for the backward pass (labeled rows only).
  std::vector<std::size_t> rows;
  std::vector<T> probs;
  const bool rec = recording({&logits});
  if (rec) {
    rows.reserve(labeled);
    probs.reserve(labeled * v);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == kIgnoreLabel) continue;
    const T* row = ld.data() + i * v;
    double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[labels[i]];
    if (rec) {
      rows.push_back(i);
      for (std::size_t j = 0; j < v; ++j) probs.push_back(static_cast<T>(std::exp(row[j] - lse)));
    }
  }
  auto lnode = logits.node();
  std::vector<std::int32_t> kept;
  if (rec) {
    kept.reserve(rows.size());
    for (std::size_t i : rows) kept.push_back(labels[i]);
  }
  return finish<T>(
      {1}, {static_cast<T>(total / denom)}, rec, {&logits},
      [lnode, rows = std::move(rows), probs = std::move(probs), kept = std::move(kept), v,
       denom](NodeT<T>& self) {
        lnode->ensure_grad();
        const double g = self.grad[0] / denom;
        for (std::size_t r = 0; r < rows.size(); ++r) {
          T* dst = lnode->grad.data() + rows[r] * v;
          const T* p = probs.data() + r * v;
          for (std::size_t j = 0; j < v; ++j) dst[j] += static_cast<T>(g * p[j]);
          dst[kept[r]] -= static_cast<T>(g);
        }
      },
      "cross_entropy_masked");
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  require_rank(table.shape(), 2, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw InputError("embedding of zero tokens");
  std::vector<T> out(ids.size() * d);
  auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  const bool rec = recording({&table});
  auto tn = table.node();
  std::vector<std::int32_t> saved;
  if (rec) saved.assign(ids.begin(), ids.end());
  return finish<T>(
      {ids.size(), d}, std::move(out), rec, {&table},
      [tn, saved = std::move(saved), d](NodeT<T>& self) {
        tn->ensure_grad();
        for (std::size_t i = 0; i < saved.size(); ++i) {
          T* dst = tn->grad.data() + static_cast<std::size_t>(saved[i]) * d;
          const T* src = self.grad.data() + i * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      },
      "embedding");
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank(x.shape(), 2, "slice_cols");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (begin >= end || end > d) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") of " + shape_str(x.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<T> out(n * w);
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) std::copy_n(xd.data() + i * d + begin, w, out.data() + i * w);
  const bool rec = recording({&x});
  auto xn = x.node();
  return finish<T>(
      {n, w}, std::move(out), rec, {&x},
      [xn, n, d, w, begin](NodeT<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < w; ++j) xn->grad[i * d + begin + j] += self.grad[i * w + j];
        }
      },
      "slice_cols");
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  const bool rec = recording({&x});
  auto xn = x.node();
  return finish<T>(
      std::move(shape), x.values(), rec, {&x},
      [xn](NodeT<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
      },
      "reshape");
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Pcg64Dxsm& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
  if (p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.bernoulli(p) ? T(0) : keep_scale;
    out[i] = xd[i] * mask[i];
  }
  const bool rec = recording({&x});
  auto xn = x.node();
  return finish<T>(
      x.shape(), std::move(out), rec, {&x},
      [xn, mask = std::move(mask)](NodeT<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * mask[i];
      },
      "dropout");
}

// ---- gradient checking ---------------------------------------------------

namespace {

double rel_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace

GradCheckResult grad_check_params(const std::function<Tensor64()>& loss, std::span<Tensor64> params,
                                  const GradCheckOptions& options) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tensor64 l = loss();
    if (l.numel() != 1) throw DimensionError("grad_check loss must be scalar");
    l.backward();
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  auto eval = [&]() {
    NoGradGuard guard;
    return loss().item();
  };
  const double h = options.step;
  Pcg64Dxsm rng(options.seed, 0x67726164);
  GradCheckResult result;

  for (std::size_t t = 0; t < params.size(); ++t) {
    auto data = params[t].data();
    std::vector<std::size_t> entries(data.size());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (options.max_entries_per_tensor != 0 && entries.size() > options.max_entries_per_tensor) {
      rng.shuffle(std::span(entries));
      entries.resize(options.max_entries_per_tensor);
    }
    for (std::size_t idx : entries) {
      const double orig = data[idx];
      data[idx] = orig + h;
      const double up = eval();
      data[idx] = orig - h;
      const double down = eval();
      data[idx] = orig;
      const double numeric = (up - down) / (2.0 * h);
      result.max_rel_error =
          std::max(result.max_rel_error, rel_error(analytic[t][idx], numeric, options.abs_floor));
      ++result.entries_checked;
    }
  }

  // Directional derivative along a random unit-scale direction over all entries.
  std::vector<std::vector<double>> direction(params.size());
  std::vector<std::vector<double>> saved(params.size());
  double analytic_dir = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto data = params[t].data();
    saved[t].assign(data.begin(), data.end());
    direction[t].resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      direction[t][i] = rng.normal();
      analytic_dir += direction[t][i] * analytic[t][i];
    }
  }
  auto shift = [&](double s) {
    for (std::size_t t = 0; t < params.size(); ++t) {
      auto data = params[t].data();
      for (std::size_t i = 0; i < data.size(); ++i) data[i] = saved[t][i] + s * direction[t][i];
    }
  };
  shift(h);
  const double up = eval();
  shift(-h);
  const double down = eval();
  for (std::size_t t = 0; t < params.size(); ++t) {
    std::copy(saved[t].begin(), saved[t].end(), params[t].data().begin());
  }
  result.directional_rel_error = rel_error(analytic_dir, (up - down) / (2.0 * h), options.abs_floor);
  return result;
}

GradCheckResult grad_check(const std::function<Tensor64(std::span<const Tensor64>)>& op,
                           std::vector<Tensor64> inputs, const GradCheckOptions& options) {
  for (auto& in : inputs) in = Tensor64::parameter(in.shape(), in.values());
  Tensor64 weights;
  auto loss = [&]() {
    Tensor64 y = op(inputs);
    if (y.numel() == 1) return y;
    if (!weights.defined()) {
      Pcg64Dxsm rng(options.seed, 0x77656967);
      std::vector<double> w(y.numel());
      for (auto& v : w) v = rng.normal();
      weights = Tensor64(y.shape(), std::move(w));
    }
    return sum(mul(y, weights));
  };
  return grad_check_params(loss, inputs, options);
}

// ---- explicit instantiations ---------------------------------------------

#define ENCFORGE_INSTANTIATE(T)                                                                   \
  template class Tensor<T>;                                                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> add_rowvec(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                  \
  template Tensor<T> sum(const Tensor<T>&);                                                       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, double);                      \
  template Tensor<T> gelu(const Tensor<T>&);                                                      \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                              \
  template Tensor<T> cross_entropy_masked(const Tensor<T>&, std::span<const std::int32_t>,        \
                                          std::optional<double>);                                 \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>);                  \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                      \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                            \
  template Tensor<T> dropout(const Tensor<T>&, double, Pcg64Dxsm&);

ENCFORGE_INSTANTIATE(float)
ENCFORGE_INSTANTIATE(double)

#undef ENCFORGE_INSTANTIATE

}  // namespace encforge
