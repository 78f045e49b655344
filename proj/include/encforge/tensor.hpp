#pragma once

// Dense row-major tensors with a small reverse-mode tape.
//
// A Tensor is a shared handle onto a node holding data, an optional grad
// buffer and (for op results) the closure that routes the node's grad into
// its parents. Copying a Tensor aliases storage; use clone() for a deep copy.
// Only the op set below is differentiable.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "encforge/random.hpp"

namespace encforge {

using Shape = std::vector<std::size_t>;

/// Label value for positions that do not contribute to the loss.
inline constexpr std::int32_t kIgnoreLabel = -100;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

/// True unless a NoGradGuard is alive on this thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  /// Leaf tensor that collects gradients.
  static Tensor parameter(Shape shape, std::vector<T> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad();
  std::span<const T> grad() const;
  void zero_grad();

  /// Seeds d(self)/d(self) = 1 and accumulates into every reachable leaf.
  /// Requires a single-element tensor.
  void backward() const;

  /// Deep copy with no graph history; keeps requires_grad.
  Tensor clone() const;
  /// Same values, fresh leaf with no history.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  const NodePtr& node() const { return node_; }
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

 private:
  NodePtr node_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

// ---- differentiable ops -------------------------------------------------

/// [m,k] x [k,n] -> [m,n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// [m,k] x [n,k]^T -> [m,n]; used by the tied decoder.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// x[n,d] + bias[d], applied to every row.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

/// Bias-free LayerNorm over the last dimension: gamma * (x - mean) / sqrt(var + eps).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, double eps);

/// Exact (erf-based) GeLU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

/// Softmax over the last dimension with max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

/// Mean negative log-likelihood over positions whose label != kIgnoreLabel.
/// With `normalizer` set, the summed NLL is divided by it instead of the
/// local label count (full-batch averaging across microbatches).
template <typename T>
Tensor<T> cross_entropy_masked(const Tensor<T>& logits, std::span<const std::int32_t> labels,
                               std::optional<double> normalizer = std::nullopt);

/// Row gather: table[V,d], ids -> [ids.size(), d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids);

/// Columns [begin, end) of a 2-D tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Inverted dropout; identity when p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Pcg64Dxsm& rng);

// ---- gradient checking --------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  /// Relative error of a random directional derivative over all entries.
  double directional_rel_error = 0.0;
  std::size_t entries_checked = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor for |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double abs_floor = 1e-6;
  /// 0 checks every entry; otherwise a seeded sample of this many per tensor.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
};

/// Compares the tape's gradient of a scalar `loss` closure w.r.t. `params`
/// against central differences. Parameters are perturbed in place and
/// restored bit-for-bit.
GradCheckResult grad_check_params(const std::function<Tensor64()>& loss,
                                  std::span<Tensor64> params,
                                  const GradCheckOptions& options = {});

/// Checks an op by reducing its output to a scalar with fixed random weights.
GradCheckResult grad_check(const std::function<Tensor64(std::span<const Tensor64>)>& op,
                           std::vector<Tensor64> inputs, const GradCheckOptions& options = {});

}  // namespace encforge
