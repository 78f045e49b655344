#include "encforge/attention.hpp"

#include <algorithm>
#include <cmath>

#include "encforge/errors.hpp"

namespace encforge {

namespace {

template <typename T>
void check_qkv(const Tensor<T>& x, const char* name) {
  if (x.rank() != 3) {
    throw DimensionError(std::string(name) + " must be [tokens, heads, head_dim], got " +
                         shape_str(x.shape()));
  }
}

std::size_t half_window(std::optional<std::size_t> window) {
  return window ? *window / 2 : static_cast<std::size_t>(-1);
}

}  // namespace

void RopeParams::validate() const {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw ConfigError("rotary head_dim must be a positive even number, got " + std::to_string(head_dim));
  }
  if (!(theta > 0.0) || !std::isfinite(theta)) throw ConfigError("rotary theta must be positive");
}

template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, std::span<const std::size_t> positions, const RopeParams& params) {
  params.validate();
  check_qkv(x, "rope_apply input");
  const std::size_t tokens = x.dim(0), heads = x.dim(1), hd = x.dim(2);
  if (hd != params.head_dim) {
    throw DimensionError("rope head_dim " + std::to_string(params.head_dim) + " vs tensor " +
                         shape_str(x.shape()));
  }
  if (positions.size() != tokens) {
    throw DimensionError("rope_apply: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(tokens) + " tokens");
  }
  const std::size_t pairs = hd / 2;
  std::vector<double> inv_freq(pairs);
  for (std::size_t i = 0; i < pairs; ++i) {
    inv_freq[i] = std::pow(params.theta, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
  }
  // Per-token cos/sin, shared by every head.
  std::vector<T> cosv(tokens * pairs), sinv(tokens * pairs);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t i = 0; i < pairs; ++i) {
      const double angle = static_cast<double>(positions[t]) * inv_freq[i];
      cosv[t * pairs + i] = static_cast<T>(std::cos(angle));
      sinv[t * pairs + i] = static_cast<T>(std::sin(angle));
    }
  }
  auto xd = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = (t * heads + h) * hd;
      for (std::size_t i = 0; i < pairs; ++i) {
        const T c = cosv[t * pairs + i], s = sinv[t * pairs + i];
        const T a = xd[base + 2 * i], b = xd[base + 2 * i + 1];
        out[base + 2 * i] = a * c - b * s;
        out[base + 2 * i + 1] = a * s + b * c;
      }
    }
  }
  Tensor<T> result(x.shape(), std::move(out));
  if (grad_enabled() && x.requires_grad()) {
    auto node = result.node();
    auto xn = x.node();
    node->requires_grad = true;
    node->parents.push_back(xn);
    node->backward = [xn, cosv = std::move(cosv), sinv = std::move(sinv), tokens, heads, hd,
                      pairs](detail::Node<T>& self) {
      xn->ensure_grad();
      for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t base = (t * heads + h) * hd;
          for (std::size_t i = 0; i < pairs; ++i) {
            const T c = cosv[t * pairs + i], s = sinv[t * pairs + i];
            const T ga = self.grad[base + 2 * i], gb = self.grad[base + 2 * i + 1];
            xn->grad[base + 2 * i] += ga * c + gb * s;
            xn->grad[base + 2 * i + 1] += -ga * s + gb * c;
          }
        }
      }
    };
  }
  return result;
}

void validate_cu_seqlens(std::span<const std::size_t> cu, std::size_t tokens) {
  if (cu.size() < 2) throw BatchError("cu_seqlens needs at least two entries");
  if (cu.front() != 0) throw BatchError("cu_seqlens must start at 0");
  for (std::size_t i = 1; i < cu.size(); ++i) {
    if (cu[i] <= cu[i - 1]) throw BatchError("cu_seqlens must be strictly increasing");
  }
  if (cu.back() != tokens) {
    throw BatchError("cu_seqlens ends at " + std::to_string(cu.back()) + " but there are " +
                     std::to_string(tokens) + " tokens");
  }
}

std::vector<std::size_t> positions_from_cu_seqlens(std::span<const std::size_t> cu) {
  std::vector<std::size_t> pos;
  if (cu.empty()) return pos;
  pos.reserve(cu.back());
  for (std::size_t s = 0; s + 1 < cu.size(); ++s) {
    for (std::size_t t = cu[s]; t < cu[s + 1]; ++t) pos.push_back(t - cu[s]);
  }
  return pos;
}

std::pair<std::size_t, std::size_t> key_range(std::size_t i, std::size_t seq_begin, std::size_t seq_end,
                                              std::optional<std::size_t> window) {
  const std::size_t hw = half_window(window);
  const std::size_t first = (i - seq_begin > hw) ? i - hw : seq_begin;
  const std::size_t last = (seq_end - 1 - i > hw) ? i + hw : seq_end - 1;
  return {first, last};
}

std::vector<std::pair<std::size_t, std::size_t>> attended_pairs(std::span<const std::size_t> cu,
                                                                std::optional<std::size_t> window) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t s = 0; s + 1 < cu.size(); ++s) {
    for (std::size_t i = cu[s]; i < cu[s + 1]; ++i) {
      auto [first, last] = key_range(i, cu[s], cu[s + 1], window);
      for (std::size_t j = first; j <= last; ++j) pairs.emplace_back(i, j);
    }
  }
  return pairs;
}

template <typename T>
Tensor<T> masked_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::span<const std::size_t> cu_seqlens, std::optional<std::size_t> window) {
  check_qkv(q, "q");
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("q/k/v shapes differ: " + shape_str(q.shape()) + " " + shape_str(k.shape()) +
                         " " + shape_str(v.shape()));
  }
  const std::size_t tokens = q.dim(0), heads = q.dim(1), hd = q.dim(2);
  validate_cu_seqlens(cu_seqlens, tokens);
  if (window && *window == 0) throw ConfigError("attention window must be positive");
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  const bool rec = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());

  auto qd = q.data(), kd = k.data(), vd = v.data();
  std::vector<T> out(q.numel(), T(0));
  // Probabilities per (head, query) over that query's key range, for backward.
  std::vector<T> probs;
  std::vector<std::size_t> prob_offset;
  if (rec) prob_offset.reserve(heads * tokens + 1);

  const std::size_t row_stride = heads * hd;
  std::vector<T> kt, scores;
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t s = 0; s + 1 < cu_seqlens.size(); ++s) {
      const std::size_t begin = cu_seqlens[s], end = cu_seqlens[s + 1], n = end - begin;
      // K^T for this head and sequence: [hd][n].
      kt.assign(hd * n, T(0));
      for (std::size_t j = 0; j < n; ++j) {
        const T* krow = kd.data() + (begin + j) * row_stride + h * hd;
        for (std::size_t d = 0; d < hd; ++d) kt[d * n + j] = krow[d];
      }
      for (std::size_t i = begin; i < end; ++i) {
        auto [first, last] = key_range(i, begin, end, window);
        const std::size_t lo = first - begin, width = last - first + 1;
        scores.assign(width, T(0));
        const T* qrow = qd.data() + i * row_stride + h * hd;
        for (std::size_t d = 0; d < hd; ++d) {
          const T qv = qrow[d] * scale;
          const T* ktrow = kt.data() + d * n + lo;
          for (std::size_t j = 0; j < width; ++j) scores[j] += qv * ktrow[j];
        }
        const T mx = *std::max_element(scores.begin(), scores.end());
        T total = T(0);
        for (auto& sc : scores) {
          sc = std::exp(sc - mx);
          total += sc;
        }
        const T inv = T(1) / total;
        T* orow = out.data() + i * row_stride + h * hd;
        for (std::size_t j = 0; j < width; ++j) {
          const T p = scores[j] * inv;
          scores[j] = p;
          const T* vrow = vd.data() + (first + j) * row_stride + h * hd;
          for (std::size_t d = 0; d < hd; ++d) orow[d] += p * vrow[d];
        }
        if (rec) {
          prob_offset.push_back(probs.size());
          probs.insert(probs.end(), scores.begin(), scores.end());
        }
      }
    }
  }
  if (rec) prob_offset.push_back(probs.size());

  Tensor<T> result(q.shape(), std::move(out));
  if (!rec) return result;

  auto node = result.node();
  auto qn = q.node(), kn = k.node(), vn = v.node();
  node->requires_grad = true;
  node->parents = {qn, kn, vn};
  std::vector<std::size_t> cu(cu_seqlens.begin(), cu_seqlens.end());
  node->backward = [qn, kn, vn, cu = std::move(cu), window, probs = std::move(probs),
                    prob_offset = std::move(prob_offset), heads, hd, scale](detail::Node<T>& self) {
    qn->ensure_grad();
    kn->ensure_grad();
    vn->ensure_grad();
    const std::size_t row_stride = heads * hd;
    const T* qd = qn->data.data();
    const T* kd = kn->data.data();
    const T* vd = vn->data.data();
    std::vector<T> dp;
    std::size_t row = 0;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t s = 0; s + 1 < cu.size(); ++s) {
        const std::size_t begin = cu[s], end = cu[s + 1];
        for (std::size_t i = begin; i < end; ++i, ++row) {
          auto [first, last] = key_range(i, begin, end, window);
          const std::size_t width = last - first + 1;
          const T* p = probs.data() + prob_offset[row];
          const T* go = self.grad.data() + i * row_stride + h * hd;
          dp.assign(width, T(0));
          T rowdot = T(0);
          for (std::size_t j = 0; j < width; ++j) {
            const std::size_t key = first + j;
            const T* vrow = vd + key * row_stride + h * hd;
            T* gv = vn->grad.data() + key * row_stride + h * hd;
            T acc = T(0);
            for (std::size_t d = 0; d < hd; ++d) {
              acc += go[d] * vrow[d];
              gv[d] += p[j] * go[d];
            }
            dp[j] = acc;
            rowdot += p[j] * acc;
          }
          const T* qrow = qd + i * row_stride + h * hd;
          T* gq = qn->grad.data() + i * row_stride + h * hd;
          for (std::size_t j = 0; j < width; ++j) {
            const T ds = p[j] * (dp[j] - rowdot) * scale;
            if (ds == T(0)) continue;
            const std::size_t key = first + j;
            const T* krow = kd + key * row_stride + h * hd;
            T* gk = kn->grad.data() + key * row_stride + h * hd;
            for (std::size_t d = 0; d < hd; ++d) {
              gq[d] += ds * krow[d];
              gk[d] += ds * qrow[d];
            }
          }
        }
      }
    }
  };
  return result;
}

template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                 std::span<const std::size_t> cu_seqlens, const AttentionSpec& spec) {
  check_qkv(q, "q");
  if (q.dim(1) != spec.heads) {
    throw DimensionError("attend: spec has " + std::to_string(spec.heads) + " heads, q is " +
                         shape_str(q.shape()));
  }
  validate_cu_seqlens(cu_seqlens, q.dim(0));
  const auto positions = positions_from_cu_seqlens(cu_seqlens);
  Tensor<T> qr = rope_apply(q, positions, spec.rope);
  Tensor<T> kr = rope_apply(k, positions, spec.rope);
  return masked_attention(qr, kr, v, cu_seqlens, spec.window);
}

std::uint64_t attention_pair_count(std::span<const std::size_t> seq_lens, std::optional<std::size_t> window) {
  std::uint64_t total = 0;
  for (std::size_t len : seq_lens) {
    if (len == 0) throw InputError("sequence lengths must be positive");
    const std::uint64_t n = len;
    const std::uint64_t hw = half_window(window);
    if (!window || hw >= n - 1) {
      total += n * n;
    } else {
      // Full band of 2*hw+1 per query minus the two clipped triangles.
      total += n * (2 * hw + 1) - hw * (hw + 1);
    }
  }
  return total;
}

template Tensor<float> rope_apply(const Tensor<float>&, std::span<const std::size_t>, const RopeParams&);
template Tensor<double> rope_apply(const Tensor<double>&, std::span<const std::size_t>, const RopeParams&);
template Tensor<float> masked_attention(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                        std::span<const std::size_t>, std::optional<std::size_t>);
template Tensor<double> masked_attention(const Tensor<double>&, const Tensor<double>&,
                                         const Tensor<double>&, std::span<const std::size_t>,
                                         std::optional<std::size_t>);
template Tensor<float> attend(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                              std::span<const std::size_t>, const AttentionSpec&);
template Tensor<double> attend(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                               std::span<const std::size_t>, const AttentionSpec&);

}  // namespace encforge
