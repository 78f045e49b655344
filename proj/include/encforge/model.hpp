#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "encforge/attention.hpp"
#include "encforge/batching.hpp"
#include "encforge/tensor.hpp"

namespace encforge {

struct ModelConfig {
  std::size_t layers = 22;
  std::size_t hidden = 768;
  std::size_t heads = 12;
  std::size_t intermediate = 1152;
  std::size_t glu_expansion = 2304;
  std::size_t vocab = 50368;
  std::size_t max_seq = 8192;
  std::size_t global_every = 3;
  std::size_t window = 128;
  double theta_global = 160000.0;
  double theta_local = 10000.0;
  double norm_eps = 1e-5;
  double dropout_attn_out = 0.0;

  /// Throws ConfigError when any structural invariant fails.
  void validate() const;

  std::size_t head_dim() const { return hidden / heads; }
  /// Layer l is global iff l % global_every == 0.
  bool is_global(std::size_t layer) const { return layer % global_every == 0; }
  AttentionSpec attention_spec(std::size_t layer) const;
  std::size_t parameter_count() const;

  bool operator==(const ModelConfig&) const = default;

  /// Final base/large shapes (post context extension: 8,192 tokens, global theta 160k).
  static ModelConfig base();
  static ModelConfig large();
  /// Shapes used for the 1,024-token pretraining phase (global theta 10k).
  static ModelConfig base_pretraining();
  static ModelConfig large_pretraining();
  /// Desk-scale model for tests and tiny runs.
  static ModelConfig tiny();
};

enum class ParamKind { kWeight, kNorm, kBias };

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T> tensor;  // handle aliasing model storage
  ParamKind kind = ParamKind::kWeight;

  bool decays() const { return kind == ParamKind::kWeight; }
};

template <typename T>
struct LayerWeights {
  Tensor<T> attn_norm;  // undefined for layer 0
  Tensor<T> wqkv;       // [hidden, 3 * hidden], columns q | k | v, head-major inside each
  Tensor<T> wo;         // [hidden, hidden]
  Tensor<T> mlp_norm;   // [hidden]
  Tensor<T> wglu;       // [hidden, 2 * intermediate], columns gate | up
  Tensor<T> wdown;      // [intermediate, hidden]
};

struct ForwardOptions {
  /// Enables attention-output dropout when the config asks for it.
  Pcg64Dxsm* dropout_rng = nullptr;
};

template <typename T>
class EncoderModel {
 public:
  /// Weights zero, norms one. Use init_megatron for a trainable start.
  explicit EncoderModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  /// Logits [total_tokens, vocab] for a packed stream.
  Tensor<T> forward(std::span<const std::int32_t> ids, std::span<const std::size_t> cu_seqlens,
                    const ForwardOptions& options = {}) const;
  Tensor<T> forward(const PackedBatch& batch, const ForwardOptions& options = {}) const;

  /// Every trainable tensor in a fixed order. The decoder weight is the
  /// embedding and is not listed twice.
  std::vector<ParamRef<T>> parameters() const;
  void zero_grad() const;

  const Tensor<T>& embedding() const { return embedding_; }
  /// The tied decoder weight; same storage as embedding().
  const Tensor<T>& decoder_weight() const { return embedding_; }
  const Tensor<T>& decoder_bias() const { return decoder_bias_; }
  const Tensor<T>& embed_norm() const { return embed_norm_; }
  const Tensor<T>& final_norm() const { return final_norm_; }
  const std::vector<LayerWeights<T>>& layers() const { return layers_; }

  /// Deep copy with independent storage.
  EncoderModel clone() const;

  /// Keeps weights; only attention geometry and sequence limit may differ.
  void set_config_geometry(double theta_global, std::size_t max_seq);

 private:
  ModelConfig config_;
  Tensor<T> embedding_;     // [vocab, hidden]
  Tensor<T> embed_norm_;    // [hidden]
  std::vector<LayerWeights<T>> layers_;
  Tensor<T> final_norm_;    // [hidden]
  Tensor<T> decoder_bias_;  // [vocab]
};

/// Weights ~ N(0, 0.02); attention-out and MLP-down additionally scaled by 1/sqrt(2 * layers).
template <typename T>
EncoderModel<T> init_megatron(const ModelConfig& config, std::uint64_t seed);

struct TileOptions {
  /// Rescale residual-output projections by sqrt(base.layers / large.layers).
  bool depth_scaling = true;
};

/// Maps each large index on one axis to the base index it copies.
/// Centered: base block sits at offset (large - base) / 2, the rest wraps cyclically.
std::vector<std::size_t> center_wrap_map(std::size_t base, std::size_t large);
/// Head-aware map for head-major axes: centers heads and, inside each head, dimensions.
std::vector<std::size_t> head_wrap_map(std::size_t base_heads, std::size_t base_head_dim,
                                       std::size_t large_heads, std::size_t large_head_dim);

/// large[i][j] = base[row_map[i]][col_map[j]].
template <typename T>
std::vector<T> tile_matrix(std::span<const T> base, std::size_t base_cols, std::span<const std::size_t> row_map,
                           std::span<const std::size_t> col_map);

template <typename T>
EncoderModel<T> tile_from_base(const EncoderModel<T>& base, const ModelConfig& large_config,
                               const TileOptions& options = {});

template <typename T>
EncoderModel<T> average_checkpoints(std::span<const EncoderModel<T>> models);

/// Replaces the global-layer theta and raises max_seq. Local theta and weights are untouched.
template <typename T>
EncoderModel<T> extend_context(const EncoderModel<T>& model, double new_theta_global, std::size_t new_max_seq);

}  // namespace encforge
