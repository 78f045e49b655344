#include "encforge/model.hpp"

#include <cmath>

#include "encforge/errors.hpp"

namespace encforge {

// ---- ModelConfig ------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (layers == 0) fail("layers must be positive");
  if (hidden == 0 || heads == 0) fail("hidden and heads must be positive");
  if (hidden % heads != 0) fail("hidden must be divisible by heads");
  if (head_dim() % 2 != 0) fail("head dimension must be even for rotary embeddings");
  if (vocab == 0 || vocab % 64 != 0) fail("vocab must be a positive multiple of 64");
  if (intermediate == 0 || glu_expansion != 2 * intermediate) fail("glu_expansion must equal 2 * intermediate");
  if (global_every == 0) fail("global_every must be at least 1");
  if (window == 0 || window % 2 != 0) fail("window must be a positive even number");
  if (max_seq == 0) fail("max_seq must be positive");
  if (!(theta_global > 0.0) || !(theta_local > 0.0)) fail("rotary thetas must be positive");
  if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
  if (dropout_attn_out < 0.0 || dropout_attn_out >= 1.0) fail("dropout_attn_out must be in [0, 1)");
}

AttentionSpec ModelConfig::attention_spec(std::size_t layer) const {
  AttentionSpec spec;
  spec.heads = heads;
  spec.rope.head_dim = head_dim();
  if (is_global(layer)) {
    spec.rope.theta = theta_global;
  } else {
    spec.rope.theta = theta_local;
    spec.window = window;
  }
  return spec;
}

std::size_t ModelConfig::parameter_count() const {
  std::size_t per_layer = 4 * hidden * hidden + hidden + hidden * glu_expansion + intermediate * hidden;
  return vocab * hidden + hidden + layers * per_layer + (layers - 1) * hidden + hidden + vocab;
}

ModelConfig ModelConfig::base() { return ModelConfig{}; }

ModelConfig ModelConfig::large() {
  ModelConfig c;
  c.layers = 28;
  c.hidden = 1024;
  c.heads = 16;
  c.intermediate = 2624;
  c.glu_expansion = 5248;
  return c;
}

ModelConfig ModelConfig::base_pretraining() {
  ModelConfig c = base();
  c.max_seq = 1024;
  c.theta_global = 10000.0;
  return c;
}

ModelConfig ModelConfig::large_pretraining() {
  ModelConfig c = large();
  c.max_seq = 1024;
  c.theta_global = 10000.0;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.layers = 3;
  c.hidden = 64;
  c.heads = 2;
  c.intermediate = 96;
  c.glu_expansion = 192;
  c.vocab = 64;
  c.max_seq = 128;
  c.window = 4;
  c.theta_global = 10000.0;
  return c;
}

// ---- EncoderModel ---------------------------------------------------------------

template <typename T>
EncoderModel<T>::EncoderModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t h = config_.hidden, v = config_.vocab, i = config_.intermediate;
  auto weight = [](Shape s) { return Tensor<T>::parameter(s, std::vector<T>(shape_numel(s), T(0))); };
  auto ones = [](std::size_t n) { return Tensor<T>::parameter({n}, std::vector<T>(n, T(1))); };
  embedding_ = weight({v, h});
  embed_norm_ = ones(h);
  layers_.resize(config_.layers);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    auto& lw = layers_[l];
    if (l != 0) lw.attn_norm = ones(h);
    lw.wqkv = weight({h, 3 * h});
    lw.wo = weight({h, h});
    lw.mlp_norm = ones(h);
    lw.wglu = weight({h, 2 * i});
    lw.wdown = weight({i, h});
  }
  final_norm_ = ones(h);
  decoder_bias_ = weight({v});
}

template <typename T>
Tensor<T> EncoderModel<T>::forward(std::span<const std::int32_t> ids, std::span<const std::size_t> cu_seqlens,
                                   const ForwardOptions& options) const {
  validate_cu_seqlens(cu_seqlens, ids.size());
  for (std::size_t s = 0; s + 1 < cu_seqlens.size(); ++s) {
    const std::size_t len = cu_seqlens[s + 1] - cu_seqlens[s];
    if (len > config_.max_seq) {
      throw InputError("sequence of " + std::to_string(len) + " tokens exceeds max_seq " +
                       std::to_string(config_.max_seq));
    }
  }
  const std::size_t n = ids.size(), h = config_.hidden, heads = config_.heads, hd = config_.head_dim(),
                    inter = config_.intermediate;
  const double eps = config_.norm_eps;

  Tensor<T> x = layer_norm(encforge::embedding(embedding_, ids), embed_norm_, eps);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& lw = layers_[l];
    Tensor<T> normed = (l == 0) ? x : layer_norm(x, lw.attn_norm, eps);
    Tensor<T> qkv = matmul(normed, lw.wqkv);
    Tensor<T> q = reshape(slice_cols(qkv, 0, h), {n, heads, hd});
    Tensor<T> k = reshape(slice_cols(qkv, h, 2 * h), {n, heads, hd});
    Tensor<T> v = reshape(slice_cols(qkv, 2 * h, 3 * h), {n, heads, hd});
    Tensor<T> attn = reshape(attend(q, k, v, cu_seqlens, config_.attention_spec(l)), {n, h});
    Tensor<T> attn_out = matmul(attn, lw.wo);
    if (config_.dropout_attn_out > 0.0 && options.dropout_rng != nullptr) {
      attn_out = dropout(attn_out, config_.dropout_attn_out, *options.dropout_rng);
    }
    x = add(x, attn_out);

    Tensor<T> mlp_in = layer_norm(x, lw.mlp_norm, eps);
    Tensor<T> gate_up = matmul(mlp_in, lw.wglu);
    Tensor<T> gated = mul(gelu(slice_cols(gate_up, 0, inter)), slice_cols(gate_up, inter, 2 * inter));
    x = add(x, matmul(gated, lw.wdown));
  }
  x = layer_norm(x, final_norm_, eps);
  return add_rowvec(matmul_nt(x, embedding_), decoder_bias_);
}

template <typename T>
Tensor<T> EncoderModel<T>::forward(const PackedBatch& batch, const ForwardOptions& options) const {
  return forward(batch.model_input(), batch.cu_seqlens, options);
}

template <typename T>
std::vector<ParamRef<T>> EncoderModel<T>::parameters() const {
  std::vector<ParamRef<T>> out;
  out.push_back({"embedding", embedding_, ParamKind::kWeight});
  out.push_back({"embed_norm", embed_norm_, ParamKind::kNorm});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const auto& lw = layers_[l];
    if (lw.attn_norm.defined()) out.push_back({p + "attn_norm", lw.attn_norm, ParamKind::kNorm});
    out.push_back({p + "wqkv", lw.wqkv, ParamKind::kWeight});
    out.push_back({p + "wo", lw.wo, ParamKind::kWeight});
    out.push_back({p + "mlp_norm", lw.mlp_norm, ParamKind::kNorm});
    out.push_back({p + "wglu", lw.wglu, ParamKind::kWeight});
    out.push_back({p + "wdown", lw.wdown, ParamKind::kWeight});
  }
  out.push_back({"final_norm", final_norm_, ParamKind::kNorm});
  out.push_back({"decoder_bias", decoder_bias_, ParamKind::kBias});
  return out;
}

template <typename T>
void EncoderModel<T>::zero_grad() const {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template <typename T>
EncoderModel<T> EncoderModel<T>::clone() const {
  EncoderModel copy(config_);
  auto src = parameters();
  auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), dst[i].tensor.data().begin());
  }
  return copy;
}

template <typename T>
void EncoderModel<T>::set_config_geometry(double theta_global, std::size_t max_seq) {
  ModelConfig next = config_;
  next.theta_global = theta_global;
  next.max_seq = max_seq;
  next.validate();
  config_ = next;
}

// ---- initialization -------------------------------------------------------------

template <typename T>
EncoderModel<T> init_megatron(const ModelConfig& config, std::uint64_t seed) {
  EncoderModel<T> model(config);
  Pcg64Dxsm rng(seed, 0x696e6974);
  const double std_dev = 0.02;
  const double residual_std = std_dev / std::sqrt(2.0 * static_cast<double>(config.layers));
  for (auto& p : model.parameters()) {
    if (p.kind != ParamKind::kWeight) continue;
    const bool residual_out = p.name.ends_with(".wo") || p.name.ends_with(".wdown");
    const double s = residual_out ? residual_std : std_dev;
    for (auto& w : p.tensor.data()) w = static_cast<T>(rng.normal(0.0, s));
  }
  return model;
}

// ---- tiling --------------------------------------------------------------------

std::vector<std::size_t> center_wrap_map(std::size_t base, std::size_t large) {
  if (base == 0 || large < base) {
    throw ConfigError("cannot tile " + std::to_string(base) + " into " + std::to_string(large));
  }
  const std::size_t offset = (large - base) / 2;
  std::vector<std::size_t> map(large);
  for (std::size_t i = 0; i < large; ++i) map[i] = (i + base - offset % base) % base;
  return map;
}

std::vector<std::size_t> head_wrap_map(std::size_t base_heads, std::size_t base_head_dim, std::size_t large_heads,
                                       std::size_t large_head_dim) {
  const auto hmap = center_wrap_map(base_heads, large_heads);
  const auto dmap = center_wrap_map(base_head_dim, large_head_dim);
  std::vector<std::size_t> map;
  map.reserve(large_heads * large_head_dim);
  for (std::size_t h = 0; h < large_heads; ++h) {
    for (std::size_t d = 0; d < large_head_dim; ++d) map.push_back(hmap[h] * base_head_dim + dmap[d]);
  }
  return map;
}

template <typename T>
std::vector<T> tile_matrix(std::span<const T> base, std::size_t base_cols, std::span<const std::size_t> row_map,
                           std::span<const std::size_t> col_map) {
  std::vector<T> out(row_map.size() * col_map.size());
  for (std::size_t i = 0; i < row_map.size(); ++i) {
    const T* src = base.data() + row_map[i] * base_cols;
    T* dst = out.data() + i * col_map.size();
    for (std::size_t j = 0; j < col_map.size(); ++j) dst[j] = src[col_map[j]];
  }
  return out;
}

namespace {

// Concatenates per-block maps; block b of the large axis copies block b of the base axis.
std::vector<std::size_t> blocked(const std::vector<std::size_t>& inner, std::size_t blocks, std::size_t base_block) {
  std::vector<std::size_t> map;
  map.reserve(inner.size() * blocks);
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t i : inner) map.push_back(b * base_block + i);
  }
  return map;
}

std::vector<std::size_t> cyclic_map(std::size_t base, std::size_t large) {
  std::vector<std::size_t> map(large);
  for (std::size_t i = 0; i < large; ++i) map[i] = i % base;
  return map;
}

const std::vector<std::size_t>& single_index() {
  static const std::vector<std::size_t> zero{0};
  return zero;
}

template <typename T>
void fill(const Tensor<T>& dst, const Tensor<T>& src, std::span<const std::size_t> rows,
          std::span<const std::size_t> cols, double factor = 1.0) {
  const std::size_t base_cols = src.rank() == 2 ? src.dim(1) : 1;
  auto values = tile_matrix<T>(src.data(), base_cols, rows, cols);
  Tensor<T> handle = dst;
  auto out = handle.data();
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = factor == 1.0 ? values[i] : static_cast<T>(values[i] * factor);
}

}  // namespace

template <typename T>
EncoderModel<T> tile_from_base(const EncoderModel<T>& base, const ModelConfig& large_config, const TileOptions& options) {
  const ModelConfig& b = base.config();
  const ModelConfig& l = large_config;
  l.validate();
  auto need = [](std::size_t small, std::size_t big, const char* what) {
    if (big < small) throw ConfigError(std::string("large ") + what + " is smaller than base");
  };
  need(b.layers, l.layers, "layers");
  need(b.hidden, l.hidden, "hidden");
  need(b.heads, l.heads, "heads");
  need(b.head_dim(), l.head_dim(), "head_dim");
  need(b.intermediate, l.intermediate, "intermediate");
  need(b.vocab, l.vocab, "vocab");

  EncoderModel<T> large(large_config);
  const auto hid = center_wrap_map(b.hidden, l.hidden);
  const auto heads = head_wrap_map(b.heads, b.head_dim(), l.heads, l.head_dim());
  const auto qkv_cols = blocked(heads, 3, b.hidden);
  const auto inter = center_wrap_map(b.intermediate, l.intermediate);
  const auto glu_cols = blocked(inter, 2, b.intermediate);
  const auto tokens = cyclic_map(b.vocab, l.vocab);
  const auto& one = single_index();
  const double residual_scale =
      options.depth_scaling ? std::sqrt(static_cast<double>(b.layers) / static_cast<double>(l.layers)) : 1.0;

  fill(large.embedding(), base.embedding(), tokens, hid);
  fill(large.embed_norm(), base.embed_norm(), hid, one);
  fill(large.final_norm(), base.final_norm(), hid, one);
  fill(large.decoder_bias(), base.decoder_bias(), tokens, one);
  for (std::size_t layer = 0; layer < l.layers; ++layer) {
    const auto& src = base.layers()[layer % b.layers];
    const auto& dst = large.layers()[layer];
    if (dst.attn_norm.defined() && src.attn_norm.defined()) fill(dst.attn_norm, src.attn_norm, hid, one);
    fill(dst.wqkv, src.wqkv, hid, qkv_cols);
    fill(dst.wo, src.wo, heads, hid, residual_scale);
    fill(dst.mlp_norm, src.mlp_norm, hid, one);
    fill(dst.wglu, src.wglu, hid, glu_cols);
    fill(dst.wdown, src.wdown, inter, hid, residual_scale);
  }
  return large;
}

// ---- averaging / extension ----------------------------------------------------------

template <typename T>
EncoderModel<T> average_checkpoints(std::span<const EncoderModel<T>> models) {
  if (models.empty()) throw InputError("no checkpoints to average");
  for (const auto& m : models) {
    if (!(m.config() == models.front().config())) throw ConfigError("checkpoints have different configs");
  }
  EncoderModel<T> out(models.front().config());
  auto dst = out.parameters();
  std::vector<std::vector<ParamRef<T>>> srcs;
  for (const auto& m : models) srcs.push_back(m.parameters());
  const double inv = 1.0 / static_cast<double>(models.size());
  for (std::size_t p = 0; p < dst.size(); ++p) {
    auto d = dst[p].tensor.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      double acc = 0.0;
      for (const auto& s : srcs) acc += s[p].tensor.data()[i];
      d[i] = static_cast<T>(acc * inv);
    }
  }
  return out;
}

template <typename T>
EncoderModel<T> extend_context(const EncoderModel<T>& model, double new_theta_global, std::size_t new_max_seq) {
  if (!(new_theta_global > 0.0)) throw ConfigError("rotary theta must be positive");
  if (new_max_seq < model.config().max_seq) throw ConfigError("new max_seq is shorter than the current one");
  EncoderModel<T> out = model.clone();
  out.set_config_geometry(new_theta_global, new_max_seq);
  return out;
}

// ---- instantiations -------------------------------------------------------------------

template class EncoderModel<float>;
template class EncoderModel<double>;
template EncoderModel<float> init_megatron(const ModelConfig&, std::uint64_t);
template EncoderModel<double> init_megatron(const ModelConfig&, std::uint64_t);
template std::vector<float> tile_matrix(std::span<const float>, std::size_t, std::span<const std::size_t>,
                                        std::span<const std::size_t>);
template std::vector<double> tile_matrix(std::span<const double>, std::size_t, std::span<const std::size_t>,
                                         std::span<const std::size_t>);
template EncoderModel<float> tile_from_base(const EncoderModel<float>&, const ModelConfig&, const TileOptions&);
template EncoderModel<double> tile_from_base(const EncoderModel<double>&, const ModelConfig&, const TileOptions&);
template EncoderModel<float> average_checkpoints(std::span<const EncoderModel<float>>);
template EncoderModel<double> average_checkpoints(std::span<const EncoderModel<double>>);
template EncoderModel<float> extend_context(const EncoderModel<float>&, double, std::size_t);
template EncoderModel<double> extend_context(const EncoderModel<double>&, double, std::size_t);

}  // namespace encforge
