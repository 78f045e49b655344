#pragma once

#include <json.hpp>
#include <optional>
#include <string>

#include "encforge/model.hpp"
#include "encforge/optim.hpp"

namespace encforge {

/// File layout: one line of compact JSON (config, tensor manifest, extra
/// state, blob size and FNV-1a checksum), then raw little-endian blobs in
/// manifest order. Blobs are f32, or f64 when saved from a 64-bit model.
inline constexpr const char* kCheckpointFormat = "encforge-checkpoint";
inline constexpr int kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  EncoderModel<T> model;
  std::optional<OptimizerState<T>> optimizer;
  nlohmann::json extra = nlohmann::json::object();
};

/// Writes to `path` atomically (temp file, then rename).
template <typename T>
void save_checkpoint(const std::string& path, const EncoderModel<T>& model, const OptimizerState<T>* optimizer = nullptr,
                     const nlohmann::json& extra = nlohmann::json::object());

/// Validates everything before returning; any defect raises CheckpointError.
/// Blobs stored in the other precision are converted.
template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path);

/// "f32" or "f64", from the header alone.
std::string checkpoint_dtype(const std::string& path);
nlohmann::json read_checkpoint_header(const std::string& path);

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t hash = 0xcbf29ce484222325ULL);

}  // namespace encforge
