#include "encforge/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "encforge/config_io.hpp"
#include "encforge/errors.hpp"

namespace encforge {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in native (little-endian) order");

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct Entry {
  std::string name;
  Shape shape;
  const void* data;
  std::size_t bytes;
};

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t hash) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= p[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

template <typename T>
void save_checkpoint(const std::string& path, const EncoderModel<T>& model, const OptimizerState<T>* optimizer,
                     const nlohmann::json& extra) {
  const auto params = model.parameters();
  std::vector<Entry> entries;
  for (const auto& p : params) entries.push_back({p.name, p.tensor.shape(), p.tensor.data().data(), p.tensor.numel() * sizeof(T)});
  if (optimizer && optimizer->initialized()) {
    if (optimizer->m.size() != params.size()) throw DimensionError("optimizer state does not match the model");
    for (std::size_t i = 0; i < params.size(); ++i) {
      entries.push_back({"opt.m." + params[i].name, params[i].tensor.shape(), optimizer->m[i].data(),
                         optimizer->m[i].size() * sizeof(T)});
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      entries.push_back({"opt.v." + params[i].name, params[i].tensor.shape(), optimizer->v[i].data(),
                         optimizer->v[i].size() * sizeof(T)});
    }
  }
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (const auto& e : entries) {
    manifest.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}, {"bytes", e.bytes}});
    offset += e.bytes;
    hash = fnv1a64(e.data, e.bytes, hash);
  }
  nlohmann::json header{{"format", kCheckpointFormat},
                        {"version", kCheckpointVersion},
                        {"dtype", dtype_name<T>()},
                        {"config", to_json(model.config())},
                        {"tensors", manifest},
                        {"optimizer_step", optimizer && optimizer->initialized() ? Json(optimizer->step) : Json(nullptr)},
                        {"extra", extra},
                        {"blob_bytes", offset},
                        {"checksum", hex64(hash)}};

  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    const std::string line = header.dump() + "\n";
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    for (const auto& e : entries) out.write(static_cast<const char*>(e.data), static_cast<std::streamsize>(e.bytes));
    if (!out) throw CheckpointError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, target);
}

namespace {

struct RawFile {
  nlohmann::json header;
  std::string blob;
};

RawFile read_raw(const std::string& path, bool with_blob) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError(path + ": missing header");
  RawFile raw;
  try {
    raw.header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path + ": unreadable header (" + e.what() + ")");
  }
  const auto& h = raw.header;
  if (!h.is_object() || h.value("format", "") != kCheckpointFormat) throw CheckpointError(path + ": not a checkpoint");
  if (h.value("version", -1) != kCheckpointVersion) throw CheckpointError(path + ": unsupported checkpoint version");
  if (with_blob) {
    std::ostringstream rest;
    rest << in.rdbuf();
    raw.blob = rest.str();
  }
  return raw;
}

template <typename T>
void copy_blob(const std::string& blob, std::uint64_t offset, std::size_t count, const std::string& dtype,
               std::span<T> out) {
  if (dtype == dtype_name<T>()) {
    std::memcpy(out.data(), blob.data() + offset, count * sizeof(T));
    return;
  }
  if (dtype == "f32") {
    for (std::size_t i = 0; i < count; ++i) {
      float v;
      std::memcpy(&v, blob.data() + offset + i * sizeof(float), sizeof v);
      out[i] = static_cast<T>(v);
    }
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      double v;
      std::memcpy(&v, blob.data() + offset + i * sizeof(double), sizeof v);
      out[i] = static_cast<T>(v);
    }
  }
}

}  // namespace

nlohmann::json read_checkpoint_header(const std::string& path) { return read_raw(path, false).header; }

std::string checkpoint_dtype(const std::string& path) {
  auto h = read_checkpoint_header(path);
  return h.value("dtype", "");
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  RawFile raw = read_raw(path, true);
  const auto& h = raw.header;
  const std::string dtype = h.value("dtype", "");
  if (dtype != "f32" && dtype != "f64") throw CheckpointError(path + ": unknown dtype '" + dtype + "'");
  const std::size_t width = dtype == "f32" ? 4 : 8;

  ModelConfig config;
  try {
    config = model_config_from_json(h.at("config"));
  } catch (const Error& e) {
    throw CheckpointError(path + ": bad config (" + e.what() + ")");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path + ": bad config (" + e.what() + ")");
  }

  std::uint64_t blob_bytes = 0;
  try {
    blob_bytes = h.at("blob_bytes").get<std::uint64_t>();
  } catch (const nlohmann::json::exception&) {
    throw CheckpointError(path + ": header lacks blob_bytes");
  }
  if (raw.blob.size() != blob_bytes) {
    throw CheckpointError(path + ": blob is " + std::to_string(raw.blob.size()) + " bytes, header says " +
                          std::to_string(blob_bytes));
  }
  if (h.value("checksum", "") != hex64(fnv1a64(raw.blob.data(), raw.blob.size())))
    throw CheckpointError(path + ": checksum mismatch");

  // Everything goes into temporaries; the caller sees nothing unless all checks pass.
  EncoderModel<T> model(config);
  const auto params = model.parameters();
  const auto& tensors = h.at("tensors");
  if (!tensors.is_array()) throw CheckpointError(path + ": manifest is not a list");
  const bool has_opt = tensors.size() == 3 * params.size();
  if (tensors.size() != params.size() && !has_opt) {
    throw CheckpointError(path + ": manifest lists " + std::to_string(tensors.size()) + " tensors, model has " +
                          std::to_string(params.size()));
  }
  OptimizerState<T> opt;
  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& e = tensors[i];
    const std::size_t p = i % params.size();
    const std::string prefix = i < params.size() ? "" : i < 2 * params.size() ? "opt.m." : "opt.v.";
    std::string name;
    Shape shape;
    std::uint64_t offset = 0, bytes = 0;
    try {
      name = e.at("name").get<std::string>();
      shape = e.at("shape").get<Shape>();
      offset = e.at("offset").get<std::uint64_t>();
      bytes = e.at("bytes").get<std::uint64_t>();
    } catch (const nlohmann::json::exception&) {
      throw CheckpointError(path + ": malformed manifest entry " + std::to_string(i));
    }
    if (name != prefix + params[p].name) throw CheckpointError(path + ": expected tensor " + prefix + params[p].name + ", found " + name);
    if (shape != params[p].tensor.shape()) throw CheckpointError(path + ": shape mismatch for " + name);
    const std::size_t count = params[p].tensor.numel();
    if (offset != expected_offset || bytes != count * width || offset + bytes > blob_bytes)
      throw CheckpointError(path + ": bad extent for " + name);
    expected_offset += bytes;
    if (prefix.empty()) {
      Tensor<T> handle = params[p].tensor;
      copy_blob<T>(raw.blob, offset, count, dtype, handle.data());
      for (T x : handle.data()) {
        if (!std::isfinite(x)) throw CheckpointError(path + ": non-finite value in " + name);
      }
    } else {
      auto& dst = prefix == "opt.m." ? opt.m : opt.v;
      dst.emplace_back(count);
      copy_blob<T>(raw.blob, offset, count, dtype, std::span<T>(dst.back()));
    }
  }
  if (expected_offset != blob_bytes) throw CheckpointError(path + ": trailing bytes after last tensor");

  Checkpoint<T> ck{std::move(model), std::nullopt, h.value("extra", nlohmann::json::object())};
  if (has_opt) {
    const auto& st = h.at("optimizer_step");
    if (!st.is_number_unsigned()) throw CheckpointError(path + ": optimizer state without a step count");
    opt.step = st.get<std::uint64_t>();
    ck.optimizer = std::move(opt);
  }
  return ck;
}

template void save_checkpoint(const std::string&, const EncoderModel<float>&, const OptimizerState<float>*,
                              const nlohmann::json&);
template void save_checkpoint(const std::string&, const EncoderModel<double>&, const OptimizerState<double>*,
                              const nlohmann::json&);
template Checkpoint<float> load_checkpoint(const std::string&);
template Checkpoint<double> load_checkpoint(const std::string&);

}  // namespace encforge
