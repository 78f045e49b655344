#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "encforge/config_io.hpp"
#include "encforge/model.hpp"

namespace encforge {

inline constexpr std::size_t kTensorCoreMultiple = 64;
inline constexpr std::size_t kTileRows = 128;
inline constexpr std::size_t kTileCols = 256;

struct GpuSpec {
  std::string name;
  std::size_t sm_count = 1;
  /// Relative importance within a basket.
  double weight = 1.0;

  bool operator==(const GpuSpec&) const = default;
};

enum class UtilizationModel {
  /// blocks / (ceil(blocks / sm) * sm): busy share of all scheduled wave slots.
  kOccupancy,
  /// (blocks mod sm) / sm, with an exact multiple counting as 1.
  kModulus,
};

std::vector<bool> check_tensor_core(const std::vector<std::size_t>& dims);
std::size_t tile_blocks(std::size_t m, std::size_t n);
double sm_utilization(std::size_t blocks, std::size_t sm_count, UtilizationModel model = UtilizationModel::kOccupancy);

struct MatrixReport {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool rows_ok = false;
  bool cols_ok = false;
  std::size_t block_count = 0;
  std::vector<double> utilization;  // per GPU, basket order

  bool tensor_core_ok() const { return rows_ok && cols_ok; }
};

struct DimReport {
  std::vector<GpuSpec> basket;
  UtilizationModel model = UtilizationModel::kOccupancy;
  std::vector<MatrixReport> matrices;
  std::size_t tensor_core_failures = 0;
  /// Weighted mean utilization across matrices and GPUs, in (0, 1].
  double score = 0.0;
};

/// T4, A10, L4, RTX 3090, RTX 4090 at weight 2; A100, H100 at weight 1.
std::vector<GpuSpec> default_gpu_basket();
std::vector<GpuSpec> gpu_basket_from_json(const Json& j);
Json to_json(const std::vector<GpuSpec>& basket);

/// Weight matrices checked: qkv, attention out, fused GeGLU, down, embedding/decoder.
DimReport audit_config(const ModelConfig& config, const std::vector<GpuSpec>& basket,
                       UtilizationModel model = UtilizationModel::kOccupancy);

Json to_json(const DimReport& report);
std::string format_report(const DimReport& report);

}  // namespace encforge
