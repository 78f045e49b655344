#include "encforge/design.hpp"

#include <cstdio>
#include <sstream>

#include "encforge/errors.hpp"

namespace encforge {

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

void require_positive(std::size_t v, const char* what) {
  if (v == 0) throw InputError(std::string(what) + " must be positive");
}

const char* model_name(UtilizationModel m) { return m == UtilizationModel::kOccupancy ? "occupancy" : "modulus"; }

}  // namespace

std::vector<bool> check_tensor_core(const std::vector<std::size_t>& dims) {
  std::vector<bool> out;
  out.reserve(dims.size());
  for (auto d : dims) {
    require_positive(d, "dimension");
    out.push_back(d % kTensorCoreMultiple == 0);
  }
  return out;
}

std::size_t tile_blocks(std::size_t m, std::size_t n) {
  require_positive(m, "m");
  require_positive(n, "n");
  return ceil_div(m, kTileRows) * ceil_div(n, kTileCols);
}

double sm_utilization(std::size_t blocks, std::size_t sm_count, UtilizationModel model) {
  require_positive(blocks, "blocks");
  require_positive(sm_count, "sm_count");
  if (model == UtilizationModel::kModulus) {
    const std::size_t r = blocks % sm_count;
    return r == 0 ? 1.0 : static_cast<double>(r) / static_cast<double>(sm_count);
  }
  return static_cast<double>(blocks) / static_cast<double>(ceil_div(blocks, sm_count) * sm_count);
}

std::vector<GpuSpec> default_gpu_basket() {
  return {{"T4", 40, 2.0},      {"A10", 72, 2.0},   {"L4", 58, 2.0},   {"RTX3090", 82, 2.0},
          {"RTX4090", 128, 2.0}, {"A100", 108, 1.0}, {"H100", 132, 1.0}};
}

std::vector<GpuSpec> gpu_basket_from_json(const Json& j) {
  const Json& list = j.is_object() && j.contains("gpus") ? j.at("gpus") : j;
  if (!list.is_array() || list.empty()) throw ConfigError("gpu basket must be a nonempty array");
  std::vector<GpuSpec> out;
  for (const auto& g : list) {
    GpuSpec s;
    try {
      s.name = g.at("name").get<std::string>();
      const auto sm = g.at("sm_count").get<double>();
      if (!(sm >= 1) || sm != static_cast<double>(static_cast<std::size_t>(sm)))
        throw ConfigError("sm_count must be a positive integer for " + s.name);
      s.sm_count = static_cast<std::size_t>(sm);
      s.weight = g.value("weight", 1.0);
    } catch (const Json::exception& e) {
      throw ConfigError(std::string("gpu basket: ") + e.what());
    }
    if (!(s.weight >= 0)) throw ConfigError("gpu weight must be nonnegative for " + s.name);
    for (const auto& key : g.items())
      if (key.key() != "name" && key.key() != "sm_count" && key.key() != "weight")
        throw ConfigError("unknown gpu field: " + key.key());
    out.push_back(s);
  }
  return out;
}

Json to_json(const std::vector<GpuSpec>& basket) {
  Json gpus = Json::array();
  for (const auto& g : basket) gpus.push_back({{"name", g.name}, {"sm_count", g.sm_count}, {"weight", g.weight}});
  return {{"gpus", gpus}};
}

DimReport audit_config(const ModelConfig& config, const std::vector<GpuSpec>& basket, UtilizationModel model) {
  if (basket.empty()) throw ConfigError("gpu basket is empty");
  double total_weight = 0;
  for (const auto& g : basket) {
    if (!(g.weight >= 0)) throw ConfigError("gpu weight must be nonnegative");
    require_positive(g.sm_count, "sm_count");
    total_weight += g.weight;
  }
  if (!(total_weight > 0)) throw ConfigError("gpu weights sum to zero");

  DimReport r;
  r.basket = basket;
  r.model = model;
  const std::size_t h = config.hidden;
  const struct {
    const char* name;
    std::size_t rows, cols;
  } shapes[] = {
      {"attn.wqkv", h, 3 * h},
      {"attn.wo", h, h},
      {"mlp.wglu", h, config.glu_expansion},
      {"mlp.wdown", config.intermediate, h},
      {"embedding", config.vocab, h},
  };
  double acc = 0;
  for (const auto& s : shapes) {
    MatrixReport m;
    m.name = s.name;
    m.rows = s.rows;
    m.cols = s.cols;
    const auto ok = check_tensor_core({s.rows, s.cols});
    m.rows_ok = ok[0];
    m.cols_ok = ok[1];
    if (!m.tensor_core_ok()) ++r.tensor_core_failures;
    m.block_count = tile_blocks(s.rows, s.cols);
    for (const auto& g : basket) {
      m.utilization.push_back(sm_utilization(m.block_count, g.sm_count, model));
      acc += g.weight * m.utilization.back();
    }
    r.matrices.push_back(std::move(m));
  }
  r.score = acc / (total_weight * static_cast<double>(r.matrices.size()));
  return r;
}

Json to_json(const DimReport& report) {
  Json mats = Json::array();
  for (const auto& m : report.matrices) {
    Json util = Json::object();
    for (std::size_t g = 0; g < report.basket.size(); ++g) util[report.basket[g].name] = m.utilization[g];
    mats.push_back({{"name", m.name},
                    {"dims", {m.rows, m.cols}},
                    {"tensor_core_ok", m.tensor_core_ok()},
                    {"rows_ok", m.rows_ok},
                    {"cols_ok", m.cols_ok},
                    {"block_count", m.block_count},
                    {"utilization", util}});
  }
  return {{"basket", to_json(report.basket)["gpus"]},
          {"utilization_model", model_name(report.model)},
          {"matrices", mats},
          {"tensor_core_failures", report.tensor_core_failures},
          {"score", report.score}};
}

std::string format_report(const DimReport& report) {
  std::ostringstream os;
  char buf[64];
  os << "matrix          dims          tc    blocks";
  for (const auto& g : report.basket) {
    std::snprintf(buf, sizeof buf, " %8s", g.name.c_str());
    os << buf;
  }
  os << '\n';
  for (const auto& m : report.matrices) {
    std::snprintf(buf, sizeof buf, "%-15s %-13s %-5s %6zu", m.name.c_str(),
                  (std::to_string(m.rows) + "x" + std::to_string(m.cols)).c_str(), m.tensor_core_ok() ? "ok" : "FAIL",
                  m.block_count);
    os << buf;
    for (double u : m.utilization) {
      std::snprintf(buf, sizeof buf, " %8.4f", u);
      os << buf;
    }
    os << '\n';
  }
  std::snprintf(buf, sizeof buf, "%.4f", report.score);
  os << "tensor-core failures: " << report.tensor_core_failures << "\nweighted " << model_name(report.model)
     << " score: " << buf << '\n';
  return os.str();
}

}  // namespace encforge
