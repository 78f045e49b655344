#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "encforge/bench.hpp"
#include "encforge/checkpoint.hpp"
#include "encforge/config_io.hpp"
#include "encforge/design.hpp"
#include "encforge/errors.hpp"
#include "encforge/schedule.hpp"
#include "encforge/trainer.hpp"

namespace py = pybind11;
using namespace encforge;

namespace {

using Docs = std::vector<std::vector<std::int32_t>>;

std::vector<Document> to_docs(const Docs& raw) {
  std::vector<Document> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i].tokens = raw[i];
  return out;
}

Docs from_docs(const std::vector<Document>& docs) {
  Docs out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(d.tokens);
  return out;
}

ModelConfig parse_model(const std::string& s) { return model_config_from_json(Json::parse(s)); }

UtilizationModel parse_util(const std::string& s) {
  if (s == "occupancy") return UtilizationModel::kOccupancy;
  if (s == "modulus") return UtilizationModel::kModulus;
  throw ConfigError("unknown utilization model '" + s + "'");
}

py::dict metrics_dict(const Metrics& m) {
  py::dict d;
  d["tokens_seen"] = m.tokens_seen;
  d["step"] = m.step;
  d["train_loss"] = m.train_loss;
  d["val_loss"] = m.val_loss;
  d["masked_token_accuracy"] = m.masked_token_accuracy;
  d["lr_now"] = m.lr_now;
  d["batch_size_now"] = m.batch_size_now;
  return d;
}

// f64 model handle
struct Model {
  EncoderModel<double> inner;

  std::string config() const { return to_json(inner.config()).dump(); }
  std::size_t parameter_count() const { return inner.config().parameter_count(); }

  py::array_t<double> forward(const std::vector<std::int32_t>& ids, const std::vector<std::size_t>& cu) const {
    NoGradGuard ng;
    auto logits = inner.forward(ids, cu);
    py::array_t<double> out({logits.dim(0), logits.dim(1)});
    std::copy(logits.values().begin(), logits.values().end(), out.mutable_data());
    return out;
  }

  py::tuple evaluate(const Docs& docs, std::size_t capacity, std::uint64_t seed) const {
    auto held = make_heldout(to_docs(docs), capacity, inner.config().vocab, seed);
    auto r = encforge::evaluate<double>(inner, held);
    return py::make_tuple(r.val_loss, r.masked_token_accuracy, r.labeled);
  }

  void save(const std::string& path) const { save_checkpoint<double>(path, inner); }
};

}  // namespace

PYBIND11_MODULE(_encforge, m) {
  auto base = py::register_exception<Error>(m, "EncforgeError");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<InputError>(m, "InputError", base.ptr());
  py::register_exception<CapacityError>(m, "CapacityError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.def("model_preset", [](const std::string& name) { return to_json(model_config_preset(name)).dump(); });
  m.def("parameter_count", [](const std::string& cfg) { return parse_model(cfg).parameter_count(); });

  // design advisor
  m.def("check_tensor_core", &check_tensor_core);
  m.def("tile_blocks", &tile_blocks);
  m.def("sm_utilization", [](std::size_t blocks, std::size_t sm, const std::string& model) {
    return sm_utilization(blocks, sm, parse_util(model));
  }, py::arg("blocks"), py::arg("sm_count"), py::arg("model") = "occupancy");
  m.def("default_gpu_basket", [] { return to_json(default_gpu_basket()).dump(); });
  m.def("audit_config", [](const std::string& cfg, const std::optional<std::string>& basket, const std::string& util) {
    auto gpus = basket ? gpu_basket_from_json(Json::parse(*basket)) : default_gpu_basket();
    return to_json(audit_config(parse_model(cfg), gpus, parse_util(util))).dump();
  }, py::arg("config"), py::arg("basket") = std::nullopt, py::arg("utilization") = "occupancy");

  // attention and batching
  m.def("attention_pair_count", [](const std::vector<std::size_t>& lens, std::optional<std::size_t> window) {
    return attention_pair_count(lens, window);
  }, py::arg("seq_lens"), py::arg("window") = std::nullopt);
  m.def("pack_greedy", [](const Docs& docs, std::size_t capacity, std::uint64_t seed, std::size_t pool_bins) {
    auto d = to_docs(docs);
    auto r = pack_greedy(d, capacity, seed, PackOptions{pool_bins});
    return py::make_tuple(r.assignment, r.efficiency);
  }, py::arg("docs"), py::arg("capacity"), py::arg("seed") = 0, py::arg("pool_bins") = 8);
  m.def("synth_corpus", [](std::size_t docs, std::size_t vocab, double mean, double stddev, std::size_t min,
                           std::size_t max, std::uint64_t seed) {
    CorpusSpec cs;
    cs.docs = docs;
    cs.vocab = vocab;
    cs.lengths = {LengthDistribution::Kind::kNormal, mean, stddev, min, max};
    cs.seed = seed;
    return from_docs(synth_corpus(cs));
  }, py::arg("docs"), py::arg("vocab") = 64, py::arg("mean") = 64.0, py::arg("stddev") = 16.0,
     py::arg("min") = 32, py::arg("max") = 128, py::arg("seed") = 0);
  m.def("gen_bench_sets", [](const std::string& spec) {
    return from_docs(gen_bench_sets(bench_spec_from_json(Json::parse(spec))));
  });
  m.def("local_global_pair_ratio", &local_global_pair_ratio);

  // schedules
  m.def("lr_at", [](std::uint64_t tokens, const std::string& schedule, double lr_peak) {
    return lr_at(tokens, schedule_from_json(Json::parse(schedule)), lr_peak);
  });
  m.def("build_batch_ladder", [](std::size_t start, std::size_t end, std::uint64_t warmup, std::size_t stages,
                                 std::uint64_t tokens_per_sample, std::size_t granularity) {
    auto l = build_batch_ladder(start, end, warmup, stages, tokens_per_sample, granularity);
    std::vector<std::pair<std::size_t, std::uint64_t>> out;
    for (const auto& s : l.stages) out.emplace_back(s.batch_size, s.steps);
    return out;
  }, py::arg("start_bs"), py::arg("end_bs"), py::arg("warmup_tokens"), py::arg("stages"),
     py::arg("tokens_per_sample"), py::arg("granularity") = 1);

  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& cfg, std::uint64_t seed) {
        return Model{init_megatron<double>(parse_model(cfg), seed)};
      }), py::arg("config"), py::arg("seed") = 0)
      .def_static("load", [](const std::string& path) { return Model{load_checkpoint<double>(path).model}; })
      .def("config", &Model::config)
      .def("parameter_count", &Model::parameter_count)
      .def("forward", &Model::forward, py::arg("ids"), py::arg("cu_seqlens"))
      .def("evaluate", &Model::evaluate, py::arg("docs"), py::arg("capacity") = 128, py::arg("seed") = 0)
      .def("save", &Model::save);

  m.def("train", [](const std::string& run_json, const Docs& docs, const Docs& heldout, std::uint64_t heldout_seed) {
    auto run = run_config_from_json(Json::parse(run_json));
    TrainResult<double> r = [&] {
      py::gil_scoped_release nogil;
      return encforge::train<double>(run, {to_docs(docs)},
                                     make_heldout(to_docs(heldout), run.max_seq, run.model.vocab, heldout_seed),
                                     init_megatron<double>(run.model, run.seed));
    }();
    py::list metrics;
    for (const auto& mt : r.metrics) metrics.append(metrics_dict(mt));
    return py::make_tuple(Model{r.model}, metrics);
  }, py::arg("run"), py::arg("docs"), py::arg("heldout"), py::arg("heldout_seed") = 0);
}
