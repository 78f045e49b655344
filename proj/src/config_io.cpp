#include "encforge/config_io.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "encforge/errors.hpp"
#include "encforge/trainer.hpp"

namespace encforge {
namespace {

// Reads an object field by field and complains about leftovers.
class Fields {
 public:
  Fields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }
  ~Fields() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    try {
      if constexpr (std::is_unsigned_v<V>) {
        if (!it->is_number_unsigned() && !(it->is_number_integer() && it->template get<long long>() >= 0)) {
          // allow integral doubles such as 5e7
          if (it->is_number_float()) {
            const double d = it->template get<double>();
            if (d >= 0 && std::floor(d) == d && d < 1.8e19) {
              out = static_cast<V>(d);
              return;
            }
          }
          throw ConfigError(where_ + "." + key + ": expected a nonnegative integer");
        }
      }
      out = it->template get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong type");
    }
  }

  const Json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace

Json to_json(const ModelConfig& c) {
  return Json{{"layers", c.layers},
              {"hidden", c.hidden},
              {"heads", c.heads},
              {"intermediate", c.intermediate},
              {"glu_expansion", c.glu_expansion},
              {"vocab", c.vocab},
              {"max_seq", c.max_seq},
              {"global_every", c.global_every},
              {"window", c.window},
              {"theta_global", c.theta_global},
              {"theta_local", c.theta_local},
              {"norm_eps", c.norm_eps},
              {"dropout_attn_out", c.dropout_attn_out}};
}

ModelConfig model_config_from_json(const Json& j) {
  if (j.is_string()) return model_config_preset(j.get<std::string>());
  ModelConfig c;
  {
    Fields f(j, "model");
    if (const Json* p = f.sub("preset")) {
      if (!p->is_string()) throw ConfigError("model.preset must be a string");
      c = model_config_preset(p->get<std::string>());
    }
    f.get("layers", c.layers);
    f.get("hidden", c.hidden);
    f.get("heads", c.heads);
    f.get("intermediate", c.intermediate);
    // Default the fused width from the intermediate size unless given.
    c.glu_expansion = 2 * c.intermediate;
    f.get("glu_expansion", c.glu_expansion);
    f.get("vocab", c.vocab);
    f.get("max_seq", c.max_seq);
    f.get("global_every", c.global_every);
    f.get("window", c.window);
    f.get("theta_global", c.theta_global);
    f.get("theta_local", c.theta_local);
    f.get("norm_eps", c.norm_eps);
    f.get("dropout_attn_out", c.dropout_attn_out);
  }
  c.validate();
  return c;
}

ModelConfig model_config_preset(const std::string& name) {
  if (name == "base") return ModelConfig::base();
  if (name == "large") return ModelConfig::large();
  if (name == "base-pretraining") return ModelConfig::base_pretraining();
  if (name == "large-pretraining") return ModelConfig::large_pretraining();
  if (name == "tiny") return ModelConfig::tiny();
  throw ConfigError("unknown model preset '" + name + "'");
}

Json to_json(const OptConfig& c) {
  Json clip = std::isinf(c.clip_threshold) ? Json("inf") : Json(c.clip_threshold);
  return Json{{"learning_rate", c.lr_peak},
              {"betas", {c.beta1, c.beta2}},
              {"epsilon", c.eps},
              {"weight_decay", c.weight_decay},
              {"clip_threshold", clip},
              {"decay_mode", c.decay_mode == DecayMode::kIndependent ? "independent" : "scheduled"}};
}

OptConfig opt_config_from_json(const Json& j) {
  OptConfig c;
  {
    Fields f(j, "optimizer");
    f.get("learning_rate", c.lr_peak);
    if (const Json* b = f.sub("betas")) {
      if (!b->is_array() || b->size() != 2 || !(*b)[0].is_number() || !(*b)[1].is_number())
        throw ConfigError("optimizer.betas must be [beta1, beta2]");
      c.beta1 = (*b)[0].get<double>();
      c.beta2 = (*b)[1].get<double>();
    }
    f.get("epsilon", c.eps);
    f.get("weight_decay", c.weight_decay);
    if (const Json* d = f.sub("clip_threshold")) {
      if (d->is_string() && d->get<std::string>() == "inf") {
        c.clip_threshold = std::numeric_limits<double>::infinity();
      } else if (d->is_number()) {
        c.clip_threshold = d->get<double>();
      } else {
        throw ConfigError("optimizer.clip_threshold must be a number or \"inf\"");
      }
    }
    std::string mode = "independent";
    f.get("decay_mode", mode);
    if (mode == "independent") c.decay_mode = DecayMode::kIndependent;
    else if (mode == "scheduled") c.decay_mode = DecayMode::kScheduled;
    else throw ConfigError("optimizer.decay_mode must be 'independent' or 'scheduled'");
  }
  c.validate();
  return c;
}

Json to_json(const ScheduleSpec& s) {
  Json stages = Json::array();
  for (const auto& st : s.ladder.stages) stages.push_back({st.batch_size, st.steps});
  return Json{{"warmup_tokens", s.warmup_tokens},
              {"stable_tokens", s.stable_tokens},
              {"decay_tokens", s.decay_tokens},
              {"tokens_per_sample", s.tokens_per_sample},
              {"batch_size", s.batch_size},
              {"batch_ladder", {{"stages", stages}, {"terminal_steps", s.ladder.terminal_steps}}}};
}

ScheduleSpec schedule_from_json(const Json& j) {
  ScheduleSpec s;
  {
    Fields f(j, "schedule");
    f.get("warmup_tokens", s.warmup_tokens);
    f.get("stable_tokens", s.stable_tokens);
    f.get("decay_tokens", s.decay_tokens);
    f.get("tokens_per_sample", s.tokens_per_sample);
    f.get("batch_size", s.batch_size);
    const Json* ladder = f.sub("batch_ladder");
    const Json* warm = f.sub("batch_warmup");
    if (ladder && warm) throw ConfigError("schedule: give batch_ladder or batch_warmup, not both");
    if (ladder) {
      Fields lf(*ladder, "schedule.batch_ladder");
      if (const Json* st = lf.sub("stages")) {
        if (!st->is_array()) throw ConfigError("schedule.batch_ladder.stages must be an array");
        for (const auto& e : *st) {
          if (!e.is_array() || e.size() != 2 || !e[0].is_number_unsigned() || !e[1].is_number_unsigned())
            throw ConfigError("schedule.batch_ladder.stages entries must be [batch_size, steps]");
          s.ladder.stages.push_back({e[0].get<std::size_t>(), e[1].get<std::uint64_t>()});
        }
      }
      lf.get("terminal_steps", s.ladder.terminal_steps);
    }
    if (warm) {
      Fields wf(*warm, "schedule.batch_warmup");
      std::size_t start = 0, end = 0, stages = 6, granularity = 1;
      std::uint64_t tokens = 0;
      wf.get("start", start);
      wf.get("end", end);
      wf.get("warmup_tokens", tokens);
      wf.get("stages", stages);
      wf.get("granularity", granularity);
      s.ladder = build_batch_ladder(start, end, tokens, stages, s.tokens_per_sample, granularity);
    }
  }
  s.validate();
  return s;
}

Json to_json(const MlmOptions& o) {
  return Json{{"rate", o.rate}, {"mask_fraction", o.mask_fraction}, {"random_fraction", o.random_fraction}};
}

MlmOptions mlm_options_from_json(const Json& j) {
  MlmOptions o;
  Fields f(j, "mlm");
  f.get("rate", o.rate);
  f.get("mask_fraction", o.mask_fraction);
  f.get("random_fraction", o.random_fraction);
  return o;
}

Json to_json(const RunConfig& r) {
  return Json{{"model", to_json(r.model)},
              {"optimizer", to_json(r.opt)},
              {"schedule", to_json(r.schedule)},
              {"mlm", to_json(r.mlm)},
              {"microbatch", r.microbatch},
              {"seed", r.seed},
              {"eval_every_steps", r.eval_every_steps},
              {"checkpoint_every_steps", r.checkpoint_every_steps},
              {"max_seq", r.max_seq},
              {"max_steps", r.max_steps},
              {"pool_bins", r.pool_bins},
              {"corpus_weights", r.corpus_weights},
              {"decay_corpus_weights", r.decay_corpus_weights},
              {"out_dir", r.out_dir}};
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig r;
  {
    Fields f(j, "run");
    if (const Json* m = f.sub("model")) r.model = model_config_from_json(*m);
    if (const Json* o = f.sub("optimizer")) r.opt = opt_config_from_json(*o);
    if (const Json* s = f.sub("schedule")) r.schedule = schedule_from_json(*s);
    if (const Json* m = f.sub("mlm")) r.mlm = mlm_options_from_json(*m);
    f.get("microbatch", r.microbatch);
    f.get("seed", r.seed);
    f.get("eval_every_steps", r.eval_every_steps);
    f.get("checkpoint_every_steps", r.checkpoint_every_steps);
    f.get("max_seq", r.max_seq);
    f.get("max_steps", r.max_steps);
    f.get("pool_bins", r.pool_bins);
    f.get("corpus_weights", r.corpus_weights);
    f.get("decay_corpus_weights", r.decay_corpus_weights);
    f.get("out_dir", r.out_dir);
  }
  r.validate();
  return r;
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_json_file(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace encforge
