#include "encforge/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "encforge/config_io.hpp"
#include "encforge/errors.hpp"

namespace encforge {
namespace {

// derive_rng purposes
constexpr std::uint64_t kMaskStream = 0x6d61736b;
constexpr std::uint64_t kDropoutStream = 0x64726f70;
constexpr std::uint64_t kMixStream = 0x6d697865;
constexpr std::uint64_t kPackStream = 0x7061636b;
constexpr std::uint64_t kHeldoutStream = 0x68656c64;

Json metrics_json(const Metrics& m) {
  return Json{{"tokens_seen", m.tokens_seen},
              {"step", m.step},
              {"train_loss", m.train_loss},
              {"val_loss", m.val_loss},
              {"masked_token_accuracy", m.masked_token_accuracy},
              {"lr_now", m.lr_now},
              {"batch_size_now", m.batch_size_now}};
}

std::string step_name(std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step-%08llu.ckpt", static_cast<unsigned long long>(step));
  return buf;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  opt.validate();
  schedule.validate();
  if (microbatch == 0) throw ConfigError("microbatch must be >= 1");
  if (eval_every_steps == 0 || checkpoint_every_steps == 0) throw ConfigError("eval and checkpoint cadences must be >= 1");
  if (max_seq == 0 || max_seq > model.max_seq)
    throw ConfigError("run max_seq " + std::to_string(max_seq) + " must be in [1, model max_seq " +
                      std::to_string(model.max_seq) + "]");
  const std::size_t smallest = schedule.ladder.empty() ? schedule.batch_size : schedule.ladder.stages.front().batch_size;
  if (microbatch > smallest)
    throw ConfigError("microbatch " + std::to_string(microbatch) + " exceeds the scheduled batch " +
                      std::to_string(smallest));
  if (max_steps == 0 && schedule.total_tokens() == 0) throw ConfigError("run has neither max_steps nor a token budget");
  for (const auto* w : {&corpus_weights, &decay_corpus_weights}) {
    for (double x : *w) {
      if (!(x >= 0.0) || !std::isfinite(x)) throw ConfigError("corpus weights must be finite and >= 0");
    }
  }
  if (mlm.rate < 0.0 || mlm.rate > 1.0) throw ConfigError("mlm rate must be in [0, 1]");
}

// ---- evaluation / accumulation ----------------------------------------------

template <typename T>
EvalResult evaluate(const EncoderModel<T>& model, std::span<const PackedBatch> heldout) {
  NoGradGuard no_grad;
  double nll = 0.0;
  std::size_t correct = 0, labeled = 0;
  const std::size_t v = model.config().vocab;
  for (const auto& batch : heldout) {
    if (!batch.masked() || batch.labeled_count() == 0) continue;
    const Tensor<T> logits = model.forward(batch);
    const auto d = logits.data();
    for (std::size_t i = 0; i < batch.num_tokens(); ++i) {
      const std::int32_t label = batch.labels[i];
      if (label == kIgnoreLabel) continue;
      const T* row = d.data() + i * v;
      std::size_t best = 0;
      double mx = row[0];
      for (std::size_t c = 1; c < v; ++c) {
        if (row[c] > mx) {
          mx = row[c];
          best = c;
        }
      }
      double z = 0.0;
      for (std::size_t c = 0; c < v; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
      nll += mx + std::log(z) - static_cast<double>(row[label]);
      correct += best == static_cast<std::size_t>(label);
      ++labeled;
    }
  }
  if (labeled == 0) throw InputError("held-out set has no labeled positions");
  return {nll / static_cast<double>(labeled), static_cast<double>(correct) / static_cast<double>(labeled), labeled};
}

template <typename T>
double accumulate_gradients(const EncoderModel<T>& model, std::span<const PackedBatch> batch, std::size_t microbatch,
                            std::uint64_t dropout_seed) {
  if (microbatch == 0) throw ConfigError("microbatch must be >= 1");
  std::size_t total_labels = 0;
  for (const auto& b : batch) {
    if (!b.masked()) throw BatchError("training sequences must be masked before accumulation");
    total_labels += b.labeled_count();
  }
  if (total_labels == 0) return 0.0;
  const auto normalizer = static_cast<double>(total_labels);
  double loss = 0.0;
  std::size_t index = 0;
  for (std::size_t start = 0; start < batch.size(); start += microbatch, ++index) {
    const std::size_t end = std::min(batch.size(), start + microbatch);
    const PackedBatch mb = concat_batches(batch.subspan(start, end - start));
    if (mb.labeled_count() == 0) continue;
    Pcg64Dxsm dropout_rng = derive_rng(dropout_seed, kDropoutStream, index);
    ForwardOptions fo;
    fo.dropout_rng = &dropout_rng;
    const Tensor<T> part = cross_entropy_masked(model.forward(mb, fo), mb.labels, normalizer);
    part.backward();
    loss += part.item();
  }
  return loss;
}

std::vector<PackedBatch> make_heldout(std::span<const Document> docs, std::size_t capacity, std::size_t vocab,
                                      std::uint64_t seed, const MlmOptions& mlm) {
  auto packed = pack_greedy(docs, capacity, seed);
  for (std::size_t i = 0; i < packed.bins.size(); ++i) {
    Pcg64Dxsm rng = derive_rng(seed, kHeldoutStream, i);
    apply_mlm_mask(packed.bins[i], vocab, rng, mlm);
  }
  return std::move(packed.bins);
}

std::uint64_t corpus_fingerprint(std::span<const std::vector<Document>> sources) {
  std::uint64_t h = fnv1a64(nullptr, 0);
  for (const auto& src : sources) {
    const std::uint64_t n = src.size();
    h = fnv1a64(&n, sizeof n, h);
    for (const auto& d : src) {
      const std::uint64_t len = d.size();
      h = fnv1a64(&len, sizeof len, h);
      h = fnv1a64(d.tokens.data(), d.tokens.size() * sizeof(std::int32_t), h);
    }
  }
  return h;
}

// ---- trainer -----------------------------------------------------------------

template <typename T>
Trainer<T>::Trainer(RunConfig run, std::vector<std::vector<Document>> sources, std::vector<PackedBatch> heldout,
                    EncoderModel<T> model)
    : run_(std::move(run)), sources_(std::move(sources)), heldout_(std::move(heldout)), model_(std::move(model)) {
  run_.validate();
  if (!(run_.model == model_.config())) throw ConfigError("run model config differs from the model being trained");
  if (sources_.empty()) throw InputError("training corpus is empty");
  std::size_t docs = 0;
  for (const auto& s : sources_) docs += s.size();
  if (docs == 0) throw InputError("training corpus is empty");
  for (const auto* w : {&run_.corpus_weights, &run_.decay_corpus_weights}) {
    if (!w->empty() && w->size() != sources_.size())
      throw ConfigError("corpus weights list " + std::to_string(w->size()) + " entries for " +
                        std::to_string(sources_.size()) + " sources");
  }
  if (heldout_.empty()) throw InputError("held-out set is empty");
  fingerprint_ = corpus_fingerprint(sources_);
}

template <typename T>
bool Trainer<T>::in_decay_phase() const {
  const auto& s = run_.schedule;
  return s.decay_tokens > 0 && tokens_seen_ >= s.warmup_tokens + s.stable_tokens;
}

template <typename T>
bool Trainer<T>::done() const {
  if (run_.max_steps > 0 && step_ >= run_.max_steps) return true;
  const std::uint64_t budget = run_.schedule.total_tokens();
  return budget > 0 && tokens_seen_ >= budget;
}

template <typename T>
std::size_t Trainer<T>::current_batch_size() const {
  const auto& s = run_.schedule;
  return s.ladder.empty() ? s.batch_size : batch_size_at(tokens_seen_, s.ladder, s.tokens_per_sample);
}

template <typename T>
void Trainer<T>::build_epoch(std::uint64_t epoch, bool decay_weights) {
  const auto& weights = decay_weights ? run_.decay_corpus_weights : run_.corpus_weights;
  Pcg64Dxsm mix = derive_rng(run_.seed, kMixStream, epoch);
  std::vector<Document> docs;
  for (std::size_t s = 0; s < sources_.size(); ++s) {
    const double w = weights.empty() ? 1.0 : weights[s];
    const auto whole = static_cast<std::size_t>(std::floor(w));
    for (std::size_t r = 0; r < whole; ++r) docs.insert(docs.end(), sources_[s].begin(), sources_[s].end());
    const double frac = w - static_cast<double>(whole);
    if (frac > 0.0) {
      std::vector<std::size_t> idx(sources_[s].size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      mix.shuffle(std::span(idx));
      const auto take = static_cast<std::size_t>(std::llround(frac * static_cast<double>(idx.size())));
      for (std::size_t i = 0; i < take; ++i) docs.push_back(sources_[s][idx[i]]);
    }
  }
  if (docs.empty()) throw InputError("corpus weights select no documents");
  PackOptions po;
  po.pool_bins = run_.pool_bins;
  epoch_bins_ = pack_greedy(docs, run_.max_seq, derive_rng(run_.seed, kPackStream, epoch)(), po).bins;
  epoch_decay_ = decay_weights;
  epoch_built_ = true;
}

template <typename T>
std::vector<PackedBatch> Trainer<T>::draw(std::size_t count) {
  std::vector<PackedBatch> out;
  out.reserve(count);
  while (out.size() < count) {
    const bool want_decay = in_decay_phase() && !run_.decay_corpus_weights.empty();
    if (!epoch_built_ || cursor_ >= epoch_bins_.size() || want_decay != epoch_decay_) {
      if (epoch_built_) ++epoch_;
      build_epoch(epoch_, want_decay);
      cursor_ = 0;
    }
    out.push_back(epoch_bins_[cursor_++]);
  }
  return out;
}

template <typename T>
StepRecord Trainer<T>::step() {
  if (done()) throw ConfigError("training budget already spent");
  StepRecord rec;
  rec.batch_size = current_batch_size();
  rec.lr = lr_at(tokens_seen_, run_.schedule, run_.opt.lr_peak);
  std::vector<PackedBatch> batch = draw(rec.batch_size);
  Pcg64Dxsm mask_rng = derive_rng(run_.seed, kMaskStream, step_);
  for (auto& b : batch) {
    apply_mlm_mask(b, run_.model.vocab, mask_rng, run_.mlm);
    rec.tokens += b.num_tokens();
    rec.labeled += b.labeled_count();
  }
  const auto params = model_.parameters();
  model_.zero_grad();
  try {
    rec.loss = accumulate_gradients(model_, batch, run_.microbatch, derive_rng(run_.seed, kDropoutStream, step_)());
    if (!std::isfinite(rec.loss)) throw NumericError("loss is not finite");
    stableadamw_step<T>(params, opt_, run_.opt, rec.lr);
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " at step " + std::to_string(step_ + 1) + "; last good checkpoint: " +
                       (last_checkpoint_.empty() ? std::string("none") : last_checkpoint_));
  }
  model_.zero_grad();
  tokens_seen_ += rec.tokens;
  ++step_;
  rec.step = step_;
  rec.tokens_seen = tokens_seen_;
  history_.push_back(rec);
  loss_since_record_ += rec.loss;
  ++steps_since_record_;
  return rec;
}

template <typename T>
EvalResult Trainer<T>::evaluate_heldout() const {
  return evaluate<T>(model_, heldout_);
}

template <typename T>
void Trainer<T>::record_metrics() {
  const EvalResult ev = evaluate_heldout();
  Metrics m;
  m.tokens_seen = tokens_seen_;
  m.step = step_;
  m.train_loss = steps_since_record_ ? loss_since_record_ / static_cast<double>(steps_since_record_) : 0.0;
  m.val_loss = ev.val_loss;
  m.masked_token_accuracy = ev.masked_token_accuracy;
  m.lr_now = lr_at(tokens_seen_, run_.schedule, run_.opt.lr_peak);
  m.batch_size_now = current_batch_size();
  metrics_.push_back(m);
  loss_since_record_ = 0.0;
  steps_since_record_ = 0;
  if (!run_.out_dir.empty()) {
    std::filesystem::create_directories(run_.out_dir);
    std::ofstream out(std::filesystem::path(run_.out_dir) / "metrics.jsonl", std::ios::app);
    if (!out) throw InputError("cannot append to metrics log in " + run_.out_dir);
    out << metrics_json(m).dump() << "\n";
  }
}

template <typename T>
void Trainer<T>::save(const std::string& path, std::optional<double> val_loss) const {
  Json trainer{{"step", step_},
               {"tokens_seen", tokens_seen_},
               {"epoch", epoch_},
               {"epoch_decay", epoch_decay_},
               {"epoch_built", epoch_built_},
               {"cursor", cursor_},
               {"corpus_fingerprint", fingerprint_},
               {"last_checkpoint", last_checkpoint_}};
  Json extra{{"run", to_json(run_)},
             {"trainer", trainer},
             {"val_loss", val_loss ? Json(*val_loss) : Json(nullptr)},
             {"decay_phase", in_decay_phase()}};
  save_checkpoint<T>(path, model_, &opt_, extra);
}

template <typename T>
void Trainer<T>::write_checkpoint(double val_loss) {
  if (run_.out_dir.empty()) return;
  const auto path = (std::filesystem::path(run_.out_dir) / "checkpoints" / step_name(step_)).string();
  save(path, val_loss);
  checkpoints_.push_back({path, step_, tokens_seen_, val_loss, in_decay_phase()});
  last_checkpoint_ = path;
}

template <typename T>
void Trainer<T>::run() {
  auto latest_val = [&] {
    if (!metrics_.empty() && metrics_.back().step == step_) return metrics_.back().val_loss;
    return evaluate_heldout().val_loss;
  };
  while (!done()) {
    step();
    if (step_ % run_.eval_every_steps == 0) record_metrics();
    if (step_ % run_.checkpoint_every_steps == 0) write_checkpoint(latest_val());
  }
  if (metrics_.empty() || metrics_.back().step != step_) record_metrics();
  if (!run_.out_dir.empty() && (checkpoints_.empty() || checkpoints_.back().step != step_)) write_checkpoint(latest_val());
}

template <typename T>
Trainer<T> Trainer<T>::resume(const std::string& checkpoint_path, std::vector<std::vector<Document>> sources,
                              std::vector<PackedBatch> heldout, const ResumeOverrides& overrides) {
  Checkpoint<T> ck = load_checkpoint<T>(checkpoint_path);
  RunConfig run;
  Json state;
  try {
    run = run_config_from_json(ck.extra.at("run"));
    state = ck.extra.at("trainer");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(checkpoint_path + ": no trainer state (" + e.what() + ")");
  } catch (const ConfigError& e) {
    throw CheckpointError(checkpoint_path + ": stored run config is invalid (" + e.what() + ")");
  }
  if (!(run.model == ck.model.config())) throw CheckpointError(checkpoint_path + ": run config and model shapes differ");
  if (overrides.lr_peak) {
    if (!std::isfinite(*overrides.lr_peak)) throw ConfigError("lr_peak override must be finite");
    run.opt.lr_peak = *overrides.lr_peak;
  }
  if (overrides.weight_decay) {
    if (!std::isfinite(*overrides.weight_decay)) throw ConfigError("weight_decay override must be finite");
    run.opt.weight_decay = *overrides.weight_decay;
  }
  if (overrides.max_steps) run.max_steps = *overrides.max_steps;
  if (overrides.out_dir) run.out_dir = *overrides.out_dir;

  Trainer t(std::move(run), std::move(sources), std::move(heldout), std::move(ck.model));
  try {
    if (state.at("corpus_fingerprint").get<std::uint64_t>() != t.fingerprint_)
      throw CheckpointError(checkpoint_path + ": corpus differs from the one this run was trained on");
    t.step_ = state.at("step").get<std::uint64_t>();
    t.tokens_seen_ = state.at("tokens_seen").get<std::uint64_t>();
    t.epoch_ = state.at("epoch").get<std::uint64_t>();
    const bool built = state.at("epoch_built").get<bool>();
    const bool decay = state.at("epoch_decay").get<bool>();
    t.cursor_ = state.at("cursor").get<std::size_t>();
    t.last_checkpoint_ = checkpoint_path;
    if (built) {
      t.build_epoch(t.epoch_, decay);
      if (t.cursor_ > t.epoch_bins_.size()) throw CheckpointError(checkpoint_path + ": stream cursor out of range");
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(checkpoint_path + ": malformed trainer state (" + e.what() + ")");
  }
  if (ck.optimizer) t.opt_ = std::move(*ck.optimizer);
  return t;
}

template <typename T>
TrainResult<T> train(const RunConfig& run, std::vector<std::vector<Document>> sources, std::vector<PackedBatch> heldout,
                     const EncoderModel<T>& initial) {
  Trainer<T> t(run, std::move(sources), std::move(heldout), initial.clone());
  t.run();
  return {t.model().clone(), t.metrics(), t.history(), t.checkpoints()};
}

std::vector<CheckpointRecord> select_for_averaging(std::span<const CheckpointRecord> records, std::size_t best) {
  if (records.empty()) throw InputError("no checkpoints to choose from");
  std::vector<CheckpointRecord> pool;
  for (const auto& r : records) {
    if (r.decay_phase) pool.push_back(r);
  }
  std::stable_sort(pool.begin(), pool.end(),
                   [](const CheckpointRecord& a, const CheckpointRecord& b) { return a.val_loss < b.val_loss; });
  if (pool.size() > best) pool.resize(best);
  const auto& final = records.back();
  const bool listed =
      std::any_of(pool.begin(), pool.end(), [&](const CheckpointRecord& r) { return r.path == final.path && r.step == final.step; });
  if (!listed) pool.push_back(final);
  return pool;
}

ScheduleSpec context_extension_schedule(std::uint64_t total_tokens, double phase_one_share, std::size_t batch_size) {
  if (total_tokens == 0) throw ConfigError("context extension needs a token budget");
  if (!(phase_one_share >= 0.0 && phase_one_share <= 1.0)) throw ConfigError("phase_one_share must be in [0, 1]");
  ScheduleSpec s;
  s.stable_tokens = static_cast<std::uint64_t>(std::llround(phase_one_share * static_cast<double>(total_tokens)));
  s.decay_tokens = total_tokens - s.stable_tokens;
  s.batch_size = batch_size;
  return s;
}

template <typename T>
ContextExtensionResult<T> run_context_extension(const EncoderModel<T>& model,
                                                std::vector<std::vector<Document>> long_sources,
                                                std::vector<PackedBatch> heldout, const ContextExtensionConfig& cfg) {
  const std::size_t new_max = cfg.max_seq ? cfg.max_seq : 8 * model.config().max_seq;
  EncoderModel<T> extended = extend_context(model, cfg.theta_global, new_max);
  RunConfig run = cfg.run;
  run.model = extended.config();
  run.schedule = context_extension_schedule(cfg.total_tokens, cfg.phase_one_share, cfg.run.schedule.batch_size);
  Trainer<T> t(run, std::move(long_sources), std::move(heldout), extended.clone());
  t.run();
  ContextExtensionResult<T> out{std::move(extended), t.model().clone(), t.metrics(), t.history(), 0, 0};
  for (const auto& r : out.history) {
    const std::uint64_t before = r.tokens_seen - r.tokens;
    (before < run.schedule.stable_tokens ? out.phase_one_tokens : out.phase_two_tokens) += r.tokens;
  }
  return out;
}

#define ENCFORGE_INSTANTIATE(T)                                                                                  \
  template EvalResult evaluate(const EncoderModel<T>&, std::span<const PackedBatch>);                            \
  template double accumulate_gradients(const EncoderModel<T>&, std::span<const PackedBatch>, std::size_t,        \
                                       std::uint64_t);                                                           \
  template class Trainer<T>;                                                                                     \
  template TrainResult<T> train(const RunConfig&, std::vector<std::vector<Document>>, std::vector<PackedBatch>,  \
                                const EncoderModel<T>&);                                                         \
  template ContextExtensionResult<T> run_context_extension(const EncoderModel<T>&,                               \
                                                           std::vector<std::vector<Document>>,                   \
                                                           std::vector<PackedBatch>, const ContextExtensionConfig&);

ENCFORGE_INSTANTIATE(float)
ENCFORGE_INSTANTIATE(double)

#undef ENCFORGE_INSTANTIATE

}  // namespace encforge
