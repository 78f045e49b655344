#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "encforge/batching.hpp"
#include "encforge/checkpoint.hpp"
#include "encforge/model.hpp"
#include "encforge/optim.hpp"
#include "encforge/schedule.hpp"

namespace encforge {

struct RunConfig {
  ModelConfig model = ModelConfig::tiny();
  OptConfig opt;
  ScheduleSpec schedule;
  MlmOptions mlm;
  /// Packed sequences per forward/backward pass.
  std::size_t microbatch = 4;
  std::uint64_t seed = 0;
  std::uint64_t eval_every_steps = 100;
  std::uint64_t checkpoint_every_steps = 1000;
  /// Packing capacity of one training sequence.
  std::size_t max_seq = 128;
  /// 0 runs until the schedule's token budget is spent.
  std::uint64_t max_steps = 0;
  std::size_t pool_bins = 8;
  /// Per-source sampling multipliers (1 = each document once per epoch).
  std::vector<double> corpus_weights;
  /// Multipliers once the decay phase starts; empty keeps corpus_weights.
  std::vector<double> decay_corpus_weights;
  /// Metrics and checkpoints land here; empty writes nothing.
  std::string out_dir;

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

struct Metrics {
  std::uint64_t tokens_seen = 0;
  std::uint64_t step = 0;
  double train_loss = 0.0;  // mean of step losses since the previous record
  double val_loss = 0.0;
  double masked_token_accuracy = 0.0;
  double lr_now = 0.0;
  std::size_t batch_size_now = 0;
};

struct EvalResult {
  double val_loss = 0.0;
  double masked_token_accuracy = 0.0;
  std::size_t labeled = 0;
};

struct StepRecord {
  std::uint64_t step = 0;         // 1-based index of the step just taken
  std::uint64_t tokens_seen = 0;  // after the step
  std::size_t batch_size = 0;
  std::size_t tokens = 0;
  std::size_t labeled = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct CheckpointRecord {
  std::string path;
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
  double val_loss = 0.0;
  bool decay_phase = false;
};

struct ResumeOverrides {
  std::optional<double> lr_peak;
  std::optional<double> weight_decay;
  std::optional<std::uint64_t> max_steps;
  std::optional<std::string> out_dir;
};

/// Mean masked cross-entropy and argmax accuracy over labeled positions.
/// Throws InputError when no position is labeled.
template <typename T>
EvalResult evaluate(const EncoderModel<T>& model, std::span<const PackedBatch> heldout);

/// Forward/backward over `microbatch`-sized groups of masked sequences,
/// accumulating into the model's grads. The loss is normalized by the label
/// count of all of `batch`, so the split does not change the result.
/// Returns the full-batch mean loss.
template <typename T>
double accumulate_gradients(const EncoderModel<T>& model, std::span<const PackedBatch> batch, std::size_t microbatch,
                            std::uint64_t dropout_seed = 0);

/// Packs and masks held-out documents with a fixed seed.
std::vector<PackedBatch> make_heldout(std::span<const Document> docs, std::size_t capacity, std::size_t vocab,
                                      std::uint64_t seed, const MlmOptions& mlm = {});

/// Order-sensitive digest of every token of every source.
std::uint64_t corpus_fingerprint(std::span<const std::vector<Document>> sources);

template <typename T>
class Trainer {
 public:
  Trainer(RunConfig run, std::vector<std::vector<Document>> sources, std::vector<PackedBatch> heldout,
          EncoderModel<T> model);

  /// Restores model, optimizer, and stream position; overrides apply to the
  /// continuation. The sources must be the ones used originally.
  static Trainer resume(const std::string& checkpoint_path, std::vector<std::vector<Document>> sources,
                        std::vector<PackedBatch> heldout, const ResumeOverrides& overrides = {});

  StepRecord step();
  /// Steps until done(), evaluating and checkpointing on cadence, then a final
  /// evaluation and checkpoint.
  void run();
  bool done() const;

  EvalResult evaluate_heldout() const;
  /// Saves model, optimizer, and trainer state.
  void save(const std::string& path, std::optional<double> val_loss = std::nullopt) const;

  const RunConfig& config() const { return run_; }
  const EncoderModel<T>& model() const { return model_; }
  const OptimizerState<T>& optimizer() const { return opt_; }
  std::uint64_t steps_taken() const { return step_; }
  std::uint64_t tokens_seen() const { return tokens_seen_; }
  bool in_decay_phase() const;
  const std::vector<Metrics>& metrics() const { return metrics_; }
  const std::vector<StepRecord>& history() const { return history_; }
  const std::vector<CheckpointRecord>& checkpoints() const { return checkpoints_; }
  /// Path of the newest checkpoint written by this trainer, if any.
  const std::string& last_checkpoint() const { return last_checkpoint_; }

 private:
  std::vector<PackedBatch> draw(std::size_t count);
  void build_epoch(std::uint64_t epoch, bool decay_weights);
  void record_metrics();
  void write_checkpoint(double val_loss);
  std::size_t current_batch_size() const;

  RunConfig run_;
  std::vector<std::vector<Document>> sources_;
  std::vector<PackedBatch> heldout_;
  EncoderModel<T> model_;
  OptimizerState<T> opt_;
  std::uint64_t fingerprint_ = 0;

  std::uint64_t step_ = 0;
  std::uint64_t tokens_seen_ = 0;
  std::uint64_t epoch_ = 0;
  bool epoch_decay_ = false;
  std::size_t cursor_ = 0;
  std::vector<PackedBatch> epoch_bins_;
  bool epoch_built_ = false;

  std::vector<Metrics> metrics_;
  std::vector<StepRecord> history_;
  std::vector<CheckpointRecord> checkpoints_;
  std::string last_checkpoint_;
  double loss_since_record_ = 0.0;
  std::size_t steps_since_record_ = 0;
};

template <typename T>
struct TrainResult {
  EncoderModel<T> model;
  std::vector<Metrics> metrics;
  std::vector<StepRecord> history;
  std::vector<CheckpointRecord> checkpoints;
};

template <typename T>
TrainResult<T> train(const RunConfig& run, std::vector<std::vector<Document>> sources, std::vector<PackedBatch> heldout,
                     const EncoderModel<T>& initial);

/// Decay-phase checkpoints ranked by val_loss: the best `best` plus the final
/// one (listed once even if it is also among the best).
std::vector<CheckpointRecord> select_for_averaging(std::span<const CheckpointRecord> records, std::size_t best = 3);

struct ContextExtensionConfig {
  double theta_global = 160000.0;
  /// New model max_seq; 0 means 8x the incoming model's.
  std::size_t max_seq = 0;
  /// Optimizer, MLM, microbatch, seed and cadences for the long phases.
  /// run.max_seq is the packing capacity; run.schedule.batch_size the batch.
  RunConfig run;
  std::uint64_t total_tokens = 0;
  /// Phase one (constant LR) share of total_tokens; 5/6 gives the 5:1 split.
  double phase_one_share = 5.0 / 6.0;
};

template <typename T>
struct ContextExtensionResult {
  EncoderModel<T> extended;  // after the theta swap, before any long training
  EncoderModel<T> model;     // after both phases
  std::vector<Metrics> metrics;
  std::vector<StepRecord> history;
  std::uint64_t phase_one_tokens = 0;
  std::uint64_t phase_two_tokens = 0;
};

/// Schedule for the two long phases: flat at lr_peak, then 1 - sqrt decay.
ScheduleSpec context_extension_schedule(std::uint64_t total_tokens, double phase_one_share, std::size_t batch_size);

template <typename T>
ContextExtensionResult<T> run_context_extension(const EncoderModel<T>& model,
                                                std::vector<std::vector<Document>> long_sources,
                                                std::vector<PackedBatch> heldout, const ContextExtensionConfig& cfg);

}  // namespace encforge
