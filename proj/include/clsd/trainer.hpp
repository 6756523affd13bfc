#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clsd/corpus.hpp"
#include "clsd/model.hpp"
#include "clsd/objective.hpp"

namespace clsd {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  Backbone backbone = Backbone::deepfm;
  std::size_t epochs = 9;
  double learning_rate = 0.003;
  std::size_t batch_size = kDefaultBatchSize;
  std::uint64_t seed = 1;
  LossConfig loss;
  AdamConfig adam;

  void validate() const;
};

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  explicit OptimizerState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
  bool operator==(const OptimizerState&) const = default;
};

/// One bias-corrected Adam update. Entries with `frozen[i]` set are left
/// untouched (moments included). Throws TrainingAborted on a non-finite gradient.
void adam_step(std::span<double> params, std::span<const double> grads, OptimizerState& state, double lr,
               const AdamConfig& adam = {}, const std::vector<bool>* frozen = nullptr);

/// First epoch that trains on the distillation objective: ceil(fraction * epochs).
std::size_t warmup_epochs(double warmup_fraction, std::size_t epochs);

struct EpochReport {
  std::size_t epoch = 0;
  Phase phase = Phase::warmup;
  double train_logloss = 0.0;
  double test_auc = 0.0;
  double test_logloss = 0.0;

  bool operator==(const EpochReport&) const = default;
};

struct RunReport {
  std::vector<EpochReport> epochs;

  double final_auc() const { return epochs.empty() ? 0.0 : epochs.back().test_auc; }
  bool operator==(const RunReport&) const = default;
};

void write_report_csv(const RunReport& report, std::ostream& out);
void write_report_csv(const RunReport& report, const std::filesystem::path& path);

/// Resumable state of a run.
struct TrainState {
  ModelParams params;
  OptimizerState optimizer;
  std::size_t next_epoch = 0;
};

/// Hooks for instrumentation; all default to no-ops.
class TrainObserver {
 public:
  virtual ~TrainObserver() = default;
  /// Called right before the teacher forward of batch `b`, with the snapshot it will use.
  virtual void on_teacher(std::size_t /*epoch*/, std::size_t /*batch*/, const ModelParams& /*snapshot*/) {}
  /// Called after the Adam update of batch `b`.
  virtual void on_step(std::size_t /*epoch*/, std::size_t /*batch*/, const ModelParams& /*params*/) {}
  /// Returning true ends the run after `epoch`; the state then resumes at epoch + 1.
  virtual bool stop_after_epoch(std::size_t /*epoch*/) { return false; }
};

/// Model architecture a run of `config` trains: the AdGate / aux head exist only
/// if the variant uses them and at least one epoch is past warm-up.
ModelSpec model_spec_for(const FieldSchema& schema, const TrainConfig& config);

/// Fresh state: init_params(model_spec_for(...), seed) with zero moments.
TrainState initial_state(const FieldSchema& schema, const TrainConfig& config);

struct TrainResult {
  TrainState state;
  RunReport report;
};

/// Runs epochs [state.next_epoch, config.epochs). Deterministic for a fixed config.
TrainResult train(const Corpus& train_corpus, const Corpus& test_corpus, TrainState state, const TrainConfig& config,
                  TrainObserver* observer = nullptr);

inline TrainResult train(const Corpus& train_corpus, const Corpus& test_corpus, const TrainConfig& config,
                         TrainObserver* observer = nullptr) {
  return train(train_corpus, test_corpus, initial_state(train_corpus.schema, config), config, observer);
}

// ---------------------------------------------------------------------------
// Checkpoints: model sections plus adam.step / adam.m / adam.v / trainer.next_epoch.

void save_checkpoint(const TrainState& state, std::ostream& out);
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);

/// All-or-nothing: throws ParseError and returns no state on any defect.
TrainState load_checkpoint(std::istream& in);
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace clsd
