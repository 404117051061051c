#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include "jamflow/cli/config.hpp"
#include "jamflow/cli/io.hpp"
#include "jamflow/flow.hpp"
#include "jamflow/optim.hpp"

namespace jamflow {

// Exclusive ownership of a checkpoint directory for one training process.
// A lock left behind by a process that no longer exists is taken over.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

// JAMFLOW_THREADS, or 1 when unset.
std::size_t worker_count_from_env();

inline namespace JAMFLOW_PRECISION {

struct TrainOptions {
  bool from_scratch = false;  // stage 2 without stage-1 weights
  bool resume = false;        // continue from <checkpoint_dir>/last.jamf
  std::optional<std::size_t> stop_after;  // end early at this step (still checkpointed)
  std::size_t threads = 1;
  std::ostream* log = nullptr;
};

struct TrainSummary {
  std::size_t start_step = 0;  // steps already done before this run
  std::size_t end_step = 0;
  std::vector<double> losses;  // one per step run here
  std::size_t skipped = 0;
  std::filesystem::path checkpoint;
};

std::vector<SequenceSample> training_corpus(const RunConfig& config);

LossOptions stage_loss_options(Stage stage);

// Linear warmup over the first warmup_steps steps (1-based), then constant.
double learning_rate(const TrainConfig& train, std::size_t step);

// Masks, dropout and corpus index for batch slot `slot` of step `step`, all
// derived from (train.seed, step, slot) so that any step can be replayed.
TrainingExample make_training_example(std::span<const SequenceSample> corpus, const RunConfig& config,
                                      std::size_t step, std::size_t slot);
FlowDraw training_flow_draw(const TrainingExample& example, const RunConfig& config, std::size_t step,
                            std::size_t slot);

struct StepResult {
  double loss = 0;
  double loss_audio = 0;
  double loss_motion = 0;
  double grad_norm = 0;  // before clipping
  std::size_t used = 0;
  std::vector<std::vector<Scalar>> grads;  // averaged over used examples, clipped
};

// Forward and backward for one training step; examples are processed on up to
// `threads` workers and gradients are summed in slot order.
StepResult compute_step(const JamModel& model, std::span<const SequenceSample> corpus, const RunConfig& config,
                        std::size_t step, std::size_t threads);

Checkpoint make_checkpoint(const RunConfig& config, const JamModel& model, const OptimizerState* optimizer,
                           std::uint64_t train_step);

// Loads a checkpoint's parameters into a model built from its own config.
JamModel load_model(const Checkpoint& checkpoint);

TrainSummary run_training(const RunConfig& config, const TrainOptions& options);

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
