#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "jamflow/data.hpp"
#include "jamflow/dit.hpp"
#include "jamflow/rng.hpp"
#include "jamflow/tensor.hpp"

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

// x_t = (1 - t) x0 + t x1
Tensor interpolate(const Tensor& x0, const Tensor& x1, double t);

// Mean over supervised frames and channels of (v_pred - (x1 - x0))^2. Frames
// with a nonzero mask entry are supervised (every frame when full_sequence).
// Returns an exact zero when no frame is supervised.
Tensor cfm_loss(const Tensor& v_pred, const Tensor& x0, const Tensor& x1, std::span<const std::uint8_t> frame_mask,
                bool full_sequence = false);

// v_cond + gamma * (v_cond - v_uncond)
Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double gamma);

// Anything that maps noisy streams plus conditions to velocities.
class VelocityModel {
 public:
  virtual ~VelocityModel() = default;
  virtual VelocityPair velocity(const JamInputs& inputs, const ForwardOptions& options) const = 0;
};

class JamVelocity : public VelocityModel {
 public:
  explicit JamVelocity(const JamModel& model) : model_(model) {}
  VelocityPair velocity(const JamInputs& inputs, const ForwardOptions& options) const override {
    return forward_jam(model_, inputs, options);
  }

 private:
  const JamModel& model_;
};

struct TrainingExample {
  SequenceSample sample;
  ConditionedInputs conditions;
};

// Flow time (shared by both streams) and source noise for one example.
struct FlowDraw {
  double t = 0;
  Tensor x0_audio;
  Tensor x0_motion;
};

FlowDraw draw_flow(const SequenceSample& sample, CounterRng rng);

struct LossOptions {
  bool audio = true;    // supervise and evaluate the audio stream
  bool motion = true;   // supervise and evaluate the motion stream
  bool joint = true;    // joint attention in joint layers (both streams only)
  bool audio_features = false;  // feed the stand-in audio features to the motion stream
  bool full_sequence = false;
};

struct LossTerms {
  Tensor total;
  Tensor audio;
  Tensor motion;
  bool skipped = false;
};

JamInputs make_model_inputs(const TrainingExample& example, const FlowDraw& draw, const LossOptions& options);

// Loss of a single example: audio term + motion term.
LossTerms example_loss(const VelocityModel& model, const TrainingExample& example, const FlowDraw& draw,
                       const LossOptions& options);

struct JointLoss {
  Tensor total;  // audio + motion
  Tensor audio;
  Tensor motion;
  std::size_t used = 0;
  std::size_t skipped = 0;  // examples with nothing to supervise
};

// Averages example losses over the batch. Example i draws its flow time and
// noise from rng.derive(i).
JointLoss joint_loss(std::span<const TrainingExample> batch, const VelocityModel& model, CounterRng rng,
                     const LossOptions& options = {});

struct SamplerConfig {
  std::size_t nfe = 32;
  double cfg_scale = 2.0;
  std::uint64_t seed = 0;
  // Cut joint attention toward a stream that has no condition at all.
  bool sever_dropped = false;

  void validate() const;
};

// What the caller provides at sampling time. Reference tensors cover the full
// stream length; only rows flagged as known are used.
struct SampleConditions {
  std::size_t motion_frames = 0;
  std::size_t audio_frames = 0;
  Tensor audio_ref;
  std::vector<std::uint8_t> audio_known;
  Tensor motion_ref;
  std::vector<std::uint8_t> motion_known;
  std::optional<std::vector<int>> text;
  Tensor rest_motion;  // undefined = absent
};

struct SampleResult {
  Tensor audio;
  Tensor motion;
};

struct SamplerStep {
  std::size_t index = 0;
  double t = 0;
  VelocityPair cond;
  std::optional<VelocityPair> uncond;
  VelocityPair guided;
};

using StepObserver = std::function<void(const SamplerStep&)>;

// Uniform-step Euler integration from seeded noise at t = 0 to t = 1 with
// classifier-free guidance. Known frames are kept on the straight path toward
// their reference values, so they equal the reference exactly at t = 1.
SampleResult euler_sample(const VelocityModel& model, const ModelConfig& config, const SampleConditions& conditions,
                          const SamplerConfig& sampler, const StepObserver& observer = {});

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
