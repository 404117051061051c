#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "jamflow/dit.hpp"
#include "jamflow/rng.hpp"
#include "jamflow/tensor.hpp"

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

// One paired example. Masks are per frame, nonzero = frame must be generated.
struct SequenceSample {
  std::uint64_t seed = 0;
  Tensor audio;        // [L_a, audio_channels]
  Tensor motion;       // [L_m, motion_channels], mouth keypoint stand-in
  Tensor rest_motion;  // [L_m, rest_channels]
  std::vector<int> text_tokens;
  std::vector<std::uint8_t> audio_mask;
  std::vector<std::uint8_t> motion_mask;

  std::size_t audio_frames() const { return audio.dim(0); }
  std::size_t motion_frames() const { return motion.dim(0); }
};

struct DropoutSpec {
  double p_audio = 0.1;
  double p_motion = 0.1;
  double p_text = 0.2;
  double p_rest = 0.8;

  void validate() const;
};

struct DropFlags {
  bool audio = false;
  bool motion = false;
  bool text = false;
  bool rest = false;
};

// Condition channels as the network sees them: masked or dropped frames are
// zero and the indicator is 1 wherever the condition is unavailable.
struct ConditionedInputs {
  Tensor audio_cond;        // [L_a, audio_channels]
  Tensor audio_indicator;   // [L_a, 1]
  Tensor motion_cond;       // [L_m, motion_channels]
  Tensor motion_indicator;  // [L_m, 1]
  Tensor rest_motion;       // [L_m, rest_channels]
  Tensor audio_features;    // [L_m, audio_channels], per-motion-frame mean of the clean audio
  std::vector<int> text_tokens;
  DropFlags dropped;
};

// Fixed cross-modal law shared by every sample: per-token spectral envelope,
// loudness and mouth-curve targets.
struct CouplingLaw {
  std::size_t vocab = 0;
  std::size_t audio_channels = 0;
  std::size_t motion_channels = 0;
  std::vector<double> envelope;  // vocab x audio_channels
  std::vector<double> loudness;  // vocab
  std::vector<double> targets;   // vocab x (motion_channels - 1)
};

CouplingLaw make_coupling_law(const ModelConfig& config);

// Mean audio value over each motion frame's audio frames and all channels.
std::vector<double> motion_frame_energy(const Tensor& audio, std::size_t motion_frames);
// Causal EMA with decay 0.5 per motion frame.
std::vector<double> smooth_energy(std::span<const double> energy);

// Mouth-openness proxy is an affine map of the smoothed energy.
inline constexpr double kOpennessScale = 1.5;
inline constexpr double kOpennessOffset = -0.5;

SequenceSample generate_coupled_sample(std::uint64_t seed, const ModelConfig& config, std::size_t motion_frames);

std::uint64_t corpus_sample_seed(std::uint64_t corpus_seed, std::size_t index);
std::vector<SequenceSample> generate_corpus(std::uint64_t corpus_seed, std::size_t count, const ModelConfig& config,
                                            std::size_t min_motion_frames, std::size_t max_motion_frames);

// One contiguous masked span covering a fraction in [min_frac, max_frac] of the
// sequence, or the whole sequence with probability p_full.
std::vector<std::uint8_t> make_inpaint_mask(std::size_t length, CounterRng& rng, double min_frac = 0.3,
                                            double max_frac = 1.0, double p_full = 0.1);

ConditionedInputs build_conditions(const SequenceSample& sample);
ConditionedInputs apply_condition_dropout(const SequenceSample& sample, const DropoutSpec& spec, CounterRng& rng);

// Implicit keypoint composition X = s * (x_c R + e) + t over 21 keypoints.
using Keypoints = Eigen::Matrix<double, 21, 3, Eigen::RowMajor>;

struct KeypointParams {
  Keypoints canonical = Keypoints::Zero();
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Keypoints expression = Keypoints::Zero();
  double scale = 1.0;
  Eigen::RowVector3d translation = Eigen::RowVector3d::Zero();
};

Keypoints compose_keypoints(const KeypointParams& p);

// The four expression rows that drive the mouth, flattened to 12 channels.
inline constexpr int kMouthKeypoints[4] = {14, 17, 19, 20};
std::vector<double> mouth_channels(const Keypoints& expression);

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
