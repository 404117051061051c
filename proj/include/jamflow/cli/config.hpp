#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "jamflow/data.hpp"
#include "jamflow/dit.hpp"
#include "jamflow/flow.hpp"

namespace jamflow {

enum class Stage { motion_only, audio_only, joint };

std::string to_string(Stage stage);  // "1_motion", "1_audio", "2_joint"
Stage parse_stage(std::string_view text);

struct TrainConfig {
  Stage stage = Stage::joint;
  std::size_t batch_size = 4;
  std::size_t steps = 5000;
  double lr = 1e-3;
  std::size_t warmup_steps = 100;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 500;
};

struct DataConfig {
  std::uint64_t corpus_seed = 1;
  std::size_t corpus_size = 2000;
  std::size_t min_motion_frames = 8;
  std::size_t max_motion_frames = 16;
  double mask_min_frac = 0.3;
  double mask_max_frac = 1.0;
  double p_full_mask = 0.1;
  // Chance that a modality gets no masked frames, so that "only audio hidden"
  // and "only motion hidden" examples occur alongside "both hidden".
  double p_keep_audio = 0.25;
  double p_keep_motion = 0.25;
  DropoutSpec dropout;
};

struct EvalConfig {
  std::uint64_t corpus_seed = 7;
  std::size_t samples = 32;
  std::size_t motion_frames = 12;
  double ref_audio_fraction = 0.3;
};

struct PathsConfig {
  std::string checkpoint_dir = "checkpoints";
  std::string metrics = "metrics.csv";
  std::string motion_checkpoint;  // stage-1 motion weights, consumed by stage 2
  std::string audio_checkpoint;   // stage-1 audio weights, consumed by stage 2
};

inline namespace JAMFLOW_PRECISION {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SamplerConfig sampler;
  DataConfig data;
  EvalConfig eval;
  PathsConfig paths;

  void validate() const;
};

// Flat "section.key = value" lines, '#' comments. Unknown keys, malformed
// values and duplicates are errors that name the source and line.
RunConfig parse_config(std::string_view text, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);
// Every key, in a fixed order, with shortest round-trip number formatting.
std::string serialize_config(const RunConfig& config);
// "section.key=value"
void apply_override(RunConfig& config, std::string_view assignment);

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
