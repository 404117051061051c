#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "jamflow/attention.hpp"
#include "jamflow/rope.hpp"
#include "jamflow/tensor.hpp"

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

enum class JointLayout { first, interleaved };

// Toy-scale defaults. A full-size model would use 22 layers (11 joint), hidden
// 1024, 16 heads of 64, 100 mel bins, 17x3 rest channels, feed-forward
// expansion 4 and an audio/motion frame ratio of 93.75 / 25 = 3.75.
struct ModelConfig {
  std::size_t n_layers = 6;
  std::size_t n_joint = 3;
  std::size_t hidden_dim = 128;
  std::size_t heads = 4;
  std::size_t head_dim = 32;
  std::size_t audio_channels = 16;
  std::size_t motion_channels = 12;  // 4 mouth keypoints x 3
  std::size_t rest_channels = 6;
  std::size_t text_vocab = 16;
  std::size_t text_dim = 32;
  double frame_ratio = 4.0;  // audio frames per motion frame
  std::size_t window = 4;    // motion-frame half width of the local window
  std::size_t ff_mult = 2;
  std::size_t time_freq_dim = 64;
  double rope_base = 10000.0;
  JointLayout joint_layout = JointLayout::first;
  QueryPooling query_pooling = QueryPooling::own;

  void validate() const;
  int filler_token() const { return static_cast<int>(text_vocab); }
  std::size_t audio_frames(std::size_t motion_frames) const;
  bool is_joint_layer(std::size_t layer) const;
};

struct FeedForward {
  Tensor w1, b1, w2, b2;
};

// Per-branch gating and shift/scale vectors, each [hidden].
struct ModulationParams {
  Tensor s_attn, e_attn, g_msa, s_ff, e_ff, g_ff;
};

struct BranchBlock {
  Tensor mod_w, mod_b;  // hidden -> 6 * hidden, zero-initialized
  AttentionParams attn;
  FeedForward ff;
};

struct JointDiTBlock {
  BranchBlock audio;
  BranchBlock motion;
  bool joint = false;
};

struct TimestepEmbedder {
  Tensor w1, b1, w2, b2;
  std::size_t freq_dim = 0;
};

struct BranchIO {
  Tensor in_w, in_b;
  TimestepEmbedder time;
  Tensor final_mod_w, final_mod_b;  // hidden -> 2 * hidden, zero-initialized
  Tensor head_w, head_b;
};

struct JamModel {
  ModelConfig config;
  BranchIO audio;
  BranchIO motion;
  Tensor text_embed;                 // (text_vocab + 1) x text_dim; last row is the filler token
  Tensor audio_feat_w, audio_feat_b; // stand-in audio features -> motion hidden (stage-1 only)
  std::vector<JointDiTBlock> blocks;

  // Canonical order; names are unique.
  std::vector<Tensor> parameters() const;
};

JamModel make_jam_model(const ModelConfig& config, std::uint64_t seed);

// True for parameters owned by the audio stream (the rest belong to the motion stream).
bool is_audio_parameter(const std::string& name);

// x_hat = LN(x) * (1 + e_attn) + s_attn, with all six vectors linear in t_act.
std::pair<Tensor, ModulationParams> adaln_modulate(const Tensor& x, const Tensor& t_act, const Tensor& mod_w,
                                                   const Tensor& mod_b);

Tensor feed_forward(const FeedForward& ff, const Tensor& x);

struct BranchState {
  Tensor x;      // [L, hidden]
  Tensor t_act;  // [hidden], SiLU of the timestep embedding
  const RopeTable* rope = nullptr;
  const JointMask* mask = nullptr;
  bool joint = false;
};

std::pair<Tensor, Tensor> joint_dit_block(const JointDiTBlock& block, const BranchState& audio,
                                          const BranchState& motion, QueryPooling pooling = QueryPooling::own);

// The same block run on one stream alone.
Tensor dit_branch_block(const BranchBlock& block, const BranchState& state);

Tensor timestep_features(double t, std::size_t dim);
Tensor embed_timestep(const TimestepEmbedder& embedder, double t);

struct JamInputs {
  Tensor noisy_audio;       // [L_a, audio_channels]
  Tensor audio_cond;        // [L_a, audio_channels], zero where unavailable
  Tensor audio_indicator;   // [L_a, 1], 1 where the condition is unavailable
  std::vector<int> text_tokens;  // at most L_a ids, filler-padded to L_a
  Tensor noisy_motion;      // [L_m, motion_channels]
  Tensor motion_cond;       // [L_m, motion_channels]
  Tensor motion_indicator;  // [L_m, 1]
  Tensor rest_motion;       // [L_m, rest_channels]
  Tensor audio_features;    // optional [L_m, audio_channels], stage-1 motion stream only
  double t_audio = 0;
  double t_motion = 0;
};

struct ForwardOptions {
  bool audio = true;         // evaluate the audio stream
  bool motion = true;        // evaluate the motion stream
  bool joint_audio = true;   // audio queries pool motion keys in joint layers
  bool joint_motion = true;  // motion queries pool audio keys in joint layers
};

struct VelocityPair {
  Tensor audio;   // undefined when the audio stream was not evaluated
  Tensor motion;  // undefined when the motion stream was not evaluated
};

VelocityPair forward_jam(const JamModel& model, const JamInputs& inputs, const ForwardOptions& options = {});

// Hidden states entering the first block, for inspection and tests.
Tensor audio_input_projection(const JamModel& model, const JamInputs& inputs);
Tensor motion_input_projection(const JamModel& model, const JamInputs& inputs);
Tensor output_head(const BranchIO& io, const Tensor& x, const Tensor& t_act);

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
