#include "jamflow/dit.hpp"

#include <algorithm>
#include <cmath>

#include "jamflow/init.hpp"

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model: " + what); };
  if (n_layers == 0) fail("n_layers must be >= 1");
  if (n_joint > n_layers) fail("n_joint must not exceed n_layers");
  if (heads == 0 || head_dim == 0) fail("heads and head_dim must be >= 1");
  if (head_dim % 2 != 0) fail("head_dim must be even for rotary embeddings");
  if (hidden_dim != heads * head_dim) fail("hidden_dim must equal heads * head_dim");
  if (audio_channels == 0 || motion_channels == 0) fail("channel counts must be >= 1");
  if (text_vocab == 0) fail("text_vocab must be >= 1");
  if (!(frame_ratio > 0)) fail("frame_ratio must be positive");
  if (ff_mult == 0) fail("ff_mult must be >= 1");
  if (time_freq_dim < 2 || time_freq_dim % 2 != 0) fail("time_freq_dim must be even and >= 2");
  if (!(rope_base > 0)) fail("rope_base must be positive");
}

std::size_t ModelConfig::audio_frames(std::size_t motion_frames) const {
  return static_cast<std::size_t>(std::llround(frame_ratio * static_cast<double>(motion_frames)));
}

bool ModelConfig::is_joint_layer(std::size_t layer) const {
  if (joint_layout == JointLayout::first) return layer < n_joint;
  return (layer * n_joint) % n_layers < n_joint;
}

bool is_audio_parameter(const std::string& name) {
  if (name.rfind("audio.", 0) == 0) return true;
  return name.rfind("blocks.", 0) == 0 && name.find(".audio.") != std::string::npos;
}

std::vector<Tensor> JamModel::parameters() const {
  std::vector<Tensor> out;
  auto io = [&out](const BranchIO& b) {
    for (const Tensor* t : {&b.in_w, &b.in_b, &b.time.w1, &b.time.b1, &b.time.w2, &b.time.b2, &b.final_mod_w,
                            &b.final_mod_b, &b.head_w, &b.head_b})
      out.push_back(*t);
  };
  io(audio);
  out.push_back(text_embed);
  io(motion);
  out.push_back(audio_feat_w);
  out.push_back(audio_feat_b);
  auto branch = [&out](const BranchBlock& b) {
    const auto& a = b.attn;
    for (const Tensor* t : {&b.mod_w, &b.mod_b, &a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo, &b.ff.w1,
                            &b.ff.b1, &b.ff.w2, &b.ff.b2})
      out.push_back(*t);
  };
  for (const auto& blk : blocks) {
    branch(blk.audio);
    branch(blk.motion);
  }
  return out;
}

namespace {

BranchIO make_branch_io(const ModelConfig& c, std::size_t in_dim, std::size_t out_dim, CounterRng rng,
                        const std::string& prefix) {
  const std::size_t H = c.hidden_dim;
  BranchIO b;
  b.in_w = init_uniform({in_dim, H}, in_dim, rng.derive("in_w"), prefix + "in.w");
  b.in_b = init_uniform({H}, in_dim, rng.derive("in_b"), prefix + "in.b");
  b.time.freq_dim = c.time_freq_dim;
  b.time.w1 = init_uniform({c.time_freq_dim, H}, c.time_freq_dim, rng.derive("t_w1"), prefix + "time.w1");
  b.time.b1 = init_uniform({H}, c.time_freq_dim, rng.derive("t_b1"), prefix + "time.b1");
  b.time.w2 = init_uniform({H, H}, H, rng.derive("t_w2"), prefix + "time.w2");
  b.time.b2 = init_uniform({H}, H, rng.derive("t_b2"), prefix + "time.b2");
  b.final_mod_w = init_zeros({H, 2 * H}, prefix + "final_mod.w");
  b.final_mod_b = init_zeros({2 * H}, prefix + "final_mod.b");
  b.head_w = init_uniform({H, out_dim}, H, rng.derive("head_w"), prefix + "head.w");
  b.head_b = init_uniform({out_dim}, H, rng.derive("head_b"), prefix + "head.b");
  return b;
}

BranchBlock make_branch_block(const ModelConfig& c, CounterRng rng, const std::string& prefix) {
  const std::size_t H = c.hidden_dim;
  const std::size_t F = H * c.ff_mult;
  BranchBlock b;
  b.mod_w = init_zeros({H, 6 * H}, prefix + "mod.w");
  b.mod_b = init_zeros({6 * H}, prefix + "mod.b");
  b.attn = make_attention_params(H, c.heads, c.head_dim, rng.derive("attn"), prefix + "attn.");
  b.ff.w1 = init_uniform({H, F}, H, rng.derive("ff_w1"), prefix + "ff.w1");
  b.ff.b1 = init_uniform({F}, H, rng.derive("ff_b1"), prefix + "ff.b1");
  b.ff.w2 = init_uniform({F, H}, F, rng.derive("ff_w2"), prefix + "ff.w2");
  b.ff.b2 = init_uniform({H}, F, rng.derive("ff_b2"), prefix + "ff.b2");
  return b;
}

Tensor modulate(const Tensor& normed, const Tensor& scale, const Tensor& shift) {
  return add(mul(normed, add_scalar(scale, 1)), shift);
}

}  // namespace

JamModel make_jam_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  CounterRng rng = CounterRng(seed).derive("model");
  JamModel m;
  m.config = config;
  const auto& c = config;
  const std::size_t audio_in = 2 * c.audio_channels + 1 + c.text_dim;
  const std::size_t motion_in = 2 * c.motion_channels + 1 + c.rest_channels;
  m.audio = make_branch_io(c, audio_in, c.audio_channels, rng.derive("audio"), "audio.");
  m.motion = make_branch_io(c, motion_in, c.motion_channels, rng.derive("motion"), "motion.");
  m.text_embed = init_normal({c.text_vocab + 1, c.text_dim}, 1.0, rng.derive("text_embed"), "audio.text_embed");
  m.audio_feat_w = init_uniform({c.audio_channels, c.hidden_dim}, c.audio_channels, rng.derive("feat_w"),
                                "motion.audio_feat.w");
  m.audio_feat_b = init_zeros({c.hidden_dim}, "motion.audio_feat.b");
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const std::string prefix = "blocks." + std::to_string(i) + ".";
    JointDiTBlock blk;
    blk.audio = make_branch_block(c, rng.derive("block_audio", i), prefix + "audio.");
    blk.motion = make_branch_block(c, rng.derive("block_motion", i), prefix + "motion.");
    blk.joint = c.is_joint_layer(i);
    m.blocks.push_back(std::move(blk));
  }
  return m;
}

std::pair<Tensor, ModulationParams> adaln_modulate(const Tensor& x, const Tensor& t_act, const Tensor& mod_w,
                                                   const Tensor& mod_b) {
  if (x.rank() != 2) throw ShapeError("adaln_modulate", "x must be [L, hidden], got " + shape_str(x.shape()));
  const std::size_t H = x.dim(1);
  if (t_act.rank() != 1 || t_act.dim(0) != H) throw ShapeError("adaln_modulate", x.shape(), t_act.shape());
  if (mod_w.rank() != 2 || mod_w.dim(0) != H || mod_w.dim(1) != 6 * H) {
    throw ShapeError("adaln_modulate", mod_w.shape(), {H, 6 * H});
  }
  Tensor mod = linear(t_act, mod_w, mod_b);
  ModulationParams p;
  p.s_attn = slice(mod, 0, 0, H);
  p.e_attn = slice(mod, 0, H, 2 * H);
  p.g_msa = slice(mod, 0, 2 * H, 3 * H);
  p.s_ff = slice(mod, 0, 3 * H, 4 * H);
  p.e_ff = slice(mod, 0, 4 * H, 5 * H);
  p.g_ff = slice(mod, 0, 5 * H, 6 * H);
  Tensor x_hat = modulate(layer_norm(x), p.e_attn, p.s_attn);
  return {x_hat, p};
}

Tensor feed_forward(const FeedForward& ff, const Tensor& x) { return linear(gelu(linear(x, ff.w1, ff.b1)), ff.w2, ff.b2); }

namespace {

Tensor finish_block(const BranchBlock& block, const Tensor& x, const ModulationParams& p, const Tensor& attn_out) {
  Tensor h = add(x, mul(attn_out, p.g_msa));
  Tensor x_tilde = modulate(layer_norm(h), p.e_ff, p.s_ff);
  return add(h, mul(feed_forward(block.ff, x_tilde), p.g_ff));
}

}  // namespace

std::pair<Tensor, Tensor> joint_dit_block(const JointDiTBlock& block, const BranchState& audio,
                                          const BranchState& motion, QueryPooling pooling) {
  auto [audio_hat, audio_mod] = adaln_modulate(audio.x, audio.t_act, block.audio.mod_w, block.audio.mod_b);
  auto [motion_hat, motion_mod] = adaln_modulate(motion.x, motion.t_act, block.motion.mod_w, block.motion.mod_b);
  AttentionBranch a{&block.audio.attn, audio_hat, audio.rope, audio.mask, audio.joint};
  AttentionBranch m{&block.motion.attn, motion_hat, motion.rope, motion.mask, motion.joint};
  auto [audio_attn, motion_attn] = joint_attention(a, m, pooling);
  return {finish_block(block.audio, audio.x, audio_mod, audio_attn),
          finish_block(block.motion, motion.x, motion_mod, motion_attn)};
}

Tensor dit_branch_block(const BranchBlock& block, const BranchState& state) {
  auto [x_hat, mod] = adaln_modulate(state.x, state.t_act, block.mod_w, block.mod_b);
  Tensor attn = self_attention(block.attn, x_hat, state.rope, state.mask);
  return finish_block(block, state.x, mod, attn);
}

Tensor timestep_features(double t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<Scalar> f(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = 1000.0 * t * freq;
    f[i] = static_cast<Scalar>(std::sin(arg));
    f[half + i] = static_cast<Scalar>(std::cos(arg));
  }
  return Tensor::from({dim}, std::move(f));
}

Tensor embed_timestep(const TimestepEmbedder& e, double t) {
  Tensor h = silu(linear(timestep_features(t, e.freq_dim), e.w1, e.b1));
  return linear(h, e.w2, e.b2);
}

namespace {

void require_shape(const char* what, const Tensor& t, std::size_t rows, std::size_t cols) {
  if (!t.defined() || t.rank() != 2 || t.dim(0) != rows || t.dim(1) != cols) {
    throw ShapeError(std::string("forward_jam: ") + what, t.shape(), {rows, cols});
  }
}

void require_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ShapeError("forward_jam", "flow time " + std::to_string(t) + " outside [0, 1]");
}

}  // namespace

Tensor audio_input_projection(const JamModel& model, const JamInputs& in) {
  const auto& c = model.config;
  const std::size_t La = in.noisy_audio.defined() ? in.noisy_audio.dim(0) : 0;
  require_shape("noisy_audio", in.noisy_audio, La, c.audio_channels);
  require_shape("audio_cond", in.audio_cond, La, c.audio_channels);
  require_shape("audio_indicator", in.audio_indicator, La, 1);
  if (in.text_tokens.size() > La) {
    throw ShapeError("forward_jam", std::to_string(in.text_tokens.size()) + " text tokens exceed " +
                                        std::to_string(La) + " audio frames");
  }
  std::vector<int> tokens(La, c.filler_token());
  for (std::size_t i = 0; i < in.text_tokens.size(); ++i) {
    const int tok = in.text_tokens[i];
    if (tok < 0 || tok > c.filler_token()) throw ShapeError("forward_jam", "text token " + std::to_string(tok) + " out of vocabulary");
    tokens[i] = tok;
  }
  Tensor text = gather_rows(model.text_embed, tokens);
  Tensor x = concat({in.noisy_audio, in.audio_cond, in.audio_indicator, text}, 1);
  return linear(x, model.audio.in_w, model.audio.in_b);
}

Tensor motion_input_projection(const JamModel& model, const JamInputs& in) {
  const auto& c = model.config;
  const std::size_t Lm = in.noisy_motion.defined() ? in.noisy_motion.dim(0) : 0;
  require_shape("noisy_motion", in.noisy_motion, Lm, c.motion_channels);
  require_shape("motion_cond", in.motion_cond, Lm, c.motion_channels);
  require_shape("motion_indicator", in.motion_indicator, Lm, 1);
  require_shape("rest_motion", in.rest_motion, Lm, c.rest_channels);
  Tensor x = concat({in.noisy_motion, in.motion_cond, in.motion_indicator, in.rest_motion}, 1);
  Tensor h = linear(x, model.motion.in_w, model.motion.in_b);
  if (in.audio_features.defined()) {
    require_shape("audio_features", in.audio_features, Lm, c.audio_channels);
    h = add(h, linear(in.audio_features, model.audio_feat_w, model.audio_feat_b));
  }
  return h;
}

Tensor output_head(const BranchIO& io, const Tensor& x, const Tensor& t_act) {
  const std::size_t H = x.dim(1);
  Tensor mod = linear(t_act, io.final_mod_w, io.final_mod_b);
  Tensor y = modulate(layer_norm(x), slice(mod, 0, H, 2 * H), slice(mod, 0, 0, H));
  return linear(y, io.head_w, io.head_b);
}

VelocityPair forward_jam(const JamModel& model, const JamInputs& in, const ForwardOptions& opt) {
  const auto& c = model.config;
  if (!opt.audio && !opt.motion) throw ShapeError("forward_jam", "no stream selected");

  BranchState audio, motion;
  std::size_t La = 0, Lm = 0;
  if (opt.audio) {
    require_time(in.t_audio);
    audio.x = audio_input_projection(model, in);
    audio.t_act = silu(embed_timestep(model.audio.time, in.t_audio));
    La = audio.x.dim(0);
  }
  if (opt.motion) {
    require_time(in.t_motion);
    motion.x = motion_input_projection(model, in);
    motion.t_act = silu(embed_timestep(model.motion.time, in.t_motion));
    Lm = motion.x.dim(0);
  }
  if (La == 0 && opt.audio) throw ShapeError("forward_jam", "empty audio sequence");
  if (Lm == 0 && opt.motion) throw ShapeError("forward_jam", "empty motion sequence");
  if (opt.audio && opt.motion && c.audio_frames(Lm) != La) {
    throw ShapeError("forward_jam", "audio length " + std::to_string(La) + " inconsistent with motion length " +
                                        std::to_string(Lm) + " at frame ratio " + std::to_string(c.frame_ratio));
  }

  const std::size_t ref = std::max(La, Lm);
  RopeTable audio_rope, motion_rope;
  JointMask audio_mask, motion_mask;
  if (opt.audio) audio_rope = build_rope_table(La, ref, c.head_dim, c.rope_base);
  if (opt.motion) motion_rope = build_rope_table(Lm, ref, c.head_dim, c.rope_base);
  const bool both = opt.audio && opt.motion;
  if (both) {
    audio_mask = build_joint_mask(MaskMode::audio_query, static_cast<std::int64_t>(La), static_cast<std::int64_t>(Lm));
    motion_mask = build_joint_mask(MaskMode::motion_query, static_cast<std::int64_t>(Lm), static_cast<std::int64_t>(La),
                                   static_cast<std::int64_t>(c.window));
  }
  audio.rope = &audio_rope;
  motion.rope = &motion_rope;

  for (const auto& blk : model.blocks) {
    if (both) {
      audio.joint = blk.joint && opt.joint_audio;
      motion.joint = blk.joint && opt.joint_motion;
      audio.mask = audio.joint ? &audio_mask : nullptr;
      motion.mask = motion.joint ? &motion_mask : nullptr;
      std::tie(audio.x, motion.x) = joint_dit_block(blk, audio, motion, c.query_pooling);
    } else if (opt.audio) {
      audio.x = dit_branch_block(blk.audio, audio);
    } else {
      motion.x = dit_branch_block(blk.motion, motion);
    }
  }

  VelocityPair v;
  if (opt.audio) v.audio = output_head(model.audio, audio.x, audio.t_act);
  if (opt.motion) v.motion = output_head(model.motion, motion.x, motion.t_act);
  return v;
}

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
