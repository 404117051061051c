#include "jamflow/flow.hpp"

#include <algorithm>
#include <cmath>

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

Tensor interpolate(const Tensor& x0, const Tensor& x1, double t) {
  if (x0.shape() != x1.shape()) throw ShapeError("interpolate", x0.shape(), x1.shape());
  if (!(t >= 0.0 && t <= 1.0)) throw ShapeError("interpolate", "t = " + std::to_string(t) + " outside [0, 1]");
  return add(scalar_mul(x0, static_cast<Scalar>(1.0 - t)), scalar_mul(x1, static_cast<Scalar>(t)));
}

Tensor cfm_loss(const Tensor& v_pred, const Tensor& x0, const Tensor& x1, std::span<const std::uint8_t> frame_mask,
                bool full_sequence) {
  if (v_pred.shape() != x0.shape()) throw ShapeError("cfm_loss", v_pred.shape(), x0.shape());
  if (x0.shape() != x1.shape()) throw ShapeError("cfm_loss", x0.shape(), x1.shape());
  if (v_pred.rank() != 2) throw ShapeError("cfm_loss", "expected [frames, channels], got " + shape_str(v_pred.shape()));
  const std::size_t frames = v_pred.dim(0), channels = v_pred.dim(1);
  if (!full_sequence && frame_mask.size() != frames) {
    throw ShapeError("cfm_loss", "frame mask has " + std::to_string(frame_mask.size()) + " entries for " +
                                     std::to_string(frames) + " frames");
  }
  std::vector<Scalar> target(x1.numel());
  std::vector<Scalar> weight(x1.numel(), 0);
  std::size_t supervised = 0;
  for (std::size_t i = 0; i < frames; ++i) {
    const bool on = full_sequence || frame_mask[i] != 0;
    supervised += on ? 1 : 0;
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t k = i * channels + c;
      target[k] = x1.data()[k] - x0.data()[k];
      weight[k] = on ? Scalar(1) : Scalar(0);
    }
  }
  if (supervised == 0) return Tensor::scalar(0);
  Tensor diff = sub(v_pred, Tensor::from(x1.shape(), std::move(target)));
  Tensor sq = mul(mul(diff, diff), Tensor::from(x1.shape(), std::move(weight)));
  return scalar_mul(sum(sq), Scalar(1) / static_cast<Scalar>(supervised * channels));
}

Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double gamma) {
  if (v_cond.shape() != v_uncond.shape()) throw ShapeError("cfg_combine", v_cond.shape(), v_uncond.shape());
  const Scalar g = static_cast<Scalar>(gamma);
  auto c = v_cond.data();
  auto u = v_uncond.data();
  std::vector<Scalar> out(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) out[i] = c[i] + g * (c[i] - u[i]);
  return Tensor::from(v_cond.shape(), std::move(out));
}

FlowDraw draw_flow(const SequenceSample& sample, CounterRng rng) {
  FlowDraw d;
  d.t = rng.derive("t").uniform();
  d.x0_audio = Tensor::randn(sample.audio.shape(), rng.derive("x0_audio"));
  d.x0_motion = Tensor::randn(sample.motion.shape(), rng.derive("x0_motion"));
  return d;
}

JamInputs make_model_inputs(const TrainingExample& ex, const FlowDraw& draw, const LossOptions& opt) {
  const auto& s = ex.sample;
  const auto& c = ex.conditions;
  JamInputs in;
  in.t_audio = draw.t;
  in.t_motion = draw.t;
  if (opt.audio) {
    in.noisy_audio = interpolate(draw.x0_audio, s.audio, draw.t);
    in.audio_cond = c.audio_cond;
    in.audio_indicator = c.audio_indicator;
    in.text_tokens = c.text_tokens;
  }
  if (opt.motion) {
    in.noisy_motion = interpolate(draw.x0_motion, s.motion, draw.t);
    in.motion_cond = c.motion_cond;
    in.motion_indicator = c.motion_indicator;
    in.rest_motion = c.rest_motion;
    if (opt.audio_features) in.audio_features = c.audio_features;
  }
  return in;
}

namespace {

bool any_set(std::span<const std::uint8_t> mask) {
  return std::any_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; });
}

}  // namespace

LossTerms example_loss(const VelocityModel& model, const TrainingExample& ex, const FlowDraw& draw,
                       const LossOptions& opt) {
  const auto& s = ex.sample;
  const bool audio_live = opt.audio && (opt.full_sequence || any_set(s.audio_mask));
  const bool motion_live = opt.motion && (opt.full_sequence || any_set(s.motion_mask));
  LossTerms out;
  if (!audio_live && !motion_live) {
    out.skipped = true;
    out.audio = out.motion = out.total = Tensor::scalar(0);
    return out;
  }
  ForwardOptions fwd;
  fwd.audio = opt.audio;
  fwd.motion = opt.motion;
  fwd.joint_audio = fwd.joint_motion = opt.joint;
  VelocityPair v = model.velocity(make_model_inputs(ex, draw, opt), fwd);
  out.audio = opt.audio ? cfm_loss(v.audio, draw.x0_audio, s.audio, s.audio_mask, opt.full_sequence) : Tensor::scalar(0);
  out.motion =
      opt.motion ? cfm_loss(v.motion, draw.x0_motion, s.motion, s.motion_mask, opt.full_sequence) : Tensor::scalar(0);
  out.total = add(out.audio, out.motion);
  return out;
}

JointLoss joint_loss(std::span<const TrainingExample> batch, const VelocityModel& model, CounterRng rng,
                     const LossOptions& opt) {
  JointLoss out;
  std::vector<Tensor> audio_terms, motion_terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    LossTerms terms = example_loss(model, batch[i], draw_flow(batch[i].sample, rng.derive(i)), opt);
    if (terms.skipped) {
      ++out.skipped;
      continue;
    }
    ++out.used;
    audio_terms.push_back(terms.audio);
    motion_terms.push_back(terms.motion);
  }
  if (out.used == 0) {
    out.total = out.audio = out.motion = Tensor::scalar(0);
    return out;
  }
  auto average = [&](const std::vector<Tensor>& terms) {
    Tensor acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return scalar_mul(acc, Scalar(1) / static_cast<Scalar>(out.used));
  };
  out.audio = average(audio_terms);
  out.motion = average(motion_terms);
  out.total = add(out.audio, out.motion);
  return out;
}

void SamplerConfig::validate() const {
  if (nfe < 1) throw ConfigError("sampler: nfe must be >= 1");
  if (!(cfg_scale >= 0.0)) throw ConfigError("sampler: cfg_scale must be >= 0");
}

namespace {

Tensor known_rows(const Tensor& ref, std::span<const std::uint8_t> known, std::size_t rows, std::size_t cols) {
  std::vector<Scalar> v(rows * cols, 0);
  for (std::size_t i = 0; i < rows; ++i)
    if (known[i])
      for (std::size_t c = 0; c < cols; ++c) v[i * cols + c] = ref.data()[i * cols + c];
  return Tensor::from({rows, cols}, std::move(v));
}

Tensor unknown_indicator(std::span<const std::uint8_t> known) {
  std::vector<Scalar> v(known.size());
  for (std::size_t i = 0; i < known.size(); ++i) v[i] = known[i] ? Scalar(0) : Scalar(1);
  return Tensor::from({known.size(), 1}, std::move(v));
}

std::vector<std::uint8_t> known_or_none(const std::vector<std::uint8_t>& known, std::size_t frames, const Tensor& ref,
                                        std::size_t channels, const char* what) {
  if (known.empty()) return std::vector<std::uint8_t>(frames, 0);
  if (known.size() != frames) throw ShapeError("euler_sample", std::string(what) + " known-frame flags do not match length");
  if (any_set(known) && (!ref.defined() || ref.rank() != 2 || ref.dim(0) != frames || ref.dim(1) != channels)) {
    throw ShapeError(std::string("euler_sample: ") + what + " reference", ref.defined() ? ref.shape() : Shape{},
                     Shape{frames, channels});
  }
  return known;
}

// One Euler step followed by re-imposing known frames on their straight path.
Tensor advance(const Tensor& x, const Tensor& v, const Tensor& x0, const Tensor& ref,
               std::span<const std::uint8_t> known, double dt, double t_next) {
  const std::size_t cols = x.dim(1);
  auto xs = x.data();
  auto vs = v.data();
  std::vector<Scalar> out(xs.size());
  const Scalar h = static_cast<Scalar>(dt);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] + h * vs[i];
  const Scalar a = static_cast<Scalar>(1.0 - t_next);
  const Scalar b = static_cast<Scalar>(t_next);
  for (std::size_t r = 0; r < known.size(); ++r) {
    if (!known[r]) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t k = r * cols + c;
      out[k] = a * x0.data()[k] + b * ref.data()[k];
    }
  }
  return Tensor::from(x.shape(), std::move(out));
}

void require_finite(const Tensor& x, std::size_t step, const char* stream) {
  for (Scalar v : x.data()) {
    if (!std::isfinite(v)) {
      throw NumericError("euler_sample: non-finite " + std::string(stream) + " state at step " + std::to_string(step));
    }
  }
}

}  // namespace

SampleResult euler_sample(const VelocityModel& model, const ModelConfig& config, const SampleConditions& cond,
                          const SamplerConfig& sampler, const StepObserver& observer) {
  sampler.validate();
  const std::size_t Lm = cond.motion_frames, La = cond.audio_frames;
  if (Lm == 0 || La == 0) throw ShapeError("euler_sample", "empty stream");
  if (config.audio_frames(Lm) != La) {
    throw ShapeError("euler_sample", "audio length " + std::to_string(La) + " inconsistent with motion length " +
                                         std::to_string(Lm));
  }
  const std::size_t Ca = config.audio_channels, Cm = config.motion_channels, Cr = config.rest_channels;
  const auto audio_known = known_or_none(cond.audio_known, La, cond.audio_ref, Ca, "audio");
  const auto motion_known = known_or_none(cond.motion_known, Lm, cond.motion_ref, Cm, "motion");
  if (cond.rest_motion.defined() && cond.rest_motion.shape() != Shape{Lm, Cr}) {
    throw ShapeError("euler_sample: rest_motion", cond.rest_motion.shape(), {Lm, Cr});
  }

  CounterRng rng = CounterRng(sampler.seed).derive("euler");
  Tensor x_audio = Tensor::randn({La, Ca}, rng.derive("x0_audio"));
  Tensor x_motion = Tensor::randn({Lm, Cm}, rng.derive("x0_motion"));
  const Tensor x0_audio = x_audio;
  const Tensor x0_motion = x_motion;
  const Tensor audio_ref = any_set(audio_known) ? cond.audio_ref : Tensor::zeros({La, Ca});
  const Tensor motion_ref = any_set(motion_known) ? cond.motion_ref : Tensor::zeros({Lm, Cm});

  JamInputs c_in;
  c_in.audio_cond = known_rows(audio_ref, audio_known, La, Ca);
  c_in.audio_indicator = unknown_indicator(audio_known);
  c_in.motion_cond = known_rows(motion_ref, motion_known, Lm, Cm);
  c_in.motion_indicator = unknown_indicator(motion_known);
  c_in.rest_motion = cond.rest_motion.defined() ? cond.rest_motion : Tensor::zeros({Lm, Cr});
  if (cond.text) c_in.text_tokens = *cond.text;

  JamInputs u_in;
  u_in.audio_cond = Tensor::zeros({La, Ca});
  u_in.audio_indicator = Tensor::full({La, 1}, 1);
  u_in.motion_cond = Tensor::zeros({Lm, Cm});
  u_in.motion_indicator = Tensor::full({Lm, 1}, 1);
  u_in.rest_motion = Tensor::zeros({Lm, Cr});

  ForwardOptions c_opt, u_opt;
  if (sampler.sever_dropped) {
    c_opt.joint_audio = any_set(motion_known);
    c_opt.joint_motion = any_set(audio_known);
    u_opt.joint_audio = u_opt.joint_motion = false;
  }

  const double dt = 1.0 / static_cast<double>(sampler.nfe);
  for (std::size_t k = 0; k < sampler.nfe; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(sampler.nfe);
    c_in.noisy_audio = u_in.noisy_audio = x_audio;
    c_in.noisy_motion = u_in.noisy_motion = x_motion;
    c_in.t_audio = c_in.t_motion = u_in.t_audio = u_in.t_motion = t;

    SamplerStep step;
    step.index = k;
    step.t = t;
    step.cond = model.velocity(c_in, c_opt);
    step.guided = step.cond;
    if (sampler.cfg_scale > 0.0) {
      step.uncond = model.velocity(u_in, u_opt);
      if (step.cond.audio.defined()) step.guided.audio = cfg_combine(step.cond.audio, step.uncond->audio, sampler.cfg_scale);
      if (step.cond.motion.defined())
        step.guided.motion = cfg_combine(step.cond.motion, step.uncond->motion, sampler.cfg_scale);
    }
    if (observer) observer(step);

    const double t_next = static_cast<double>(k + 1) / static_cast<double>(sampler.nfe);
    if (step.guided.audio.defined()) {
      x_audio = advance(x_audio, step.guided.audio, x0_audio, audio_ref, audio_known, dt, t_next);
      require_finite(x_audio, k, "audio");
    }
    if (step.guided.motion.defined()) {
      x_motion = advance(x_motion, step.guided.motion, x0_motion, motion_ref, motion_known, dt, t_next);
      require_finite(x_motion, k, "motion");
    }
  }
  return {x_audio, x_motion};
}

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
