#include "jamflow/data.hpp"

#include <algorithm>
#include <cmath>

namespace jamflow {
inline namespace JAMFLOW_PRECISION {

namespace {

constexpr std::uint64_t kLawSeed = 0x4a414d2d4c415721ULL;
constexpr double kAudioNoise = 0.05;
// Fixed standardization of the raw synthetic audio.
constexpr double kAudioCenter = 0.35;
constexpr double kAudioSpread = 0.5;

}  // namespace

void DropoutSpec::validate() const {
  for (double p : {p_audio, p_motion, p_text, p_rest}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("dropout probabilities must lie in [0, 1]");
  }
}

CouplingLaw make_coupling_law(const ModelConfig& config) {
  if (config.text_vocab == 0) throw ConfigError("coupling law: vocabulary is empty");
  CouplingLaw law;
  law.vocab = config.text_vocab;
  law.audio_channels = config.audio_channels;
  law.motion_channels = config.motion_channels;
  CounterRng rng = CounterRng(kLawSeed).derive("law");
  const std::size_t C = config.audio_channels;
  law.envelope.resize(law.vocab * C);
  law.loudness.resize(law.vocab);
  law.targets.resize(law.vocab * (config.motion_channels - 1));
  for (std::size_t v = 0; v < law.vocab; ++v) {
    CounterRng r = rng.derive("token", v);
    const double center = r.uniform(0.0, static_cast<double>(C));
    const double width = r.uniform(1.5, 3.5);
    for (std::size_t c = 0; c < C; ++c) {
      const double z = (static_cast<double>(c) - center) / width;
      law.envelope[v * C + c] = 0.1 + std::exp(-0.5 * z * z);
    }
    law.loudness[v] = r.uniform(0.1, 2.0);
    for (std::size_t k = 0; k + 1 < config.motion_channels; ++k) law.targets[v * (config.motion_channels - 1) + k] = r.normal();
  }
  return law;
}

std::vector<double> motion_frame_energy(const Tensor& audio, std::size_t motion_frames) {
  const std::size_t La = audio.dim(0), C = audio.dim(1);
  std::vector<double> total(motion_frames, 0.0);
  std::vector<std::size_t> count(motion_frames, 0);
  auto a = audio.data();
  for (std::size_t i = 0; i < La; ++i) {
    const std::size_t j = i * motion_frames / La;
    for (std::size_t c = 0; c < C; ++c) total[j] += a[i * C + c];
    count[j] += C;
  }
  for (std::size_t j = 0; j < motion_frames; ++j) total[j] = count[j] ? total[j] / static_cast<double>(count[j]) : 0.0;
  return total;
}

std::vector<double> smooth_energy(std::span<const double> energy) {
  std::vector<double> out(energy.size());
  for (std::size_t j = 0; j < energy.size(); ++j) out[j] = j == 0 ? energy[0] : 0.5 * out[j - 1] + 0.5 * energy[j];
  return out;
}

SequenceSample generate_coupled_sample(std::uint64_t seed, const ModelConfig& config, std::size_t motion_frames) {
  if (config.text_vocab == 0) throw ConfigError("generate_coupled_sample: vocabulary is empty");
  if (motion_frames < 8) throw ShapeError("generate_coupled_sample", "need at least 8 motion frames");
  if (config.motion_channels < 1) throw ShapeError("generate_coupled_sample", "need at least one motion channel");
  static thread_local CouplingLaw cached;
  if (cached.vocab != config.text_vocab || cached.audio_channels != config.audio_channels ||
      cached.motion_channels != config.motion_channels) {
    cached = make_coupling_law(config);
  }
  const CouplingLaw& law = cached;

  CounterRng rng = CounterRng(seed).derive("sample");
  const std::size_t Lm = motion_frames;
  const std::size_t La = config.audio_frames(Lm);
  const std::size_t Ca = config.audio_channels;
  const std::size_t Cm = config.motion_channels;
  const std::size_t Cr = config.rest_channels;

  // Token ("phoneme") sequence, each held for 2-4 motion frames.
  CounterRng tok_rng = rng.derive("tokens");
  std::vector<int> frame_token(Lm);
  std::vector<int> tokens;
  for (std::size_t j = 0; j < Lm;) {
    const int tok = static_cast<int>(tok_rng.below(config.text_vocab));
    const std::size_t dur = 2 + tok_rng.below(3);
    tokens.push_back(tok);
    for (std::size_t k = 0; k < dur && j < Lm; ++k, ++j) frame_token[j] = tok;
  }

  // Audio: loudness envelope smoothed over 5 audio frames times the token's
  // spectral envelope, plus small noise.
  std::vector<double> loud(La);
  for (std::size_t i = 0; i < La; ++i) loud[i] = law.loudness[static_cast<std::size_t>(frame_token[i * Lm / La])];
  std::vector<double> amp(La);
  for (std::size_t i = 0; i < La; ++i) {
    double acc = 0;
    int n = 0;
    for (std::ptrdiff_t d = -2; d <= 2; ++d) {
      const std::ptrdiff_t k = static_cast<std::ptrdiff_t>(i) + d;
      if (k < 0 || k >= static_cast<std::ptrdiff_t>(La)) continue;
      acc += loud[static_cast<std::size_t>(k)];
      ++n;
    }
    amp[i] = acc / n;
  }
  CounterRng noise = rng.derive("audio_noise");
  std::vector<Scalar> audio(La * Ca);
  for (std::size_t i = 0; i < La; ++i) {
    const auto tok = static_cast<std::size_t>(frame_token[i * Lm / La]);
    for (std::size_t c = 0; c < Ca; ++c) {
      const double raw = amp[i] * law.envelope[tok * Ca + c] + kAudioNoise * noise.normal();
      audio[i * Ca + c] = static_cast<Scalar>((raw - kAudioCenter) / kAudioSpread);
    }
  }
  Tensor audio_t = Tensor::from({La, Ca}, std::move(audio));

  // Mouth channel 0 follows the smoothed loudness; the rest track token targets.
  const std::vector<double> openness = smooth_energy(motion_frame_energy(audio_t, Lm));
  std::vector<Scalar> motion(Lm * Cm);
  std::vector<double> curve(Cm > 1 ? Cm - 1 : 0);
  for (std::size_t j = 0; j < Lm; ++j) {
    motion[j * Cm] = static_cast<Scalar>(kOpennessScale * openness[j] + kOpennessOffset);
    const auto tok = static_cast<std::size_t>(frame_token[j]);
    for (std::size_t k = 0; k < curve.size(); ++k) {
      const double target = law.targets[tok * (Cm - 1) + k];
      curve[k] = j == 0 ? target : 0.5 * curve[k] + 0.5 * target;
      motion[j * Cm + 1 + k] = static_cast<Scalar>(curve[k]);
    }
  }

  CounterRng rest_rng = rng.derive("rest");
  std::vector<Scalar> rest(Lm * Cr);
  for (std::size_t c = 0; c < Cr; ++c) {
    double r = rest_rng.normal();
    for (std::size_t j = 0; j < Lm; ++j) {
      if (j > 0) r = 0.8 * r + 0.6 * rest_rng.normal();
      rest[j * Cr + c] = static_cast<Scalar>(r);
    }
  }

  SequenceSample s;
  s.seed = seed;
  s.audio = audio_t;
  s.motion = Tensor::from({Lm, Cm}, std::move(motion));
  s.rest_motion = Tensor::from({Lm, Cr}, std::move(rest));
  s.text_tokens = std::move(tokens);
  s.audio_mask.assign(La, 1);
  s.motion_mask.assign(Lm, 1);
  return s;
}

std::uint64_t corpus_sample_seed(std::uint64_t corpus_seed, std::size_t index) {
  return CounterRng(corpus_seed).derive("corpus", index).next_u64();
}

std::vector<SequenceSample> generate_corpus(std::uint64_t corpus_seed, std::size_t count, const ModelConfig& config,
                                            std::size_t min_motion_frames, std::size_t max_motion_frames) {
  if (min_motion_frames > max_motion_frames) throw ConfigError("corpus: min motion frames exceeds max");
  std::vector<SequenceSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t seed = corpus_sample_seed(corpus_seed, i);
    CounterRng len_rng = CounterRng(seed).derive("length");
    const std::size_t Lm = min_motion_frames + len_rng.below(max_motion_frames - min_motion_frames + 1);
    out.push_back(generate_coupled_sample(seed, config, Lm));
  }
  return out;
}

std::vector<std::uint8_t> make_inpaint_mask(std::size_t length, CounterRng& rng, double min_frac, double max_frac,
                                            double p_full) {
  if (length < 1) throw ShapeError("make_inpaint_mask", "length must be >= 1");
  if (min_frac > max_frac) throw ConfigError("make_inpaint_mask: min_frac exceeds max_frac");
  if (min_frac < 0.0 || max_frac > 1.0) throw ConfigError("make_inpaint_mask: fractions must lie in [0, 1]");
  std::vector<std::uint8_t> mask(length, 0);
  const bool full = rng.bernoulli(p_full);
  const double frac = rng.uniform(min_frac, max_frac);
  const double L = static_cast<double>(length);
  const auto lo = static_cast<std::size_t>(std::ceil(min_frac * L - 1e-9));
  const auto hi = std::max(lo, static_cast<std::size_t>(std::floor(max_frac * L + 1e-9)));
  std::size_t span = static_cast<std::size_t>(std::ceil(frac * L - 1e-9));
  span = std::clamp(span, std::max<std::size_t>(lo, 1), std::max<std::size_t>(hi, 1));
  span = std::min(span, length);
  const std::size_t start = rng.below(length - span + 1);
  if (full) {
    std::fill(mask.begin(), mask.end(), 1);
  } else {
    std::fill(mask.begin() + static_cast<std::ptrdiff_t>(start), mask.begin() + static_cast<std::ptrdiff_t>(start + span), 1);
  }
  return mask;
}

namespace {

Tensor masked_rows(const Tensor& x, std::span<const std::uint8_t> mask) {
  const std::size_t cols = x.dim(1);
  std::vector<Scalar> v(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) std::fill_n(v.begin() + static_cast<std::ptrdiff_t>(i * cols), cols, Scalar(0));
  return Tensor::from(x.shape(), std::move(v));
}

Tensor indicator(std::span<const std::uint8_t> mask) {
  std::vector<Scalar> v(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) v[i] = mask[i] ? Scalar(1) : Scalar(0);
  return Tensor::from({mask.size(), 1}, std::move(v));
}

Tensor pooled_audio(const Tensor& audio, std::size_t motion_frames) {
  const std::size_t La = audio.dim(0), C = audio.dim(1);
  std::vector<double> acc(motion_frames * C, 0.0);
  std::vector<std::size_t> n(motion_frames, 0);
  auto a = audio.data();
  for (std::size_t i = 0; i < La; ++i) {
    const std::size_t j = i * motion_frames / La;
    for (std::size_t c = 0; c < C; ++c) acc[j * C + c] += a[i * C + c];
    ++n[j];
  }
  std::vector<Scalar> out(motion_frames * C);
  for (std::size_t j = 0; j < motion_frames; ++j)
    for (std::size_t c = 0; c < C; ++c) out[j * C + c] = n[j] ? static_cast<Scalar>(acc[j * C + c] / static_cast<double>(n[j])) : Scalar(0);
  return Tensor::from({motion_frames, C}, std::move(out));
}

}  // namespace

ConditionedInputs build_conditions(const SequenceSample& s) {
  if (s.audio_mask.size() != s.audio_frames() || s.motion_mask.size() != s.motion_frames()) {
    throw ShapeError("build_conditions", "mask length does not match frame count");
  }
  ConditionedInputs c;
  c.audio_cond = masked_rows(s.audio, s.audio_mask);
  c.audio_indicator = indicator(s.audio_mask);
  c.motion_cond = masked_rows(s.motion, s.motion_mask);
  c.motion_indicator = indicator(s.motion_mask);
  c.rest_motion = s.rest_motion;
  c.audio_features = pooled_audio(s.audio, s.motion_frames());
  c.text_tokens = s.text_tokens;
  return c;
}

ConditionedInputs apply_condition_dropout(const SequenceSample& s, const DropoutSpec& spec, CounterRng& rng) {
  spec.validate();
  ConditionedInputs c = build_conditions(s);
  // Always draw all four so each decision is independent of the others.
  c.dropped.audio = rng.bernoulli(spec.p_audio);
  c.dropped.motion = rng.bernoulli(spec.p_motion);
  c.dropped.text = rng.bernoulli(spec.p_text);
  c.dropped.rest = rng.bernoulli(spec.p_rest);
  if (c.dropped.audio) {
    c.audio_cond = Tensor::zeros(c.audio_cond.shape());
    c.audio_indicator = Tensor::full(c.audio_indicator.shape(), 1);
    c.audio_features = Tensor::zeros(c.audio_features.shape());
  }
  if (c.dropped.motion) {
    c.motion_cond = Tensor::zeros(c.motion_cond.shape());
    c.motion_indicator = Tensor::full(c.motion_indicator.shape(), 1);
  }
  if (c.dropped.text) c.text_tokens.clear();
  if (c.dropped.rest) c.rest_motion = Tensor::zeros(c.rest_motion.shape());
  return c;
}

Keypoints compose_keypoints(const KeypointParams& p) {
  const Eigen::Matrix3d rtr = p.rotation.transpose() * p.rotation;
  if ((rtr - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6) {
    throw ShapeError("compose_keypoints", "rotation is not orthogonal");
  }
  if (!(p.scale > 0)) throw ShapeError("compose_keypoints", "scale must be positive");
  Keypoints x = p.scale * (p.canonical * p.rotation + p.expression);
  x.rowwise() += p.translation;
  return x;
}

std::vector<double> mouth_channels(const Keypoints& expression) {
  std::vector<double> out;
  out.reserve(12);
  for (int k : kMouthKeypoints)
    for (int d = 0; d < 3; ++d) out.push_back(expression(k, d));
  return out;
}

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
