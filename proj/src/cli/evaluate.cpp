#include "jamflow/cli/evaluate.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace jamflow {

namespace {
constexpr Regime kRegimes[] = {Regime::uncond,          Regime::text_to_both,    Regime::text_refaudio_to_both,
                               Regime::motion_text_to_audio, Regime::motion_to_audio, Regime::audio_to_motion};
}

std::string to_string(Regime regime) {
  switch (regime) {
    case Regime::uncond: return "uncond";
    case Regime::text_to_both: return "text_to_both";
    case Regime::text_refaudio_to_both: return "text_refaudio_to_both";
    case Regime::motion_text_to_audio: return "motion_text_to_audio";
    case Regime::motion_to_audio: return "motion_to_audio";
    case Regime::audio_to_motion: return "audio_to_motion";
  }
  return "?";
}

Regime parse_regime(std::string_view name) {
  for (Regime r : kRegimes)
    if (to_string(r) == name) return r;
  throw ConfigError("unknown regime '" + std::string(name) + "'");
}

std::vector<Regime> all_regimes() { return {std::begin(kRegimes), std::end(kRegimes)}; }

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0 || sbb <= 0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

inline namespace JAMFLOW_PRECISION {

SampleConditions regime_conditions(Regime regime, const SequenceSample& s, double ref_audio_fraction) {
  SampleConditions c;
  c.motion_frames = s.motion_frames();
  c.audio_frames = s.audio_frames();
  const bool text = regime == Regime::text_to_both || regime == Regime::text_refaudio_to_both ||
                    regime == Regime::motion_text_to_audio;
  if (text) c.text = s.text_tokens;
  if (regime == Regime::motion_text_to_audio || regime == Regime::motion_to_audio) {
    c.motion_ref = s.motion;
    c.motion_known.assign(c.motion_frames, 1);
  }
  if (regime == Regime::audio_to_motion) {
    c.audio_ref = s.audio;
    c.audio_known.assign(c.audio_frames, 1);
  }
  if (regime == Regime::text_refaudio_to_both) {
    c.audio_ref = s.audio;
    c.audio_known.assign(c.audio_frames, 0);
    const auto prefix = static_cast<std::size_t>(std::ceil(ref_audio_fraction * static_cast<double>(c.audio_frames)));
    std::fill_n(c.audio_known.begin(), std::min(prefix, c.audio_frames), 1);
  }
  return c;
}

double sync_score(const Tensor& audio, const Tensor& motion) {
  const auto energy = smooth_energy(motion_frame_energy(audio, motion.dim(0)));
  std::vector<double> mouth(motion.dim(0));
  for (std::size_t i = 0; i < mouth.size(); ++i) mouth[i] = motion.data()[i * motion.dim(1)];
  return pearson(mouth, energy);
}

namespace {

// Mean squared error over rows not flagged as known; nan when every row is known.
double unknown_mse(const Tensor& out, const Tensor& truth, const std::vector<std::uint8_t>& known) {
  const std::size_t rows = out.dim(0), cols = out.dim(1);
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!known.empty() && known[i]) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = double(out.data()[i * cols + c]) - double(truth.data()[i * cols + c]);
      acc += d * d;
    }
    n += cols;
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : acc / static_cast<double>(n);
}

double nan_mean(const std::vector<double>& v) {
  double acc = 0;
  std::size_t n = 0;
  for (double x : v) {
    if (std::isnan(x)) continue;
    acc += x;
    ++n;
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : acc / static_cast<double>(n);
}

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

}  // namespace

std::vector<RegimeResult> evaluate_model(const VelocityModel& model, const RunConfig& config,
                                         std::span<const Regime> regimes) {
  const auto corpus = generate_corpus(config.eval.corpus_seed, config.eval.samples, config.model,
                                      config.eval.motion_frames, config.eval.motion_frames);
  std::vector<RegimeResult> results;
  for (Regime regime : regimes) {
    std::vector<double> audio_mse, motion_mse, sync;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      const auto& s = corpus[i];
      const SampleConditions cond = regime_conditions(regime, s, config.eval.ref_audio_fraction);
      SamplerConfig sc = config.sampler;
      sc.seed = CounterRng(config.sampler.seed).derive("eval").derive(i).key();
      const SampleResult out = euler_sample(model, config.model, cond, sc);
      audio_mse.push_back(unknown_mse(out.audio, s.audio, cond.audio_known));
      motion_mse.push_back(unknown_mse(out.motion, s.motion, cond.motion_known));
      sync.push_back(sync_score(out.audio, out.motion));
    }
    results.push_back({regime, nan_mean(audio_mse), nan_mean(motion_mse), nan_mean(sync), corpus.size()});
  }
  return results;
}

std::string format_eval_csv(std::span<const RegimeResult> results) {
  std::string out = std::string(kEvalHeader) + "\n";
  for (const auto& r : results) {
    out += to_string(r.regime) + "," + num(r.audio_mse) + "," + num(r.motion_mse) + "," + num(r.sync_corr) + "," +
           std::to_string(r.n_samples) + "\n";
  }
  return out;
}

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
