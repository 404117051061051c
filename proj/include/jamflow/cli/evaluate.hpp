#pragma once

#include <span>
#include <string>
#include <vector>

#include "jamflow/cli/config.hpp"
#include "jamflow/flow.hpp"

namespace jamflow {

enum class Regime {
  uncond,
  text_to_both,
  text_refaudio_to_both,
  motion_text_to_audio,
  motion_to_audio,
  audio_to_motion,
};

std::string to_string(Regime regime);
Regime parse_regime(std::string_view name);
std::vector<Regime> all_regimes();

// Pearson correlation; nan when either side has zero variance.
double pearson(std::span<const double> a, std::span<const double> b);

inline namespace JAMFLOW_PRECISION {

struct RegimeResult {
  Regime regime = Regime::uncond;
  double audio_mse = 0;   // over generated audio frames; nan when none
  double motion_mse = 0;  // over generated motion frames; nan when none
  double sync_corr = 0;   // motion channel 0 vs smoothed energy of the output audio
  std::size_t n_samples = 0;
};

// What the sampler is given for `sample` under `regime`. Reference tensors are
// the sample's own streams.
SampleConditions regime_conditions(Regime regime, const SequenceSample& sample, double ref_audio_fraction);

// Sync score of one output pair.
double sync_score(const Tensor& audio, const Tensor& motion);

// Held-out corpus from eval.corpus_seed. Sample i uses the same sampler noise
// under every regime so that regimes are compared on paired draws.
std::vector<RegimeResult> evaluate_model(const VelocityModel& model, const RunConfig& config,
                                         std::span<const Regime> regimes);

inline constexpr const char* kEvalHeader = "regime,audio_mse,motion_mse,sync_corr,n_samples";
std::string format_eval_csv(std::span<const RegimeResult> results);

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
