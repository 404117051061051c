#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "jamflow/cli/config.hpp"
#include "jamflow/cli/evaluate.hpp"
#include "jamflow/cli/io.hpp"
#include "jamflow/cli/sample.hpp"
#include "jamflow/cli/train.hpp"

namespace fs = std::filesystem;
using namespace jamflow;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
  for (const auto& o : overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

fs::path checkpoint_or_default(const std::string& given, const RunConfig& cfg) {
  fs::path p = given.empty() ? fs::path(cfg.paths.checkpoint_dir) / "last.jamf" : fs::path(given);
  if (!fs::exists(p)) throw UsageError("checkpoint " + p.string() + " not found");
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint audio-motion flow matching at toy scale"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Config file of section.key = value lines");
    cmd->add_option("--set", overrides, "Override a config entry, e.g. --set train.steps=200");
  };

  auto* train = app.add_subcommand("train", "Train one stage");
  add_common(train);
  bool from_scratch = false, resume = false;
  train->add_flag("--from-scratch", from_scratch, "Stage 2 without stage-1 checkpoints");
  train->add_flag("--resume", resume, "Continue from <checkpoint_dir>/last.jamf");

  auto* sample = app.add_subcommand("sample", "Generate audio and motion under any subset of conditions");
  add_common(sample);
  std::string checkpoint, text, ref_audio, ref_motion, rest_motion, out = "sample.jseq";
  std::size_t frames = 0;
  sample->add_option("--checkpoint", checkpoint, "Defaults to <checkpoint_dir>/last.jamf");
  sample->add_option("--text", text, "Comma-separated token ids");
  sample->add_option("--ref-audio", ref_audio, "Sequence file with an audio stream (a prefix is allowed)");
  sample->add_option("--ref-motion", ref_motion, "Sequence file with a motion stream (a prefix is allowed)");
  sample->add_option("--rest-motion", rest_motion, "Sequence file with a rest_motion stream");
  sample->add_option("--frames", frames, "Motion frames to generate");
  sample->add_option("--out", out, "Output sequence file; a .csv projection is written next to it");

  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a held-out corpus");
  add_common(eval);
  std::string report = "eval.csv";
  std::vector<std::string> regime_names;
  eval->add_option("--checkpoint", checkpoint, "Defaults to <checkpoint_dir>/last.jamf");
  eval->add_option("--report", report, "CSV output path");
  eval->add_option("--regime", regime_names, "Restrict to these regimes");

  auto* corpus = app.add_subcommand("corpus", "Export the training corpus as a sequence file");
  add_common(corpus);
  std::string corpus_out = "corpus.jseq";
  corpus->add_option("--out", corpus_out, "Output sequence file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    const RunConfig cfg = resolve_config(config_path, overrides);

    if (train->parsed()) {
      TrainOptions opts;
      opts.from_scratch = from_scratch;
      opts.resume = resume;
      opts.threads = worker_count_from_env();
      opts.log = &std::cerr;
      const TrainSummary s = run_training(cfg, opts);
      std::cout << "trained steps " << s.start_step + 1 << ".." << s.end_step << ", checkpoint " << s.checkpoint.string()
                << "\n";
    } else if (sample->parsed()) {
      const Checkpoint ck = read_checkpoint(checkpoint_or_default(checkpoint, cfg));
      const JamModel model = load_model(ck);
      SampleRequest req;
      if (sample->count("--text")) req.text = parse_token_list(text, model.config.text_vocab);
      if (!ref_audio.empty()) req.ref_audio = ref_audio;
      if (!ref_motion.empty()) req.ref_motion = ref_motion;
      if (!rest_motion.empty()) req.rest_motion = rest_motion;
      if (sample->count("--frames")) req.motion_frames = frames;
      const SampleConditions cond = conditions_from_request(req, model.config);
      const SampleResult result = euler_sample(JamVelocity(model), model.config, cond, cfg.sampler);
      write_sample_outputs(out, result);
      std::cout << "wrote " << out << " (" << cond.audio_frames << " audio frames, " << cond.motion_frames
                << " motion frames)\n";
    } else if (eval->parsed()) {
      const Checkpoint ck = read_checkpoint(checkpoint_or_default(checkpoint, cfg));
      const JamModel model = load_model(ck);
      RunConfig eval_cfg = cfg;
      eval_cfg.model = model.config;
      std::vector<Regime> regimes;
      for (const auto& n : regime_names) regimes.push_back(parse_regime(n));
      if (regimes.empty()) regimes = all_regimes();
      const auto results = evaluate_model(JamVelocity(model), eval_cfg, regimes);
      const std::string csv = format_eval_csv(results);
      std::ofstream(report, std::ios::trunc) << csv;
      std::cout << csv;
    } else if (corpus->parsed()) {
      std::vector<SequenceStream> streams;
      const auto samples = training_corpus(cfg);
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::string p = std::to_string(i) + "/";
        streams.push_back(to_stream(p + "audio", samples[i].audio));
        streams.push_back(to_stream(p + "motion", samples[i].motion));
        streams.push_back(to_stream(p + "rest_motion", samples[i].rest_motion));
        SequenceStream tokens{p + "text", static_cast<std::uint32_t>(samples[i].text_tokens.size()), 1, {}};
        for (int t : samples[i].text_tokens) tokens.values.push_back(static_cast<float>(t));
        streams.push_back(std::move(tokens));
      }
      write_sequence_file(corpus_out, streams);
      std::cout << "wrote " << samples.size() << " samples to " << corpus_out << "\n";
    }
  } catch (const NumericError& e) {
    std::cerr << "jamflow: numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "jamflow: " << e.what() << "\n";
    return kExitUsage;
  }
  return 0;
}
