#include "jamflow/cli/sample.hpp"

#include <charconv>
#include <fstream>

#include "jamflow/cli/train.hpp"

namespace jamflow {

std::vector<int> parse_token_list(const std::string& text, std::size_t vocab) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= text.size() && !text.empty()) {
    const auto comma = std::min(text.find(',', pos), text.size());
    const std::string_view item(text.data() + pos, comma - pos);
    int v = -1;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size() || v < 0 || static_cast<std::size_t>(v) >= vocab) {
      throw UsageError("--text: '" + std::string(item) + "' is not a token id in [0, " + std::to_string(vocab) + ")");
    }
    out.push_back(v);
    pos = comma + 1;
  }
  return out;
}

inline namespace JAMFLOW_PRECISION {

namespace {

SequenceStream load_stream(const std::filesystem::path& path, const std::string& name, std::size_t channels) {
  const auto streams = read_sequence_file(path);
  const SequenceStream* s = find_stream(streams, name);
  if (s == nullptr) throw UsageError(path.string() + " has no '" + name + "' stream");
  if (s->channels != channels) {
    throw UsageError(path.string() + ": '" + name + "' has " + std::to_string(s->channels) + " channels, model expects " +
                     std::to_string(channels));
  }
  return *s;
}

// Pads a prefix reference to `frames` rows and marks the provided rows known.
void place_prefix(const SequenceStream& s, std::size_t frames, Tensor& ref, std::vector<std::uint8_t>& known,
                  const char* what) {
  if (s.frames > frames) {
    throw UsageError(std::string(what) + " reference has " + std::to_string(s.frames) + " frames but the " + what +
                     " stream has " + std::to_string(frames));
  }
  std::vector<Scalar> v(frames * s.channels, 0);
  std::copy(s.values.begin(), s.values.end(), v.begin());
  ref = Tensor::from({frames, s.channels}, std::move(v));
  known.assign(frames, 0);
  std::fill_n(known.begin(), s.frames, 1);
}

}  // namespace

SampleConditions conditions_from_request(const SampleRequest& req, const ModelConfig& config) {
  std::optional<SequenceStream> audio, motion, rest;
  if (req.ref_audio) audio = load_stream(*req.ref_audio, "audio", config.audio_channels);
  if (req.ref_motion) motion = load_stream(*req.ref_motion, "motion", config.motion_channels);
  if (req.rest_motion) rest = load_stream(*req.rest_motion, "rest_motion", config.rest_channels);

  std::size_t Lm = 0;
  if (req.motion_frames) {
    Lm = *req.motion_frames;
  } else if (motion) {
    Lm = motion->frames;
  } else if (audio) {
    Lm = static_cast<std::size_t>(std::llround(audio->frames / config.frame_ratio));
    if (config.audio_frames(Lm) != audio->frames) {
      throw UsageError("audio reference length " + std::to_string(audio->frames) +
                       " does not match the configured frame ratio; pass --frames");
    }
  } else {
    throw UsageError("no sequence length: pass --frames or a reference");
  }
  if (Lm < 1) throw UsageError("--frames must be >= 1");

  SampleConditions c;
  c.motion_frames = Lm;
  c.audio_frames = config.audio_frames(Lm);
  if (audio) place_prefix(*audio, c.audio_frames, c.audio_ref, c.audio_known, "audio");
  if (motion) place_prefix(*motion, c.motion_frames, c.motion_ref, c.motion_known, "motion");
  if (rest) {
    if (rest->frames != Lm) {
      throw UsageError("rest_motion reference has " + std::to_string(rest->frames) + " frames, expected " +
                       std::to_string(Lm));
    }
    c.rest_motion = from_stream(*rest);
  }
  if (req.text) {
    if (req.text->size() > c.audio_frames) {
      throw UsageError("--text has " + std::to_string(req.text->size()) + " tokens, more than the " +
                       std::to_string(c.audio_frames) + " audio frames");
    }
    c.text = *req.text;
  }
  return c;
}

void write_sample_outputs(const std::filesystem::path& out, const SampleResult& result) {
  const std::vector<SequenceStream> streams = {to_stream("audio", result.audio), to_stream("motion", result.motion)};
  write_sequence_file(out, streams);
  auto csv_path = out;
  csv_path += ".csv";
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw Error("cannot write " + csv_path.string());
  csv << "stream,frame,channel,value\n";
  csv.precision(9);
  for (const auto& s : streams)
    for (std::uint32_t f = 0; f < s.frames; ++f)
      for (std::uint32_t c = 0; c < s.channels; ++c) csv << s.name << ',' << f << ',' << c << ',' << s.values[f * s.channels + c] << '\n';
}

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
