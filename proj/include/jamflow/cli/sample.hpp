#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "jamflow/cli/io.hpp"
#include "jamflow/flow.hpp"

namespace jamflow {

// "3,1,4" -> {3, 1, 4}; ids must lie in [0, vocab).
std::vector<int> parse_token_list(const std::string& text, std::size_t vocab);

struct SampleRequest {
  std::optional<std::vector<int>> text;
  std::optional<std::filesystem::path> ref_audio;    // sequence file with an "audio" stream
  std::optional<std::filesystem::path> ref_motion;   // sequence file with a "motion" stream
  std::optional<std::filesystem::path> rest_motion;  // sequence file with a "rest_motion" stream
  std::optional<std::size_t> motion_frames;
};

inline namespace JAMFLOW_PRECISION {

// Reference streams cover a prefix of their modality (all of it when their
// length equals the stream length). Without an explicit length, the motion
// length comes from the motion reference or, failing that, the audio one.
SampleConditions conditions_from_request(const SampleRequest& request, const ModelConfig& config);

// Writes `<out>` as a sequence file with "audio" and "motion" streams and
// `<out>.csv` with one "stream,frame,channel,value" row per value.
void write_sample_outputs(const std::filesystem::path& out, const SampleResult& result);

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
