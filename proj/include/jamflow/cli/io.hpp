#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "jamflow/dit.hpp"
#include "jamflow/optim.hpp"

namespace jamflow {

inline constexpr std::uint32_t kSequenceFormatVersion = 1;
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

// One named [frames, channels] block of a sequence file.
struct SequenceStream {
  std::string name;
  std::uint32_t frames = 0;
  std::uint32_t channels = 0;
  std::vector<float> values;
};

std::vector<std::uint8_t> encode_sequences(std::span<const SequenceStream> streams);
std::vector<SequenceStream> decode_sequences(std::span<const std::uint8_t> bytes);
void write_sequence_file(const std::filesystem::path& path, std::span<const SequenceStream> streams);
std::vector<SequenceStream> read_sequence_file(const std::filesystem::path& path);
const SequenceStream* find_stream(std::span<const SequenceStream> streams, const std::string& name);

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

struct OptimizerSnapshot {
  std::uint64_t train_step = 0;  // completed training steps
  std::uint64_t adam_step = 0;
  std::vector<NamedTensor> moments;  // "m/<param>" then "v/<param>", in parameter order
};

struct Checkpoint {
  std::string config_text;
  std::vector<NamedTensor> tensors;
  std::optional<OptimizerSnapshot> optimizer;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

inline namespace JAMFLOW_PRECISION {

std::vector<NamedTensor> snapshot_parameters(const JamModel& model);
OptimizerSnapshot snapshot_optimizer(const JamModel& model, const OptimizerState& state, std::uint64_t train_step);

// Copies checkpoint tensors into the model. Every parameter must be present
// exactly once with a matching shape; errors name the offending tensor.
void load_parameters(JamModel& model, std::span<const NamedTensor> tensors);
// Only parameters accepted by `select` are copied; the others are left alone.
void load_parameters(JamModel& model, std::span<const NamedTensor> tensors, bool (*select)(const std::string&));
void load_optimizer(const JamModel& model, const OptimizerSnapshot& snapshot, OptimizerState& state);

SequenceStream to_stream(const std::string& name, const Tensor& t);
Tensor from_stream(const SequenceStream& stream);

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
