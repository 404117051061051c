#include "jamflow/cli/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

namespace jamflow {

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::motion_only: return "1_motion";
    case Stage::audio_only: return "1_audio";
    case Stage::joint: return "2_joint";
  }
  return "?";
}

Stage parse_stage(std::string_view text) {
  if (text == "1_motion") return Stage::motion_only;
  if (text == "1_audio") return Stage::audio_only;
  if (text == "2_joint") return Stage::joint;
  throw ConfigError("unknown stage '" + std::string(text) + "' (expected 1_motion, 1_audio or 2_joint)");
}

inline namespace JAMFLOW_PRECISION {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(std::string_view v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("invalid number '" + std::string(v) + "'");
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

bool parse_bool(std::string_view v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("invalid boolean '" + std::string(v) + "' (expected true or false)");
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <class T>
Field unsigned_field(std::string key, T RunConfig::*section, std::size_t T::*member) {
  return {std::move(key), [=](const RunConfig& c) { return std::to_string(c.*section.*member); },
          [=](RunConfig& c, std::string_view v) { c.*section.*member = parse_number<std::size_t>(v); }};
}

template <class T>
Field seed_field(std::string key, T RunConfig::*section, std::uint64_t T::*member) {
  return {std::move(key), [=](const RunConfig& c) { return std::to_string(c.*section.*member); },
          [=](RunConfig& c, std::string_view v) { c.*section.*member = parse_number<std::uint64_t>(v); }};
}

template <class T>
Field real_field(std::string key, T RunConfig::*section, double T::*member) {
  return {std::move(key), [=](const RunConfig& c) { return format_double(c.*section.*member); },
          [=](RunConfig& c, std::string_view v) { c.*section.*member = parse_number<double>(v); }};
}

Field path_field(std::string key, std::string PathsConfig::*member) {
  return {std::move(key), [=](const RunConfig& c) { return c.paths.*member; },
          [=](RunConfig& c, std::string_view v) { c.paths.*member = std::string(v); }};
}

Field dropout_field(std::string key, double DropoutSpec::*member) {
  return {std::move(key), [=](const RunConfig& c) { return format_double(c.data.dropout.*member); },
          [=](RunConfig& c, std::string_view v) { c.data.dropout.*member = parse_number<double>(v); }};
}

const std::vector<Field>& fields() {
  using M = ModelConfig;
  using T = TrainConfig;
  using D = DataConfig;
  using E = EvalConfig;
  static const std::vector<Field> table = {
      unsigned_field("model.n_layers", &RunConfig::model, &M::n_layers),
      unsigned_field("model.n_joint", &RunConfig::model, &M::n_joint),
      unsigned_field("model.hidden_dim", &RunConfig::model, &M::hidden_dim),
      unsigned_field("model.heads", &RunConfig::model, &M::heads),
      unsigned_field("model.head_dim", &RunConfig::model, &M::head_dim),
      unsigned_field("model.audio_channels", &RunConfig::model, &M::audio_channels),
      unsigned_field("model.motion_channels", &RunConfig::model, &M::motion_channels),
      unsigned_field("model.rest_channels", &RunConfig::model, &M::rest_channels),
      unsigned_field("model.text_vocab", &RunConfig::model, &M::text_vocab),
      unsigned_field("model.text_dim", &RunConfig::model, &M::text_dim),
      real_field("model.frame_ratio", &RunConfig::model, &M::frame_ratio),
      unsigned_field("model.window", &RunConfig::model, &M::window),
      unsigned_field("model.ff_mult", &RunConfig::model, &M::ff_mult),
      unsigned_field("model.time_freq_dim", &RunConfig::model, &M::time_freq_dim),
      real_field("model.rope_base", &RunConfig::model, &M::rope_base),
      {"model.joint_layout",
       [](const RunConfig& c) { return std::string(c.model.joint_layout == JointLayout::first ? "first" : "interleaved"); },
       [](RunConfig& c, std::string_view v) {
         if (v == "first") c.model.joint_layout = JointLayout::first;
         else if (v == "interleaved") c.model.joint_layout = JointLayout::interleaved;
         else throw ConfigError("invalid joint_layout '" + std::string(v) + "' (expected first or interleaved)");
       }},
      {"model.query_pooling",
       [](const RunConfig& c) { return std::string(c.model.query_pooling == QueryPooling::own ? "own" : "literal"); },
       [](RunConfig& c, std::string_view v) {
         if (v == "own") c.model.query_pooling = QueryPooling::own;
         else if (v == "literal") c.model.query_pooling = QueryPooling::literal;
         else throw ConfigError("invalid query_pooling '" + std::string(v) + "' (expected own or literal)");
       }},
      {"train.stage", [](const RunConfig& c) { return to_string(c.train.stage); },
       [](RunConfig& c, std::string_view v) { c.train.stage = parse_stage(v); }},
      unsigned_field("train.batch_size", &RunConfig::train, &T::batch_size),
      unsigned_field("train.steps", &RunConfig::train, &T::steps),
      real_field("train.lr", &RunConfig::train, &T::lr),
      unsigned_field("train.warmup_steps", &RunConfig::train, &T::warmup_steps),
      real_field("train.grad_clip", &RunConfig::train, &T::grad_clip),
      seed_field("train.seed", &RunConfig::train, &T::seed),
      unsigned_field("train.checkpoint_every", &RunConfig::train, &T::checkpoint_every),
      unsigned_field("sampler.nfe", &RunConfig::sampler, &SamplerConfig::nfe),
      real_field("sampler.cfg_scale", &RunConfig::sampler, &SamplerConfig::cfg_scale),
      seed_field("sampler.seed", &RunConfig::sampler, &SamplerConfig::seed),
      {"sampler.sever_dropped", [](const RunConfig& c) { return std::string(c.sampler.sever_dropped ? "true" : "false"); },
       [](RunConfig& c, std::string_view v) { c.sampler.sever_dropped = parse_bool(v); }},
      seed_field("data.corpus_seed", &RunConfig::data, &D::corpus_seed),
      unsigned_field("data.corpus_size", &RunConfig::data, &D::corpus_size),
      unsigned_field("data.min_motion_frames", &RunConfig::data, &D::min_motion_frames),
      unsigned_field("data.max_motion_frames", &RunConfig::data, &D::max_motion_frames),
      real_field("data.mask_min_frac", &RunConfig::data, &D::mask_min_frac),
      real_field("data.mask_max_frac", &RunConfig::data, &D::mask_max_frac),
      real_field("data.p_full_mask", &RunConfig::data, &D::p_full_mask),
      real_field("data.p_keep_audio", &RunConfig::data, &D::p_keep_audio),
      real_field("data.p_keep_motion", &RunConfig::data, &D::p_keep_motion),
      dropout_field("data.p_drop_audio", &DropoutSpec::p_audio),
      dropout_field("data.p_drop_motion", &DropoutSpec::p_motion),
      dropout_field("data.p_drop_text", &DropoutSpec::p_text),
      dropout_field("data.p_drop_rest", &DropoutSpec::p_rest),
      seed_field("eval.corpus_seed", &RunConfig::eval, &E::corpus_seed),
      unsigned_field("eval.samples", &RunConfig::eval, &E::samples),
      unsigned_field("eval.motion_frames", &RunConfig::eval, &E::motion_frames),
      real_field("eval.ref_audio_fraction", &RunConfig::eval, &E::ref_audio_fraction),
      path_field("paths.checkpoint_dir", &PathsConfig::checkpoint_dir),
      path_field("paths.metrics", &PathsConfig::metrics),
      path_field("paths.motion_checkpoint", &PathsConfig::motion_checkpoint),
      path_field("paths.audio_checkpoint", &PathsConfig::audio_checkpoint),
  };
  return table;
}

const Field& find_field(std::string_view key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown key '" + std::string(key) + "'");
}

void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  sampler.validate();
  data.dropout.validate();
  if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(train.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (!(train.grad_clip > 0.0)) throw ConfigError("train.grad_clip must be positive");
  if (train.checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be >= 1");
  if (data.corpus_size < 1) throw ConfigError("data.corpus_size must be >= 1");
  if (data.min_motion_frames < 8) throw ConfigError("data.min_motion_frames must be >= 8");
  if (data.min_motion_frames > data.max_motion_frames) {
    throw ConfigError("data.min_motion_frames exceeds data.max_motion_frames");
  }
  check_probability(data.mask_min_frac, "data.mask_min_frac");
  check_probability(data.mask_max_frac, "data.mask_max_frac");
  if (data.mask_min_frac > data.mask_max_frac) throw ConfigError("data.mask_min_frac exceeds data.mask_max_frac");
  check_probability(data.p_full_mask, "data.p_full_mask");
  check_probability(data.p_keep_audio, "data.p_keep_audio");
  check_probability(data.p_keep_motion, "data.p_keep_motion");
  if (data.p_keep_audio + data.p_keep_motion > 1.0) {
    throw ConfigError("data.p_keep_audio + data.p_keep_motion must not exceed 1");
  }
  if (eval.samples < 1) throw ConfigError("eval.samples must be >= 1");
  if (eval.motion_frames < 8) throw ConfigError("eval.motion_frames must be >= 8");
  check_probability(eval.ref_audio_fraction, "eval.ref_audio_fraction");
  if (paths.checkpoint_dir.empty()) throw ConfigError("paths.checkpoint_dir must not be empty");
}

RunConfig parse_config(std::string_view text, const std::string& source) {
  RunConfig config;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'section.key = value'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    try {
      const Field& f = find_field(key);
      if (!seen.insert(std::string(key)).second) throw ConfigError("duplicate key '" + std::string(key) + "'");
      f.set(config, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string serialize_config(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    const std::string s = f.key.substr(0, f.key.find('.'));
    if (s != section) {
      if (!section.empty()) out += '\n';
      section = s;
    }
    out += f.key + " = " + f.get(config) + "\n";
  }
  return out;
}

void apply_override(RunConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form section.key=value");
  }
  const auto key = trim(assignment.substr(0, eq));
  try {
    find_field(key).set(config, trim(assignment.substr(eq + 1)));
  } catch (const ConfigError& e) {
    throw ConfigError("--set " + std::string(assignment) + ": " + e.what());
  }
}

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
