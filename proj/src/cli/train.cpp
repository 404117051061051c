#include "jamflow/cli/train.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>

namespace jamflow {

DirectoryLock::DirectoryLock(const std::filesystem::path& dir) : path_(dir / "train.lock") {
  std::filesystem::create_directories(dir);
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
      ::close(fd);
      return;
    }
    std::ifstream in(path_);
    long owner = 0;
    in >> owner;
    if (owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno == EPERM)) {
      throw UsageError(dir.string() + " is in use by training process " + std::to_string(owner));
    }
    std::filesystem::remove(path_);
  }
  throw UsageError("cannot lock " + dir.string());
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

std::size_t worker_count_from_env() {
  const char* env = std::getenv("JAMFLOW_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw UsageError("JAMFLOW_THREADS must be a positive integer");
  return static_cast<std::size_t>(n);
}

inline namespace JAMFLOW_PRECISION {

std::vector<SequenceSample> training_corpus(const RunConfig& config) {
  return generate_corpus(config.data.corpus_seed, config.data.corpus_size, config.model, config.data.min_motion_frames,
                         config.data.max_motion_frames);
}

LossOptions stage_loss_options(Stage stage) {
  LossOptions o;
  switch (stage) {
    case Stage::motion_only:
      o.audio = false;
      o.joint = false;
      o.audio_features = true;
      break;
    case Stage::audio_only:
      o.motion = false;
      o.joint = false;
      break;
    case Stage::joint:
      break;
  }
  return o;
}

double learning_rate(const TrainConfig& train, std::size_t step) {
  if (train.warmup_steps == 0 || step >= train.warmup_steps) return train.lr;
  return train.lr * static_cast<double>(step) / static_cast<double>(train.warmup_steps);
}

namespace {

CounterRng slot_rng(const RunConfig& config, std::size_t step, std::size_t slot) {
  return CounterRng(config.train.seed).derive("batch").derive(step).derive(slot);
}

}  // namespace

TrainingExample make_training_example(std::span<const SequenceSample> corpus, const RunConfig& config,
                                      std::size_t step, std::size_t slot) {
  if (corpus.empty()) throw Error("empty training corpus");
  const CounterRng rng = slot_rng(config, step, slot);
  TrainingExample ex;
  ex.sample = corpus[rng.derive("index").below(corpus.size())];
  auto& s = ex.sample;
  const auto& d = config.data;

  CounterRng m = rng.derive("mask");
  bool mask_audio = true, mask_motion = true;
  switch (config.train.stage) {
    case Stage::motion_only: mask_audio = false; break;
    case Stage::audio_only: mask_motion = false; break;
    case Stage::joint: {
      const double u = m.uniform();
      if (u < d.p_keep_audio) mask_audio = false;
      else if (u < d.p_keep_audio + d.p_keep_motion) mask_motion = false;
      break;
    }
  }
  s.audio_mask = make_inpaint_mask(s.audio_frames(), m, d.mask_min_frac, d.mask_max_frac, d.p_full_mask);
  s.motion_mask = make_inpaint_mask(s.motion_frames(), m, d.mask_min_frac, d.mask_max_frac, d.p_full_mask);
  if (!mask_audio) std::fill(s.audio_mask.begin(), s.audio_mask.end(), 0);
  if (!mask_motion) std::fill(s.motion_mask.begin(), s.motion_mask.end(), 0);

  CounterRng drop = rng.derive("dropout");
  ex.conditions = apply_condition_dropout(s, d.dropout, drop);
  return ex;
}

FlowDraw training_flow_draw(const TrainingExample& example, const RunConfig& config, std::size_t step,
                            std::size_t slot) {
  return draw_flow(example.sample, slot_rng(config, step, slot).derive("flow"));
}

namespace {

struct SlotResult {
  bool used = false;
  double loss = 0, audio = 0, motion = 0;
  std::vector<std::vector<Scalar>> grads;
};

SlotResult run_slot(const JamModel& model, const std::vector<Tensor>& params, std::span<const SequenceSample> corpus,
                    const RunConfig& config, std::size_t step, std::size_t slot) {
  const TrainingExample ex = make_training_example(corpus, config, step, slot);
  const JamVelocity velocity(model);
  Tape tape;
  Recording rec(tape);
  LossTerms terms =
      example_loss(velocity, ex, training_flow_draw(ex, config, step, slot), stage_loss_options(config.train.stage));
  SlotResult r;
  if (terms.skipped) return r;
  r.used = true;
  r.loss = terms.total.item();
  r.audio = terms.audio.item();
  r.motion = terms.motion.item();
  GradientMap g = tape.backward(terms.total);
  r.grads.reserve(params.size());
  for (const auto& p : params) r.grads.push_back(g.get(p));
  return r;
}

}  // namespace

StepResult compute_step(const JamModel& model, std::span<const SequenceSample> corpus, const RunConfig& config,
                        std::size_t step, std::size_t threads) {
  const auto params = model.parameters();
  const std::size_t B = config.train.batch_size;
  std::vector<SlotResult> slots(B);
  std::vector<std::exception_ptr> errors(B);
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t i = first; i < B; i += stride) {
      try {
        slots[i] = run_slot(model, params, corpus, config, step, i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, B));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  StepResult out;
  out.grads.resize(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) out.grads[p].assign(params[p].numel(), Scalar(0));
  for (const auto& s : slots) {
    if (!s.used) continue;
    ++out.used;
    out.loss += s.loss;
    out.loss_audio += s.audio;
    out.loss_motion += s.motion;
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& dst = out.grads[p];
      const auto& src = s.grads[p];
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
  if (out.used > 0) {
    const double n = static_cast<double>(out.used);
    out.loss /= n;
    out.loss_audio /= n;
    out.loss_motion /= n;
    const Scalar inv = Scalar(1) / static_cast<Scalar>(out.used);
    for (auto& g : out.grads)
      for (auto& v : g) v *= inv;
  }
  out.grad_norm = clip_global_norm(out.grads, config.train.grad_clip);
  return out;
}

Checkpoint make_checkpoint(const RunConfig& config, const JamModel& model, const OptimizerState* optimizer,
                           std::uint64_t train_step) {
  Checkpoint ck;
  ck.config_text = serialize_config(config);
  ck.tensors = snapshot_parameters(model);
  if (optimizer) ck.optimizer = snapshot_optimizer(model, *optimizer, train_step);
  return ck;
}

JamModel load_model(const Checkpoint& ck) {
  const RunConfig cfg = parse_config(ck.config_text, "checkpoint config");
  JamModel model = make_jam_model(cfg.model, 0);
  load_parameters(model, ck.tensors);
  return model;
}

namespace {

const char* kMetricsHeader = "step,stage,loss,loss_audio,loss_motion,grad_norm,lr,wall_ms";

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

// Keeps the header and rows up to `step`, so a resumed run continues the file
// as if it had never stopped.
void truncate_metrics(const std::filesystem::path& path, std::size_t step) {
  std::ifstream in(path);
  if (!in) return;
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      kept += line + "\n";
      header = false;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    if (std::stoull(line.substr(0, comma)) <= step) kept += line + "\n";
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
}

JamModel initial_model(const RunConfig& config, const TrainOptions& options) {
  JamModel model = make_jam_model(config.model, config.train.seed);
  if (config.train.stage != Stage::joint || options.from_scratch) return model;
  const auto& p = config.paths;
  if (p.motion_checkpoint.empty() || p.audio_checkpoint.empty()) {
    throw UsageError(
        "stage 2_joint starts from stage-1 weights: set paths.motion_checkpoint and paths.audio_checkpoint, "
        "or pass --from-scratch");
  }
  for (const auto& path : {p.motion_checkpoint, p.audio_checkpoint}) {
    if (!std::filesystem::exists(path)) {
      throw UsageError("stage-1 checkpoint " + path + " not found (pass --from-scratch to train without it)");
    }
  }
  const Checkpoint motion = read_checkpoint(p.motion_checkpoint);
  const Checkpoint audio = read_checkpoint(p.audio_checkpoint);
  load_parameters(model, motion.tensors, [](const std::string& n) { return !is_audio_parameter(n); });
  load_parameters(model, audio.tensors, [](const std::string& n) { return is_audio_parameter(n); });
  return model;
}

}  // namespace

TrainSummary run_training(const RunConfig& config, const TrainOptions& options) {
  config.validate();
  const std::filesystem::path dir = config.paths.checkpoint_dir;
  DirectoryLock lock(dir);
  const std::filesystem::path last = dir / "last.jamf";
  const std::filesystem::path metrics_path = config.paths.metrics;

  TrainSummary summary;
  JamModel model = make_jam_model(config.model, config.train.seed);
  OptimizerState opt;
  opt.config.lr = config.train.lr;
  if (options.resume) {
    if (!std::filesystem::exists(last)) throw UsageError("nothing to resume: " + last.string() + " not found");
    const Checkpoint ck = read_checkpoint(last);
    if (!ck.optimizer) throw FormatError(last.string() + ": no optimizer state to resume from");
    const RunConfig saved = parse_config(ck.config_text, last.string());
    if (saved.train.stage != config.train.stage) {
      throw UsageError("checkpoint stage " + to_string(saved.train.stage) + " differs from configured stage " +
                       to_string(config.train.stage));
    }
    load_parameters(model, ck.tensors);
    load_optimizer(model, *ck.optimizer, opt);
    summary.start_step = ck.optimizer->train_step;
    truncate_metrics(metrics_path, summary.start_step);
  } else {
    model = initial_model(config, options);
    opt.init(model.parameters());
    if (metrics_path.has_parent_path()) std::filesystem::create_directories(metrics_path.parent_path());
    std::ofstream(metrics_path, std::ios::trunc) << kMetricsHeader << "\n";
  }

  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw Error("cannot open metrics file " + metrics_path.string());

  const auto corpus = training_corpus(config);
  auto params = model.parameters();
  const std::size_t end = std::min(config.train.steps, options.stop_after.value_or(config.train.steps));
  const std::string stage = to_string(config.train.stage);

  auto save = [&](std::size_t step) {
    const Checkpoint ck = make_checkpoint(config, model, &opt, step);
    const auto bytes = encode_checkpoint(ck);
    write_file_atomic(dir / ("step_" + std::to_string(step) + ".jamf"), bytes);
    write_file_atomic(last, bytes);
    summary.checkpoint = last;
  };

  for (std::size_t step = summary.start_step + 1; step <= end; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    StepResult r = compute_step(model, corpus, config, step, options.threads);
    summary.skipped += config.train.batch_size - r.used;
    if (!std::isfinite(r.loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
    const double lr = learning_rate(config.train, step);
    try {
      adam_step(params, r.grads, opt, lr);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }
    const double wall = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    metrics << step << ',' << stage << ',' << fmt(r.loss) << ',' << fmt(r.loss_audio) << ',' << fmt(r.loss_motion)
            << ',' << fmt(r.grad_norm) << ',' << fmt(lr) << ',' << fmt(wall) << '\n';
    summary.losses.push_back(r.loss);
    if (step % config.train.checkpoint_every == 0 || step == end) {
      metrics.flush();
      save(step);
      if (options.log) *options.log << "step " << step << " loss " << fmt(r.loss) << "\n";
    }
  }
  summary.end_step = std::max(end, summary.start_step);
  return summary;
}

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
