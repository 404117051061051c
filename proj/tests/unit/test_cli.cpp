#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "jamflow/cli/config.hpp"
#include "jamflow/cli/evaluate.hpp"
#include "jamflow/cli/io.hpp"
#include "jamflow/cli/sample.hpp"
#include "jamflow/cli/train.hpp"
#include "../support/temp_dir.hpp"

using namespace jamflow;
using jamflow::testing::TempDir;

namespace {

std::string error_of(auto&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

bool contains(const std::string& s, const std::string& needle) { return s.find(needle) != std::string::npos; }

int run_tool(const std::filesystem::path& cwd, const std::string& args) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" JAMFLOW_TOOL "' " + args + " >tool.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kToy =
    "model.n_layers = 2\nmodel.n_joint = 1\nmodel.hidden_dim = 16\nmodel.head_dim = 8\n"
    "model.heads = 2\ntrain.steps = 6\ntrain.checkpoint_every = 3\ndata.corpus_size = 16\neval.samples = 2\n"
    "sampler.nfe = 4\n";

}  // namespace

TEST_CASE("config serialization is a fixed point") {
  RunConfig c;
  c.train.lr = 3e-4;
  c.model.n_layers = 6;
  c.model.n_joint = 3;
  c.sampler.cfg_scale = 1.25;
  c.data.dropout.p_text = 0.35;
  c.paths.motion_checkpoint = "runs/m/last.jamf";
  const std::string text = serialize_config(c);
  const RunConfig back = parse_config(text);
  CHECK(serialize_config(back) == text);
  CHECK(back.train.lr == 3e-4);
  CHECK(back.data.dropout.p_text == 0.35);
  CHECK(back.paths.motion_checkpoint == "runs/m/last.jamf");
  CHECK(serialize_config(parse_config(serialize_config(RunConfig{}))) == serialize_config(RunConfig{}));
}

TEST_CASE("config defaults") {
  const RunConfig c = parse_config("");
  CHECK(c.sampler.nfe == 32u);
  CHECK(c.sampler.cfg_scale == 2.0);
  CHECK(c.train.stage == Stage::joint);
  CHECK(c.data.dropout.p_rest == 0.8);
}

TEST_CASE("config comments and whitespace") {
  const RunConfig c = parse_config("# heading\n\n  train.steps =  12   # trailing\ntrain.stage=1_motion\n");
  CHECK(c.train.steps == 12u);
  CHECK(c.train.stage == Stage::motion_only);
}

TEST_CASE("config errors name the line") {
  CHECK(contains(error_of([] { parse_config("train.steps = 3\ntrain.nope = 1\n", "x.cfg"); }), "x.cfg:2"));
  CHECK(contains(error_of([] { parse_config("train.steps = 3\ntrain.steps = 4\n", "x.cfg"); }), "x.cfg:2"));
  CHECK(contains(error_of([] { parse_config("\n\ntrain.lr = fast\n", "x.cfg"); }), "x.cfg:3"));
  CHECK(contains(error_of([] { parse_config("train.steps\n", "x.cfg"); }), "x.cfg:1"));
  CHECK(contains(error_of([] { parse_config("train.steps = -3\n", "x.cfg"); }), "x.cfg:1"));
  CHECK(contains(error_of([] { parse_config("train.stage = 3_all\n", "x.cfg"); }), "x.cfg:1"));
  CHECK_THROWS_AS(parse_config("model.n_joint = 9\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("data.p_keep_audio = 0.7\ndata.p_keep_motion = 0.7\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("data.p_drop_text = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/jamflow.cfg"), Error);
}

TEST_CASE("config overrides") {
  RunConfig c;
  apply_override(c, "train.steps=17");
  apply_override(c, "sampler.cfg_scale = 0.5");
  CHECK(c.train.steps == 17u);
  CHECK(c.sampler.cfg_scale == 0.5);
  CHECK_THROWS_AS(apply_override(c, "train.steps"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "train.bogus=1"), ConfigError);
}

TEST_CASE("sequence file round trip") {
  std::vector<SequenceStream> streams = {{"audio", 2, 3, {1, 2, 3, 4, 5, 6}}, {"motion", 1, 2, {-0.5f, 7}}};
  const auto bytes = encode_sequences(streams);
  const auto back = decode_sequences(bytes);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "audio");
  CHECK(back[1].values == streams[1].values);
  CHECK(encode_sequences(back) == bytes);
  CHECK(find_stream(back, "motion") == &back[1]);
  CHECK(find_stream(back, "rest") == nullptr);

  TempDir dir("jseq");
  write_sequence_file(dir / "a.jseq", streams);
  CHECK(read_file(dir / "a.jseq") == bytes);
  CHECK(read_sequence_file(dir / "a.jseq")[0].values == streams[0].values);
}

TEST_CASE("sequence file corruption is detected") {
  std::vector<SequenceStream> streams = {{"audio", 2, 1, {1, 2}}};
  auto bytes = encode_sequences(streams);
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(decode_sequences(flipped), FormatError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(decode_sequences(truncated), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_sequences(magic), FormatError);
  CHECK_THROWS_AS(encode_sequences(std::vector<SequenceStream>{{"x", 2, 2, {1}}}), FormatError);
}

TEST_CASE("checkpoint round trip is byte identical") {
  RunConfig cfg = parse_config(kToy);
  JamModel m = make_jam_model(cfg.model, 5);
  OptimizerState opt;
  opt.init(m.parameters());
  const Checkpoint ck = make_checkpoint(cfg, m, &opt, 12);
  const auto bytes = encode_checkpoint(ck);
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(encode_checkpoint(back) == bytes);
  REQUIRE(back.optimizer.has_value());
  CHECK(back.optimizer->train_step == 12u);
  CHECK(back.config_text == ck.config_text);

  const JamModel loaded = load_model(back);
  const auto pm = m.parameters(), pl = loaded.parameters();
  REQUIRE(pl.size() == pm.size());
  for (std::size_t i = 0; i < pm.size(); ++i) {
    const auto a = pm[i].data(), b = pl[i].data();
    CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }

  auto flipped = bytes;
  flipped[bytes.size() - 10] ^= 1;
  CHECK_THROWS_AS(decode_checkpoint(flipped), FormatError);
}

TEST_CASE("parameter loading errors name the tensor") {
  const ModelConfig mc = parse_config(kToy).model;
  JamModel m = make_jam_model(mc, 5);
  auto tensors = snapshot_parameters(m);
  const std::string victim = tensors[3].name;

  auto missing = tensors;
  missing.erase(missing.begin() + 3);
  CHECK(contains(error_of([&] { load_parameters(m, missing); }), victim));

  auto reshaped = tensors;
  reshaped[3].dims.push_back(1);
  CHECK(contains(error_of([&] { load_parameters(m, reshaped); }), victim));

  auto extra = tensors;
  extra.push_back({"ghost.w", {1}, {0}});
  CHECK(contains(error_of([&] { load_parameters(m, extra); }), "ghost.w"));

  auto duplicated = tensors;
  duplicated.push_back(tensors[3]);
  CHECK(contains(error_of([&] { load_parameters(m, duplicated); }), victim));
}

TEST_CASE("selective parameter loading leaves the rest alone") {
  const ModelConfig mc = parse_config(kToy).model;
  JamModel a = make_jam_model(mc, 1);
  const JamModel b = make_jam_model(mc, 2);
  load_parameters(a, snapshot_parameters(b), is_audio_parameter);
  const JamModel fresh = make_jam_model(mc, 1);
  const auto pa = a.parameters(), pb = b.parameters(), pf = fresh.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto& want = is_audio_parameter(pa[i].name()) ? pb[i] : pf[i];
    CHECK(std::equal(pa[i].data().begin(), pa[i].data().end(), want.data().begin()));
  }
}

TEST_CASE("token lists") {
  CHECK(parse_token_list("3,1,4", 10) == std::vector<int>{3, 1, 4});
  CHECK(parse_token_list("7", 10) == std::vector<int>{7});
  CHECK_THROWS_AS(parse_token_list("3,,4", 10), UsageError);
  CHECK_THROWS_AS(parse_token_list("10", 10), UsageError);
  CHECK_THROWS_AS(parse_token_list("-1", 10), UsageError);
  CHECK_THROWS_AS(parse_token_list("a", 10), UsageError);
}

TEST_CASE("sample requests") {
  const ModelConfig mc;
  TempDir dir("req");
  const SequenceSample s = generate_coupled_sample(1, mc, 12);
  const std::vector<SequenceStream> audio = {to_stream("audio", slice(s.audio, 0, 0, 20))};
  write_sequence_file(dir / "a.jseq", audio);

  SampleRequest r;
  r.ref_audio = dir / "a.jseq";
  r.motion_frames = 12;
  const SampleConditions c = conditions_from_request(r, mc);
  CHECK(c.audio_frames == 48);
  CHECK(std::count(c.audio_known.begin(), c.audio_known.end(), 1) == 20);
  CHECK(c.audio_ref.at({19, 2}) == s.audio.at({19, 2}));

  r.motion_frames.reset();
  CHECK(conditions_from_request(r, mc).motion_frames == 5);

  r.motion_frames = 4;
  CHECK_THROWS_AS(conditions_from_request(r, mc), UsageError);
  SampleRequest none;
  CHECK_THROWS_AS(conditions_from_request(none, mc), UsageError);
  SampleRequest missing;
  missing.ref_motion = dir / "nope.jseq";
  CHECK_THROWS(conditions_from_request(missing, mc));
}

TEST_CASE("evaluation helpers") {
  CHECK(to_string(parse_regime("audio_to_motion")) == "audio_to_motion");
  CHECK(all_regimes().size() == 6);
  CHECK_THROWS(parse_regime("telepathy"));
  const std::vector<double> a = {1, 2, 3}, b = {2, 4, 6}, flat = {1, 1, 1};
  CHECK(pearson(a, b) == doctest::Approx(1.0));
  CHECK(std::isnan(pearson(a, flat)));
  std::vector<RegimeResult> rs(1);
  rs[0].audio_mse = std::nan("");
  rs[0].n_samples = 3;
  const std::string csv = format_eval_csv(rs);
  CHECK(csv.rfind(kEvalHeader, 0) == 0);
  CHECK(contains(csv, "uncond,nan,"));
}

TEST_CASE("learning-rate warmup") {
  TrainConfig t;
  t.lr = 1e-3;
  t.warmup_steps = 4;
  CHECK(learning_rate(t, 1) == doctest::Approx(2.5e-4));
  CHECK(learning_rate(t, 4) == doctest::Approx(1e-3));
  CHECK(learning_rate(t, 50) == doctest::Approx(1e-3));
  t.warmup_steps = 0;
  CHECK(learning_rate(t, 1) == doctest::Approx(1e-3));
}

TEST_CASE("a second trainer cannot take the same directory") {
  TempDir dir("lock");
  DirectoryLock first(dir.path());
  CHECK_THROWS_AS(DirectoryLock(dir.path()), UsageError);
}

TEST_CASE("tool exit codes and outputs") {
  TempDir dir("tool");
  {
    std::ofstream(dir / "toy.cfg") << kToy;
  }
  CHECK(run_tool(dir.path(), "--help") == 0);
  CHECK(run_tool(dir.path(), "bogus") == 2);
  CHECK(run_tool(dir.path(), "train --config toy.cfg") == 2);
  CHECK(contains(slurp(dir / "tool.log"), "--from-scratch"));
  CHECK(run_tool(dir.path(), "train --config missing.cfg") == 2);
  CHECK(run_tool(dir.path(), "train --config toy.cfg --set train.bogus=1") == 2);
  CHECK(run_tool(dir.path(), "sample --config toy.cfg --frames 8") == 2);  // no checkpoint yet

  REQUIRE(run_tool(dir.path(), "train --config toy.cfg --from-scratch") == 0);
  CHECK(std::filesystem::exists(dir / "checkpoints/last.jamf"));
  CHECK(std::filesystem::exists(dir / "checkpoints/step_3.jamf"));
  const std::string metrics = slurp(dir / "metrics.csv");
  CHECK(metrics.rfind("step,stage,loss,loss_audio,loss_motion,grad_norm,lr,wall_ms\n", 0) == 0);
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 7);

  REQUIRE(run_tool(dir.path(), "sample --config toy.cfg --frames 8 --text 1,2 --out a.jseq") == 0);
  REQUIRE(run_tool(dir.path(), "sample --config toy.cfg --frames 8 --text 1,2 --out b.jseq") == 0);
  CHECK(read_file(dir / "a.jseq") == read_file(dir / "b.jseq"));
  CHECK(slurp(dir / "a.jseq.csv") == slurp(dir / "b.jseq.csv"));
  const auto out = read_sequence_file(dir / "a.jseq");
  REQUIRE(find_stream(out, "motion") != nullptr);
  CHECK(find_stream(out, "motion")->frames == 8u);
  CHECK(find_stream(out, "audio")->frames == 32u);
  CHECK(run_tool(dir.path(), "sample --config toy.cfg --frames 8 --text 1,99") == 2);

  REQUIRE(run_tool(dir.path(), "eval --config toy.cfg --report eval.csv --regime motion_to_audio") == 0);
  const std::string report = slurp(dir / "eval.csv");
  CHECK(report.rfind(kEvalHeader, 0) == 0);
  CHECK(contains(report, "motion_to_audio,"));
  REQUIRE(run_tool(dir.path(), "eval --config toy.cfg --report again.csv --regime motion_to_audio") == 0);
  CHECK(slurp(dir / "again.csv") == report);

  CHECK(run_tool(dir.path(), "corpus --config toy.cfg --out c.jseq") == 0);
  CHECK(read_sequence_file(dir / "c.jseq").size() == 16u * 4u);

  TempDir blowup("blowup");
  std::ofstream(blowup / "toy.cfg") << kToy;
  CHECK(run_tool(blowup.path(), "train --config toy.cfg --from-scratch --set train.lr=1e30") == 3);
}
