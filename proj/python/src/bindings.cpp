#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "jamflow/cli/config.hpp"
#include "jamflow/cli/evaluate.hpp"
#include "jamflow/cli/io.hpp"
#include "jamflow/cli/train.hpp"

namespace py = pybind11;
using namespace jamflow;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::array_t<float> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const FloatArray& a, const char* what) {
  if (a.ndim() != 2) throw ShapeError(what, "must be a 2-d array");
  const Shape shape = {static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))};
  return Tensor::from(shape, std::vector<Scalar>(a.data(), a.data() + a.size()));
}

RunConfig config_from(const std::string& text, const std::vector<std::string>& overrides) {
  RunConfig c = parse_config(text, "<python>");
  for (const auto& o : overrides) apply_override(c, o);
  c.validate();
  return c;
}

py::dict sample_dict(const SequenceSample& s) {
  py::dict d;
  d["audio"] = to_numpy(s.audio);
  d["motion"] = to_numpy(s.motion);
  d["rest_motion"] = to_numpy(s.rest_motion);
  d["text_tokens"] = s.text_tokens;
  return d;
}

// Prefix references: `known` rows at the start of the stream, the rest generated.
void set_reference(const std::optional<FloatArray>& given, std::size_t frames, const char* what, Tensor& ref,
                   std::vector<std::uint8_t>& known) {
  if (!given) return;
  const Tensor prefix = from_numpy(*given, what);
  if (prefix.dim(0) > frames) throw ShapeError(what, "longer than the generated stream");
  std::vector<Scalar> full(frames * prefix.dim(1), Scalar(0));
  std::copy(prefix.data().begin(), prefix.data().end(), full.begin());
  ref = Tensor::from({frames, prefix.dim(1)}, std::move(full));
  known.assign(frames, 0);
  std::fill_n(known.begin(), prefix.dim(0), 1);
}

class Model {
 public:
  explicit Model(const std::filesystem::path& checkpoint) : model_(load_model(read_checkpoint(checkpoint))) {}

  const ModelConfig& config() const { return model_.config; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : model_.parameters()) n += p.numel();
    return n;
  }

  py::tuple sample(std::size_t motion_frames, std::optional<std::vector<int>> text, std::optional<FloatArray> ref_audio,
                   std::optional<FloatArray> ref_motion, std::optional<FloatArray> rest_motion, std::size_t nfe,
                   double cfg_scale, std::uint64_t seed) const {
    SampleConditions c;
    c.motion_frames = motion_frames;
    c.audio_frames = model_.config.audio_frames(motion_frames);
    c.text = std::move(text);
    set_reference(ref_audio, c.audio_frames, "ref_audio", c.audio_ref, c.audio_known);
    set_reference(ref_motion, c.motion_frames, "ref_motion", c.motion_ref, c.motion_known);
    if (rest_motion) c.rest_motion = from_numpy(*rest_motion, "rest_motion");
    SamplerConfig sc;
    sc.nfe = nfe;
    sc.cfg_scale = cfg_scale;
    sc.seed = seed;
    SampleResult r;
    {
      py::gil_scoped_release release;
      r = euler_sample(JamVelocity(model_), model_.config, c, sc);
    }
    return py::make_tuple(to_numpy(r.audio), to_numpy(r.motion));
  }

 private:
  JamModel model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Joint audio-motion flow matching";

  py::register_exception<Error>(m, "JamflowError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("n_joint", &ModelConfig::n_joint)
      .def_readwrite("hidden_dim", &ModelConfig::hidden_dim)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("head_dim", &ModelConfig::head_dim)
      .def_readwrite("audio_channels", &ModelConfig::audio_channels)
      .def_readwrite("motion_channels", &ModelConfig::motion_channels)
      .def_readwrite("rest_channels", &ModelConfig::rest_channels)
      .def_readwrite("text_vocab", &ModelConfig::text_vocab)
      .def_readwrite("frame_ratio", &ModelConfig::frame_ratio)
      .def_readwrite("window", &ModelConfig::window)
      .def("audio_frames", &ModelConfig::audio_frames)
      .def("validate", &ModelConfig::validate);

  m.def("default_config", [] { return serialize_config(RunConfig{}); },
        "Every configuration key with its default, as config-file text.");
  m.def(
      "normalize_config",
      [](const std::string& text, const std::vector<std::string>& overrides) {
        return serialize_config(config_from(text, overrides));
      },
      py::arg("text") = "", py::arg("overrides") = std::vector<std::string>{});

  m.def(
      "generate_sample",
      [](std::uint64_t seed, std::size_t motion_frames, const ModelConfig& config) {
        return sample_dict(generate_coupled_sample(seed, config, motion_frames));
      },
      py::arg("seed"), py::arg("motion_frames"), py::arg("config") = ModelConfig{});

  m.def(
      "inpaint_mask",
      [](std::size_t length, std::uint64_t seed, double min_frac, double max_frac, double p_full) {
        CounterRng rng(seed);
        const auto mask = make_inpaint_mask(length, rng, min_frac, max_frac, p_full);
        return std::vector<bool>(mask.begin(), mask.end());
      },
      py::arg("length"), py::arg("seed"), py::arg("min_frac") = 0.3, py::arg("max_frac") = 1.0,
      py::arg("p_full") = 0.1);

  m.def(
      "joint_mask",
      [](const std::string& mode, std::int64_t self_len, std::int64_t other_len, std::optional<std::int64_t> window) {
        MaskMode mm;
        if (mode == "motion_query") mm = MaskMode::motion_query;
        else if (mode == "audio_query") mm = MaskMode::audio_query;
        else throw py::value_error("mode must be 'motion_query' or 'audio_query'");
        const JointMask mask = build_joint_mask(mm, self_len, other_len, window);
        py::array_t<bool> out({static_cast<py::ssize_t>(mask.self_len), static_cast<py::ssize_t>(mask.keys())});
        std::copy(mask.allow.begin(), mask.allow.end(), out.mutable_data());
        return out;
      },
      py::arg("mode"), py::arg("self_len"), py::arg("other_len"), py::arg("window") = std::nullopt);

  m.def(
      "rope_angles",
      [](std::size_t seq_len, std::size_t ref_len, std::size_t head_dim, double base) {
        const RopeTable t = build_rope_table(seq_len, ref_len, head_dim, base);
        py::array_t<double> out({static_cast<py::ssize_t>(seq_len), static_cast<py::ssize_t>(t.pairs())});
        std::copy(t.angles.begin(), t.angles.end(), out.mutable_data());
        return out;
      },
      py::arg("seq_len"), py::arg("ref_len"), py::arg("head_dim"), py::arg("base") = 10000.0);

  m.def(
      "read_sequences",
      [](const std::filesystem::path& path) {
        py::dict d;
        for (const auto& s : read_sequence_file(path)) {
          py::array_t<float> a({static_cast<py::ssize_t>(s.frames), static_cast<py::ssize_t>(s.channels)});
          std::copy(s.values.begin(), s.values.end(), a.mutable_data());
          d[py::str(s.name)] = a;
        }
        return d;
      },
      py::arg("path"));
  m.def(
      "write_sequences",
      [](const std::filesystem::path& path, const std::map<std::string, FloatArray>& streams) {
        std::vector<SequenceStream> out;
        for (const auto& [name, a] : streams) out.push_back(to_stream(name, from_numpy(a, name.c_str())));
        write_sequence_file(path, out);
      },
      py::arg("path"), py::arg("streams"));

  m.def(
      "train",
      [](const std::string& config_text, const std::vector<std::string>& overrides, bool from_scratch, bool resume,
         std::size_t threads) {
        const RunConfig c = config_from(config_text, overrides);
        TrainOptions o;
        o.from_scratch = from_scratch;
        o.resume = resume;
        o.threads = threads;
        TrainSummary s;
        {
          py::gil_scoped_release release;
          s = run_training(c, o);
        }
        py::dict d;
        d["start_step"] = s.start_step;
        d["end_step"] = s.end_step;
        d["losses"] = s.losses;
        d["checkpoint"] = s.checkpoint;
        return d;
      },
      py::arg("config_text") = "", py::arg("overrides") = std::vector<std::string>{},
      py::arg("from_scratch") = false, py::arg("resume") = false, py::arg("threads") = 1);

  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, const std::string& config_text,
         const std::vector<std::string>& overrides, const std::vector<std::string>& regime_names) {
        const RunConfig c = config_from(config_text, overrides);
        std::vector<Regime> regimes;
        for (const auto& n : regime_names) regimes.push_back(parse_regime(n));
        if (regimes.empty()) regimes = all_regimes();
        const JamModel model = load_model(read_checkpoint(checkpoint));
        std::vector<RegimeResult> results;
        {
          py::gil_scoped_release release;
          results = evaluate_model(JamVelocity(model), c, regimes);
        }
        py::list out;
        for (const auto& r : results) {
          py::dict d;
          d["regime"] = to_string(r.regime);
          d["audio_mse"] = r.audio_mse;
          d["motion_mse"] = r.motion_mse;
          d["sync_corr"] = r.sync_corr;
          d["n_samples"] = r.n_samples;
          out.append(d);
        }
        return out;
      },
      py::arg("checkpoint"), py::arg("config_text") = "", py::arg("overrides") = std::vector<std::string>{},
      py::arg("regimes") = std::vector<std::string>{});

  py::class_<Model>(m, "Model")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def("sample", &Model::sample, py::arg("motion_frames"), py::arg("text") = std::nullopt,
           py::arg("ref_audio") = std::nullopt, py::arg("ref_motion") = std::nullopt,
           py::arg("rest_motion") = std::nullopt, py::arg("nfe") = 32, py::arg("cfg_scale") = 2.0,
           py::arg("seed") = 0);
}
