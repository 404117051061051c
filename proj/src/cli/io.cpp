#include "jamflow/cli/io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

namespace jamflow {

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - offset, 1u << 30);
    crc = crc32(crc, bytes.data() + offset, static_cast<uInt>(n));
    offset += n;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void name(const std::string& s) {
    if (s.size() > 0xFFFF) throw FormatError("name too long: " + s.substr(0, 32) + "...");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s);
  }
  std::vector<std::uint8_t> finish() {
    u32(crc32_of(out_));
    return std::move(out_);
  }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, const char* what) : what_(what) {
    if (bytes.size() < 8) fail("file too short");
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= std::uint32_t(bytes[body + i]) << (8 * i);
    if (crc32_of(bytes.first(body)) != stored) fail("CRC mismatch");
    data_ = bytes.first(body);
  }

  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string name() { return bytes(u16()); }
  void floats(std::vector<float>& out, std::size_t n) {
    need(n * 4);
    out.resize(n);
    for (auto& v : out) v = f32();
  }
  void expect_magic(std::string_view magic) {
    if (bytes(magic.size()) != magic) fail("bad magic");
  }
  void expect_end() const {
    if (pos_ != data_.size()) fail("trailing bytes before CRC");
  }
  [[noreturn]] void fail(const std::string& msg) const { throw FormatError(std::string(what_) + ": " + msg); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) fail("truncated");
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  const char* what_;
};

void write_tensor(Writer& w, const NamedTensor& t) {
  std::size_t n = 1;
  for (auto d : t.dims) n *= d;
  if (n != t.values.size()) throw FormatError("tensor " + t.name + ": dims do not match value count");
  if (t.dims.size() > 0xFF) throw FormatError("tensor " + t.name + ": rank too large");
  w.name(t.name);
  w.u8(static_cast<std::uint8_t>(t.dims.size()));
  for (auto d : t.dims) w.u32(d);
  for (float v : t.values) w.f32(v);
}

NamedTensor read_tensor(Reader& r) {
  NamedTensor t;
  t.name = r.name();
  t.dims.resize(r.u8());
  std::size_t n = 1;
  for (auto& d : t.dims) {
    d = r.u32();
    n *= d;
  }
  r.floats(t.values, n);
  return t;
}

}  // namespace

std::vector<std::uint8_t> encode_sequences(std::span<const SequenceStream> streams) {
  Writer w;
  w.bytes("JSEQ");
  w.u32(kSequenceFormatVersion);
  w.u32(static_cast<std::uint32_t>(streams.size()));
  for (const auto& s : streams) {
    if (std::size_t(s.frames) * s.channels != s.values.size()) {
      throw FormatError("stream " + s.name + ": frames x channels does not match value count");
    }
    w.name(s.name);
    w.u32(s.frames);
    w.u32(s.channels);
    for (float v : s.values) w.f32(v);
  }
  return w.finish();
}

std::vector<SequenceStream> decode_sequences(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "sequence file");
  r.expect_magic("JSEQ");
  if (const auto v = r.u32(); v != kSequenceFormatVersion) r.fail("unsupported version " + std::to_string(v));
  std::vector<SequenceStream> out(r.u32());
  for (auto& s : out) {
    s.name = r.name();
    s.frames = r.u32();
    s.channels = r.u32();
    r.floats(s.values, std::size_t(s.frames) * s.channels);
  }
  r.expect_end();
  return out;
}

void write_sequence_file(const std::filesystem::path& path, std::span<const SequenceStream> streams) {
  write_file_atomic(path, encode_sequences(streams));
}

std::vector<SequenceStream> read_sequence_file(const std::filesystem::path& path) {
  try {
    return decode_sequences(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

const SequenceStream* find_stream(std::span<const SequenceStream> streams, const std::string& name) {
  for (const auto& s : streams)
    if (s.name == name) return &s;
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.bytes("JAMF");
  w.u32(kCheckpointFormatVersion);
  w.u32(static_cast<std::uint32_t>(ck.config_text.size()));
  w.bytes(ck.config_text);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) write_tensor(w, t);
  w.u8(ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    w.u64(ck.optimizer->train_step);
    w.u64(ck.optimizer->adam_step);
    w.u32(static_cast<std::uint32_t>(ck.optimizer->moments.size()));
    for (const auto& t : ck.optimizer->moments) write_tensor(w, t);
  }
  return w.finish();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "checkpoint");
  r.expect_magic("JAMF");
  if (const auto v = r.u32(); v != kCheckpointFormatVersion) r.fail("unsupported version " + std::to_string(v));
  Checkpoint ck;
  ck.config_text = r.bytes(r.u32());
  ck.tensors.resize(r.u32());
  std::unordered_set<std::string> seen;
  for (auto& t : ck.tensors) {
    t = read_tensor(r);
    if (!seen.insert(t.name).second) r.fail("duplicate tensor " + t.name);
  }
  const auto flag = r.u8();
  if (flag > 1) r.fail("bad optimizer flag");
  if (flag == 1) {
    OptimizerSnapshot opt;
    opt.train_step = r.u64();
    opt.adam_step = r.u64();
    opt.moments.resize(r.u32());
    for (auto& t : opt.moments) t = read_tensor(r);
    ck.optimizer = std::move(opt);
  }
  r.expect_end();
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomic(path, encode_checkpoint(ck));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline namespace JAMFLOW_PRECISION {

namespace {

NamedTensor named(const std::string& name, const Shape& shape, std::span<const Scalar> values) {
  NamedTensor t;
  t.name = name;
  for (auto d : shape) t.dims.push_back(static_cast<std::uint32_t>(d));
  t.values.assign(values.begin(), values.end());
  return t;
}

std::string dims_str(const std::vector<std::uint32_t>& dims) {
  Shape s(dims.begin(), dims.end());
  return shape_str(s);
}

void copy_into(Tensor& dst, const NamedTensor& src) {
  Shape s(src.dims.begin(), src.dims.end());
  if (s != dst.shape()) {
    throw FormatError("checkpoint tensor " + src.name + " has shape " + shape_str(s) + ", model expects " +
                      shape_str(dst.shape()));
  }
  auto out = dst.mutable_data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Scalar>(src.values[i]);
}

}  // namespace

std::vector<NamedTensor> snapshot_parameters(const JamModel& model) {
  std::vector<NamedTensor> out;
  for (const auto& p : model.parameters()) out.push_back(named(p.name(), p.shape(), p.data()));
  return out;
}

OptimizerSnapshot snapshot_optimizer(const JamModel& model, const OptimizerState& state, std::uint64_t train_step) {
  OptimizerSnapshot s;
  s.train_step = train_step;
  s.adam_step = state.step;
  const auto params = model.parameters();
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw Error("optimizer state does not match the model");
  }
  for (std::size_t i = 0; i < params.size(); ++i) s.moments.push_back(named("m/" + params[i].name(), params[i].shape(), state.m[i]));
  for (std::size_t i = 0; i < params.size(); ++i) s.moments.push_back(named("v/" + params[i].name(), params[i].shape(), state.v[i]));
  return s;
}

void load_parameters(JamModel& model, std::span<const NamedTensor> tensors, bool (*select)(const std::string&)) {
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) {
    if (!by_name.emplace(t.name, &t).second) throw FormatError("checkpoint has duplicate tensor " + t.name);
  }
  auto params = model.parameters();
  for (auto& p : params) {
    auto it = by_name.find(p.name());
    if (it == by_name.end()) throw FormatError("checkpoint is missing parameter " + p.name());
    if (select == nullptr || select(p.name())) copy_into(p, *it->second);
    by_name.erase(it);
  }
  if (!by_name.empty()) throw FormatError("checkpoint has unknown tensor " + by_name.begin()->first);
}

void load_parameters(JamModel& model, std::span<const NamedTensor> tensors) {
  load_parameters(model, tensors, nullptr);
}

void load_optimizer(const JamModel& model, const OptimizerSnapshot& snap, OptimizerState& state) {
  const auto params = model.parameters();
  if (snap.moments.size() != 2 * params.size()) {
    throw FormatError("optimizer section has " + std::to_string(snap.moments.size()) + " moments, expected " +
                      std::to_string(2 * params.size()));
  }
  state.init(params);
  state.step = snap.adam_step;
  for (std::size_t k = 0; k < 2; ++k) {
    auto& dst = k == 0 ? state.m : state.v;
    const std::string prefix = k == 0 ? "m/" : "v/";
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& src = snap.moments[k * params.size() + i];
      if (src.name != prefix + params[i].name()) throw FormatError("optimizer moment " + src.name + " out of order");
      if (Shape(src.dims.begin(), src.dims.end()) != params[i].shape()) {
        throw FormatError("optimizer moment " + src.name + " has shape " + dims_str(src.dims));
      }
      dst[i].assign(src.values.begin(), src.values.end());
    }
  }
}

SequenceStream to_stream(const std::string& name, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("to_stream", "expected [frames, channels], got " + shape_str(t.shape()));
  SequenceStream s;
  s.name = name;
  s.frames = static_cast<std::uint32_t>(t.dim(0));
  s.channels = static_cast<std::uint32_t>(t.dim(1));
  s.values.assign(t.data().begin(), t.data().end());
  return s;
}

Tensor from_stream(const SequenceStream& s) {
  std::vector<Scalar> v(s.values.begin(), s.values.end());
  return Tensor::from({s.frames, s.channels}, std::move(v));
}

}  // namespace JAMFLOW_PRECISION
}  // namespace jamflow
