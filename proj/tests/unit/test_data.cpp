#include <doctest.h>

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "jamflow/data.hpp"

using namespace jamflow;

namespace {

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

std::size_t runs(const std::vector<std::uint8_t>& m) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i] && (i == 0 || !m[i - 1])) ++n;
  return n;
}

}  // namespace

TEST_CASE("samples are deterministic per seed") {
  const ModelConfig c;
  const SequenceSample a = generate_coupled_sample(42, c, 12);
  const SequenceSample b = generate_coupled_sample(42, c, 12);
  CHECK(same(a.audio, b.audio));
  CHECK(same(a.motion, b.motion));
  CHECK(same(a.rest_motion, b.rest_motion));
  CHECK(a.text_tokens == b.text_tokens);
  const SequenceSample d = generate_coupled_sample(43, c, 12);
  CHECK_FALSE(same(a.audio, d.audio));
}

TEST_CASE("sample shapes follow the frame ratio") {
  const ModelConfig c;
  for (std::size_t Lm : {8u, 9u, 16u}) {
    const SequenceSample s = generate_coupled_sample(1, c, Lm);
    CHECK(s.audio_frames() == c.frame_ratio * Lm);
    CHECK(s.motion.dim(1) == c.motion_channels);
    CHECK(s.rest_motion.dim(0) == Lm);
    CHECK(s.rest_motion.dim(1) == c.rest_channels);
    CHECK(s.audio_mask.size() == s.audio_frames());
    CHECK(s.motion_mask.size() == Lm);
    CHECK(s.text_tokens.size() <= s.audio_frames());
    for (int t : s.text_tokens) CHECK((t >= 0 && static_cast<std::size_t>(t) < c.text_vocab));
  }
  CHECK(c.motion_channels == 12u);
}

TEST_CASE("sample generation errors") {
  ModelConfig c;
  CHECK_THROWS_AS(generate_coupled_sample(1, c, 7), ShapeError);
  c.text_vocab = 0;
  CHECK_THROWS_AS(generate_coupled_sample(1, c, 8), ConfigError);
}

TEST_CASE("mouth openness tracks smoothed audio energy") {
  const ModelConfig c;
  std::vector<double> energy, openness;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SequenceSample s = generate_coupled_sample(seed, c, 8 + seed % 9);
    const auto e = smooth_energy(motion_frame_energy(s.audio, s.motion_frames()));
    for (std::size_t j = 0; j < e.size(); ++j) {
      energy.push_back(e[j]);
      openness.push_back(s.motion.at({j, 0}));
    }
  }
  const double r = pearson(energy, openness);
  CHECK(r > 0.95);
  // R^2 of the least-squares line.
  CHECK(r * r > 0.9);
}

TEST_CASE("smoothing is a causal half-decay average") {
  const std::vector<double> e = {1, 3, 0, 4};
  const auto s = smooth_energy(e);
  CHECK(s == std::vector<double>{1, 2, 1, 2.5});
  const Tensor audio = Tensor::from({4, 2}, {1, 3, 2, 2, 0, 0, 5, 7});
  CHECK(motion_frame_energy(audio, 2) == std::vector<double>{2, 3});
}

TEST_CASE("full-width mask covers the sequence") {
  CounterRng rng(1);
  for (std::size_t L : {1u, 5u, 32u}) {
    auto m = make_inpaint_mask(L, rng, 1.0, 1.0, 0.0);
    CHECK(std::count(m.begin(), m.end(), 1) == static_cast<std::ptrdiff_t>(L));
  }
}

TEST_CASE("masks are single runs with bounded fraction") {
  CounterRng base(9);
  std::size_t full = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    CounterRng rng = base.derive(i);
    const std::size_t L = 8 + i % 57;
    const auto m = make_inpaint_mask(L, rng);
    const double frac = static_cast<double>(std::count(m.begin(), m.end(), 1)) / static_cast<double>(L);
    CHECK(frac >= 0.3);
    CHECK(frac <= 1.0);
    CHECK(runs(m) == 1);
    if (frac == 1.0) ++full;
  }
  // Full masks come from the 10% pure-generation draw plus spans that reach 1.
  CHECK(full >= 60);
}

TEST_CASE("mask errors") {
  CounterRng rng(1);
  CHECK_THROWS_AS(make_inpaint_mask(0, rng), ShapeError);
  CHECK_THROWS_AS(make_inpaint_mask(5, rng, 0.8, 0.5), ConfigError);
  CHECK_THROWS_AS(make_inpaint_mask(5, rng, -0.1, 0.5), ConfigError);
}

TEST_CASE("conditions are zero where masked and the indicator equals the mask") {
  const ModelConfig c;
  SequenceSample s = generate_coupled_sample(5, c, 10);
  CounterRng rng(2);
  s.audio_mask = make_inpaint_mask(s.audio_frames(), rng);
  s.motion_mask = make_inpaint_mask(s.motion_frames(), rng, 0.3, 0.6, 0.0);
  const ConditionedInputs ci = build_conditions(s);
  for (std::size_t i = 0; i < s.audio_frames(); ++i) {
    CHECK(ci.audio_indicator.at({i, 0}) == (s.audio_mask[i] ? 1.0f : 0.0f));
    for (std::size_t ch = 0; ch < c.audio_channels; ++ch)
      CHECK(ci.audio_cond.at({i, ch}) == (s.audio_mask[i] ? 0.0f : s.audio.at({i, ch})));
  }
  for (std::size_t j = 0; j < s.motion_frames(); ++j) {
    CHECK(ci.motion_indicator.at({j, 0}) == (s.motion_mask[j] ? 1.0f : 0.0f));
    for (std::size_t ch = 0; ch < c.motion_channels; ++ch)
      CHECK(ci.motion_cond.at({j, ch}) == (s.motion_mask[j] ? 0.0f : s.motion.at({j, ch})));
  }
  s.audio_mask.pop_back();
  CHECK_THROWS_AS(build_conditions(s), ShapeError);
}

TEST_CASE("dropout with zero and one probabilities") {
  const ModelConfig c;
  SequenceSample s = generate_coupled_sample(5, c, 10);
  s.motion_mask.assign(10, 0);
  s.audio_mask.assign(40, 0);
  CounterRng rng(3);
  const ConditionedInputs keep = apply_condition_dropout(s, DropoutSpec{0, 0, 0, 0}, rng);
  CHECK_FALSE((keep.dropped.audio || keep.dropped.motion || keep.dropped.text || keep.dropped.rest));
  CHECK(same(keep.audio_cond, s.audio));
  CHECK(same(keep.motion_cond, s.motion));
  CHECK(same(keep.rest_motion, s.rest_motion));
  CHECK(keep.text_tokens == s.text_tokens);

  const ConditionedInputs drop = apply_condition_dropout(s, DropoutSpec{1, 1, 1, 1}, rng);
  CHECK((drop.dropped.audio && drop.dropped.motion && drop.dropped.text && drop.dropped.rest));
  for (float v : drop.audio_cond.data()) CHECK(v == 0.0f);
  for (float v : drop.audio_indicator.data()) CHECK(v == 1.0f);
  for (float v : drop.motion_cond.data()) CHECK(v == 0.0f);
  for (float v : drop.motion_indicator.data()) CHECK(v == 1.0f);
  for (float v : drop.rest_motion.data()) CHECK(v == 0.0f);
  for (float v : drop.audio_features.data()) CHECK(v == 0.0f);
  CHECK(drop.text_tokens.empty());

  CHECK_THROWS_AS(apply_condition_dropout(s, DropoutSpec{1.5, 0, 0, 0}, rng), ConfigError);
}

TEST_CASE("empirical dropout rates match the schedule") {
  const ModelConfig c;
  const SequenceSample s = generate_coupled_sample(5, c, 8);
  const DropoutSpec spec;
  CHECK(spec.p_audio == 0.1);
  CHECK(spec.p_motion == 0.1);
  CHECK(spec.p_text == 0.2);
  CHECK(spec.p_rest == 0.8);
  const int n = 10000;
  int a = 0, m = 0, t = 0, r = 0;
  CounterRng base(77);
  for (int i = 0; i < n; ++i) {
    CounterRng rng = base.derive(static_cast<std::uint64_t>(i));
    const DropFlags f = apply_condition_dropout(s, spec, rng).dropped;
    a += f.audio;
    m += f.motion;
    t += f.text;
    r += f.rest;
  }
  CHECK(std::abs(a / double(n) - 0.1) <= 0.01);
  CHECK(std::abs(m / double(n) - 0.1) <= 0.01);
  CHECK(std::abs(t / double(n) - 0.2) <= 0.01);
  CHECK(std::abs(r / double(n) - 0.8) <= 0.01);
}

TEST_CASE("corpus is reproducible and respects length bounds") {
  const ModelConfig c;
  const auto a = generate_corpus(3, 20, c, 8, 12);
  const auto b = generate_corpus(3, 20, c, 8, 12);
  REQUIRE(a.size() == 20);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(same(a[i].motion, b[i].motion));
    CHECK(a[i].motion_frames() >= 8);
    CHECK(a[i].motion_frames() <= 12);
  }
  CHECK_THROWS_AS(generate_corpus(3, 2, c, 12, 8), ConfigError);
}

TEST_CASE("keypoint composition") {
  Keypoints xc;
  CounterRng rng(4);
  for (int i = 0; i < 21; ++i)
    for (int d = 0; d < 3; ++d) xc(i, d) = rng.normal();

  KeypointParams p;
  p.canonical = xc;
  CHECK(compose_keypoints(p) == xc);
  p.scale = 2;
  CHECK(compose_keypoints(p) == 2 * xc);

  p.rotation = Eigen::AngleAxisd(0.7, Eigen::Vector3d(1, -2, 0.5).normalized()).toRotationMatrix();
  for (int i = 0; i < 21; ++i)
    for (int d = 0; d < 3; ++d) p.expression(i, d) = 0.1 * rng.normal();
  p.scale = 1.3;
  p.translation = Eigen::RowVector3d(0.5, -1, 2);
  const Keypoints x = compose_keypoints(p);
  double worst = 0;
  for (int i = 0; i < 21; ++i)
    for (int j = 0; j < 3; ++j) {
      double v = 0;
      for (int k = 0; k < 3; ++k) v += xc(i, k) * p.rotation(k, j);
      v = p.scale * (v + p.expression(i, j)) + p.translation(j);
      worst = std::max(worst, std::abs(v - x(i, j)));
    }
  CHECK(worst <= 1e-6);

  KeypointParams bad = p;
  bad.rotation(0, 0) += 0.01;
  CHECK_THROWS_AS(compose_keypoints(bad), ShapeError);
  bad = p;
  bad.scale = 0;
  CHECK_THROWS_AS(compose_keypoints(bad), ShapeError);
}

TEST_CASE("mouth channels pick four keypoints") {
  Keypoints e = Keypoints::Zero();
  for (int i = 0; i < 21; ++i) e.row(i).setConstant(i);
  const auto m = mouth_channels(e);
  REQUIRE(m.size() == 12);
  CHECK(m[0] == 14);
  CHECK(m[3] == 17);
  CHECK(m[6] == 19);
  CHECK(m[11] == 20);
}
