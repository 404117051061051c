#include <doctest.h>

#include "../support/attention_reference.hpp"
#include "jamflow/attention.hpp"

using namespace jamflow;
using namespace jamflow::testing;

namespace {

std::size_t count_row(const JointMask& m, std::size_t i, std::size_t from, std::size_t to) {
  std::size_t n = 0;
  for (std::size_t j = from; j < to; ++j) n += m.allowed(i, j);
  return n;
}

}  // namespace

TEST_CASE("motion mask: local window over self, matching time span over audio") {
  const JointMask m = build_joint_mask(MaskMode::motion_query, 4, 16, 1);
  CHECK(m.keys() == 20);
  // Motion frame 0 covers audio [0, 4); with window 1 it sees motion 0..1 and audio 0..7.
  CHECK(count_row(m, 0, 0, 4) == 2);
  for (std::size_t j = 0; j < 16; ++j) CHECK(m.allowed(0, 4 + j) == (j < 8));
  // Frame 2 sees motion 1..3 and audio 4..15.
  for (std::size_t j = 0; j < 4; ++j) CHECK(m.allowed(2, j) == (j >= 1));
  for (std::size_t j = 0; j < 16; ++j) CHECK(m.allowed(2, 4 + j) == (j >= 4));
}

TEST_CASE("motion mask with zero window is diagonal over self") {
  const JointMask m = build_joint_mask(MaskMode::motion_query, 5, 0, 0);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) CHECK(m.allowed(i, j) == (i == j));
}

TEST_CASE("audio mask: all audio keys and one motion key") {
  const JointMask m = build_joint_mask(MaskMode::audio_query, 15, 4);
  for (std::size_t i = 0; i < 15; ++i) {
    CHECK(count_row(m, i, 0, 15) == 15);
    CHECK(count_row(m, i, 15, 19) == 1);
    CHECK(m.allowed(i, 15 + i * 4 / 15));
  }
}

TEST_CASE("mask errors") {
  CHECK_THROWS_AS(build_joint_mask(MaskMode::audio_query, 0, 3), ShapeError);
  CHECK_THROWS_AS(build_joint_mask(MaskMode::audio_query, 3, -1), ShapeError);
  CHECK_THROWS_AS(build_joint_mask(MaskMode::motion_query, 3, 3), ShapeError);
  CHECK_THROWS_AS(build_joint_mask(MaskMode::motion_query, 3, 3, -1), ShapeError);
  CHECK(to_string(MaskMode::motion_query) == "motion_query");
}

TEST_CASE("sdpa with a single allowed key copies its value") {
  Tensor q = Tensor::randn({3, 1, 2}, CounterRng(1));
  Tensor k = Tensor::randn({3, 1, 2}, CounterRng(2));
  Tensor v = Tensor::from({3, 1, 2}, {1, 2, 3, 4, 5, 6});
  const std::uint8_t mask[] = {0, 0, 1, 1, 0, 0, 0, 1, 0};
  Tensor o = sdpa(q, k, v, mask);
  CHECK(o.data()[0] == 5.0f);
  CHECK(o.data()[1] == 6.0f);
  CHECK(o.data()[2] == 1.0f);
  CHECK(o.data()[5] == 4.0f);
}

TEST_CASE("sdpa errors") {
  Tensor q = Tensor::zeros({2, 1, 2});
  Tensor k = Tensor::zeros({3, 1, 2});
  const std::uint8_t empty_row[] = {1, 0, 0, 0, 0, 0};
  CHECK_THROWS_AS(sdpa(q, k, k, empty_row), ShapeError);
  const std::uint8_t short_mask[] = {1, 1};
  CHECK_THROWS_AS(sdpa(q, k, k, short_mask), ShapeError);
  CHECK_THROWS_AS(sdpa(q, k, Tensor::zeros({2, 1, 2})), ShapeError);
  CHECK_THROWS_AS(sdpa(q, Tensor::zeros({3, 1, 4}), Tensor::zeros({3, 1, 4})), ShapeError);
}

TEST_CASE("masked keys get zero gradient") {
  Tensor q = Tensor::parameter({2, 1, 2}, {0.1f, 0.2f, 0.3f, 0.4f}, "q");
  Tensor k = Tensor::parameter({3, 1, 2}, {1, 2, 3, 4, 5, 6}, "k");
  Tensor v = Tensor::parameter({3, 1, 2}, {1, 2, 3, 4, 5, 6}, "v");
  const std::uint8_t mask[] = {1, 1, 0, 1, 1, 0};
  Tape tape;
  Recording rec(tape);
  GradientMap g = tape.backward(sum(sdpa(q, k, v, mask)));
  const auto gk = g.get(k), gv = g.get(v);
  CHECK(gk[4] == 0.0f);
  CHECK(gk[5] == 0.0f);
  CHECK(gv[4] == 0.0f);
  CHECK(gv[5] == 0.0f);
  CHECK(gv[0] != 0.0f);
}

TEST_CASE("joint attention matches the loop reference for both poolings") {
  CounterRng rng(9);
  const AttentionParams pa = make_attention_params(8, 2, 4, rng.derive("a"), "a.");
  const AttentionParams pm = make_attention_params(8, 2, 4, rng.derive("m"), "m.");
  const Tensor xa = Tensor::randn({15, 8}, rng.derive("xa"));
  const Tensor xm = Tensor::randn({4, 8}, rng.derive("xm"));
  const RopeTable ra = build_rope_table(15, 15, 4), rm = build_rope_table(4, 15, 4);
  const JointMask ma = build_joint_mask(MaskMode::audio_query, 15, 4);
  const JointMask mm = build_joint_mask(MaskMode::motion_query, 4, 15, 1);
  const auto ref_a = ref_project(pa, xa, &ra), ref_m = ref_project(pm, xm, &rm);
  const auto want_a = ref_branch(pa, ref_a, ref_m, true, &ma);
  const auto want_m = ref_branch(pm, ref_m, ref_a, true, &mm);
  for (QueryPooling pooling : {QueryPooling::own, QueryPooling::literal}) {
    auto [oa, om] = joint_attention({&pa, xa, &ra, &ma, true}, {&pm, xm, &rm, &mm, true}, pooling);
    CHECK(oa.shape() == Shape{15, 8});
    CHECK(om.shape() == Shape{4, 8});
    CHECK(max_abs_diff(oa, want_a) < 1e-5);
    CHECK(max_abs_diff(om, want_m) < 1e-5);
  }
}

TEST_CASE("own and literal pooling agree") {
  CounterRng rng(4);
  const AttentionParams pa = make_attention_params(6, 3, 2, rng.derive("a"));
  const AttentionParams pm = make_attention_params(6, 3, 2, rng.derive("m"));
  const Tensor xa = Tensor::randn({12, 6}, rng.derive("xa"));
  const Tensor xm = Tensor::randn({3, 6}, rng.derive("xm"));
  const JointMask ma = build_joint_mask(MaskMode::audio_query, 12, 3);
  const JointMask mm = build_joint_mask(MaskMode::motion_query, 3, 12, 0);
  for (bool masked : {false, true}) {
    AttentionBranch a{&pa, xa, nullptr, masked ? &ma : nullptr, true};
    AttentionBranch m{&pm, xm, nullptr, masked ? &mm : nullptr, true};
    auto [a1, m1] = joint_attention(a, m, QueryPooling::own);
    auto [a2, m2] = joint_attention(a, m, QueryPooling::literal);
    for (std::size_t i = 0; i < a1.numel(); ++i) CHECK(a1.data()[i] == doctest::Approx(a2.data()[i]).epsilon(1e-5));
    for (std::size_t i = 0; i < m1.numel(); ++i) CHECK(m1.data()[i] == doctest::Approx(m2.data()[i]).epsilon(1e-5));
  }
}

TEST_CASE("without joint pooling each branch is plain self-attention") {
  CounterRng rng(5);
  const AttentionParams pa = make_attention_params(8, 2, 4, rng.derive("a"));
  const AttentionParams pm = make_attention_params(8, 2, 4, rng.derive("m"));
  const Tensor xa = Tensor::randn({8, 8}, rng.derive("xa"));
  const Tensor xm = Tensor::randn({2, 8}, rng.derive("xm"));
  auto [oa, om] = joint_attention({&pa, xa, nullptr, nullptr, false}, {&pm, xm, nullptr, nullptr, false});
  const Tensor sa = self_attention(pa, xa);
  const Tensor sm = self_attention(pm, xm);
  CHECK(std::equal(oa.data().begin(), oa.data().end(), sa.data().begin()));
  CHECK(std::equal(om.data().begin(), om.data().end(), sm.data().begin()));
}

TEST_CASE("joint attention errors") {
  CounterRng rng(6);
  const AttentionParams p8 = make_attention_params(8, 2, 4, rng.derive("a"));
  const AttentionParams p8b = make_attention_params(8, 4, 2, rng.derive("b"));
  const Tensor x = Tensor::randn({4, 8}, rng);
  CHECK_THROWS_AS(joint_attention({&p8, x, nullptr, nullptr, true}, {&p8b, x, nullptr, nullptr, true}), ShapeError);
  const JointMask cross = build_joint_mask(MaskMode::audio_query, 4, 4);
  CHECK_THROWS_AS(joint_attention({&p8, x, nullptr, &cross, false}, {&p8, x, nullptr, nullptr, false}), ShapeError);
  const JointMask wrong = build_joint_mask(MaskMode::audio_query, 4, 3);
  CHECK_THROWS_AS(joint_attention({&p8, x, nullptr, &wrong, true}, {&p8, x, nullptr, nullptr, true}), ShapeError);
  CHECK_THROWS_AS(joint_attention({&p8, Tensor::zeros({4, 6}), nullptr, nullptr, false}, {&p8, x, nullptr, nullptr, false}),
                  ShapeError);
  CHECK_THROWS_AS(joint_attention({nullptr, x}, {&p8, x}), ShapeError);
}
