#include <doctest.h>

#include <cmath>
#include <set>
#include <thread>

#include "jamflow/optim.hpp"
#include "jamflow/rng.hpp"
#include "jamflow/tensor.hpp"

using namespace jamflow;

namespace {

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("counter rng is a pure function of its key") {
  CounterRng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  CHECK(CounterRng(42).derive("x").next_u64() != CounterRng(42).derive("y").next_u64());
  CHECK(CounterRng(42).derive(1).next_u64() != CounterRng(42).derive(2).next_u64());
  CHECK(CounterRng(42).derive("t", 3).key() == CounterRng(42).derive("t", 3).key());
}

TEST_CASE("counter rng draws lie in range") {
  CounterRng r(7);
  double mean = 0;
  for (int i = 0; i < 20000; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    mean += u;
    const auto k = r.below(5);
    REQUIRE(k < 5);
  }
  CHECK(mean / 20000 == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("normal draws have unit variance") {
  CounterRng r(3);
  double m = 0, s = 0;
  const int n = 50000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    m += x;
    s += x * x;
  }
  m /= n;
  CHECK(std::abs(m) < 0.02);
  CHECK(s / n - m * m == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("elementwise ops and broadcasting") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({3}, {10, 20, 30});
  CHECK(values(add(a, b)) == std::vector<float>{11, 22, 33, 14, 25, 36});
  CHECK(values(sub(a, b)) == std::vector<float>{-9, -18, -27, -6, -15, -24});
  CHECK(values(mul(a, b)) == std::vector<float>{10, 40, 90, 40, 100, 180});
  CHECK(values(scalar_mul(a, 2)) == std::vector<float>{2, 4, 6, 8, 10, 12});
  CHECK(values(add_scalar(a, 1)) == std::vector<float>{2, 3, 4, 5, 6, 7});
  CHECK_THROWS_AS(add(a, Tensor::zeros({2})), ShapeError);
  CHECK_THROWS_AS(add(b, a), ShapeError);
  CHECK_THROWS_AS(add(a, Tensor{}), ShapeError);
}

TEST_CASE("matmul, transpose, reshape") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
  CHECK(values(matmul(a, b)) == std::vector<float>{58, 64, 139, 154});
  CHECK(values(transpose(a)) == std::vector<float>{1, 4, 2, 5, 3, 6});
  CHECK(reshape(a, {3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);
}

TEST_CASE("concat and slice") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 1}, {5, 6});
  CHECK(values(concat({a, b}, 1)) == std::vector<float>{1, 2, 5, 3, 4, 6});
  CHECK(values(concat({a, a}, 0)) == std::vector<float>{1, 2, 3, 4, 1, 2, 3, 4});
  CHECK(values(slice(a, 1, 1, 2)) == std::vector<float>{2, 4});
  CHECK(values(slice(a, 0, 1, 2)) == std::vector<float>{3, 4});
  CHECK_THROWS_AS(concat({a, b}, 0), ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 1, 3), ShapeError);
  CHECK_THROWS_AS(slice(a, 2, 0, 1), ShapeError);
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 1000, 1001, 1002});
  Tensor s = softmax(a);
  for (int r = 0; r < 2; ++r) {
    float total = 0;
    for (int j = 0; j < 3; ++j) total += s.at({std::size_t(r), std::size_t(j)});
    CHECK(total == doctest::Approx(1.0f));
  }
  for (int j = 0; j < 3; ++j) CHECK(s.at({0, std::size_t(j)}) == doctest::Approx(s.at({1, std::size_t(j)})));
}

TEST_CASE("activation values") {
  Tensor x = Tensor::from({3}, {-1, 0, 2});
  auto g = values(gelu(x));
  CHECK(g[0] == doctest::Approx(-0.158655254));
  CHECK(g[1] == 0.0f);
  CHECK(g[2] == doctest::Approx(1.954499736));
  auto s = values(silu(x));
  CHECK(s[0] == doctest::Approx(-0.268941421));
  CHECK(s[2] == doctest::Approx(1.761594156));
}

TEST_CASE("layer norm normalizes the last axis") {
  Tensor x = Tensor::from({2, 4}, {1, 2, 3, 4, -3, 0, 0, 7});
  Tensor y = layer_norm(x);
  for (std::size_t r = 0; r < 2; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 4; ++j) m += y.at({r, j});
    m /= 4;
    for (std::size_t j = 0; j < 4; ++j) v += (y.at({r, j}) - m) * (y.at({r, j}) - m);
    CHECK(std::abs(m) < 1e-6);
    CHECK(v / 4 == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("gather rows and reductions") {
  Tensor t = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  const int idx[] = {2, 2, 0};
  CHECK(values(gather_rows(t, idx)) == std::vector<float>{5, 6, 5, 6, 1, 2});
  const int bad[] = {3};
  CHECK_THROWS_AS(gather_rows(t, bad), ShapeError);
  CHECK(sum(t).item() == 21.0f);
  CHECK(mean(t).item() == 3.5f);
  CHECK_THROWS_AS(t.item(), ShapeError);
}

TEST_CASE("linear accepts vectors and optional bias") {
  Tensor w = Tensor::from({2, 3}, {1, 0, 1, 0, 1, 1});
  Tensor b = Tensor::from({3}, {1, 1, 1});
  CHECK(values(linear(Tensor::from({2}, {2, 3}), w, b)) == std::vector<float>{3, 4, 6});
  CHECK(values(linear(Tensor::from({1, 2}, {2, 3}), w, Tensor{})) == std::vector<float>{2, 3, 5});
}

TEST_CASE("tape records only while active and only for differentiable inputs") {
  Tensor p = Tensor::parameter({2}, {1, 2}, "p");
  Tensor c = Tensor::from({2}, {3, 4});
  Tape tape;
  {
    Recording rec(tape);
    Tensor y = mul(c, c);
    CHECK_FALSE(y.requires_grad());
    CHECK(tape.size() == 0);
    Tensor z = mul(p, c);
    CHECK(z.requires_grad());
    CHECK(tape.size() == 1);
  }
  Tensor outside = mul(p, c);
  CHECK_FALSE(outside.requires_grad());
  CHECK(current_tape() == nullptr);
}

TEST_CASE("backward errors") {
  Tensor p = Tensor::parameter({2}, {1, 2}, "p");
  Tape tape;
  Recording rec(tape);
  Tensor y = mul(p, p);
  CHECK_THROWS_AS(tape.backward(y), ShapeError);
  Tensor loss = sum(y);
  GradientMap g = tape.backward(loss);
  CHECK(g.get(p) == std::vector<float>{2, 4});
  CHECK_THROWS_AS(tape.backward(loss), Error);
  tape.reset();
  Tensor again = sum(mul(p, p));
  CHECK(tape.backward(again).get(p) == std::vector<float>{2, 4});
}

TEST_CASE("constant loss yields an empty gradient map") {
  Tape tape;
  Recording rec(tape);
  GradientMap g = tape.backward(Tensor::scalar(3));
  CHECK(g.size() == 0);
}

TEST_CASE("checked mode rejects non-finite outputs") {
  Tensor x = Tensor::from({2}, {1, 0});
  Tensor big = Tensor::from({1}, {std::numeric_limits<float>::max()});
  CHECK_NOTHROW(scalar_mul(big, 10));
  CheckedMode on;
  CHECK_THROWS_AS(scalar_mul(big, 10), NumericError);
  CHECK_NOTHROW(scalar_mul(x, 2));
}

TEST_CASE("tapes are per thread") {
  Tensor p = Tensor::parameter({1}, {3}, "p");
  std::vector<float> grads(4);
  std::vector<std::thread> pool;
  for (int i = 0; i < 4; ++i) {
    pool.emplace_back([&, i] {
      Tape tape;
      Recording rec(tape);
      Tensor loss = sum(scalar_mul(mul(p, p), float(i + 1)));
      grads[i] = tape.backward(loss).get(p)[0];
    });
  }
  for (auto& t : pool) t.join();
  CHECK(grads == std::vector<float>{6, 12, 18, 24});
}

TEST_CASE("adam moves against the gradient with bias correction") {
  std::vector<Tensor> params = {Tensor::parameter({2}, {1, -1}, "w")};
  OptimizerState st;
  st.init(params);
  std::vector<std::vector<float>> g = {{0.5f, -2.0f}};
  adam_step(params, g, st, 0.1);
  // First bias-corrected step moves each coordinate by lr * sign(g).
  CHECK(params[0].data()[0] == doctest::Approx(0.9f));
  CHECK(params[0].data()[1] == doctest::Approx(-0.9f));
  CHECK(st.step == 1);
}

TEST_CASE("adam rejects non-finite gradients without modifying anything") {
  std::vector<Tensor> params = {Tensor::parameter({1}, {1}, "a"), Tensor::parameter({1}, {2}, "b")};
  OptimizerState st;
  st.init(params);
  std::vector<std::vector<float>> g = {{1.0f}, {std::nanf("")}};
  try {
    adam_step(params, g, st, 0.1);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("b") != std::string::npos);
  }
  CHECK(params[0].data()[0] == 1.0f);
  CHECK(st.step == 0);
  CHECK(st.m[0][0] == 0.0f);
}

TEST_CASE("global norm clipping") {
  std::vector<std::vector<float>> g = {{3, 0}, {0, 4}};
  CHECK(global_norm(g) == doctest::Approx(5.0));
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(global_norm(g) == doctest::Approx(1.0));
  std::vector<std::vector<float>> small = {{0.3f}};
  clip_global_norm(small, 1.0);
  CHECK(small[0][0] == 0.3f);
}
