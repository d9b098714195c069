#include <doctest.h>

#include <cmath>

#include "minicollie/tensor.hpp"

using namespace minicollie;

TEST_CASE("matmul identity and hand oracle") {
  Tape tape;
  Tensor i2 = Tensor::leaf({2, 2}, {1, 0, 0, 1});
  Tensor y = matmul(tape, i2, i2);
  CHECK(y.data() == std::vector<double>{1, 0, 0, 1});

  Tensor a = Tensor::leaf({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::leaf({2, 1}, {5, 6});
  Tensor c = matmul(tape, a, b);
  CHECK(c.data()[0] == doctest::Approx(17));
  CHECK(c.data()[1] == doctest::Approx(39));
}

TEST_CASE("matmul shape errors name both shapes") {
  Tape tape;
  Tensor a = Tensor::leaf({2, 3}, std::vector<double>(6, 0.0));
  Tensor b = Tensor::leaf({4, 5}, std::vector<double>(20, 0.0));
  CHECK_THROWS_WITH_AS(matmul(tape, a, b),
                       doctest::Contains("[2,3]"), ContractError);
  CHECK_THROWS_WITH_AS(matmul(tape, a, b),
                       doctest::Contains("[4,5]"), ContractError);
}

TEST_CASE("backward of sum(matmul) matches column sums of b") {
  // d sum(a b) / d a = row-broadcast of the column sums of b.
  Tape tape;
  Tensor a = Tensor::leaf({2, 3}, {0.3, -1.2, 0.5, 2.0, 0.1, -0.7}, true);
  Tensor b = Tensor::leaf({3, 2}, {1.5, -0.4, 0.2, 0.9, -1.1, 0.3});
  Tensor loss = sum(tape, matmul(tape, a, b));
  tape.backward(loss);
  for (int r = 0; r < 2; ++r)
    for (int k = 0; k < 3; ++k) {
      double col_sum = b.data()[k * 2 + 0] + b.data()[k * 2 + 1];
      CHECK(a.grad()[r * 3 + k] == doctest::Approx(col_sum).epsilon(1e-12));
    }
}

TEST_CASE("matmul gradient vs finite differences") {
  Tensor b = Tensor::leaf({3, 2}, {1.5, -0.4, 0.2, 0.9, -1.1, 0.3});
  Tensor x0 = Tensor::leaf({2, 3}, {0.3, -1.2, 0.5, 2.0, 0.1, -0.7});
  double err = finite_diff_check(
      [&](Tape& t, const Tensor& x) { return sum(t, matmul(t, x, b)); }, x0, 1e-5);
  CHECK(err < 1e-8);
}

TEST_CASE("elementwise ops") {
  Tape tape;
  Tensor x = Tensor::leaf({3}, {1.0, -2.0, 0.5});
  Tensor zero = Tensor::leaf({3}, {0, 0, 0});
  CHECK(add(tape, x, zero).data() == x.data());

  Tensor z = Tensor::leaf({1}, {0.0});
  CHECK(silu(tape, z).data()[0] == 0.0);
  Tensor one = Tensor::leaf({1}, {1.0});
  CHECK(silu(tape, one).data()[0] == doctest::Approx(0.7310585786300049).epsilon(1e-12));

  Tensor s = scale(tape, x, 2.0);
  CHECK(s.data()[0] == 2.0);
  CHECK(s.data()[1] == -4.0);
}

TEST_CASE("trailing broadcast add and its backward") {
  Tape tape;
  Tensor a = Tensor::leaf({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor b = Tensor::leaf({3}, {10, 20, 30}, true);
  Tensor y = add(tape, a, b);
  CHECK(y.data() == std::vector<double>{11, 22, 33, 14, 25, 36});
  tape.backward(sum(tape, y));
  CHECK(b.grad() == std::vector<double>{2, 2, 2});
  CHECK(a.grad() == std::vector<double>(6, 1.0));

  Tensor bad = Tensor::leaf({2}, {0, 0});
  CHECK_THROWS_AS(add(tape, a, bad), ContractError);
}

TEST_CASE("softmax oracle values") {
  Tape tape;
  Tensor x = Tensor::leaf({2}, {0.0, 0.0});
  auto y = softmax_lastdim(tape, x);
  CHECK(y.data()[0] == doctest::Approx(0.5));
  CHECK(y.data()[1] == doctest::Approx(0.5));

  Tensor big = Tensor::leaf({2}, {1000.0, 1000.0});
  auto yb = softmax_lastdim(tape, big);
  CHECK(yb.data()[0] == doctest::Approx(0.5));
  CHECK(std::isfinite(yb.data()[1]));

  Tensor q = Tensor::leaf({2}, {0.0, std::log(3.0)});
  auto yq = softmax_lastdim(tape, q);
  CHECK(yq.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(yq.data()[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(7);
  std::vector<double> vals(4 * 9);
  for (double& v : vals) v = rng.normal(0, 3.0);
  Tape tape;
  Tensor x = Tensor::leaf({4, 9}, vals);
  Tensor y = softmax_lastdim(tape, x);
  for (int r = 0; r < 4; ++r) {
    double s = 0;
    for (int i = 0; i < 9; ++i) s += y.data()[r * 9 + i];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("rms_norm basics") {
  Tape tape;
  Tensor w = Tensor::leaf({4}, {1, 1, 1, 1});
  Tensor x = Tensor::leaf({4}, {1, 1, 1, 1});
  Tensor y = rms_norm(tape, x, w);
  for (double v : y.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-5));

  // Scale invariance up to the epsilon contribution.
  Tensor xs = Tensor::leaf({4}, {3, 3, 3, 3});
  Tensor ys = rms_norm(tape, xs, w);
  for (int i = 0; i < 4; ++i)
    CHECK(ys.data()[i] == doctest::Approx(y.data()[i]).epsilon(1e-6));

  Tensor wbad = Tensor::leaf({3}, {1, 1, 1});
  CHECK_THROWS_AS(rms_norm(tape, x, wbad), ContractError);
}

TEST_CASE("rms_norm gradient vs finite differences") {
  Tensor w = Tensor::leaf({5}, {0.9, 1.1, 1.0, 0.7, 1.3});
  Tensor x0 = Tensor::leaf({2, 5}, {0.3, -1.2, 0.5, 2.0, 0.1, -0.7, 0.4, 1.9, -0.2, 0.8});
  double err = finite_diff_check(
      [&](Tape& t, const Tensor& x) {
        Tensor y = rms_norm(t, x, w);
        return sum(t, mul(t, y, y));
      },
      x0, 1e-4);
  CHECK(err < 1e-3);
}

TEST_CASE("cross_entropy oracles") {
  const int64_t v = 7;
  Tape tape;
  Tensor logits = Tensor::leaf({1, 2, v}, std::vector<double>(2 * v, 0.0));
  std::vector<int32_t> targets{3, 5};
  std::vector<uint8_t> mask{1, 1};
  auto r = cross_entropy(tape, logits, targets, mask);
  CHECK(r.loss.item() == doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-12));
  CHECK(r.masked_count == 2);

  // Masked positions do not influence the loss.
  std::vector<uint8_t> mask2{1, 0};
  std::vector<int32_t> t_a{3, 0}, t_b{3, 6};
  Tape ta, tb;
  auto ra = cross_entropy(ta, logits, t_a, mask2);
  auto rb = cross_entropy(tb, logits, t_b, mask2);
  CHECK(ra.loss.item() == rb.loss.item());

  // Two-class hand case.
  Tape tc;
  Tensor l2 = Tensor::leaf({1, 1, 2}, {0.0, std::log(3.0)});
  auto rc = cross_entropy(tc, l2, {1}, {1});
  CHECK(rc.loss.item() == doctest::Approx(-std::log(0.75)).epsilon(1e-12));

  Tape td;
  CHECK_THROWS_AS(cross_entropy(td, logits, targets, {0, 0}), DataError);
}

TEST_CASE("cross_entropy gradient vs finite differences") {
  Rng rng(3);
  std::vector<double> vals(2 * 3 * 5);
  for (double& x : vals) x = rng.normal(0, 1.0);
  Tensor l0 = Tensor::leaf({2, 3, 5}, vals);
  std::vector<int32_t> targets{1, 4, 0, 2, 2, 3};
  std::vector<uint8_t> mask{1, 0, 1, 1, 1, 0};
  double err = finite_diff_check(
      [&](Tape& t, const Tensor& x) { return cross_entropy(t, x, targets, mask).loss; }, l0,
      1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("backward basics and contract errors") {
  Tape tape;
  Tensor x = Tensor::leaf({4}, {1, 2, 3, 4}, true);
  Tensor s = sum(tape, x);
  tape.backward(s);
  CHECK(x.grad() == std::vector<double>(4, 1.0));

  Tape t2;
  Tensor a = Tensor::leaf({1}, {2.0}, true);
  Tensor b = Tensor::leaf({1}, {3.0}, true);
  Tensor p = mul(t2, a, b);
  t2.backward(p);
  CHECK(a.grad()[0] == 3.0);
  CHECK(b.grad()[0] == 2.0);

  Tape t3;
  Tensor nonscalar = Tensor::leaf({2}, {1, 2}, true);
  Tensor y = add(t3, nonscalar, nonscalar);
  CHECK_THROWS_AS(t3.backward(y), ContractError);
}

TEST_CASE("tape replay is bit-deterministic") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    std::vector<double> xv(12), wv(4);
    for (double& v : xv) v = rng.normal(0, 1);
    for (double& v : wv) v = rng.normal(0, 1);
    Tape tape;
    Tensor x = Tensor::leaf({3, 4}, xv, true);
    Tensor w = Tensor::leaf({4}, wv, true);
    Tensor y = rms_norm(tape, x, w);
    Tensor l = sum(tape, mul(tape, y, silu(tape, y)));
    tape.backward(l);
    return std::make_pair(x.grad(), w.grad());
  };
  auto [g1, gw1] = run(11);
  auto [g2, gw2] = run(11);
  CHECK(g1 == g2);
  CHECK(gw1 == gw2);
}

TEST_CASE("finite_diff_check oracles") {
  // f(x) = sum(x^2): analytic gradient 2x.
  Tensor x = Tensor::leaf({2}, {1.0, 2.0});
  double err = finite_diff_check(
      [](Tape& t, const Tensor& v) { return sum(t, mul(t, v, v)); }, x, 1e-5);
  CHECK(err < 1e-6);

  // Linear f is exact under central differences.
  double err_lin = finite_diff_check(
      [](Tape& t, const Tensor& v) { return sum(t, scale(t, v, 3.0)); }, x, 1e-3);
  CHECK(err_lin < 1e-10);
}

TEST_CASE("post-grad hooks fire once gradient is complete") {
  Tape tape;
  Tensor w = Tensor::leaf({2}, {1.0, 2.0}, true);
  w.mark_param("w");
  Tensor a = mul(tape, w, w);       // uses w twice in one node
  Tensor b = add(tape, a, w);       // uses w again later
  Tensor loss = sum(tape, b);
  std::vector<double> seen;
  tape.add_post_grad_hook(w, [&](Tensor& p) { seen = p.grad(); });
  tape.backward(loss);
  // d/dw sum(w*w + w) = 2w + 1.
  REQUIRE(seen.size() == 2);
  CHECK(seen[0] == doctest::Approx(3.0));
  CHECK(seen[1] == doctest::Approx(5.0));
  CHECK(seen == w.grad());
}

TEST_CASE("param grad byte instrumentation") {
  RuntimeStats stats;
  set_runtime_stats(&stats);
  {
    Tape tape;
    Tensor w = Tensor::leaf({8}, std::vector<double>(8, 1.0), true);
    w.mark_param("w");
    Tensor loss = sum(tape, mul(tape, w, w));
    tape.backward(loss);
    CHECK(stats.param_grad_bytes == 8 * 8);
    w.drop_grad();
    CHECK(stats.param_grad_bytes == 0);
    CHECK(stats.param_grad_bytes_peak == 8 * 8);
  }
  set_runtime_stats(nullptr);
}
