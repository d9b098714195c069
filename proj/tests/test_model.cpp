#include <doctest.h>

#include <cmath>

#include "minicollie/model.hpp"

using namespace minicollie;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double std = 1.0) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
  for (double& v : d) v = rng.normal(0, std);
  return Tensor::leaf(std::move(shape), std::move(d), false);
}

uint64_t params_checksum(const TransformerModel& m) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const Tensor& t : m.base_parameters())
    h = fnv1a64(t.data().data(), t.data().size() * sizeof(double), h);
  return h;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Central-difference check over every parameter of the model.
double model_grad_check(TransformerModel& m, const std::vector<int32_t>& ids, int64_t b,
                        int64_t s, const std::vector<int32_t>& targets,
                        const std::vector<uint8_t>& mask, double h) {
  auto loss_value = [&]() {
    Tape tape;
    Tensor logits = m.forward(tape, ids, b, s);
    return cross_entropy(tape, logits, targets, mask).loss.item();
  };
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor logits = m.forward(tape, ids, b, s);
    tape.backward(cross_entropy(tape, logits, targets, mask).loss);
    for (Tensor& p : m.base_parameters()) analytic.push_back(p.grad());
  }
  double worst = 0;
  auto params = m.base_parameters();
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = params[pi].data();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = loss_value();
      vals[i] = orig - h;
      const double fm = loss_value();
      vals[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double denom = std::max({std::abs(analytic[pi][i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[pi][i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("build_model determinism and parameter count") {
  ModelConfig cfg;
  cfg.hidden_size = 64;
  cfg.num_attention_heads = 4;
  cfg.num_hidden_layers = 2;
  cfg.vocab_size = 256;
  cfg.intermediate_size = 172;
  cfg.max_seq_len = 32;

  TransformerModel a = TransformerModel::build(cfg, 42);
  TransformerModel b = TransformerModel::build(cfg, 42);
  CHECK(params_checksum(a) == params_checksum(b));
  TransformerModel c = TransformerModel::build(cfg, 43);
  CHECK(params_checksum(a) != params_checksum(c));

  const int64_t H = cfg.hidden_size, I = cfg.intermediate_size, L = cfg.num_hidden_layers,
                V = cfg.vocab_size;
  const int64_t expected = V * H + L * (4 * H * H + 3 * H * I + 2 * H) + H + H * V;
  CHECK(a.count_params() == expected);
}

TEST_CASE("invalid config rejected") {
  ModelConfig cfg;
  cfg.hidden_size = 64;
  cfg.num_attention_heads = 3;
  CHECK_THROWS_WITH_AS(TransformerModel::build(cfg, 1), doctest::Contains("divisible"),
                       ConfigError);
  ModelConfig cfg2;
  cfg2.vocab_size = 0;
  CHECK_THROWS_AS(TransformerModel::build(cfg2, 1), ConfigError);
}

TEST_CASE("naive attention: single key returns v") {
  Rng rng(5);
  Tensor q = random_tensor(rng, {1, 2, 1, 4});
  Tensor k = random_tensor(rng, {1, 2, 1, 4});
  Tensor v = random_tensor(rng, {1, 2, 1, 4});
  Tape tape;
  Tensor out = naive_attention(tape, q, k, v, true);
  CHECK(max_abs_diff(out.data(), v.data()) < 1e-12);
}

TEST_CASE("naive attention: identical keys give causal running average") {
  // s = 2 with equal key rows: row 0 sees v0; row 1 averages v0 and v1.
  Tensor q = Tensor::leaf({1, 1, 2, 2}, {0.3, -0.2, 1.0, 0.5});
  Tensor k = Tensor::leaf({1, 1, 2, 2}, {0.7, -0.1, 0.7, -0.1});
  Tensor v = Tensor::leaf({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  Tape tape;
  Tensor out = naive_attention(tape, q, k, v, true);
  CHECK(out.data()[0] == doctest::Approx(1.0));
  CHECK(out.data()[1] == doctest::Approx(2.0));
  CHECK(out.data()[2] == doctest::Approx(2.0));
  CHECK(out.data()[3] == doctest::Approx(3.0));
}

TEST_CASE("naive attention gradient vs finite differences") {
  Rng rng(9);
  Tensor k = random_tensor(rng, {1, 1, 3, 2});
  Tensor v = random_tensor(rng, {1, 1, 3, 2});
  Tensor q0 = random_tensor(rng, {1, 1, 3, 2});
  double err = finite_diff_check(
      [&](Tape& t, const Tensor& q) {
        Tensor o = naive_attention(t, q, k, v, true);
        return sum(t, mul(t, o, o));
      },
      q0, 1e-5);
  CHECK(err < 1e-3);
}

TEST_CASE("tiled attention equals naive for every block size") {
  Rng rng(17);
  const int64_t s = 4;
  Tensor q = random_tensor(rng, {1, 1, s, 2});
  Tensor k = random_tensor(rng, {1, 1, s, 2});
  Tensor v = random_tensor(rng, {1, 1, s, 2});

  Tape tn;
  Tensor ref = naive_attention(tn, q, k, v, true);

  for (int64_t block : {int64_t(1), int64_t(2), s / 2, s, s + 7}) {
    Tape tt;
    Tensor out = tiled_attention(tt, q, k, v, true, block);
    CHECK(max_abs_diff(out.data(), ref.data()) < 1e-5);
    if (block >= s) CHECK(max_abs_diff(out.data(), ref.data()) < 1e-12);
  }

  Tape te;
  CHECK_THROWS_AS(tiled_attention(te, q, k, v, true, 0), ConfigError);
}

TEST_CASE("tiled attention gradients match the naive path") {
  Rng rng(23);
  const int64_t s = 6;
  auto make_inputs = [&](uint64_t seed) {
    Rng r(seed);
    return std::array<Tensor, 3>{random_tensor(r, {2, 2, s, 4}), random_tensor(r, {2, 2, s, 4}),
                                 random_tensor(r, {2, 2, s, 4})};
  };
  auto [q1, k1, v1] = make_inputs(100);
  auto [q2, k2, v2] = make_inputs(100);
  for (Tensor* t : {&q1, &k1, &v1, &q2, &k2, &v2}) t->set_requires_grad(true);

  Tape tn;
  tn.backward(sum(tn, mul(tn, naive_attention(tn, q1, k1, v1, true),
                          naive_attention(tn, q1, k1, v1, true))));
  Tape tt;
  tt.backward(sum(tt, mul(tt, tiled_attention(tt, q2, k2, v2, true, 2),
                          tiled_attention(tt, q2, k2, v2, true, 2))));
  CHECK(max_abs_diff(q1.grad(), q2.grad()) < 1e-8);
  CHECK(max_abs_diff(k1.grad(), k2.grad()) < 1e-8);
  CHECK(max_abs_diff(v1.grad(), v2.grad()) < 1e-8);
}

TEST_CASE("tiled attention gradient vs finite differences") {
  Rng rng(31);
  Tensor k = random_tensor(rng, {1, 1, 5, 3});
  Tensor v = random_tensor(rng, {1, 1, 5, 3});
  Tensor q0 = random_tensor(rng, {1, 1, 5, 3});
  for (Tensor* base : {&k, &v}) (void)base;
  double err = finite_diff_check(
      [&](Tape& t, const Tensor& q) {
        Tensor o = tiled_attention(t, q, k, v, true, 2);
        return sum(t, mul(t, o, o));
      },
      q0, 1e-5);
  CHECK(err < 1e-3);
}

TEST_CASE("attention score buffer accounting") {
  RuntimeStats stats;
  set_runtime_stats(&stats);
  Rng rng(40);
  const int64_t s = 16;
  Tensor q = random_tensor(rng, {1, 1, s, 2});
  Tensor k = random_tensor(rng, {1, 1, s, 2});
  Tensor v = random_tensor(rng, {1, 1, s, 2});
  {
    Tape t;
    naive_attention(t, q, k, v, true);
  }
  CHECK(stats.attn_score_elems_per_head_peak == s * s);
  stats.reset_peaks();
  {
    Tape t;
    tiled_attention(t, q, k, v, true, 4);
  }
  CHECK(stats.attn_score_elems_per_head_peak == s * 4);
  CHECK(stats.attn_score_elems_per_head_peak < s * s);
  set_runtime_stats(nullptr);
}

TEST_CASE("forward_logits batch independence and causality") {
  ModelConfig cfg;
  cfg.hidden_size = 32;
  cfg.num_attention_heads = 2;
  cfg.num_hidden_layers = 2;
  cfg.intermediate_size = 48;
  cfg.vocab_size = 40;
  cfg.max_seq_len = 8;
  TransformerModel m = TransformerModel::build(cfg, 7);

  std::vector<int32_t> ids{1, 2, 3, 4, 5, 6, 7, 8};  // two rows of four
  Tape t1;
  Tensor l1 = m.forward(t1, ids, 2, 4);
  std::vector<int32_t> swapped{5, 6, 7, 8, 1, 2, 3, 4};
  Tape t2;
  Tensor l2 = m.forward(t2, swapped, 2, 4);
  const int64_t row = 4 * cfg.vocab_size;
  for (int64_t i = 0; i < row; ++i) {
    CHECK(l1.data()[i] == l2.data()[row + i]);
    CHECK(l1.data()[row + i] == l2.data()[i]);
  }

  // Causality: changing a future token leaves earlier logits unchanged.
  std::vector<int32_t> tail{1, 2, 3, 4};
  std::vector<int32_t> tail2{1, 2, 3, 39};
  Tape t3, t4;
  Tensor a = m.forward(t3, tail, 1, 4);
  Tensor b = m.forward(t4, tail2, 1, 4);
  for (int64_t i = 0; i < 3 * cfg.vocab_size; ++i) CHECK(a.data()[i] == b.data()[i]);

  // Out-of-range token names the offending index.
  std::vector<int32_t> bad{1, 2, 99, 4};
  Tape t5;
  CHECK_THROWS_WITH_AS(m.forward(t5, bad, 1, 4), doctest::Contains("99"), DataError);
}

TEST_CASE("tiled and naive model forwards agree") {
  ModelConfig cfg;
  cfg.hidden_size = 32;
  cfg.num_attention_heads = 2;
  cfg.num_hidden_layers = 2;
  cfg.intermediate_size = 48;
  cfg.vocab_size = 40;
  cfg.max_seq_len = 8;
  cfg.attention_block_size = 3;

  TransformerModel naive = TransformerModel::build(cfg, 7);
  cfg.use_tiled_attention = true;
  TransformerModel tiled = TransformerModel::build(cfg, 7);

  std::vector<int32_t> ids{1, 2, 3, 4, 5, 6, 7, 8};
  Tape t1, t2;
  Tensor a = naive.forward(t1, ids, 2, 4);
  Tensor b = tiled.forward(t2, ids, 2, 4);
  CHECK(max_abs_diff(a.data(), b.data()) < 1e-5);
}

TEST_CASE("greedy decode basics") {
  ModelConfig cfg;
  cfg.hidden_size = 16;
  cfg.num_attention_heads = 2;
  cfg.num_hidden_layers = 1;
  cfg.intermediate_size = 24;
  cfg.vocab_size = 12;
  cfg.max_seq_len = 10;
  TransformerModel m = TransformerModel::build(cfg, 3);

  std::vector<int32_t> prompt{1, 2, 3};
  CHECK(m.greedy_decode(prompt, 0) == prompt);
  auto a = m.greedy_decode(prompt, 4);
  auto b = m.greedy_decode(prompt, 4);
  CHECK(a == b);
  CHECK(a.size() <= prompt.size() + 4);

  std::vector<int32_t> too_long(11, 1);
  CHECK_THROWS_AS(m.greedy_decode(too_long, 1), DataError);
  CHECK_THROWS_AS(m.greedy_decode({}, 1), ContractError);
}

TEST_CASE("full toy transformer gradient check") {
  ModelConfig cfg;
  cfg.hidden_size = 8;
  cfg.num_attention_heads = 2;
  cfg.num_hidden_layers = 1;
  cfg.intermediate_size = 12;
  cfg.vocab_size = 11;
  cfg.max_seq_len = 6;
  TransformerModel m = TransformerModel::build(cfg, 99);

  std::vector<int32_t> ids{1, 4, 2, 9, 3, 7, 5, 0};
  std::vector<int32_t> targets{4, 2, 9, 10, 7, 5, 0, 6};
  std::vector<uint8_t> mask{0, 1, 1, 1, 0, 1, 1, 1};
  double err = model_grad_check(m, ids, 2, 4, targets, mask, 1e-4);
  CHECK(err < 1e-3);
}

TEST_CASE("tiled-path toy transformer gradient check") {
  ModelConfig cfg;
  cfg.hidden_size = 8;
  cfg.num_attention_heads = 2;
  cfg.num_hidden_layers = 1;
  cfg.intermediate_size = 12;
  cfg.vocab_size = 11;
  cfg.max_seq_len = 6;
  cfg.use_tiled_attention = true;
  cfg.attention_block_size = 2;
  TransformerModel m = TransformerModel::build(cfg, 99);

  std::vector<int32_t> ids{1, 4, 2, 9};
  std::vector<int32_t> targets{4, 2, 9, 10};
  std::vector<uint8_t> mask{1, 1, 1, 1};
  double err = model_grad_check(m, ids, 1, 4, targets, mask, 1e-4);
  CHECK(err < 1e-3);
}
