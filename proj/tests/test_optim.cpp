#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "minicollie/model.hpp"
#include "minicollie/optim.hpp"

using namespace minicollie;
using namespace minicollie::optim;

namespace {

// Independent single-scalar reference steppers, kept deliberately separate
// from the library implementations.

struct RefAdamW {
  double m = 0, v = 0;
  int t = 0;
  double step(double theta, double g, double lr, double b1, double b2, double eps, double wd) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    double mh = m / (1 - std::pow(b1, t));
    double vh = v / (1 - std::pow(b2, t));
    return theta - lr * (mh / (std::sqrt(vh) + eps) + wd * theta);
  }
};

struct RefLion {
  double m = 0;
  double step(double theta, double g, double lr, double b1, double b2, double wd) {
    double u = b1 * m + (1 - b1) * g;
    double s = u > 0 ? 1.0 : (u < 0 ? -1.0 : 0.0);
    double out = theta - lr * (s + wd * theta);
    m = b2 * m + (1 - b2) * g;
    return out;
  }
};

struct RefAdan {
  double m = 0, v = 0, n = 0, gp = 0;
  int t = 0;
  double step(double theta, double g, double lr, double b1, double b2, double b3, double eps,
              double wd) {
    ++t;
    double gd = t == 1 ? 0.0 : g - gp;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * gd;
    double nu = g + b2 * gd;
    n = b3 * n + (1 - b3) * nu * nu;
    double mh = m / (1 - std::pow(b1, t));
    double vh = v / (1 - std::pow(b2, t));
    double nh = n / (1 - std::pow(b3, t));
    gp = g;
    return (theta - lr * (mh + b2 * vh) / (std::sqrt(nh) + eps)) / (1 + lr * wd);
  }
};

struct RefSophia {
  double m = 0, h = 0;
  int t = 0;
  double step(double theta, double g, double lr, double b1, double b2, double rho, double eps,
              int interval, double wd) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    if ((t - 1) % interval == 0) h = b2 * h + (1 - b2) * g * g;
    double u = std::clamp(m / std::max(rho * h, eps), -1.0, 1.0);
    return theta - lr * u - lr * wd * theta;
  }
};

TransformerModel tiny_model(uint64_t seed) {
  ModelConfig cfg;
  cfg.hidden_size = 16;
  cfg.num_attention_heads = 2;
  cfg.num_hidden_layers = 1;
  cfg.intermediate_size = 24;
  cfg.vocab_size = 17;
  cfg.max_seq_len = 8;
  return TransformerModel::build(cfg, seed);
}

Tensor toy_loss(Tape& tape, const TransformerModel& m) {
  std::vector<int32_t> ids{1, 4, 2, 9, 3, 7, 5, 0};
  std::vector<int32_t> targets{4, 2, 9, 10, 7, 5, 0, 6};
  std::vector<uint8_t> mask{1, 1, 1, 1, 1, 1, 1, 1};
  Tensor logits = m.forward(tape, ids, 2, 4);
  return cross_entropy(tape, logits, targets, mask).loss;
}

}  // namespace

TEST_CASE("adamw oracle values") {
  auto cfg = OptimizerConfig::defaults_for(Kind::kAdamW);
  cfg.lr = 0.1;

  FlatOptimizer opt(cfg, 1);
  std::vector<double> p{1.0}, g{1.0};
  opt.step(p, g, cfg.lr);
  CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-7));

  // Zero gradient, zero weight decay: untouched.
  FlatOptimizer opt2(cfg, 3);
  std::vector<double> p2{1, -2, 3}, g2{0, 0, 0};
  for (int i = 0; i < 4; ++i) opt2.step(p2, g2, cfg.lr);
  CHECK(p2 == std::vector<double>{1, -2, 3});
}

TEST_CASE("steppers match scalar references over 100 random steps") {
  Rng rng(2024);
  const double wd = 0.01;

  auto cfg_a = OptimizerConfig::defaults_for(Kind::kAdamW);
  cfg_a.weight_decay = wd;
  FlatOptimizer adamw(cfg_a, 1);
  RefAdamW ref_a;

  auto cfg_l = OptimizerConfig::defaults_for(Kind::kLion);
  cfg_l.weight_decay = wd;
  FlatOptimizer lion(cfg_l, 1);
  RefLion ref_l;

  auto cfg_n = OptimizerConfig::defaults_for(Kind::kAdan);
  cfg_n.weight_decay = wd;
  FlatOptimizer adan(cfg_n, 1);
  RefAdan ref_n;

  auto cfg_s = OptimizerConfig::defaults_for(Kind::kSophia);
  cfg_s.weight_decay = wd;
  FlatOptimizer sophia(cfg_s, 1);
  RefSophia ref_s;

  std::vector<double> pa{0.5}, pl{0.5}, pn{0.5}, ps{0.5};
  double ra = 0.5, rl = 0.5, rn = 0.5, rs = 0.5;
  for (int i = 0; i < 100; ++i) {
    const double g = rng.normal(0, 1.0);
    std::vector<double> gv{g};
    adamw.step(pa, gv, cfg_a.lr);
    ra = ref_a.step(ra, g, cfg_a.lr, cfg_a.beta1, cfg_a.beta2, cfg_a.eps, wd);
    CHECK(std::abs(pa[0] - ra) < 1e-12);

    lion.step(pl, gv, cfg_l.lr);
    rl = ref_l.step(rl, g, cfg_l.lr, cfg_l.beta1, cfg_l.beta2, wd);
    CHECK(std::abs(pl[0] - rl) < 1e-12);

    adan.step(pn, gv, cfg_n.lr);
    rn = ref_n.step(rn, g, cfg_n.lr, cfg_n.beta1, cfg_n.beta2, cfg_n.beta3, cfg_n.eps, wd);
    CHECK(std::abs(pn[0] - rn) < 1e-12);

    sophia.step(ps, gv, cfg_s.lr);
    rs = ref_s.step(rs, g, cfg_s.lr, cfg_s.beta1, cfg_s.beta2, cfg_s.sophia_rho, cfg_s.eps,
                    cfg_s.update_interval, wd);
    CHECK(std::abs(ps[0] - rs) < 1e-12);
  }
}

TEST_CASE("lion oracle values and step-magnitude bound") {
  auto cfg = OptimizerConfig::defaults_for(Kind::kLion);
  cfg.lr = 0.1;
  FlatOptimizer opt(cfg, 1);
  std::vector<double> p{1.0}, g{1.0};
  opt.step(p, g, cfg.lr);
  CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-12));
  // Exactly-zero momentum and gradient: sign(0) = 0 keeps parameters put.
  FlatOptimizer opt0(cfg, 1);
  std::vector<double> pz{2.0}, gz{0.0};
  opt0.step(pz, gz, cfg.lr);
  CHECK(pz[0] == 2.0);

  // |update| == lr regardless of gradient scale.
  Rng rng(5);
  FlatOptimizer opt2(cfg, 1);
  std::vector<double> pv{0.0};
  for (int i = 0; i < 20; ++i) {
    const double before = pv[0];
    std::vector<double> gv{rng.normal(0, 100.0)};
    opt2.step(pv, gv, cfg.lr);
    CHECK(std::abs(pv[0] - before) <= cfg.lr + 1e-15);
  }
}

TEST_CASE("adan first step reduces to an adam-like step") {
  auto cfg = OptimizerConfig::defaults_for(Kind::kAdan);
  cfg.lr = 0.05;
  FlatOptimizer opt(cfg, 1);
  std::vector<double> p{1.0}, g{0.7};
  opt.step(p, g, cfg.lr);
  // v-term is zero on the first step: theta -= lr * g / (|g| + eps).
  const double expect = 1.0 - cfg.lr * 0.7 / (std::sqrt(0.7 * 0.7) + cfg.eps);
  CHECK(p[0] == doctest::Approx(expect).epsilon(1e-12));

  // Runtime state: three EMA buffers plus the previous gradient.
  FlatOptimizer big(cfg, 10);
  CHECK(big.state_bytes_runtime() == 4 * 10 * sizeof(double));
  auto cfg_a = OptimizerConfig::defaults_for(Kind::kAdamW);
  FlatOptimizer adamw(cfg_a, 10);
  CHECK(adamw.state_bytes_runtime() == 2 * 10 * sizeof(double));
}

TEST_CASE("sophia stays put without momentum and bounds its step") {
  auto cfg = OptimizerConfig::defaults_for(Kind::kSophia);
  cfg.lr = 0.02;
  FlatOptimizer opt(cfg, 2);
  std::vector<double> p{1.0, -1.0}, g{0.0, 0.0};
  opt.step(p, g, cfg.lr);
  CHECK(p == std::vector<double>{1.0, -1.0});

  Rng rng(11);
  FlatOptimizer opt2(cfg, 1);
  std::vector<double> pv{0.3};
  for (int i = 0; i < 30; ++i) {
    const double before = pv[0];
    std::vector<double> gv{rng.normal(0, 10.0)};
    opt2.step(pv, gv, cfg.lr);
    CHECK(std::abs(pv[0] - before) <= cfg.lr + 1e-15);
  }
}

TEST_CASE("lomo equals stored-gradient SGD over five toy-model steps") {
  TransformerModel lomo_model = tiny_model(77);
  TransformerModel sgd_model = tiny_model(77);
  const double lr = 0.05;

  for (int step = 0; step < 5; ++step) {
    auto params = lomo_model.trainable_parameters();
    lomo_fused_backward_step(params, [&](Tape& t) { return toy_loss(t, lomo_model); }, lr);

    // Stored-gradient SGD.
    Tape tape;
    Tensor loss = toy_loss(tape, sgd_model);
    tape.backward(loss);
    for (Tensor& p : sgd_model.trainable_parameters()) {
      auto& vals = p.data();
      const auto& g = p.grad();
      for (size_t i = 0; i < vals.size(); ++i) vals[i] -= lr * g[i];
      p.drop_grad();
    }
  }

  auto a = lomo_model.base_parameters();
  auto b = sgd_model.base_parameters();
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < a[i].data().size(); ++j)
      CHECK(std::abs(a[i].data()[j] - b[i].data()[j]) < 1e-6);
}

TEST_CASE("lomo with lr=0 leaves parameters unchanged") {
  TransformerModel m = tiny_model(5);
  auto before = m.base_parameters();
  std::vector<std::vector<double>> snap;
  for (const Tensor& t : before) snap.push_back(t.data());
  auto params = m.trainable_parameters();
  lomo_fused_backward_step(params, [&](Tape& t) { return toy_loss(t, m); }, 0.0);
  auto after = m.base_parameters();
  for (size_t i = 0; i < after.size(); ++i) CHECK(after[i].data() == snap[i]);
}

TEST_CASE("lomo clip mode matches manually clipped SGD") {
  TransformerModel a = tiny_model(13);
  TransformerModel b = tiny_model(13);
  const double lr = 0.1, clip = 0.5;

  auto params_a = a.trainable_parameters();
  lomo_fused_backward_step(params_a, [&](Tape& t) { return toy_loss(t, a); }, lr, clip);

  Tape tape;
  tape.backward(toy_loss(tape, b));
  double norm_sq = 0;
  for (Tensor& p : b.trainable_parameters())
    for (double g : p.grad()) norm_sq += g * g;
  const double scale = std::min(1.0, clip / std::sqrt(norm_sq));
  for (Tensor& p : b.trainable_parameters()) {
    auto& vals = p.data();
    const auto& g = p.grad();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] -= lr * scale * g[i];
  }

  auto pa = a.base_parameters();
  auto pb = b.base_parameters();
  for (size_t i = 0; i < pa.size(); ++i)
    for (size_t j = 0; j < pa[i].data().size(); ++j)
      CHECK(std::abs(pa[i].data()[j] - pb[i].data()[j]) < 1e-9);
}

TEST_CASE("fused optimizers bound peak gradient storage") {
  RuntimeStats stats;
  set_runtime_stats(&stats);
  {
    TransformerModel m = tiny_model(3);
    int64_t largest = 0;
    for (const Tensor& p : m.base_parameters())
      largest = std::max(largest, p.numel() * static_cast<int64_t>(sizeof(double)));

    stats.reset_peaks();
    auto params = m.trainable_parameters();
    lomo_fused_backward_step(params, [&](Tape& t) { return toy_loss(t, m); }, 0.01);
    CHECK(stats.param_grad_bytes_peak <= largest);
    CHECK(stats.param_grad_bytes == 0);

    stats.reset_peaks();
    auto cfg = OptimizerConfig::defaults_for(Kind::kAdaLomo);
    AdaLomoState state(cfg, params);
    adalomo_fused_step(params, [&](Tape& t) { return toy_loss(t, m); }, 0.01, state);
    CHECK(stats.param_grad_bytes_peak <= largest);

    // Stored-gradient backward touches every parameter at once.
    stats.reset_peaks();
    Tape tape;
    tape.backward(toy_loss(tape, m));
    int64_t total = 0;
    for (const Tensor& p : m.base_parameters()) total += p.numel() * 8;
    CHECK(stats.param_grad_bytes_peak == total);
  }
  set_runtime_stats(nullptr);
}

TEST_CASE("adalomo factored estimate is exact for rank-1 squared gradients") {
  // g = outer(a, b) gives g^2 = outer(a^2, b^2), which the row/column
  // factorization reconstructs exactly on the first step.
  const int64_t R = 3, C = 4;
  std::vector<double> av{0.5, -1.5, 2.0}, bv{1.0, 0.25, -2.0, 0.5};
  std::vector<double> gv(R * C);
  for (int64_t i = 0; i < R; ++i)
    for (int64_t j = 0; j < C; ++j) gv[static_cast<size_t>(i * C + j)] = av[i] * bv[j];

  Tensor p = Tensor::leaf({R, C}, std::vector<double>(R * C, 1.0), true);
  p.mark_param("w");
  auto cfg = OptimizerConfig::defaults_for(Kind::kAdaLomo);
  AdaLomoState state(cfg, {p});

  p.grad() = gv;
  std::vector<double> before = p.data();
  state.apply(p, 0.01);

  // v-hat must equal g^2 exactly, so the preconditioned direction is
  // sign(g) / sqrt(1 + eps-ish); check via the implied per-element ratio.
  for (int64_t i = 0; i < R; ++i)
    for (int64_t j = 0; j < C; ++j) {
      const size_t idx = static_cast<size_t>(i * C + j);
      const double delta = before[idx] - p.data()[idx];
      const double g = gv[idx];
      const double expected_dir = g / std::sqrt(g * g + cfg.eps);
      if (std::abs(g) > 1e-12) {
        // all deltas share one positive scale factor
        CHECK(delta / expected_dir > 0.0);
        static double ratio = 0.0;
        if (ratio == 0.0) ratio = delta / expected_dir;
        CHECK(delta / expected_dir == doctest::Approx(ratio).epsilon(1e-9));
      }
    }
}

TEST_CASE("adalomo state bytes are sublinear") {
  auto cfg = OptimizerConfig::defaults_for(Kind::kAdaLomo);
  Tensor mat = Tensor::leaf({6, 9}, std::vector<double>(54, 0.0), true);
  Tensor vec = Tensor::leaf({7}, std::vector<double>(7, 0.0), true);
  AdaLomoState state(cfg, {mat, vec});
  CHECK(state.state_bytes_runtime() == (6 + 9 + 7) * sizeof(double));
}

TEST_CASE("analytic state_bytes") {
  PrecisionPolicy fp16;  // 2-byte params, master copy
  CHECK(state_bytes(Kind::kLomo, 1000, fp16) == 0);
  CHECK(state_bytes(Kind::kAdamW, 100, fp16) == 1200);
  CHECK(state_bytes(Kind::kAdan, 100, fp16) - state_bytes(Kind::kAdamW, 100, fp16) == 400);
  CHECK(state_bytes(Kind::kSophia, 100, fp16) == state_bytes(Kind::kAdamW, 100, fp16));
  CHECK(state_bytes(Kind::kLion, 100, fp16) + 400 == state_bytes(Kind::kAdamW, 100, fp16));

  PrecisionPolicy fp32;
  fp32.param_dtype_bytes = 4;
  CHECK(state_bytes(Kind::kAdamW, 100, fp32) == 800);  // no master copy

  std::vector<Shape> shapes{{8, 16}, {32}};
  CHECK(state_bytes(Kind::kAdaLomo, 8 * 16 + 32, fp16, shapes) == (8 + 16) * 4 + 32 * 4);
  CHECK_THROWS_AS(state_bytes(Kind::kAdaLomo, 10, fp16), ConfigError);
}

TEST_CASE("optimizer config validation") {
  auto cfg = OptimizerConfig::defaults_for(Kind::kAdamW);
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.lr = 1e-3;
  cfg.beta1 = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(parse_kind("sgd"), ConfigError);
  CHECK(parse_kind("adalomo") == Kind::kAdaLomo);
}
