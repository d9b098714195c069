#include "minicollie/optim.hpp"

#include <algorithm>
#include <cmath>

namespace minicollie::optim {

Kind parse_kind(const std::string& name) {
  if (name == "adamw") return Kind::kAdamW;
  if (name == "lion") return Kind::kLion;
  if (name == "adan") return Kind::kAdan;
  if (name == "sophia") return Kind::kSophia;
  if (name == "lomo") return Kind::kLomo;
  if (name == "adalomo") return Kind::kAdaLomo;
  throw ConfigError("unknown optimizer kind '" + name + "'");
}

std::string kind_name(Kind kind) {
  switch (kind) {
    case Kind::kAdamW: return "adamw";
    case Kind::kLion: return "lion";
    case Kind::kAdan: return "adan";
    case Kind::kSophia: return "sophia";
    case Kind::kLomo: return "lomo";
    case Kind::kAdaLomo: return "adalomo";
  }
  throw ConfigError("unknown optimizer kind");
}

bool is_fused(Kind kind) { return kind == Kind::kLomo || kind == Kind::kAdaLomo; }

OptimizerConfig OptimizerConfig::defaults_for(Kind kind) {
  OptimizerConfig cfg;
  cfg.kind = kind;
  switch (kind) {
    case Kind::kAdamW:
      cfg.beta1 = 0.9;
      cfg.beta2 = 0.999;
      break;
    case Kind::kLion:
      cfg.beta1 = 0.9;
      cfg.beta2 = 0.99;
      break;
    case Kind::kAdan:
      cfg.beta1 = 0.98;
      cfg.beta2 = 0.92;
      cfg.beta3 = 0.99;
      break;
    case Kind::kSophia:
      cfg.beta1 = 0.965;
      cfg.beta2 = 0.99;
      break;
    case Kind::kLomo:
      break;
    case Kind::kAdaLomo:
      cfg.beta2 = 0.99;
      cfg.eps = 1e-30;
      break;
  }
  return cfg;
}

void OptimizerConfig::validate() const {
  if (lr <= 0) throw ConfigError("optimizer: lr must be > 0");
  if (eps <= 0) throw ConfigError("optimizer: eps must be > 0");
  for (double b : {beta1, beta2, beta3})
    if (b < 0 || b >= 1) throw ConfigError("optimizer: betas must lie in [0, 1)");
  if (weight_decay < 0) throw ConfigError("optimizer: weight_decay must be >= 0");
  if (update_interval < 1) throw ConfigError("optimizer: update_interval must be >= 1");
}

// ---- FlatOptimizer ----------------------------------------------------------

FlatOptimizer::FlatOptimizer(const OptimizerConfig& cfg, size_t owned_len) : cfg_(cfg) {
  switch (cfg.kind) {
    case Kind::kAdamW:
      m_.assign(owned_len, 0.0);
      v_.assign(owned_len, 0.0);
      break;
    case Kind::kLion:
      m_.assign(owned_len, 0.0);
      break;
    case Kind::kAdan:
      m_.assign(owned_len, 0.0);
      v_.assign(owned_len, 0.0);
      n_.assign(owned_len, 0.0);
      g_prev_.assign(owned_len, 0.0);
      break;
    case Kind::kSophia:
      m_.assign(owned_len, 0.0);
      h_.assign(owned_len, 0.0);
      break;
    case Kind::kLomo:
    case Kind::kAdaLomo:
      throw ContractError("FlatOptimizer: " + kind_name(cfg.kind) +
                          " is a fused optimizer and keeps no flat state");
  }
}

void FlatOptimizer::step(std::span<double> p, std::span<const double> g, double lr) {
  if (p.size() != g.size())
    throw ContractError("optimizer step: params/grads length mismatch: " +
                        std::to_string(p.size()) + " vs " + std::to_string(g.size()));
  ++t_;
  switch (cfg_.kind) {
    case Kind::kAdamW: step_adamw(p, g, lr); break;
    case Kind::kLion: step_lion(p, g, lr); break;
    case Kind::kAdan: step_adan(p, g, lr); break;
    case Kind::kSophia: step_sophia(p, g, lr); break;
    default: throw ContractError("FlatOptimizer: fused kind");
  }
}

void FlatOptimizer::step_adamw(std::span<double> p, std::span<const double> g, double lr) {
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (size_t i = 0; i < p.size(); ++i) {
    m_[i] = b1 * m_[i] + (1 - b1) * g[i];
    v_[i] = b2 * v_[i] + (1 - b2) * g[i] * g[i];
    const double mhat = m_[i] / c1;
    const double vhat = v_[i] / c2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
  }
}

void FlatOptimizer::step_lion(std::span<double> p, std::span<const double> g, double lr) {
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  for (size_t i = 0; i < p.size(); ++i) {
    const double u = b1 * m_[i] + (1 - b1) * g[i];
    const double s = u > 0 ? 1.0 : (u < 0 ? -1.0 : 0.0);  // sign(0) = 0
    p[i] -= lr * (s + cfg_.weight_decay * p[i]);
    m_[i] = b2 * m_[i] + (1 - b2) * g[i];
  }
}

void FlatOptimizer::step_adan(std::span<double> p, std::span<const double> g, double lr) {
  const double b1 = cfg_.beta1, b2 = cfg_.beta2, b3 = cfg_.beta3;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double c3 = 1.0 - std::pow(b3, static_cast<double>(t_));
  for (size_t i = 0; i < p.size(); ++i) {
    const double gd = t_ == 1 ? 0.0 : g[i] - g_prev_[i];
    m_[i] = b1 * m_[i] + (1 - b1) * g[i];
    v_[i] = b2 * v_[i] + (1 - b2) * gd;
    const double nu = g[i] + b2 * gd;
    n_[i] = b3 * n_[i] + (1 - b3) * nu * nu;
    const double mhat = m_[i] / c1;
    const double vhat = v_[i] / c2;
    const double nhat = n_[i] / c3;
    p[i] = (p[i] - lr * (mhat + b2 * vhat) / (std::sqrt(nhat) + cfg_.eps)) /
           (1.0 + lr * cfg_.weight_decay);
    g_prev_[i] = g[i];
  }
}

void FlatOptimizer::step_sophia(std::span<double> p, std::span<const double> g, double lr) {
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const bool refresh = (t_ - 1) % cfg_.update_interval == 0;
  for (size_t i = 0; i < p.size(); ++i) {
    m_[i] = b1 * m_[i] + (1 - b1) * g[i];
    if (refresh) h_[i] = b2 * h_[i] + (1 - b2) * g[i] * g[i];  // squared-gradient proxy
    const double denom = std::max(cfg_.sophia_rho * h_[i], cfg_.eps);
    const double u = std::clamp(m_[i] / denom, -1.0, 1.0);
    p[i] -= lr * u + lr * cfg_.weight_decay * p[i];
  }
}

uint64_t FlatOptimizer::state_bytes_runtime() const {
  return (m_.size() + v_.size() + n_.size() + h_.size() + g_prev_.size()) * sizeof(double);
}

std::vector<std::pair<std::string, std::vector<double>*>> FlatOptimizer::buffers() {
  std::vector<std::pair<std::string, std::vector<double>*>> out;
  if (!m_.empty()) out.emplace_back("m", &m_);
  if (!v_.empty()) out.emplace_back("v", &v_);
  if (!n_.empty()) out.emplace_back("n", &n_);
  if (!h_.empty()) out.emplace_back("h", &h_);
  if (!g_prev_.empty()) out.emplace_back("g_prev", &g_prev_);
  return out;
}

// ---- fused -----------------------------------------------------------------

void lomo_apply(Tensor& param, double lr, double scale) {
  const auto& g = param.grad();
  auto& p = param.data();
  const double f = lr * scale;
  for (size_t i = 0; i < p.size(); ++i) p[i] -= f * g[i];
}

AdaLomoState::AdaLomoState(const OptimizerConfig& cfg, const std::vector<Tensor>& params)
    : cfg_(cfg) {
  for (const Tensor& p : params) {
    Entry e;
    if (p.ndim() == 2) {
      e.factored = true;
      e.rows = p.dim(0);
      e.cols = p.dim(1);
      e.v_row.assign(static_cast<size_t>(e.rows), 0.0);
      e.v_col.assign(static_cast<size_t>(e.cols), 0.0);
    } else {
      e.v_full.assign(static_cast<size_t>(p.numel()), 0.0);
    }
    entries_.emplace_back(p.id(), std::move(e));
  }
}

AdaLomoState::Entry& AdaLomoState::entry_for(const Tensor& param) {
  for (auto& [id, e] : entries_)
    if (id == param.id()) return e;
  throw ContractError("adalomo: unknown parameter '" + param.name() + "'");
}

void AdaLomoState::apply(Tensor& param, double lr) {
  Entry& e = entry_for(param);
  const auto& g = param.grad();
  auto& p = param.data();
  const double b2 = cfg_.beta2;
  e.t += 1;
  const double corr = 1.0 - std::pow(b2, static_cast<double>(e.t));

  double theta_sq = 0.0;
  for (double x : p) theta_sq += x * x;
  const double rms_theta = std::sqrt(theta_sq / static_cast<double>(p.size()));
  // Adafactor-style learning-rate floor so zero-initialized tensors can move.
  const double lr_t = lr * std::max(1e-3, rms_theta);

  std::vector<double> u(p.size());
  if (e.factored) {
    const int64_t R = e.rows, C = e.cols;
    for (int64_t i = 0; i < R; ++i) {
      double acc = 0.0;
      for (int64_t j = 0; j < C; ++j) {
        const double gij = g[static_cast<size_t>(i * C + j)];
        acc += gij * gij;
      }
      e.v_row[static_cast<size_t>(i)] =
          b2 * e.v_row[static_cast<size_t>(i)] + (1 - b2) * (acc / static_cast<double>(C));
    }
    for (int64_t j = 0; j < C; ++j) {
      double acc = 0.0;
      for (int64_t i = 0; i < R; ++i) {
        const double gij = g[static_cast<size_t>(i * C + j)];
        acc += gij * gij;
      }
      e.v_col[static_cast<size_t>(j)] =
          b2 * e.v_col[static_cast<size_t>(j)] + (1 - b2) * (acc / static_cast<double>(R));
    }
    double row_mean = 0.0;
    for (double r : e.v_row) row_mean += r;
    row_mean /= static_cast<double>(R) * corr;
    for (int64_t i = 0; i < R; ++i) {
      const double vr = e.v_row[static_cast<size_t>(i)] / corr;
      for (int64_t j = 0; j < C; ++j) {
        const double vc = e.v_col[static_cast<size_t>(j)] / corr;
        const double vhat = vr * vc / std::max(row_mean, 1e-300);
        u[static_cast<size_t>(i * C + j)] =
            g[static_cast<size_t>(i * C + j)] / std::sqrt(vhat + cfg_.eps);
      }
    }
  } else {
    for (size_t i = 0; i < p.size(); ++i) {
      e.v_full[i] = b2 * e.v_full[i] + (1 - b2) * g[i] * g[i];
      u[i] = g[i] / std::sqrt(e.v_full[i] / corr + cfg_.eps);
    }
  }

  double u_sq = 0.0;
  for (double x : u) u_sq += x * x;
  const double rms_u = std::sqrt(u_sq / static_cast<double>(u.size()));
  const double damp = std::max(1.0, rms_u / cfg_.adalomo_clip);
  const double f = lr_t / damp;
  for (size_t i = 0; i < p.size(); ++i) p[i] -= f * u[i];
}

uint64_t AdaLomoState::state_bytes_runtime() const {
  uint64_t bytes = 0;
  for (const auto& [id, e] : entries_)
    bytes += (e.v_row.size() + e.v_col.size() + e.v_full.size()) * sizeof(double);
  return bytes;
}

double lomo_fused_backward_step(const std::vector<Tensor>& params,
                                const std::function<Tensor(Tape&)>& loss_fn, double lr,
                                std::optional<double> clip_norm) {
  double scale = 1.0;
  if (clip_norm) {
    // Pass 1: global gradient norm, discarding each gradient as soon as it
    // is complete.
    double sum_sq = 0.0;
    Tape tape;
    Tensor loss = loss_fn(tape);
    for (const Tensor& p : params) {
      Tensor param = p;
      tape.add_post_grad_hook(param, [&sum_sq](Tensor& t) {
        for (double g : t.grad()) sum_sq += g * g;
        t.drop_grad();
      });
    }
    tape.backward(loss);
    const double norm = std::sqrt(sum_sq);
    if (norm > *clip_norm && norm > 0) scale = *clip_norm / norm;
  }

  Tape tape;
  Tensor loss = loss_fn(tape);
  const double value = loss.item();
  for (const Tensor& p : params) {
    Tensor param = p;
    tape.add_post_grad_hook(param, [lr, scale](Tensor& t) {
      lomo_apply(t, lr, scale);
      t.drop_grad();
    });
  }
  tape.backward(loss);
  return value;
}

double adalomo_fused_step(const std::vector<Tensor>& params,
                          const std::function<Tensor(Tape&)>& loss_fn, double lr,
                          AdaLomoState& state) {
  Tape tape;
  Tensor loss = loss_fn(tape);
  const double value = loss.item();
  for (const Tensor& p : params) {
    Tensor param = p;
    tape.add_post_grad_hook(param, [&state, lr](Tensor& t) {
      state.apply(t, lr);
      t.drop_grad();
    });
  }
  tape.backward(loss);
  return value;
}

// ---- analytic accounting -----------------------------------------------------

uint64_t state_bytes(Kind kind, uint64_t param_count, const PrecisionPolicy& policy,
                     const std::vector<Shape>& shapes) {
  const uint64_t master = policy.needs_master() ? 4 * param_count : 0;
  switch (kind) {
    case Kind::kAdamW: return 8 * param_count + master;
    case Kind::kLion: return 4 * param_count + master;
    case Kind::kAdan: return 12 * param_count + master;
    case Kind::kSophia: return 8 * param_count + master;
    case Kind::kLomo: return 0;
    case Kind::kAdaLomo: {
      if (shapes.empty() && param_count > 0)
        throw ConfigError("state_bytes: adalomo needs parameter shapes for factored accounting");
      uint64_t bytes = 0;
      for (const Shape& s : shapes) {
        if (s.size() == 2)
          bytes += static_cast<uint64_t>(s[0] + s[1]) * 4;
        else
          bytes += static_cast<uint64_t>(shape_numel(s)) * 4;
      }
      return bytes;
    }
  }
  throw ConfigError("state_bytes: unknown optimizer kind");
}

}  // namespace minicollie::optim
