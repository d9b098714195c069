#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "minicollie/tensor.hpp"

namespace minicollie::optim {

enum class Kind { kAdamW, kLion, kAdan, kSophia, kLomo, kAdaLomo };

Kind parse_kind(const std::string& name);  // throws ConfigError on unknown kind
std::string kind_name(Kind kind);
bool is_fused(Kind kind);  // LOMO / AdaLomo apply updates during backward

struct OptimizerConfig {
  Kind kind = Kind::kAdamW;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double beta3 = 0.99;  // adan only
  double eps = 1e-8;
  std::optional<double> clip_threshold;  // lomo: global grad-norm cap (two-pass mode)
  double adalomo_clip = 1.0;             // update-RMS cap relative to RMS(theta)
  double sophia_rho = 0.04;
  int update_interval = 10;  // sophia hessian refresh cadence

  static OptimizerConfig defaults_for(Kind kind);
  void validate() const;
};

// Element-wise optimizer over a flat owned slice of the parameter vector.
// Used directly by the serial trainer and per ZeRO partition by the
// parallel engine; all four stored-state kinds step through here.
class FlatOptimizer {
 public:
  FlatOptimizer(const OptimizerConfig& cfg, size_t owned_len);

  void step(std::span<double> params, std::span<const double> grads, double lr);

  int64_t steps_taken() const { return t_; }
  void set_steps_taken(int64_t t) { t_ = t; }
  uint64_t state_bytes_runtime() const;

  // Persistent buffers, for checkpointing. Names are stable per kind.
  std::vector<std::pair<std::string, std::vector<double>*>> buffers();

  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  int64_t t_ = 0;
  std::vector<double> m_, v_, n_, h_, g_prev_;

  void step_adamw(std::span<double> p, std::span<const double> g, double lr);
  void step_lion(std::span<double> p, std::span<const double> g, double lr);
  void step_adan(std::span<double> p, std::span<const double> g, double lr);
  void step_sophia(std::span<double> p, std::span<const double> g, double lr);
};

// ---- fused optimizers ------------------------------------------------------

// Per-parameter update applied the moment the gradient is complete; the
// gradient buffer is dropped immediately afterwards, so peak gradient
// storage never exceeds the largest single parameter.
void lomo_apply(Tensor& param, double lr, double scale);

// Factored (row/column) second-moment state per parameter, Adafactor-style:
// matrices keep one vector per dimension, everything else falls back to an
// unfactored per-element buffer.
class AdaLomoState {
 public:
  AdaLomoState(const OptimizerConfig& cfg, const std::vector<Tensor>& params);

  // Consumes param.grad(); caller drops the gradient afterwards.
  void apply(Tensor& param, double lr);

  uint64_t state_bytes_runtime() const;

 private:
  struct Entry {
    bool factored = false;
    std::vector<double> v_row, v_col;  // factored
    std::vector<double> v_full;        // fallback
    int64_t rows = 0, cols = 0;
    int64_t t = 0;
  };
  OptimizerConfig cfg_;
  std::vector<std::pair<const void*, Entry>> entries_;
  Entry& entry_for(const Tensor& param);
};

// Serial fused LOMO step: runs loss_fn, applies theta -= lr * g per
// parameter during backward. With clip_norm set, a first backward pass
// computes the global gradient norm and a second applies the scaled update.
// Returns the loss value.
double lomo_fused_backward_step(const std::vector<Tensor>& params,
                                const std::function<Tensor(Tape&)>& loss_fn, double lr,
                                std::optional<double> clip_norm = std::nullopt);

// Serial fused AdaLomo step.
double adalomo_fused_step(const std::vector<Tensor>& params,
                          const std::function<Tensor(Tape&)>& loss_fn, double lr,
                          AdaLomoState& state);

// ---- analytic state accounting ---------------------------------------------

struct PrecisionPolicy {
  int param_dtype_bytes = 2;
  int grad_dtype_bytes = 4;
  bool master_copy = true;

  bool needs_master() const { return master_copy && param_dtype_bytes < 4; }
};

// Persistent optimizer-state bytes (excludes parameters and gradients) for
// the precision policy's storage model: fp32 state buffers plus an fp32
// master copy of half-precision parameters where the optimizer keeps one.
// Adan's previous-gradient buffer is transient and excluded, matching the
// one-extra-buffer accounting. AdaLomo requires the parameter shapes.
uint64_t state_bytes(Kind kind, uint64_t param_count, const PrecisionPolicy& policy,
                     const std::vector<Shape>& shapes = {});

}  // namespace minicollie::optim
