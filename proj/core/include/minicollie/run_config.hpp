#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "minicollie/lora.hpp"
#include "minicollie/model.hpp"
#include "minicollie/optim.hpp"

namespace minicollie {

struct ParallelConfig {
  int dp_size = 1;
  int tp_size = 1;
  int pp_size = 1;
  int zero_stage = 0;  // 0..3
};

struct TrainParams {
  int64_t batch_size = 8;
  int64_t micro_batch_size = 8;
  int gradient_accumulation_steps = 1;
  int epochs = 1;
  uint64_t seed = 0;
  int lr_warmup_steps = 0;
};

// Evaluation cadence; unit is explicit because steps and epochs are both
// reasonable readings.
struct EvalCadence {
  std::string unit = "steps";  // steps | epochs
  int every = 0;               // 0 disables in-training evaluation
};

struct MonitorSinks {
  std::string csv_path;  // empty: no CSV sink
};

// The one configuration object the whole run hangs off: model dims, the
// three parallel degrees plus ZeRO stage, the storage precision policy
// (memory model only; compute is always full precision), optimizer,
// optional LoRA, and training hyperparameters.
struct RunConfig {
  ModelConfig model;
  ParallelConfig parallel;
  optim::PrecisionPolicy precision;
  optim::OptimizerConfig optimizer = optim::OptimizerConfig::defaults_for(optim::Kind::kAdamW);
  std::optional<lora::LoraConfig> lora;
  TrainParams train;
  EvalCadence eval;
  MonitorSinks monitor;

  void validate() const;  // throws ConfigError naming the violated constraint

  static RunConfig from_json_file(const std::string& path);
  static RunConfig from_json_string(const std::string& text);
  std::string to_json_string() const;
};

}  // namespace minicollie
