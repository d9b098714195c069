#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "minicollie/model.hpp"

namespace minicollie::lora {

struct LoraConfig {
  int64_t r = 4;
  double lora_alpha = 32.0;
  std::vector<std::string> target_modules;  // substring patterns over module names
  std::string bias = "none";                // none | all (this architecture has no biases)
  std::string task_type = "CAUSAL_LM";

  double scaling() const { return lora_alpha / static_cast<double>(r); }
  void validate() const;
};

// Linear modules eligible for adapter injection, in registry order.
std::vector<std::string> adapter_target_names(const ModelConfig& cfg);

// Wraps every matched linear with a LoRA adapter (A seeded normal std 1/r,
// B zeros, delta = alpha/r * B(Ax)) and freezes all base parameters. Returns
// the number of wrapped modules. Zero matches is a ConfigError listing the
// available module names.
int inject_lora(TransformerModel& model, const LoraConfig& cfg, uint64_t seed);

// Folds adapters into the base weights (W += scaling * B A), removes the
// wrappers and restores a plain trainable model.
void merge_lora(TransformerModel& model);

int64_t trainable_param_count(const TransformerModel& model);

}  // namespace minicollie::lora
