#include "minicollie/lora.hpp"

#include <cmath>

namespace minicollie::lora {

void LoraConfig::validate() const {
  if (r < 1) throw ConfigError("lora: r must be >= 1, got " + std::to_string(r));
  if (target_modules.empty()) throw ConfigError("lora: target_modules must be non-empty");
  if (bias != "none" && bias != "all")
    throw ConfigError("lora: bias must be 'none' or 'all', got '" + bias + "'");
}

std::vector<std::string> adapter_target_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  for (int64_t l = 0; l < cfg.num_hidden_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* n : {"q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj",
                          "down_proj"})
      names.push_back(p + n);
  }
  names.push_back("lm_head");
  return names;
}

namespace {

bool matches(const std::string& name, const std::vector<std::string>& patterns) {
  for (const std::string& p : patterns)
    if (name.find(p) != std::string::npos) return true;
  return false;
}

void attach_adapter(LinearSlot& slot, const LoraConfig& cfg, Rng& rng) {
  const int64_t out = slot.weight.dim(0), in = slot.weight.dim(1);
  std::vector<double> av(static_cast<size_t>(cfg.r * in));
  const double std = 1.0 / static_cast<double>(cfg.r);
  for (double& x : av) x = rng.normal(0.0, std);
  LinearSlot::Lora adapter;
  adapter.a = Tensor::leaf({cfg.r, in}, std::move(av), true);
  adapter.a.mark_param(slot.weight.name() + ".lora_a");
  adapter.b = Tensor::zeros({out, cfg.r}, true);
  adapter.b.mark_param(slot.weight.name() + ".lora_b");
  adapter.scaling = cfg.scaling();
  slot.lora = adapter;
}

std::vector<LinearSlot*> all_slots(TransformerModel& model) {
  std::vector<LinearSlot*> slots;
  for (DecoderBlock& blk : model.blocks)
    for (LinearSlot* s : {&blk.q, &blk.k, &blk.v, &blk.o, &blk.gate, &blk.up, &blk.down})
      slots.push_back(s);
  slots.push_back(&model.lm_head);
  return slots;
}

}  // namespace

int inject_lora(TransformerModel& model, const LoraConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  int wrapped = 0;
  for (LinearSlot* slot : all_slots(model)) {
    if (slot->lora) throw ContractError("inject_lora: '" + slot->weight.name() +
                                        "' already carries an adapter");
    if (matches(slot->weight.name(), cfg.target_modules)) {
      attach_adapter(*slot, cfg, rng);
      ++wrapped;
    }
  }
  if (wrapped == 0) {
    std::string available;
    for (const std::string& n : adapter_target_names(model.cfg)) available += "\n  " + n;
    throw ConfigError("lora: no module matches target_modules; available modules:" + available);
  }
  for (Tensor& p : model.base_parameters()) p.set_requires_grad(false);
  return wrapped;
}

void merge_lora(TransformerModel& model) {
  bool any = false;
  for (LinearSlot* slot : all_slots(model)) {
    if (!slot->lora) continue;
    any = true;
    const Tensor& a = slot->lora->a;
    const Tensor& b = slot->lora->b;
    const double scaling = slot->lora->scaling;
    const int64_t out = slot->weight.dim(0), in = slot->weight.dim(1), r = a.dim(0);
    auto& w = slot->weight.data();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int64_t o = 0; o < out; ++o)
      for (int64_t rr = 0; rr < r; ++rr) {
        const double f = scaling * pb[o * r + rr];
        const double* arow = pa + rr * in;
        double* wrow = w.data() + o * in;
        for (int64_t i = 0; i < in; ++i) wrow[i] += f * arow[i];
      }
    slot->lora.reset();
  }
  if (!any) throw ContractError("merge_lora: model carries no adapters (already merged?)");
  for (Tensor& p : model.base_parameters()) p.set_requires_grad(true);
}

int64_t trainable_param_count(const TransformerModel& model) {
  int64_t n = 0;
  for (const Tensor& t : model.trainable_parameters()) n += t.numel();
  return n;
}

}  // namespace minicollie::lora
