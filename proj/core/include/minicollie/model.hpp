#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "minicollie/tensor.hpp"

namespace minicollie {

struct ModelConfig {
  int64_t hidden_size = 64;
  int64_t num_attention_heads = 4;
  int64_t num_hidden_layers = 2;
  int64_t intermediate_size = 172;
  int64_t vocab_size = 259;
  int64_t max_seq_len = 64;
  bool use_tiled_attention = false;
  int64_t attention_block_size = 16;

  int64_t head_dim() const { return hidden_size / num_attention_heads; }
  void validate() const;  // throws ConfigError naming the violated constraint
};

// A linear layer's weight plus an optional LoRA adapter. The adapter delta
// scaling * B(Ax) is added to the host product before any tensor-parallel
// reduction, so partial deltas sum exactly like partial host products.
struct LinearSlot {
  Tensor weight;  // [out, in]
  struct Lora {
    Tensor a;  // [r, in]
    Tensor b;  // [out, r]
    double scaling = 1.0;
    // Set when the host layout leaves this factor replicated across the
    // tensor-parallel group while its gradient is rank-partial.
    bool a_grad_needs_tp_reduce = false;
    bool b_grad_needs_tp_reduce = false;
  };
  std::optional<Lora> lora;
};

Tensor apply_linear(Tape& tape, const Tensor& x, const LinearSlot& slot);

// Tensor-parallel insertion points. pre_parallel wraps activations entering
// column-parallel linears (identity forward, gradient all-reduce backward);
// post_parallel wraps row-parallel partial sums (all-reduce forward,
// identity backward). Both default to identity.
struct BlockHooks {
  std::function<Tensor(Tape&, const Tensor&)> pre_parallel;
  std::function<Tensor(Tape&, const Tensor&)> post_parallel;
};

// ---- attention kernels -----------------------------------------------------

// softmax(q k^T / sqrt(d) + causal mask) v over [b, h, s, d] inputs.
// Materializes the full [s, s] score matrix per head.
Tensor naive_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                       bool causal);

// Online-softmax attention over key tiles of length `block`. Numerically
// matches naive_attention without materializing s x s scores; the backward
// pass recomputes score tiles from the saved per-row logsumexp.
Tensor tiled_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                       bool causal, int64_t block);

// ---- decoder model ---------------------------------------------------------

struct DecoderBlock {
  Tensor attn_norm;  // [H]
  LinearSlot q, k, v, o;
  Tensor mlp_norm;  // [H]
  LinearSlot gate, up, down;
};

// Pre-norm LLaMA-style decoder: rms_norm + causal attention + silu-gated MLP,
// untied LM head, fixed sinusoidal absolute position encoding.
class TransformerModel {
 public:
  ModelConfig cfg;
  Tensor tok_embedding;  // [V, H]         (absent on non-first pipeline stages)
  Tensor pos_encoding;   // [max_seq, H] buffer, not a parameter
  std::vector<DecoderBlock> blocks;
  Tensor final_norm;     // [H]            (absent on non-last pipeline stages)
  LinearSlot lm_head;    // [V, H]
  int64_t local_heads = 0;  // heads materialized on this worker

  // Deterministic initialization: normal(0, 0.02) weights, norms at one.
  // Identical seeds produce bit-identical parameters.
  static TransformerModel build(const ModelConfig& cfg, uint64_t seed);

  Tensor forward(Tape& tape, const std::vector<int32_t>& ids, int64_t batch, int64_t seq,
                 const BlockHooks& hooks = {}) const;

  // Appends argmax tokens (lowest index wins ties); stops after max_new
  // tokens, on eos, or when max_seq_len is reached.
  std::vector<int32_t> greedy_decode(const std::vector<int32_t>& prompt, int64_t max_new,
                                     std::optional<int32_t> eos_id = std::nullopt) const;

  // Canonical parameter registry: tok_embedding, per-layer weights, final
  // norm, lm head. Order is identical on every worker.
  std::vector<Tensor> base_parameters() const;
  // Base parameters plus any LoRA adapters (adapters follow their host's
  // registry position).
  std::vector<Tensor> parameters() const;
  std::vector<Tensor> trainable_parameters() const;
  int64_t count_params() const;  // base parameters only

  // Registry group of each base parameter: 0 = embedding, 1..L = decoder
  // layers, L+1 = final norm + head. Drives pipeline placement and the
  // ZeRO-3 per-layer gather granularity.
  static std::vector<int> base_param_groups(const ModelConfig& cfg);
  static std::vector<std::string> base_param_names(const ModelConfig& cfg);
};

// Shared pieces for pipeline stages.
Tensor embed_tokens(Tape& tape, const Tensor& tok_embedding, const Tensor& pos_encoding,
                    const std::vector<int32_t>& ids, int64_t batch, int64_t seq);
Tensor decoder_block_forward(Tape& tape, const Tensor& x, const DecoderBlock& block,
                             int64_t local_heads, const ModelConfig& cfg,
                             const BlockHooks& hooks);
Tensor final_logits(Tape& tape, const Tensor& x, const Tensor& final_norm,
                    const LinearSlot& lm_head);

}  // namespace minicollie
