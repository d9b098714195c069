#pragma once

// Test-side serial baseline: a plain single-worker training step with the
// same pooled-mean loss semantics the parallel engine implements. Kept
// independent of the parallel execution path it checks.

#include <cmath>
#include <cstring>
#include <vector>

#include "minicollie/data.hpp"
#include "minicollie/model.hpp"
#include "minicollie/optim.hpp"
#include "minicollie/run_config.hpp"

namespace minicollie::testing {

struct SerialBaseline {
  TransformerModel model;
  std::vector<Tensor> trainable;
  optim::FlatOptimizer opt;
  size_t flat_len = 0;

  explicit SerialBaseline(const RunConfig& cfg)
      : model(TransformerModel::build(cfg.model, cfg.train.seed)),
        trainable(),
        opt(cfg.optimizer, 0) {
    if (cfg.lora) lora::inject_lora(model, *cfg.lora, cfg.train.seed + 1);
    trainable = model.trainable_parameters();
    for (const Tensor& t : trainable) flat_len += static_cast<size_t>(t.numel());
    opt = optim::FlatOptimizer(cfg.optimizer, flat_len);
  }

  double step(const data::TokenBatch& batch, double lr) {
    const int64_t s = batch.seq - 1;
    std::vector<int32_t> ids(static_cast<size_t>(batch.batch * s));
    std::vector<int32_t> targets(static_cast<size_t>(batch.batch * s));
    std::vector<uint8_t> mask(static_cast<size_t>(batch.batch * s));
    for (int64_t r = 0; r < batch.batch; ++r)
      for (int64_t i = 0; i < s; ++i) {
        ids[static_cast<size_t>(r * s + i)] =
            batch.input_ids[static_cast<size_t>(r * batch.seq + i)];
        targets[static_cast<size_t>(r * s + i)] =
            batch.input_ids[static_cast<size_t>(r * batch.seq + i + 1)];
        mask[static_cast<size_t>(r * s + i)] =
            batch.loss_mask[static_cast<size_t>(r * batch.seq + i + 1)];
      }

    Tape tape;
    Tensor logits = model.forward(tape, ids, batch.batch, s);
    auto ce = cross_entropy(tape, logits, targets, mask, Reduction::kSum);
    tape.backward(ce.loss, 1.0 / static_cast<double>(ce.masked_count));

    std::vector<double> grads(flat_len, 0.0), params(flat_len, 0.0);
    size_t off = 0;
    for (Tensor& t : trainable) {
      if (t.has_grad())
        std::memcpy(grads.data() + off, t.grad().data(), t.grad().size() * sizeof(double));
      std::memcpy(params.data() + off, t.data().data(), t.data().size() * sizeof(double));
      off += static_cast<size_t>(t.numel());
    }
    opt.step(params, grads, lr);
    off = 0;
    for (Tensor& t : trainable) {
      std::memcpy(t.data().data(), params.data() + off, t.data().size() * sizeof(double));
      t.drop_grad();
      off += static_cast<size_t>(t.numel());
    }
    return ce.loss.item() / static_cast<double>(ce.masked_count);
  }
};

inline data::TokenBatch random_batch(Rng& rng, int64_t batch, int64_t seq, int64_t vocab) {
  data::TokenBatch b;
  b.batch = batch;
  b.seq = seq;
  b.input_ids.resize(static_cast<size_t>(batch * seq));
  b.loss_mask.assign(static_cast<size_t>(batch * seq), 1);
  for (auto& id : b.input_ids) id = static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab)));
  return b;
}

inline double max_rel_err(const std::vector<double>& got, const std::vector<double>& want) {
  double worst = 0.0;
  for (size_t i = 0; i < got.size(); ++i) {
    const double denom = std::max(std::abs(want[i]), 1e-8);
    worst = std::max(worst, std::abs(got[i] - want[i]) / denom);
  }
  return worst;
}

}  // namespace minicollie::testing
