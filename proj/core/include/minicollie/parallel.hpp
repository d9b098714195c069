#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "minicollie/comm.hpp"
#include "minicollie/data.hpp"
#include "minicollie/model.hpp"
#include "minicollie/optim.hpp"
#include "minicollie/run_config.hpp"

namespace minicollie::parallel {

// ---- plans -------------------------------------------------------------------

// Even flat partition of the rank-local trainable parameter vector across
// the data-parallel group: ceil split, trailing ranks smaller.
struct ZeroPlan {
  int stage = 0;
  std::vector<size_t> part_sizes;  // one entry per dp rank
  std::vector<size_t> offsets;     // prefix sums, size dp+1

  static ZeroPlan make(size_t total_len, int dp_size, int stage);
  std::pair<size_t, size_t> owned_range(int dp_index) const;
};

// Contiguous layer partition balanced by unit count, the embedding and the
// head each weighing as one layer. Stage 0 owns the embedding, the last
// stage owns the final norm and LM head.
struct PipelineStagePlan {
  std::vector<std::pair<int, int>> layer_ranges;  // per stage, over [0, L)

  static PipelineStagePlan make(int num_layers, int pp_size);
  int stages() const { return static_cast<int>(layer_ranges.size()); }
  // Stage owning a model parameter group (0 = embedding, 1..L = layers,
  // L+1 = final norm + head).
  int stage_of_group(int group, int num_layers) const;
};

struct ScheduleEvent {
  int stage = 0;
  int micro = 0;
  enum class Phase { kForward, kBackward } phase = Phase::kForward;
  int start = 0;  // tick; 1 tick = one micro-batch stage-pass
  int end = 0;
};

struct PipelineSchedule {
  std::vector<ScheduleEvent> events;
  int total_ticks = 0;
  double bubble_fraction = 0.0;  // derived from the event timeline
};

// GPipe-style all-forward-then-all-backward schedule for p stages and m
// micro-batches.
PipelineSchedule pp_schedule(int pp_size, int micro_batches);

// ---- tensor-parallel sharding --------------------------------------------------

// Column-parallel: split the output dimension (weight rows). Concatenating
// the per-rank outputs over ranks reproduces the unsharded output exactly.
Tensor shard_linear_column(const Tensor& weight, int tp_size, int tp_index);
// Row-parallel: split the input dimension (weight columns). Partial products
// summed by one all-reduce equal the unsharded product exactly.
Tensor shard_linear_row(const Tensor& weight, int tp_size, int tp_index);

// Validates the topology implied by the config (divisibility of heads,
// intermediate size, pipeline stages) and returns it.
comm::Topology plan_topology(const RunConfig& cfg);

// ---- local (sharded) model -----------------------------------------------------

enum class Layout { kReplicated, kColumn, kRow };

struct LocalParamInfo {
  std::string name;  // global registry name (adapters: host + ".lora_a"/".lora_b")
  Shape global_shape;
  Shape local_shape;
  Layout layout = Layout::kReplicated;
  int group = 0;           // 0 embedding, 1..L layers, L+1 tail
  size_t flat_offset = 0;  // into the rank-local flat trainable vector
};

struct LocalModel {
  TransformerModel model;        // stage-local blocks, tp-sharded weights
  std::vector<Tensor> trainable;
  std::vector<LocalParamInfo> infos;
  size_t flat_len = 0;
  int layer_lo = 0, layer_hi = 0;
  bool has_embedding = false, has_head = false;
};

// Slices the (LoRA-injected, fully materialized) serial model down to one
// rank's shard. Every rank derives its shard from the identical seeded
// serial build, which keeps tensor-parallel shards bit-consistent.
LocalModel shard_model(const TransformerModel& full, const RunConfig& cfg,
                       const comm::RankCoord& coord);

// ---- per-rank engine -----------------------------------------------------------

struct StepOutcome {
  double loss = 0.0;         // pooled mean over every unmasked target position
  int64_t masked_tokens = 0;
  int64_t tokens_processed = 0;
};

struct PersistentBytes {
  uint64_t params = 0;
  uint64_t optimizer_state = 0;
  uint64_t zero3_shard = 0;
  uint64_t total() const { return params + optimizer_state + zero3_shard; }
};

// Extracted end-of-run state, enough to reconstruct the serial parameter
// vector (and optimizer state) offline.
struct RankFinalState {
  comm::RankCoord coord;
  std::vector<LocalParamInfo> infos;
  std::vector<std::vector<double>> tensor_values;  // zero stage < 3 (dp 0 only)
  std::vector<double> zero3_shard;                 // zero stage 3
  std::vector<std::pair<std::string, std::vector<double>>> optimizer_buffers;  // owned slice
  int64_t optimizer_steps = 0;
};

class ParallelWorker {
 public:
  ParallelWorker(const RunConfig& cfg, comm::WorkerContext& ctx);

  // One optimizer step over the global batch: DP splits rows, PP streams
  // micro-batches, TP shards layers, gradients combine per the ZeRO stage,
  // and the update lands on owned partitions.
  StepOutcome train_step(const data::TokenBatch& global_batch, double lr);

  // Cooperative evaluation forward: pooled (sum NLL, masked count) over the
  // batch, identical on every rank.
  std::pair<double, int64_t> eval_nll(const data::TokenBatch& batch);

  // Cooperative greedy decode (batch of one prompt).
  std::vector<int32_t> greedy_decode(const std::vector<int32_t>& prompt, int64_t max_new,
                                     std::optional<int32_t> eos_id);

  const LocalModel& local() const { return local_; }
  const RunConfig& config() const { return cfg_; }
  PersistentBytes persistent_bytes() const;
  RankFinalState extract_state() const;
  void load_state(const RankFinalState& state);

  int64_t optimizer_steps() const;

 private:
  RunConfig cfg_;
  comm::WorkerContext ctx_;
  comm::Topology topo_;
  PipelineStagePlan stage_plan_;
  LocalModel local_;
  ZeroPlan zero_plan_;
  std::optional<optim::FlatOptimizer> flat_opt_;
  std::optional<optim::AdaLomoState> adalomo_;
  std::vector<double> zero3_shard_;
  int64_t fused_steps_ = 0;
  bool in_step_ = false;

  BlockHooks tp_hooks(Tape& tape_unused);
  bool needs_tp_grad_reduce(size_t trainable_index) const;
  Tensor stage_forward(Tape& tape, const data::TokenBatch& batch,
                       const std::vector<size_t>& rows, Tensor* boundary_in);
  void zero3_materialize_all();
  void zero3_release_all();
  void zero3_materialize_group_range(size_t lo, size_t hi);
  std::vector<double> flatten_grads() const;
  std::vector<double> flatten_params() const;
  void scatter_params(const std::vector<double>& flat);
  double share_loss_world(double local_contrib) const;
  friend struct ParallelWorkerTestPeer;
};

// Gathers per-rank final states back into the serial parameter vector
// (registry order, full shapes). Exact: pure copying, no arithmetic.
std::vector<std::pair<std::string, std::vector<double>>> gather_full_params(
    const std::vector<RankFinalState>& states, const RunConfig& cfg);

// ZeRO-3 gather bookkeeping for one rank: materializes the full local
// weights of one parameter-group range from the dp-sharded flat storage.
// Exposed for tests; the worker drives it internally.

}  // namespace minicollie::parallel
