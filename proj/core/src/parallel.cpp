#include "minicollie/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "minicollie/lora.hpp"

namespace minicollie::parallel {

using comm::GroupKind;
using comm::ProcessGroup;
using comm::RankCoord;
using comm::ReduceOp;
using comm::Topology;

// ---- ZeroPlan ----------------------------------------------------------------

ZeroPlan ZeroPlan::make(size_t total_len, int dp_size, int stage) {
  if (dp_size < 1) throw ConfigError("zero plan: dp_size must be >= 1");
  if (stage < 0 || stage > 3) throw ConfigError("zero plan: stage must be in 0..3");
  ZeroPlan plan;
  plan.stage = stage;
  const size_t q = total_len / static_cast<size_t>(dp_size);
  const size_t r = total_len % static_cast<size_t>(dp_size);
  plan.offsets.push_back(0);
  for (int i = 0; i < dp_size; ++i) {
    const size_t sz = q + (static_cast<size_t>(i) < r ? 1 : 0);  // ceil split, trailing smaller
    plan.part_sizes.push_back(sz);
    plan.offsets.push_back(plan.offsets.back() + sz);
  }
  return plan;
}

std::pair<size_t, size_t> ZeroPlan::owned_range(int dp_index) const {
  return {offsets[static_cast<size_t>(dp_index)], offsets[static_cast<size_t>(dp_index) + 1]};
}

// ---- PipelineStagePlan ---------------------------------------------------------

PipelineStagePlan PipelineStagePlan::make(int num_layers, int pp_size) {
  const int units = num_layers + 2;  // embedding + layers + head
  if (pp_size < 1) throw ConfigError("pipeline plan: pp_size must be >= 1");
  if (pp_size > units)
    throw ConfigError("pipeline plan: pp_size " + std::to_string(pp_size) +
                      " exceeds schedulable units " + std::to_string(units) +
                      " (layers + embedding + head)");
  PipelineStagePlan plan;
  const int q = units / pp_size, r = units % pp_size;
  int unit = 0;
  for (int s = 0; s < pp_size; ++s) {
    const int take = q + (s < r ? 1 : 0);
    const int unit_lo = unit, unit_hi = unit + take;
    unit = unit_hi;
    // units 1..num_layers are decoder layers
    const int lo = std::clamp(unit_lo - 1, 0, num_layers);
    const int hi = std::clamp(unit_hi - 1, 0, num_layers);
    plan.layer_ranges.emplace_back(lo, hi);
  }
  return plan;
}

int PipelineStagePlan::stage_of_group(int group, int num_layers) const {
  if (group == 0) return 0;
  if (group == num_layers + 1) return stages() - 1;
  const int layer = group - 1;
  for (int s = 0; s < stages(); ++s)
    if (layer >= layer_ranges[static_cast<size_t>(s)].first &&
        layer < layer_ranges[static_cast<size_t>(s)].second)
      return s;
  throw ContractError("pipeline plan: no stage owns layer " + std::to_string(layer));
}

// ---- schedule ------------------------------------------------------------------

PipelineSchedule pp_schedule(int pp_size, int micro_batches) {
  if (pp_size < 1 || micro_batches < 1)
    throw ConfigError("pp_schedule: pp_size and micro_batches must be >= 1");
  PipelineSchedule sched;
  const int p = pp_size, m = micro_batches;
  for (int mu = 0; mu < m; ++mu)
    for (int s = 0; s < p; ++s) {
      ScheduleEvent e;
      e.stage = s;
      e.micro = mu;
      e.phase = ScheduleEvent::Phase::kForward;
      e.start = s + mu;
      e.end = e.start + 1;
      sched.events.push_back(e);
    }
  const int backward_base = m + p - 1;
  for (int mu = m - 1; mu >= 0; --mu)
    for (int s = p - 1; s >= 0; --s) {
      ScheduleEvent e;
      e.stage = s;
      e.micro = mu;
      e.phase = ScheduleEvent::Phase::kBackward;
      e.start = backward_base + (p - 1 - s) + (m - 1 - mu);
      e.end = e.start + 1;
      sched.events.push_back(e);
    }

  int span = 0;
  std::vector<int> busy(static_cast<size_t>(p), 0);
  for (const ScheduleEvent& e : sched.events) {
    span = std::max(span, e.end);
    busy[static_cast<size_t>(e.stage)] += e.end - e.start;
  }
  sched.total_ticks = span;
  int64_t idle = 0;
  for (int b : busy) idle += span - b;
  sched.bubble_fraction =
      static_cast<double>(idle) / (static_cast<double>(span) * static_cast<double>(p));
  return sched;
}

// ---- TP sharding ----------------------------------------------------------------

Tensor shard_linear_column(const Tensor& weight, int tp_size, int tp_index) {
  const int64_t out = weight.dim(0), in = weight.dim(1);
  if (out % tp_size != 0)
    throw ConfigError("column shard: output dim " + std::to_string(out) +
                      " not divisible by tp_size " + std::to_string(tp_size));
  const int64_t rows = out / tp_size;
  std::vector<double> d(static_cast<size_t>(rows * in));
  std::memcpy(d.data(), weight.data().data() + tp_index * rows * in,
              static_cast<size_t>(rows * in) * sizeof(double));
  return Tensor::leaf({rows, in}, std::move(d), weight.requires_grad());
}

Tensor shard_linear_row(const Tensor& weight, int tp_size, int tp_index) {
  const int64_t out = weight.dim(0), in = weight.dim(1);
  if (in % tp_size != 0)
    throw ConfigError("row shard: input dim " + std::to_string(in) +
                      " not divisible by tp_size " + std::to_string(tp_size));
  const int64_t cols = in / tp_size;
  std::vector<double> d(static_cast<size_t>(out * cols));
  for (int64_t r = 0; r < out; ++r)
    std::memcpy(d.data() + r * cols, weight.data().data() + r * in + tp_index * cols,
                static_cast<size_t>(cols) * sizeof(double));
  return Tensor::leaf({out, cols}, std::move(d), weight.requires_grad());
}

Topology plan_topology(const RunConfig& cfg) {
  cfg.validate();
  const auto& p = cfg.parallel;
  if (cfg.model.num_attention_heads % p.tp_size != 0)
    throw ConfigError("topology: num_attention_heads " +
                      std::to_string(cfg.model.num_attention_heads) +
                      " not divisible by tp_size " + std::to_string(p.tp_size));
  if (cfg.model.intermediate_size % p.tp_size != 0)
    throw ConfigError("topology: intermediate_size " +
                      std::to_string(cfg.model.intermediate_size) +
                      " not divisible by tp_size " + std::to_string(p.tp_size));
  PipelineStagePlan::make(static_cast<int>(cfg.model.num_hidden_layers), p.pp_size);
  Topology topo{p.dp_size, p.tp_size, p.pp_size};
  topo.validate();
  return topo;
}

// ---- shard_model ----------------------------------------------------------------

namespace {

Tensor clone_replicated(const Tensor& t) {
  Tensor c = Tensor::leaf(t.shape(), t.data(), t.requires_grad());
  if (t.is_param()) c.mark_param(t.name());
  c.set_requires_grad(t.requires_grad());
  return c;
}

Tensor clone_shard(const Tensor& t, Layout layout, int tp_size, int tp_index) {
  Tensor shard;
  switch (layout) {
    case Layout::kReplicated: return clone_replicated(t);
    case Layout::kColumn: shard = shard_linear_column(t, tp_size, tp_index); break;
    case Layout::kRow: shard = shard_linear_row(t, tp_size, tp_index); break;
  }
  if (t.is_param()) shard.mark_param(t.name());
  shard.set_requires_grad(t.requires_grad());
  return shard;
}

struct SlotShardSpec {
  Layout host;       // layout of the host weight
  Layout lora_a;     // layout of adapter factor A [r, in]
  Layout lora_b;     // layout of adapter factor B [out, r]
  bool a_needs_reduce;
  bool b_needs_reduce;
};

// Column-parallel host splits the output dim: B rows split with it, A stays
// replicated with rank-partial gradients. Row-parallel host splits the input
// dim: A columns split with it, B stays replicated with partial gradients.
SlotShardSpec slot_spec(Layout host) {
  switch (host) {
    case Layout::kColumn: return {host, Layout::kReplicated, Layout::kColumn, true, false};
    case Layout::kRow: return {host, Layout::kRow, Layout::kReplicated, false, true};
    default: return {host, Layout::kReplicated, Layout::kReplicated, false, false};
  }
}

LinearSlot shard_slot(const LinearSlot& slot, Layout host_layout, int tp_size, int tp_index) {
  LinearSlot local;
  local.weight = clone_shard(slot.weight, host_layout, tp_size, tp_index);
  if (slot.lora) {
    const SlotShardSpec spec = slot_spec(host_layout);
    LinearSlot::Lora adapter;
    adapter.a = clone_shard(slot.lora->a, spec.lora_a, tp_size, tp_index);
    adapter.b = clone_shard(slot.lora->b, spec.lora_b, tp_size, tp_index);
    adapter.scaling = slot.lora->scaling;
    adapter.a_grad_needs_tp_reduce = spec.a_needs_reduce && tp_size > 1;
    adapter.b_grad_needs_tp_reduce = spec.b_needs_reduce && tp_size > 1;
    local.lora = std::move(adapter);
  }
  return local;
}

struct RegistryBuilder {
  std::vector<Tensor> trainable;
  std::vector<LocalParamInfo> infos;
  size_t flat = 0;

  void add(const Tensor& local, const Tensor& global, Layout layout, int group,
           bool needs_tp_reduce = false) {
    if (!local.requires_grad()) return;
    LocalParamInfo info;
    info.name = local.name();
    info.global_shape = global.shape();
    info.local_shape = local.shape();
    info.layout = layout;
    info.group = group;
    info.flat_offset = flat;
    (void)needs_tp_reduce;
    flat += static_cast<size_t>(local.numel());
    infos.push_back(std::move(info));
    trainable.push_back(local);
  }
};

void add_slot(RegistryBuilder& reg, const LinearSlot& local, const LinearSlot& global,
              Layout host_layout, int group) {
  const SlotShardSpec spec = slot_spec(host_layout);
  reg.add(local.weight, global.weight, host_layout, group);
  if (local.lora) {
    reg.add(local.lora->a, global.lora->a, spec.lora_a, group);
    reg.add(local.lora->b, global.lora->b, spec.lora_b, group);
  }
}

}  // namespace

LocalModel shard_model(const TransformerModel& full, const RunConfig& cfg,
                       const RankCoord& coord) {
  const int tp = cfg.parallel.tp_size;
  const int L = static_cast<int>(cfg.model.num_hidden_layers);
  const PipelineStagePlan plan = PipelineStagePlan::make(L, cfg.parallel.pp_size);

  LocalModel local;
  local.model.cfg = cfg.model;
  local.model.local_heads = cfg.model.num_attention_heads / tp;
  auto [lo, hi] = plan.layer_ranges[static_cast<size_t>(coord.pp)];
  local.layer_lo = lo;
  local.layer_hi = hi;
  local.has_embedding = coord.pp == 0;
  local.has_head = coord.pp == cfg.parallel.pp_size - 1;

  RegistryBuilder reg;
  if (local.has_embedding) {
    local.model.tok_embedding = clone_replicated(full.tok_embedding);
    local.model.pos_encoding = Tensor::leaf(full.pos_encoding.shape(), full.pos_encoding.data());
    reg.add(local.model.tok_embedding, full.tok_embedding, Layout::kReplicated, 0);
  }
  for (int l = lo; l < hi; ++l) {
    const DecoderBlock& src = full.blocks[static_cast<size_t>(l)];
    DecoderBlock blk;
    blk.attn_norm = clone_replicated(src.attn_norm);
    blk.q = shard_slot(src.q, Layout::kColumn, tp, coord.tp);
    blk.k = shard_slot(src.k, Layout::kColumn, tp, coord.tp);
    blk.v = shard_slot(src.v, Layout::kColumn, tp, coord.tp);
    blk.o = shard_slot(src.o, Layout::kRow, tp, coord.tp);
    blk.mlp_norm = clone_replicated(src.mlp_norm);
    blk.gate = shard_slot(src.gate, Layout::kColumn, tp, coord.tp);
    blk.up = shard_slot(src.up, Layout::kColumn, tp, coord.tp);
    blk.down = shard_slot(src.down, Layout::kRow, tp, coord.tp);

    const int group = l + 1;
    reg.add(blk.attn_norm, src.attn_norm, Layout::kReplicated, group);
    add_slot(reg, blk.q, src.q, Layout::kColumn, group);
    add_slot(reg, blk.k, src.k, Layout::kColumn, group);
    add_slot(reg, blk.v, src.v, Layout::kColumn, group);
    add_slot(reg, blk.o, src.o, Layout::kRow, group);
    reg.add(blk.mlp_norm, src.mlp_norm, Layout::kReplicated, group);
    add_slot(reg, blk.gate, src.gate, Layout::kColumn, group);
    add_slot(reg, blk.up, src.up, Layout::kColumn, group);
    add_slot(reg, blk.down, src.down, Layout::kRow, group);
    local.model.blocks.push_back(std::move(blk));
  }
  if (local.has_head) {
    local.model.final_norm = clone_replicated(full.final_norm);
    local.model.lm_head = shard_slot(full.lm_head, Layout::kReplicated, tp, coord.tp);
    const int group = L + 1;
    reg.add(local.model.final_norm, full.final_norm, Layout::kReplicated, group);
    add_slot(reg, local.model.lm_head, full.lm_head, Layout::kReplicated, group);
  }

  local.trainable = std::move(reg.trainable);
  local.infos = std::move(reg.infos);
  local.flat_len = reg.flat;
  return local;
}

// ---- ParallelWorker ---------------------------------------------------------------

ParallelWorker::ParallelWorker(const RunConfig& cfg, comm::WorkerContext& ctx)
    : cfg_(cfg), ctx_(ctx) {
  topo_ = plan_topology(cfg);
  if (topo_.world_size() != ctx.topo.world_size())
    throw ContractError("parallel worker: topology mismatch with the spawned run");
  stage_plan_ = PipelineStagePlan::make(static_cast<int>(cfg.model.num_hidden_layers),
                                        cfg.parallel.pp_size);

  TransformerModel full = TransformerModel::build(cfg.model, cfg.train.seed);
  if (cfg.lora) lora::inject_lora(full, *cfg.lora, cfg.train.seed + 1);
  local_ = shard_model(full, cfg, ctx.coord);

  zero_plan_ = ZeroPlan::make(local_.flat_len, cfg.parallel.dp_size, cfg.parallel.zero_stage);
  const auto [olo, ohi] = zero_plan_.owned_range(ctx_.coord.dp);
  const size_t owned = cfg.parallel.zero_stage >= 1 ? ohi - olo : local_.flat_len;

  if (optim::is_fused(cfg.optimizer.kind)) {
    if (cfg.optimizer.kind == optim::Kind::kAdaLomo)
      adalomo_.emplace(cfg.optimizer, local_.trainable);
    if (cfg.optimizer.clip_threshold && topo_.world_size() > 1)
      throw ConfigError("lomo gradient clipping is a serial-trainer mode; "
                        "unset clip_threshold for parallel runs");
  } else {
    flat_opt_.emplace(cfg.optimizer, owned);
  }

  if (cfg.parallel.zero_stage == 3) {
    const std::vector<double> flat = flatten_params();
    zero3_shard_.assign(flat.begin() + static_cast<ptrdiff_t>(olo),
                        flat.begin() + static_cast<ptrdiff_t>(ohi));
    for (Tensor& t : local_.trainable) t.release_data();
  }
}

BlockHooks ParallelWorker::tp_hooks(Tape&) {
  BlockHooks hooks;
  if (topo_.tp_size <= 1) return hooks;
  comm::CommHub* hub = ctx_.hub;
  const ProcessGroup* group = &hub->tp_group(ctx_.coord);
  const int rank = ctx_.coord.rank;

  // f operator: identity forward, gradient all-reduce backward (activations
  // entering column-parallel linears).
  hooks.pre_parallel = [hub, group, rank](Tape& t, const Tensor& x) {
    Tensor y = t.make_op_output(x.shape(), x.data(), {x});
    t.set_last_backward([hub, group, rank, x = x, y]() mutable {
      if (!y.has_grad() || !y.grad_needed()) return;
      hub->all_reduce(*group, rank, y.grad(), ReduceOp::kSum);
      if (x.grad_needed()) {
        const auto& dy = y.grad();
        auto& dx = x.grad();
        for (size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
      }
    });
    return y;
  };
  // g operator: all-reduce forward (row-parallel partial sums), identity
  // backward.
  hooks.post_parallel = [hub, group, rank](Tape& t, const Tensor& x) {
    std::vector<double> buf = x.data();
    hub->all_reduce(*group, rank, buf, ReduceOp::kSum);
    Tensor y = t.make_op_output(x.shape(), std::move(buf), {x});
    t.set_last_backward([x = x, y]() mutable {
      if (!y.has_grad() || !y.grad_needed() || !x.grad_needed()) return;
      const auto& dy = y.grad();
      auto& dx = x.grad();
      for (size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
    });
    return y;
  };
  return hooks;
}

Tensor ParallelWorker::stage_forward(Tape& tape, const data::TokenBatch& batch,
                                     const std::vector<size_t>& rows, Tensor* boundary_in) {
  const int64_t s = batch.seq - 1;
  const int64_t b = static_cast<int64_t>(rows.size());
  const int64_t H = cfg_.model.hidden_size;
  BlockHooks hooks = tp_hooks(tape);

  Tensor x;
  if (local_.has_embedding) {
    std::vector<int32_t> ids(static_cast<size_t>(b * s));
    for (int64_t r = 0; r < b; ++r)
      for (int64_t i = 0; i < s; ++i)
        ids[static_cast<size_t>(r * s + i)] =
            batch.input_ids[rows[static_cast<size_t>(r)] * static_cast<size_t>(batch.seq) +
                            static_cast<size_t>(i)];
    x = embed_tokens(tape, local_.model.tok_embedding, local_.model.pos_encoding, ids, b, s);
  } else {
    const int prev = comm::rank_of(topo_, ctx_.coord.dp, ctx_.coord.tp, ctx_.coord.pp - 1);
    std::vector<double> vals = ctx_.hub->recv(ctx_.coord.rank, prev);
    if (static_cast<int64_t>(vals.size()) != b * s * H)
      throw ProtocolError("pipeline boundary: expected " + std::to_string(b * s * H) +
                          " activations, got " + std::to_string(vals.size()));
    x = Tensor::leaf({b, s, H}, std::move(vals), true);
    *boundary_in = x;
  }
  for (const DecoderBlock& blk : local_.model.blocks)
    x = decoder_block_forward(tape, x, blk, local_.model.local_heads, cfg_.model, hooks);
  return x;
}

void ParallelWorker::zero3_materialize_group_range(size_t lo, size_t hi) {
  if (!in_step_)
    throw ContractError("zero3 gather outside a step context");
  if (lo >= hi) return;
  const auto [olo, ohi] = zero_plan_.owned_range(ctx_.coord.dp);
  const size_t ilo = std::max(lo, olo), ihi = std::min(hi, ohi);
  std::span<const double> mine;
  if (ilo < ihi)
    mine = std::span<const double>(zero3_shard_.data() + (ilo - olo), ihi - ilo);
  std::vector<double> gathered =
      ctx_.hub->all_gather(ctx_.hub->dp_group(ctx_.coord), ctx_.coord.rank, mine);
  if (gathered.size() != hi - lo)
    throw ProtocolError("zero3 gather: expected " + std::to_string(hi - lo) + " elements, got " +
                        std::to_string(gathered.size()));
  // Scatter into the released parameter tensors covered by [lo, hi).
  for (size_t i = 0; i < local_.trainable.size(); ++i) {
    const LocalParamInfo& info = local_.infos[i];
    const size_t t_lo = info.flat_offset;
    const size_t t_hi = t_lo + static_cast<size_t>(local_.trainable[i].numel());
    if (t_lo >= hi || t_hi <= lo) continue;
    if (t_lo < lo || t_hi > hi)
      throw ContractError("zero3 gather range does not align with tensor '" + info.name + "'");
    local_.trainable[i].refill_data(
        std::span<const double>(gathered.data() + (t_lo - lo), t_hi - t_lo));
  }
}

void ParallelWorker::zero3_materialize_all() {
  // One gather per parameter group (embedding / each layer / tail), in
  // registry order.
  size_t i = 0;
  while (i < local_.infos.size()) {
    const int group = local_.infos[i].group;
    size_t j = i;
    size_t hi = local_.infos[i].flat_offset;
    while (j < local_.infos.size() && local_.infos[j].group == group) {
      hi = local_.infos[j].flat_offset + static_cast<size_t>(local_.trainable[j].numel());
      ++j;
    }
    zero3_materialize_group_range(local_.infos[i].flat_offset, hi);
    i = j;
  }
}

void ParallelWorker::zero3_release_all() {
  for (Tensor& t : local_.trainable)
    if (!t.data_released()) t.release_data();
}

std::vector<double> ParallelWorker::flatten_grads() const {
  std::vector<double> flat(local_.flat_len, 0.0);
  for (size_t i = 0; i < local_.trainable.size(); ++i) {
    const Tensor& t = local_.trainable[i];
    if (!t.has_grad()) continue;
    const auto& g = t.grad();
    std::memcpy(flat.data() + local_.infos[i].flat_offset, g.data(),
                g.size() * sizeof(double));
  }
  return flat;
}

std::vector<double> ParallelWorker::flatten_params() const {
  std::vector<double> flat(local_.flat_len, 0.0);
  for (size_t i = 0; i < local_.trainable.size(); ++i) {
    const auto& d = local_.trainable[i].data();
    std::memcpy(flat.data() + local_.infos[i].flat_offset, d.data(), d.size() * sizeof(double));
  }
  return flat;
}

void ParallelWorker::scatter_params(const std::vector<double>& flat) {
  for (size_t i = 0; i < local_.trainable.size(); ++i) {
    auto& d = local_.trainable[i].data();
    std::memcpy(d.data(), flat.data() + local_.infos[i].flat_offset, d.size() * sizeof(double));
  }
}

double ParallelWorker::share_loss_world(double local_contrib) const {
  std::vector<double> buf{local_contrib};
  ctx_.hub->all_reduce(ctx_.hub->world_group(), ctx_.coord.rank, buf, ReduceOp::kSum);
  return buf[0];
}

StepOutcome ParallelWorker::train_step(const data::TokenBatch& batch, double lr) {
  const auto& par = cfg_.parallel;
  const int64_t s = batch.seq - 1;
  if (s < 1) throw DataError("train step: batch sequences are too short to shift");
  if (batch.batch % par.dp_size != 0)
    throw DataError("train step: batch rows " + std::to_string(batch.batch) +
                    " not divisible by dp_size " + std::to_string(par.dp_size));
  const int64_t rows_per_replica = batch.batch / par.dp_size;
  if (rows_per_replica % cfg_.train.micro_batch_size != 0)
    throw DataError("train step: replica rows " + std::to_string(rows_per_replica) +
                    " not divisible by micro_batch_size " +
                    std::to_string(cfg_.train.micro_batch_size));
  const int64_t m = rows_per_replica / cfg_.train.micro_batch_size;

  // Every rank derives the pooled normalizer from the full (replicated)
  // batch, so gradients are exact fractions of the serial pooled mean.
  int64_t total_count = 0;
  for (int64_t r = 0; r < batch.batch; ++r)
    for (int64_t i = 1; i < batch.seq; ++i)
      total_count += batch.loss_mask[static_cast<size_t>(r * batch.seq + i)] ? 1 : 0;
  if (total_count == 0) throw DataError("train step: every target position is masked");

  in_step_ = true;
  for (Tensor& t : local_.trainable) t.zero_grad();
  if (par.zero_stage == 3) zero3_materialize_all();

  struct MicroState {
    std::unique_ptr<Tape> tape;
    Tensor boundary_in;
    Tensor boundary_out;
    Tensor loss;
  };
  std::vector<MicroState> micro(static_cast<size_t>(m));
  const bool last_stage = local_.has_head;
  double local_loss_sum = 0.0;

  for (int64_t j = 0; j < m; ++j) {
    MicroState& ms = micro[static_cast<size_t>(j)];
    ms.tape = std::make_unique<Tape>();
    std::vector<size_t> rows;
    for (int64_t r = 0; r < cfg_.train.micro_batch_size; ++r)
      rows.push_back(static_cast<size_t>(ctx_.coord.dp * rows_per_replica +
                                         j * cfg_.train.micro_batch_size + r));
    Tensor x = stage_forward(*ms.tape, batch, rows, &ms.boundary_in);
    if (last_stage) {
      Tensor logits = final_logits(*ms.tape, x, local_.model.final_norm, local_.model.lm_head);
      const int64_t b = static_cast<int64_t>(rows.size());
      std::vector<int32_t> targets(static_cast<size_t>(b * s));
      std::vector<uint8_t> mask(static_cast<size_t>(b * s));
      for (int64_t r = 0; r < b; ++r)
        for (int64_t i = 0; i < s; ++i) {
          const size_t src = rows[static_cast<size_t>(r)] * static_cast<size_t>(batch.seq) +
                             static_cast<size_t>(i + 1);
          targets[static_cast<size_t>(r * s + i)] = batch.input_ids[src];
          mask[static_cast<size_t>(r * s + i)] = batch.loss_mask[src];
        }
      bool any = false;
      for (uint8_t v : mask) any = any || v;
      if (any) {
        auto ce = cross_entropy(*ms.tape, logits, targets, mask, Reduction::kSum);
        ms.loss = ce.loss;
        local_loss_sum += ms.loss.item();
      }
    } else {
      const int next = comm::rank_of(topo_, ctx_.coord.dp, ctx_.coord.tp, ctx_.coord.pp + 1);
      ctx_.hub->send(ctx_.coord.rank, next, x.data());
      ms.boundary_out = x;
    }
  }

  if (par.zero_stage == 3) {
    zero3_release_all();
    zero3_materialize_all();  // backward re-gathers each parameter once more
  }

  const bool fused = optim::is_fused(cfg_.optimizer.kind);
  if (fused) {
    // Updates apply inside backward, the moment each gradient completes.
    Tape& tape = *micro[0].tape;
    comm::CommHub* hub = ctx_.hub;
    const ProcessGroup* dp_group = &hub->dp_group(ctx_.coord);
    const ProcessGroup* tp_group = &hub->tp_group(ctx_.coord);
    const int rank = ctx_.coord.rank;
    for (size_t i = 0; i < local_.trainable.size(); ++i) {
      const bool needs_tp = needs_tp_grad_reduce(i);
      const double step_lr = lr;
      Tensor param = local_.trainable[i];
      auto* adalomo = adalomo_ ? &*adalomo_ : nullptr;
      tape.add_post_grad_hook(param, [=](Tensor& t) mutable {
        if (dp_group->size() > 1) hub->all_reduce(*dp_group, rank, t.grad(), ReduceOp::kSum);
        if (needs_tp) hub->all_reduce(*tp_group, rank, t.grad(), ReduceOp::kSum);
        if (adalomo)
          adalomo->apply(t, step_lr);
        else
          optim::lomo_apply(t, step_lr, 1.0);
        t.drop_grad();
      });
    }
  }

  const double seed = 1.0 / static_cast<double>(total_count);
  for (int64_t j = m - 1; j >= 0; --j) {
    MicroState& ms = micro[static_cast<size_t>(j)];
    if (last_stage) {
      if (ms.loss.defined()) ms.tape->backward(ms.loss, seed);
    } else {
      const int next = comm::rank_of(topo_, ctx_.coord.dp, ctx_.coord.tp, ctx_.coord.pp + 1);
      std::vector<double> g = ctx_.hub->recv(ctx_.coord.rank, next);
      ms.tape->backward_with_grad(ms.boundary_out, g);
    }
    if (!local_.has_embedding) {
      const int prev = comm::rank_of(topo_, ctx_.coord.dp, ctx_.coord.tp, ctx_.coord.pp - 1);
      if (!ms.boundary_in.has_grad()) ms.boundary_in.grad();  // zeros
      ctx_.hub->send(ctx_.coord.rank, prev, ms.boundary_in.grad());
    }
    ms.tape.reset();
    ms.boundary_in = Tensor();
    ms.boundary_out = Tensor();
  }

  const double pooled_sum =
      share_loss_world(last_stage && ctx_.coord.tp == 0 ? local_loss_sum : 0.0);
  const double loss = pooled_sum / static_cast<double>(total_count);

  if (!fused) {
    // Replicated LoRA factors carry rank-partial gradients under TP.
    if (topo_.tp_size > 1) {
      for (size_t i = 0; i < local_.trainable.size(); ++i)
        if (needs_tp_grad_reduce(i))
          ctx_.hub->all_reduce(ctx_.hub->tp_group(ctx_.coord), ctx_.coord.rank,
                               local_.trainable[i].grad(), ReduceOp::kSum);
    }
    std::vector<double> flat_grads = flatten_grads();
    const ProcessGroup& dp_group = ctx_.hub->dp_group(ctx_.coord);
    const auto [olo, ohi] = zero_plan_.owned_range(ctx_.coord.dp);
    switch (par.zero_stage) {
      case 0: {
        ctx_.hub->all_reduce(dp_group, ctx_.coord.rank, flat_grads, ReduceOp::kSum);
        std::vector<double> params = flatten_params();
        flat_opt_->step(params, flat_grads, lr);
        scatter_params(params);
        break;
      }
      case 1: {
        ctx_.hub->all_reduce(dp_group, ctx_.coord.rank, flat_grads, ReduceOp::kSum);
        std::vector<double> params = flatten_params();
        flat_opt_->step(std::span<double>(params.data() + olo, ohi - olo),
                        std::span<const double>(flat_grads.data() + olo, ohi - olo), lr);
        std::vector<double> gathered = ctx_.hub->all_gather(
            dp_group, ctx_.coord.rank,
            std::span<const double>(params.data() + olo, ohi - olo));
        scatter_params(dp_group.size() > 1 ? gathered : params);
        break;
      }
      case 2: {
        std::vector<double> owned_grads = ctx_.hub->reduce_scatter(
            dp_group, ctx_.coord.rank, flat_grads, zero_plan_.part_sizes);
        std::vector<double> params = flatten_params();
        flat_opt_->step(std::span<double>(params.data() + olo, ohi - olo), owned_grads, lr);
        std::vector<double> gathered = ctx_.hub->all_gather(
            dp_group, ctx_.coord.rank,
            std::span<const double>(params.data() + olo, ohi - olo));
        scatter_params(dp_group.size() > 1 ? gathered : params);
        break;
      }
      case 3: {
        std::vector<double> owned_grads = ctx_.hub->reduce_scatter(
            dp_group, ctx_.coord.rank, flat_grads, zero_plan_.part_sizes);
        flat_opt_->step(zero3_shard_, owned_grads, lr);
        break;
      }
      default: throw ConfigError("unsupported zero stage");
    }
    for (Tensor& t : local_.trainable) t.drop_grad();
  } else {
    ++fused_steps_;
  }

  if (par.zero_stage == 3) zero3_release_all();
  in_step_ = false;

  StepOutcome out;
  out.loss = loss;
  out.masked_tokens = total_count;
  out.tokens_processed = batch.batch * s;
  return out;
}

bool ParallelWorker::needs_tp_grad_reduce(size_t trainable_index) const {
  const LocalParamInfo& info = local_.infos[trainable_index];
  if (topo_.tp_size <= 1) return false;
  // Replicated adapter factor of a sharded host: column hosts keep A
  // replicated, row hosts keep B replicated; both see partial gradients.
  const std::string& n = info.name;
  const bool is_a = n.size() > 7 && n.rfind(".lora_a") == n.size() - 7;
  const bool is_b = n.size() > 7 && n.rfind(".lora_b") == n.size() - 7;
  if (!is_a && !is_b) return false;
  if (n.find("lm_head") != std::string::npos) return false;  // replicated host
  const bool row_host = n.find("o_proj") != std::string::npos ||
                        n.find("down_proj") != std::string::npos;
  return (is_a && !row_host) || (is_b && row_host);
}

std::pair<double, int64_t> ParallelWorker::eval_nll(const data::TokenBatch& batch) {
  const auto& par = cfg_.parallel;
  const int64_t s = batch.seq - 1;
  if (batch.batch % par.dp_size != 0)
    throw DataError("eval: batch rows not divisible by dp_size");
  const int64_t rows_per_replica = batch.batch / par.dp_size;

  in_step_ = true;
  if (par.zero_stage == 3) zero3_materialize_all();
  double local_sum = 0.0;
  int64_t local_count = 0;
  {
    Tape tape;
    std::vector<size_t> rows;
    for (int64_t r = 0; r < rows_per_replica; ++r)
      rows.push_back(static_cast<size_t>(ctx_.coord.dp * rows_per_replica + r));
    Tensor dummy;
    Tensor x = stage_forward(tape, batch, rows, &dummy);
    if (local_.has_head) {
      Tensor logits = final_logits(tape, x, local_.model.final_norm, local_.model.lm_head);
      std::vector<int32_t> targets(static_cast<size_t>(rows_per_replica * s));
      std::vector<uint8_t> mask(static_cast<size_t>(rows_per_replica * s));
      for (int64_t r = 0; r < rows_per_replica; ++r)
        for (int64_t i = 0; i < s; ++i) {
          const size_t src = rows[static_cast<size_t>(r)] * static_cast<size_t>(batch.seq) +
                             static_cast<size_t>(i + 1);
          targets[static_cast<size_t>(r * s + i)] = batch.input_ids[src];
          mask[static_cast<size_t>(r * s + i)] = batch.loss_mask[src];
        }
      bool any = false;
      for (uint8_t v : mask) any = any || v;
      if (any) {
        auto ce = cross_entropy(tape, logits, targets, mask, Reduction::kSum);
        local_sum = ce.loss.item();
        local_count = ce.masked_count;
      }
    } else {
      const int next = comm::rank_of(topo_, ctx_.coord.dp, ctx_.coord.tp, ctx_.coord.pp + 1);
      ctx_.hub->send(ctx_.coord.rank, next, x.data());
    }
  }
  if (par.zero_stage == 3) zero3_release_all();
  in_step_ = false;

  const bool count_me = local_.has_head && ctx_.coord.tp == 0;
  std::vector<double> buf{count_me ? local_sum : 0.0,
                          count_me ? static_cast<double>(local_count) : 0.0};
  ctx_.hub->all_reduce(ctx_.hub->world_group(), ctx_.coord.rank, buf, ReduceOp::kSum);
  return {buf[0], static_cast<int64_t>(buf[1])};
}

std::vector<int32_t> ParallelWorker::greedy_decode(const std::vector<int32_t>& prompt,
                                                   int64_t max_new,
                                                   std::optional<int32_t> eos_id) {
  if (prompt.empty()) throw ContractError("greedy_decode: prompt must be non-empty");
  if (static_cast<int64_t>(prompt.size()) > cfg_.model.max_seq_len)
    throw DataError("greedy_decode: prompt exceeds max_seq_len");
  std::vector<int32_t> ids = prompt;
  for (int64_t step = 0; step < max_new; ++step) {
    if (static_cast<int64_t>(ids.size()) >= cfg_.model.max_seq_len) break;
    const int64_t s = static_cast<int64_t>(ids.size());
    in_step_ = true;
    if (cfg_.parallel.zero_stage == 3) zero3_materialize_all();
    int32_t next_tok = 0;
    {
      Tape tape;
      data::TokenBatch batch;
      batch.batch = 1;
      batch.seq = s + 1;  // stage_forward uses seq-1 positions
      batch.input_ids.assign(ids.begin(), ids.end());
      batch.input_ids.push_back(data::kPadId);
      batch.loss_mask.assign(static_cast<size_t>(batch.seq), 0);
      std::vector<size_t> rows{0};
      Tensor dummy;
      Tensor x = stage_forward(tape, batch, rows, &dummy);
      if (local_.has_head) {
        Tensor logits = final_logits(tape, x, local_.model.final_norm, local_.model.lm_head);
        const double* row = logits.data().data() + (s - 1) * cfg_.model.vocab_size;
        int32_t best = 0;
        for (int64_t t = 1; t < cfg_.model.vocab_size; ++t)
          if (row[t] > row[best]) best = static_cast<int32_t>(t);
        next_tok = best;
      } else {
        const int next = comm::rank_of(topo_, ctx_.coord.dp, ctx_.coord.tp, ctx_.coord.pp + 1);
        ctx_.hub->send(ctx_.coord.rank, next, x.data());
      }
    }
    if (cfg_.parallel.zero_stage == 3) zero3_release_all();
    in_step_ = false;

    std::vector<double> buf{local_.has_head && ctx_.coord.tp == 0 && ctx_.coord.dp == 0
                                ? static_cast<double>(next_tok)
                                : 0.0};
    ctx_.hub->all_reduce(ctx_.hub->world_group(), ctx_.coord.rank, buf, ReduceOp::kSum);
    const int32_t tok = static_cast<int32_t>(buf[0]);
    ids.push_back(tok);
    if (eos_id && tok == *eos_id) break;
  }
  return ids;
}

PersistentBytes ParallelWorker::persistent_bytes() const {
  PersistentBytes pb;
  for (const Tensor& t : local_.model.parameters())
    if (!t.data_released()) pb.params += static_cast<uint64_t>(t.numel()) * sizeof(double);
  pb.zero3_shard = zero3_shard_.size() * sizeof(double);
  if (flat_opt_) pb.optimizer_state = flat_opt_->state_bytes_runtime();
  if (adalomo_) pb.optimizer_state = adalomo_->state_bytes_runtime();
  return pb;
}

int64_t ParallelWorker::optimizer_steps() const {
  return flat_opt_ ? flat_opt_->steps_taken() : fused_steps_;
}

RankFinalState ParallelWorker::extract_state() const {
  RankFinalState st;
  st.coord = ctx_.coord;
  st.infos = local_.infos;
  if (cfg_.parallel.zero_stage == 3) {
    st.zero3_shard = zero3_shard_;
  } else {
    for (const Tensor& t : local_.trainable) st.tensor_values.push_back(t.data());
  }
  if (flat_opt_) {
    auto* self = const_cast<ParallelWorker*>(this);
    for (auto& [name, buf] : self->flat_opt_->buffers())
      st.optimizer_buffers.emplace_back(name, *buf);
    st.optimizer_steps = flat_opt_->steps_taken();
  } else {
    st.optimizer_steps = fused_steps_;
  }
  return st;
}

void ParallelWorker::load_state(const RankFinalState& state) {
  if (state.infos.size() != local_.infos.size())
    throw ContractError("load_state: parameter registry mismatch");
  if (cfg_.parallel.zero_stage == 3) {
    if (state.zero3_shard.size() != zero3_shard_.size())
      throw ContractError("load_state: zero3 shard length mismatch");
    zero3_shard_ = state.zero3_shard;
  } else {
    for (size_t i = 0; i < local_.trainable.size(); ++i) {
      if (state.tensor_values[i].size() != local_.trainable[i].data().size())
        throw ContractError("load_state: tensor size mismatch for '" + local_.infos[i].name +
                            "'");
      local_.trainable[i].data() = state.tensor_values[i];
    }
  }
  if (flat_opt_ && !state.optimizer_buffers.empty()) {
    auto bufs = flat_opt_->buffers();
    for (const auto& [name, values] : state.optimizer_buffers)
      for (auto& [bname, ptr] : bufs)
        if (bname == name && ptr->size() == values.size()) *ptr = values;
    flat_opt_->set_steps_taken(state.optimizer_steps);
  }
}

// ---- serial gather -----------------------------------------------------------------

std::vector<std::pair<std::string, std::vector<double>>> gather_full_params(
    const std::vector<RankFinalState>& states, const RunConfig& cfg) {
  const Topology topo{cfg.parallel.dp_size, cfg.parallel.tp_size, cfg.parallel.pp_size};
  if (static_cast<int>(states.size()) != topo.world_size())
    throw ContractError("gather_full_params: expected one state per rank");

  auto state_at = [&](int dp, int tp, int pp) -> const RankFinalState& {
    return states[static_cast<size_t>(comm::rank_of(topo, dp, tp, pp))];
  };

  // Per-cell local tensor values in registry order.
  auto cell_values = [&](int tp, int pp) {
    const RankFinalState& ref = state_at(0, tp, pp);
    std::vector<std::vector<double>> values;
    if (cfg.parallel.zero_stage == 3) {
      std::vector<double> flat;
      for (int dp = 0; dp < topo.dp_size; ++dp) {
        const auto& shard = state_at(dp, tp, pp).zero3_shard;
        flat.insert(flat.end(), shard.begin(), shard.end());
      }
      for (const LocalParamInfo& info : ref.infos) {
        const size_t n = static_cast<size_t>(shape_numel(info.local_shape));
        values.emplace_back(flat.begin() + static_cast<ptrdiff_t>(info.flat_offset),
                            flat.begin() + static_cast<ptrdiff_t>(info.flat_offset + n));
      }
    } else {
      values = ref.tensor_values;
    }
    return values;
  };

  std::vector<std::pair<std::string, std::vector<double>>> out;
  for (int pp = 0; pp < topo.pp_size; ++pp) {
    const RankFinalState& ref = state_at(0, 0, pp);
    std::vector<std::vector<std::vector<double>>> per_tp;  // [tp][param][..]
    for (int tp = 0; tp < topo.tp_size; ++tp) per_tp.push_back(cell_values(tp, pp));

    for (size_t i = 0; i < ref.infos.size(); ++i) {
      const LocalParamInfo& info = ref.infos[i];
      std::vector<double> full(static_cast<size_t>(shape_numel(info.global_shape)));
      switch (info.layout) {
        case Layout::kReplicated:
          full = per_tp[0][i];
          break;
        case Layout::kColumn: {
          size_t off = 0;
          for (int tp = 0; tp < topo.tp_size; ++tp) {
            const auto& v = per_tp[static_cast<size_t>(tp)][i];
            std::memcpy(full.data() + off, v.data(), v.size() * sizeof(double));
            off += v.size();
          }
          break;
        }
        case Layout::kRow: {
          const int64_t rows = info.global_shape[0], cols = info.global_shape[1];
          const int64_t cols_local = cols / topo.tp_size;
          for (int tp = 0; tp < topo.tp_size; ++tp) {
            const auto& v = per_tp[static_cast<size_t>(tp)][i];
            for (int64_t r = 0; r < rows; ++r)
              std::memcpy(full.data() + r * cols + tp * cols_local, v.data() + r * cols_local,
                          static_cast<size_t>(cols_local) * sizeof(double));
          }
          break;
        }
      }
      out.emplace_back(info.name, std::move(full));
    }
  }
  return out;
}

}  // namespace minicollie::parallel
