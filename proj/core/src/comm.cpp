#include "minicollie/comm.hpp"

#include <algorithm>
#include <thread>

namespace minicollie::comm {

void Topology::validate() const {
  if (dp_size < 1 || tp_size < 1 || pp_size < 1)
    throw ConfigError("topology: parallel sizes must be >= 1, got dp=" +
                      std::to_string(dp_size) + " tp=" + std::to_string(tp_size) +
                      " pp=" + std::to_string(pp_size));
}

int rank_of(const Topology& topo, int dp, int tp, int pp) {
  return dp * (topo.tp_size * topo.pp_size) + pp * topo.tp_size + tp;
}

RankCoord coord_of(const Topology& topo, int rank) {
  RankCoord c;
  c.rank = rank;
  const int per_dp = topo.tp_size * topo.pp_size;
  c.dp = rank / per_dp;
  c.pp = (rank % per_dp) / topo.tp_size;
  c.tp = rank % topo.tp_size;
  return c;
}

std::string kind_name(GroupKind kind) {
  switch (kind) {
    case GroupKind::kDp: return "dp";
    case GroupKind::kTp: return "tp";
    case GroupKind::kPp: return "pp";
    case GroupKind::kWorld: return "world";
  }
  return "?";
}

size_t ProcessGroup::position_of(int rank) const {
  for (size_t i = 0; i < members.size(); ++i)
    if (members[i] == rank) return i;
  throw ContractError("rank " + std::to_string(rank) + " is not a member of this " +
                      kind_name(kind) + " group");
}

KindCounters& CommCounters::by_kind(GroupKind kind) {
  switch (kind) {
    case GroupKind::kDp: return dp;
    case GroupKind::kTp: return tp;
    default: return world;
  }
}

const KindCounters& CommCounters::by_kind(GroupKind kind) const {
  return const_cast<CommCounters*>(this)->by_kind(kind);
}

uint64_t CommCounters::total_elements() const {
  uint64_t n = 0;
  for (const KindCounters* k : {&dp, &tp, &world})
    n += k->allreduce_elems + k->allgather_elems + k->reducescatter_elems;
  return n + p2p_sent_elems + p2p_recv_elems;
}

CommCounters CommCounters::delta_since(const CommCounters& earlier) const {
  CommCounters d = *this;
  for (auto [mine, theirs] : {std::pair{&d.dp, &earlier.dp}, std::pair{&d.tp, &earlier.tp},
                              std::pair{&d.world, &earlier.world}}) {
    mine->allreduce_elems -= theirs->allreduce_elems;
    mine->allgather_elems -= theirs->allgather_elems;
    mine->reducescatter_elems -= theirs->reducescatter_elems;
    mine->messages -= theirs->messages;
  }
  d.p2p_sent_elems -= earlier.p2p_sent_elems;
  d.p2p_recv_elems -= earlier.p2p_recv_elems;
  d.p2p_messages -= earlier.p2p_messages;
  return d;
}

// ---- CommHub ----------------------------------------------------------------

CommHub::CommHub(const Topology& topo, std::chrono::milliseconds timeout)
    : topo_(topo), timeout_(timeout) {
  topo.validate();
  counters_.resize(static_cast<size_t>(topo.world_size()));

  world_.kind = GroupKind::kWorld;
  for (int r = 0; r < topo.world_size(); ++r) world_.members.push_back(r);

  // One dp group per (tp, pp) cell; one tp group per (dp, pp) cell.
  for (int tp = 0; tp < topo.tp_size; ++tp)
    for (int pp = 0; pp < topo.pp_size; ++pp) {
      ProcessGroup g;
      g.kind = GroupKind::kDp;
      for (int dp = 0; dp < topo.dp_size; ++dp) g.members.push_back(rank_of(topo, dp, tp, pp));
      groups_.push_back(std::move(g));
    }
  for (int dp = 0; dp < topo.dp_size; ++dp)
    for (int pp = 0; pp < topo.pp_size; ++pp) {
      ProcessGroup g;
      g.kind = GroupKind::kTp;
      for (int tp = 0; tp < topo.tp_size; ++tp) g.members.push_back(rank_of(topo, dp, tp, pp));
      groups_.push_back(std::move(g));
    }

  world_.slot = 0;
  for (size_t i = 0; i < groups_.size(); ++i) groups_[i].slot = static_cast<int>(i) + 1;
  slots_.resize(groups_.size() + 1);
  for (Slot& s : slots_) {
    s.inputs.resize(static_cast<size_t>(topo.world_size()));
    s.part_plans.resize(static_cast<size_t>(topo.world_size()), nullptr);
  }
}

const ProcessGroup& CommHub::world_group() const { return world_; }

const ProcessGroup& CommHub::dp_group(const RankCoord& c) const {
  return groups_[static_cast<size_t>(c.tp * topo_.pp_size + c.pp)];
}

const ProcessGroup& CommHub::tp_group(const RankCoord& c) const {
  const size_t dp_groups = static_cast<size_t>(topo_.tp_size * topo_.pp_size);
  return groups_[dp_groups + static_cast<size_t>(c.dp * topo_.pp_size + c.pp)];
}

template <typename Pred>
void CommHub::wait_or_fail(std::unique_lock<std::mutex>& lock, Pred pred,
                           const std::string& what) {
  if (!cv_.wait_for(lock, timeout_, [&] { return aborted_ || pred(); }))
    throw ProtocolError("timeout after " + std::to_string(timeout_.count()) + " ms in " + what);
  if (aborted_ && !pred()) throw ProtocolError("run aborted: " + abort_reason_);
}

CommHub::Slot& CommHub::rendezvous(const ProcessGroup& group, int rank,
                                   std::span<const double> input, const std::string& tag,
                                   const std::vector<size_t>* part_plan,
                                   std::unique_lock<std::mutex>& lock) {
  Slot& slot = slots_[static_cast<size_t>(group.slot)];
  const size_t pos = group.position_of(rank);
  const size_t n = group.size();
  const std::string what = tag + " in " + kind_name(group.kind) + " group of rank " +
                           std::to_string(rank);

  if (slot.arrived == 0) {
    slot.tag = tag;
  } else if (slot.tag != tag) {
    abort_locked("collective mismatch: rank " + std::to_string(rank) + " entered " + tag +
                 " while group runs " + slot.tag);
    throw ProtocolError("collective mismatch in " + kind_name(group.kind) + " group: " + tag +
                        " vs " + slot.tag);
  }
  slot.inputs[pos] = input;
  slot.part_plans[pos] = part_plan;
  slot.arrived += 1;

  const uint64_t my_gen = slot.gen;
  if (slot.arrived == n) {
    // Last arrival performs the deterministic member-order computation.
    if (slot.tag.rfind("all_reduce", 0) == 0 || slot.tag.rfind("reduce_scatter", 0) == 0) {
      const size_t len = slot.inputs[0].size();
      for (size_t m = 1; m < n; ++m)
        if (slot.inputs[m].size() != len) {
          abort_locked("length mismatch in " + slot.tag);
          throw ProtocolError(slot.tag + ": member buffer lengths differ (" +
                              std::to_string(slot.inputs[m].size()) + " vs " +
                              std::to_string(len) + ")");
        }
      slot.result.assign(slot.inputs[0].begin(), slot.inputs[0].end());
      const bool is_max = slot.tag.find("max") != std::string::npos;
      for (size_t m = 1; m < n; ++m)
        for (size_t i = 0; i < len; ++i) {
          if (is_max)
            slot.result[i] = std::max(slot.result[i], slot.inputs[m][i]);
          else
            slot.result[i] += slot.inputs[m][i];
        }
    } else {  // all_gather: ordered concatenation
      slot.result.clear();
      for (size_t m = 0; m < n; ++m)
        slot.result.insert(slot.result.end(), slot.inputs[m].begin(), slot.inputs[m].end());
    }
    slot.arrived = 0;
    slot.gen += 1;
    cv_.notify_all();
  } else {
    wait_or_fail(lock, [&] { return slot.gen != my_gen; },
                 what + " (" + std::to_string(slot.arrived) + "/" + std::to_string(n) +
                     " arrived)");
  }
  return slot;
}

void CommHub::all_reduce(const ProcessGroup& group, int rank, std::span<double> buffer,
                         ReduceOp op) {
  if (group.size() <= 1) return;
  std::unique_lock lock(mu_);
  const std::string tag = op == ReduceOp::kSum
                              ? "all_reduce(sum," + std::to_string(buffer.size()) + ")"
                              : "all_reduce(max," + std::to_string(buffer.size()) + ")";
  Slot& slot = rendezvous(group, rank, buffer, tag, nullptr, lock);
  std::copy(slot.result.begin(), slot.result.end(), buffer.begin());
  KindCounters& k = counters_[static_cast<size_t>(rank)].by_kind(group.kind);
  k.allreduce_elems += buffer.size();
  k.messages += 1;
}

std::vector<double> CommHub::all_gather(const ProcessGroup& group, int rank,
                                        std::span<const double> shard) {
  if (group.size() <= 1) return std::vector<double>(shard.begin(), shard.end());
  std::unique_lock lock(mu_);
  Slot& slot = rendezvous(group, rank, shard, "all_gather", nullptr, lock);
  std::vector<double> out(slot.result);
  KindCounters& k = counters_[static_cast<size_t>(rank)].by_kind(group.kind);
  k.allgather_elems += out.size();
  k.messages += 1;
  return out;
}

std::vector<double> CommHub::reduce_scatter(const ProcessGroup& group, int rank,
                                            std::span<const double> buffer,
                                            const std::vector<size_t>& part_sizes) {
  if (part_sizes.size() != group.size())
    throw ProtocolError("reduce_scatter: partition plan has " +
                        std::to_string(part_sizes.size()) + " parts for a group of " +
                        std::to_string(group.size()));
  size_t total = 0;
  for (size_t s : part_sizes) total += s;
  if (total != buffer.size())
    throw ProtocolError("reduce_scatter: partition plan covers " + std::to_string(total) +
                        " of " + std::to_string(buffer.size()) + " elements");
  if (group.size() <= 1) return std::vector<double>(buffer.begin(), buffer.end());

  std::unique_lock lock(mu_);
  Slot& slot = rendezvous(group, rank, buffer,
                          "reduce_scatter(" + std::to_string(buffer.size()) + ")",
                          &part_sizes, lock);
  const size_t pos = group.position_of(rank);
  size_t offset = 0;
  for (size_t m = 0; m < pos; ++m) offset += part_sizes[m];
  std::vector<double> out(slot.result.begin() + static_cast<ptrdiff_t>(offset),
                          slot.result.begin() + static_cast<ptrdiff_t>(offset + part_sizes[pos]));
  KindCounters& k = counters_[static_cast<size_t>(rank)].by_kind(group.kind);
  k.reducescatter_elems += buffer.size();
  k.messages += 1;
  return out;
}

void CommHub::send(int from, int to, std::vector<double> buffer) {
  if (from == to) throw ContractError("send: self-send is not supported");
  std::unique_lock lock(mu_);
  counters_[static_cast<size_t>(from)].p2p_sent_elems += buffer.size();
  counters_[static_cast<size_t>(from)].p2p_messages += 1;
  channels_[{from, to}].push_back(std::move(buffer));
  cv_.notify_all();
}

std::vector<double> CommHub::recv(int to, int from) {
  std::unique_lock lock(mu_);
  auto& queue = channels_[{from, to}];
  wait_or_fail(lock, [&] { return !queue.empty(); },
               "recv(from=" + std::to_string(from) + ", to=" + std::to_string(to) + ")");
  std::vector<double> out = std::move(queue.front());
  queue.pop_front();
  counters_[static_cast<size_t>(to)].p2p_recv_elems += out.size();
  return out;
}

void CommHub::abort_locked(const std::string& reason) {
  if (!aborted_) {
    aborted_ = true;
    abort_reason_ = reason;
  }
  cv_.notify_all();
}

void CommHub::abort(const std::string& reason) {
  std::unique_lock lock(mu_);
  abort_locked(reason);
}

bool CommHub::aborted() const {
  std::unique_lock lock(mu_);
  return aborted_;
}

CommCounters CommHub::counters(int rank) const {
  std::unique_lock lock(mu_);
  return counters_[static_cast<size_t>(rank)];
}

std::vector<CommCounters> CommHub::all_counters() const {
  std::unique_lock lock(mu_);
  return counters_;
}

// ---- spawn ------------------------------------------------------------------

RunResult spawn_workers(const Topology& topo, const std::function<void(WorkerContext&)>& body,
                        const RunOptions& options) {
  topo.validate();
  CommHub hub(topo, options.timeout);
  const int world = topo.world_size();

  struct Failure {
    int rank;
    std::exception_ptr error;
    std::string message;
  };
  std::vector<RuntimeStats> stats(static_cast<size_t>(world));
  std::vector<Failure> failures;
  std::mutex failures_mu;

  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(world));
  for (int r = 0; r < world; ++r) {
    threads.emplace_back([&, r]() {
      set_runtime_stats(&stats[static_cast<size_t>(r)]);
      WorkerContext ctx;
      ctx.coord = coord_of(topo, r);
      ctx.topo = topo;
      ctx.hub = &hub;
      ctx.stats = &stats[static_cast<size_t>(r)];
      try {
        body(ctx);
      } catch (const std::exception& e) {
        {
          std::lock_guard lk(failures_mu);
          failures.push_back({r, std::current_exception(), e.what()});
        }
        hub.abort("rank " + std::to_string(r) + " failed: " + e.what());
      }
      set_runtime_stats(nullptr);
    });
  }
  for (std::thread& t : threads) t.join();

  if (!failures.empty()) {
    std::sort(failures.begin(), failures.end(),
              [](const Failure& a, const Failure& b) { return a.rank < b.rank; });
    // Secondary failures are usually abort echoes; surface the first rank's
    // original error with rank attribution, preserving its type.
    const Failure* primary = &failures.front();
    for (const Failure& f : failures)
      if (f.message.find("run aborted:") == std::string::npos) {
        primary = &f;
        break;
      }
    const std::string msg = "[rank " + std::to_string(primary->rank) + "] " + primary->message;
    try {
      std::rethrow_exception(primary->error);
    } catch (const ConfigError&) {
      throw ConfigError(msg);
    } catch (const DataError&) {
      throw DataError(msg);
    } catch (const ContractError&) {
      throw ContractError(msg);
    } catch (const std::exception&) {
      throw ProtocolError(msg);
    }
  }

  RunResult result;
  result.counters = hub.all_counters();
  result.stats = std::move(stats);
  return result;
}

}  // namespace minicollie::comm
