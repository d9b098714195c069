#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "minicollie/errors.hpp"
#include "minicollie/util.hpp"

namespace minicollie::comm {

struct Topology {
  int dp_size = 1;
  int tp_size = 1;
  int pp_size = 1;

  int world_size() const { return dp_size * tp_size * pp_size; }
  void validate() const;
};

// Fixed layout: rank = dp * (tp_size * pp_size) + pp * tp_size + tp, with the
// tensor-parallel index varying fastest (TP groups communicate most, so they
// get contiguous ranks).
struct RankCoord {
  int rank = 0;
  int dp = 0;
  int tp = 0;
  int pp = 0;
};

int rank_of(const Topology& topo, int dp, int tp, int pp);
RankCoord coord_of(const Topology& topo, int rank);

enum class GroupKind { kDp, kTp, kPp, kWorld };
std::string kind_name(GroupKind kind);

struct ProcessGroup {
  GroupKind kind = GroupKind::kWorld;
  std::vector<int> members;  // fixed order, identical on every member
  int slot = -1;             // hub-internal rendezvous slot

  size_t size() const { return members.size(); }
  size_t position_of(int rank) const;
};

struct KindCounters {
  uint64_t allreduce_elems = 0;
  uint64_t allgather_elems = 0;
  uint64_t reducescatter_elems = 0;
  uint64_t messages = 0;
};

struct CommCounters {
  KindCounters dp, tp, world;
  uint64_t p2p_sent_elems = 0;
  uint64_t p2p_recv_elems = 0;
  uint64_t p2p_messages = 0;

  KindCounters& by_kind(GroupKind kind);
  const KindCounters& by_kind(GroupKind kind) const;
  uint64_t total_elements() const;
  CommCounters delta_since(const CommCounters& earlier) const;
};

enum class ReduceOp { kSum, kMax };

// Deterministic in-process communication fabric. Collectives rendezvous all
// members, reduce in fixed member order on one thread, and hand every member
// the identical result; point-to-point channels are FIFO per (from, to).
class CommHub {
 public:
  CommHub(const Topology& topo, std::chrono::milliseconds timeout);

  const Topology& topology() const { return topo_; }
  const ProcessGroup& world_group() const;
  const ProcessGroup& dp_group(const RankCoord& c) const;
  const ProcessGroup& tp_group(const RankCoord& c) const;

  // Collectives. Singleton groups are local no-ops and count nothing.
  void all_reduce(const ProcessGroup& group, int rank, std::span<double> buffer, ReduceOp op);
  std::vector<double> all_gather(const ProcessGroup& group, int rank,
                                 std::span<const double> shard);
  std::vector<double> reduce_scatter(const ProcessGroup& group, int rank,
                                     std::span<const double> buffer,
                                     const std::vector<size_t>& part_sizes);

  void send(int from, int to, std::vector<double> buffer);
  std::vector<double> recv(int to, int from);

  void abort(const std::string& reason);
  bool aborted() const;

  CommCounters counters(int rank) const;
  std::vector<CommCounters> all_counters() const;

 private:
  struct Slot {
    uint64_t gen = 0;
    size_t arrived = 0;
    std::string tag;
    std::vector<std::span<const double>> inputs;
    std::vector<const std::vector<size_t>*> part_plans;
    std::vector<double> result;
  };

  Topology topo_;
  std::chrono::milliseconds timeout_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  bool aborted_ = false;
  std::string abort_reason_;
  std::vector<ProcessGroup> groups_;
  ProcessGroup world_;
  std::vector<Slot> slots_;
  std::map<std::pair<int, int>, std::deque<std::vector<double>>> channels_;
  std::vector<CommCounters> counters_;

  // Waits until pred() holds; throws ProtocolError on timeout (naming what)
  // or when the run is aborted.
  template <typename Pred>
  void wait_or_fail(std::unique_lock<std::mutex>& lock, Pred pred, const std::string& what);

  void abort_locked(const std::string& reason);  // requires mu_ held

  Slot& rendezvous(const ProcessGroup& group, int rank, std::span<const double> input,
                   const std::string& tag, const std::vector<size_t>* part_plan,
                   std::unique_lock<std::mutex>& lock);
};

struct WorkerContext {
  RankCoord coord;
  Topology topo;
  CommHub* hub = nullptr;
  RuntimeStats* stats = nullptr;
};

struct RunOptions {
  std::chrono::milliseconds timeout{30000};
};

struct RunResult {
  std::vector<CommCounters> counters;
  std::vector<RuntimeStats> stats;
};

// Runs one logical worker per rank to completion (OS threads). Worker
// failures abort the run and surface as an error naming the failing rank.
// Given identical seeds and inputs the run is reproducible bit-for-bit.
RunResult spawn_workers(const Topology& topo, const std::function<void(WorkerContext&)>& body,
                        const RunOptions& options = {});

}  // namespace minicollie::comm
