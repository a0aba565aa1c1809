#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <vector>

#include "ezm/common.hpp"
#include "ezm/planner.hpp"

namespace ezm {

// One whole episode as collected by a rollout worker. Observations are
// padded to the family-global width and include the final (terminal or
// truncation) observation, so obs has one more column than there are
// transitions.
struct TrajectorySegment {
  int task_id = 0;
  uint64_t uid = 0;
  uint64_t plan_seed = 0;     // base seed of the searches that acted
  int64_t model_version = 0;  // snapshot version at collection time
  Mat obs;                    // obs_width x (T+1)
  Mat actions;                // action_width x T (one-hot / box)
  Vec rewards;                // T
  bool terminal = false;      // env terminal (false = truncated or cut short)
  Vec root_values;            // T: behavior-search root values

  int length() const { return int(rewards.size()); }
};

// FIFO ring of segments for one task; capacity counts transitions. Safe for
// concurrent store/sample: a stored segment is sampleable before store()
// returns.
class TaskReplayBuffer {
 public:
  TaskReplayBuffer(int task_id, size_t capacity_transitions)
      : task_id_(task_id), capacity_(capacity_transitions) {}

  void store(std::shared_ptr<const TrajectorySegment> seg);
  size_t transitions() const;
  size_t segments() const;
  std::vector<uint64_t> segment_uids() const;

  // Uniform over transitions: (segment, step index).
  std::pair<std::shared_ptr<const TrajectorySegment>, int> sample(Rng& rng) const;

  int task_id() const { return task_id_; }

 private:
  mutable std::mutex mu_;
  int task_id_;
  size_t capacity_;
  size_t transitions_ = 0;
  std::deque<std::shared_ptr<const TrajectorySegment>> segs_;
};

// A batch of unroll windows plus the targets reanalyze fills in. Position k
// of item b refers to segment step s = k0 + k. Mask conventions:
//   value_w   rows 0..K: 1 for real states; past a terminal the state is
//             absorbing (still 1, target value 0); past a truncation 0.
//   policy_w  rows 0..K: 1 only for real pre-action states (s < T).
//   reward_w  rows 0..K-1: 1 for real transitions, and for absorbing ones
//             after a terminal (target 0); 0 past a truncation.
//   cons_w    rows 0..K-1: 1 when the grounded successor observation exists.
struct UnrollBatch {
  int unroll = 5;
  int td = 5;
  double gamma = 0.99;

  struct Item {
    std::shared_ptr<const TrajectorySegment> seg;
    int k0 = 0;
  };
  std::vector<Item> items;

  Mat value_w, policy_w, reward_w, cons_w;  // (unroll+1) x B
  Mat reward_target;                        // (unroll+1) x B, rows 0..K-1 used

  // reanalyze outputs, (unroll+1) x B
  Mat v_td, v_model, var_model;
  std::vector<std::vector<ImprovedPolicy>> policy_targets;  // B x (unroll+1)

  int batch() const { return int(items.size()); }
};

// Allocates target storage and derives the structural masks for a set of
// (segment, start) windows.
UnrollBatch make_unroll(std::vector<UnrollBatch::Item> items, int unroll,
                        int td, double gamma);

// Per-task replay with balanced batch quotas; `independent = false` collapses
// everything into one shared buffer with global uniform sampling (the
// monolithic-replay ablation).
class ReplaySet {
 public:
  ReplaySet(int num_tasks, size_t capacity_per_task, bool independent = true);

  void store(std::shared_ptr<const TrajectorySegment> seg);
  bool min_filled(size_t per_task_transitions) const;
  size_t total_transitions() const;
  int num_tasks() const { return num_tasks_; }
  bool independent() const { return independent_; }
  const TaskReplayBuffer& buffer(int i) const { return *buffers_.at(size_t(i)); }
  int64_t starved_batches() const { return starved_; }

  // Exactly floor(B/K) samples per task (+1 for `B mod K` tasks, rotating);
  // an empty buffer is skipped with a starvation count.
  UnrollBatch sample_batch(int batch_size, int rotation, int unroll, int td,
                           double gamma, Rng& rng) const;

 private:
  int num_tasks_;
  bool independent_;
  std::vector<std::unique_ptr<TaskReplayBuffer>> buffers_;
  mutable std::atomic<int64_t> starved_{0};
};

// n-step discounted return over the window plus gamma^n * bootstrap; pass
// fewer than n rewards (episode end) with bootstrap 0 for the terminal case.
double td_target(const Vec& rewards, double bootstrap, double gamma, int n);

struct ReanalyzeOptions {
  PlanConfig plan;
  bool use_stored_seeds = false;  // replay the collection-time search draws
  uint64_t seed = 0;              // fresh per-position seeds derive from this
};

// Fills v_td (n-step targets bootstrapped by `target`), and per-position
// improved policies / root values / value-head variances from searches with
// `current`. Deterministic given (models, options). Planning is batched over
// every (item, position) pair in one lockstep call.
void reanalyze(UnrollBatch& batch, PlannerModel& current, PlannerModel& target,
               const ReanalyzeOptions& opt);

}  // namespace ezm
