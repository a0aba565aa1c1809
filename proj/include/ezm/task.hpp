#pragma once

#include <string>
#include <vector>

#include "ezm/common.hpp"

namespace ezm {

// Static description of one task inside a family. Observations and actions
// live in per-task native widths; batches are zero-padded / masked up to the
// family-global widths.
struct TaskSpec {
  int id = 0;
  std::string name;
  int obs_dim = 0;     // native width, <= global
  int action_dim = 0;  // native width (discrete: number of valid actions)
  Vec action_mask;     // global action width; 1 = valid dim / action
  bool discrete = true;
  double random_score = 0.0;
  double success_score = 1.0;
};

inline Mat pad_rows(const Mat& x, Eigen::Index global) {
  require(x.rows() <= global, "pad_rows: input wider than global width");
  if (x.rows() == global) return x;
  Mat out = Mat::Zero(global, x.cols());
  out.topRows(x.rows()) = x;
  return out;
}

inline Vec one_hot(int index, Eigen::Index size) {
  require(index >= 0 && index < size, "one_hot: index out of range");
  Vec v = Vec::Zero(size);
  v(index) = 1.0;
  return v;
}

// (raw - random) / (success - random); 0 = random policy, 1 = task solved.
inline double normalized_score(double raw, const TaskSpec& t) {
  const double denom = t.success_score - t.random_score;
  require(std::abs(denom) > 1e-9, "normalized_score: degenerate reference scores");
  return (raw - t.random_score) / denom;
}

// Per-task sample quotas for a batch: every task gets floor(B/K), and the
// remaining B mod K extras rotate with `rotation` so no task is permanently
// favoured.
inline std::vector<int> batch_quota(int batch, int num_tasks, int rotation = 0) {
  require(batch >= num_tasks && num_tasks > 0, "batch_quota: batch smaller than task count");
  std::vector<int> q(size_t(num_tasks), batch / num_tasks);
  const int extra = batch % num_tasks;
  for (int i = 0; i < extra; ++i)
    q[size_t((rotation + i) % num_tasks)] += 1;
  return q;
}

// Round-robin task assignment staggered across workers; per-task episode
// counts differ by at most one at any point in the schedule.
inline int balanced_task_schedule(int num_tasks, uint64_t worker,
                                  uint64_t episode) {
  require(num_tasks > 0, "balanced_task_schedule: no tasks");
  return int((worker + episode) % uint64_t(num_tasks));
}

}  // namespace ezm
