#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ezm/env.hpp"
#include "ezm/metrics.hpp"

namespace ezm {

// Minimal shared-trunk advantage actor-critic over discrete families: one
// trunk fed [obs; task embedding], a policy head, a scalar value head.
// Full-episode returns, one optimizer step per episode. This is the
// model-free side of the task-scaling probe, deliberately small.
struct MfConfig {
  int hidden = 128;
  int embedding = 32;
  double lr = 3e-4;
  double gamma = 0.99;
  double entropy_bonus = 0.01;
  double value_coef = 0.5;
  int64_t env_step_budget = 150000;
  int eval_period = 2000;  // env steps between greedy evals
  int eval_episodes = 4;   // per task
  double stop_threshold = -1.0;
  uint64_t seed = 1;
};

struct MfResult {
  int64_t env_steps = 0;
  int64_t episodes = 0;
  std::vector<double> final_per_task_norm;
  double final_mean_norm = 0.0;
  bool early_stopped = false;
  int64_t steps_to_threshold = -1;
};

// Deterministic single-thread run; eval records go to `metrics` when given.
MfResult run_mf_baseline(const EnvFamily& fam, const MfConfig& cfg,
                         MetricsWriter* metrics = nullptr);

}  // namespace ezm
