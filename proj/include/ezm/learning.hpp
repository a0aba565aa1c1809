#pragma once

#include <vector>

#include "ezm/replay.hpp"
#include "ezm/world_model.hpp"

namespace ezm {

// Component weights of the training objective. Unrolled-step terms are
// additionally scaled by 1/K so deep unrolls do not dominate the root step.
struct LossWeights {
  double reward = 1.0;
  double value = 1.0;
  double policy = 1.0;
  double consistency = 2.0;
  double path_consistency = 1.0;  // 0 switches the regularizer off
  // Train the policy head on the whole improved distribution instead of the
  // filtered action's likelihood (discrete families only).
  bool policy_full_distribution = false;
};

struct LossComponents {
  double total = 0.0;
  double reward = 0.0;
  double value = 0.0;
  double policy = 0.0;
  double consistency = 0.0;
  double path_consistency = 0.0;
  int samples = 0;
};

// Totals are sums over tasks of per-task sample means, so tasks stay equally
// weighted regardless of how batch quotas round.
struct LossReport {
  LossComponents overall;
  std::vector<LossComponents> per_task;
  double alpha_mean = 0.0;    // mean TD-vs-search mixing weight this batch
  double alpha_min = 0.0, alpha_max = 0.0;
  int degenerate_cosine = 0;  // zero-norm consistency columns skipped
};

// Population variance of the decoded value-head ensemble.
double value_variance(const Vec& head_values);

// Variance-normalized mixing weight: 1 leans on the TD target, 0 on the
// search value; a spread-free batch splits the difference.
double mix_alpha(double variance, double var_min, double var_max);
double mixed_value_target(double v_td, double v_model, double variance,
                          double var_min, double var_max);

struct AlphaStats {
  double var_min = 0.0, var_max = 0.0;
  double mean = 0.0;
  int count = 0;
};
// Search-variance range over the batch's real (policy-weighted) positions.
AlphaStats batch_variance_range(const UnrollBatch& batch);

struct LossOptions {
  LossWeights weights;
  bool train = true;  // batch-norm batch stats + dropout
  uint64_t seed = 0;  // dropout stream
  // Gradient attenuation applied to the latent before each dynamics/reward
  // step. 0.5 keeps deep unrolls stable but makes the analytic gradient
  // deliberately differ from the true derivative; finite-difference tests set
  // this to 1.
  double latent_grad_scale = 0.5;
  // Test hooks: swap the stop-gradient branches for captured constants. The
  // gradients must be bit-identical to the normal build (that equality *is*
  // the stop-gradient firewall), and they make finite differencing of the
  // consistency/path terms well-defined.
  const std::vector<Mat>* override_cons_targets = nullptr;  // K of proj_w x B
  const std::vector<Mat>* override_pc_targets = nullptr;    // K of 1 x B
};

struct LossResult {
  LossReport report;
  GradientStore grads;
  StatsUpdates stats;
  std::vector<Mat> cons_targets;  // captured stop-gradient branch values
  std::vector<Mat> pc_targets;    // captured bellman scalars, 1 x B per step
};

// Builds the full training graph: encode o_0, unroll the dynamics K steps on
// grounded actions (latent gradients halved at each step), and accumulate
//   reward CE (two-hot)  +  policy MLE on the filtered action  +
//   value CE against two-hot(v_mix)  +  consistency (-cos, stopped target)  +
//   path consistency CE(sg(two-hot(r^ + gamma*v^_{k+1})), v^_k).
// Value CE averages the ensemble heads. Returns gradients per parameter.
LossResult base_loss(const WorldModel& model, const std::vector<TaskSpec>& specs,
                     const ParameterStore& params, const UnrollBatch& batch,
                     const LossOptions& opt);

}  // namespace ezm
