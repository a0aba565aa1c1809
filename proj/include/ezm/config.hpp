#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ezm/env.hpp"
#include "ezm/learning.hpp"
#include "ezm/planner.hpp"
#include "ezm/world_model.hpp"

namespace ezm {

// Everything a run needs, in one flat struct. Defaults are the
// humanoid-scale settings (discount 0.99, unroll 5, TD 5, batch 512, hidden
// 512, embedding 128, 3 res blocks, 32 simulations, 16 root candidates,
// Adam 1e-4 / weight decay 2e-5, 1e6 buffer, 2e5 training steps); the toy
// families override most of them through config files.
struct RunConfig {
  // run identity
  std::string family = "gridnav";  // gridnav | gridnav+corridor | pointmass | pointmass+probe
  int num_tasks = 4;
  // Train on a window of a larger task set without changing task geometry:
  // the base family is built with `family_total_tasks` tasks (0: as many as
  // needed) and tasks [task_offset, task_offset + num_tasks) are exposed,
  // re-indexed from 0. The disjoint-subset scaling protocol relies on this.
  int task_offset = 0;
  int family_total_tasks = 0;
  uint64_t seed = 1;
  std::string mode = "sync";  // sync | async

  // core hyperparameters
  double gamma = 0.99;
  int unroll_steps = 5;
  int td_steps = 5;
  int batch_size = 512;
  int64_t replay_capacity = 1000000;  // transitions per task buffer
  int64_t training_steps = 200000;    // learner-step budget
  int hidden = 512;
  int embedding = 128;
  int res_blocks = 3;
  int simulations = 32;
  int top_actions = 16;      // root candidates (discrete cap: valid actions)
  int sampled_actions = 16;  // continuous root proposals kept
  double lr = 1e-4;
  double weight_decay = 2e-5;

  // secondary model knobs
  int action_embedding = 64;
  int head_width = 512;
  int proj_hidden = 1024;
  int proj_width = 512;
  int value_heads = 5;
  double dropout = 0.1;
  double bn_momentum = 0.1;
  int branch_samples = 4;  // sampled child actions per interior node
  double c_visit = 50.0;
  double c_scale = 0.1;

  // loss weights
  double reward_loss_weight = 1.0;
  double value_loss_weight = 1.0;
  double policy_loss_weight = 1.0;
  double consistency_loss_weight = 2.0;
  double path_consistency_weight = 1.0;
  // Train the policy toward the whole improved distribution instead of the
  // filtered action only. Off by default (the more stable published choice);
  // small task families with few simulations learn faster with it on.
  bool policy_full_distribution = false;

  // schedule and budgets (desk-scale defaults)
  int64_t env_step_budget = 200000;
  double updates_per_env_step = 0.25;
  int64_t min_fill_per_task = 400;  // transitions before learning starts
  int publish_period = 100;         // learner steps between snapshot publishes
  int staleness_bound = 1000;       // max learner-step lag a worker plans with
  int target_period = 200;          // learner steps between target refreshes
  int eval_period = 2000;           // env steps between eval suites
  int eval_episodes = 4;            // per task
  int train_log_period = 100;       // learner steps between loss records
  double stop_threshold = -1.0;     // task-avg normalized return; < 0 disables
  int rollout_workers = 2;          // async mode only
  int checkpoint_period = 0;        // learner steps; 0 = final checkpoint only

  // ablation switches
  bool independent_replay = true;  // false: one monolithic shared buffer
  bool path_consistency = true;    // false: drop the value-path term
  bool te_rep = true, te_dyn = true, te_rew = true, te_vp = true;

  void validate() const;  // throws ContractError on the first bad field

  ModelConfig model_config(const EnvFamily& fam) const;
  PlanConfig plan_config() const;
  LossWeights loss_weights() const;
};

// key = value assignment; used by the file parser and by CLI overrides.
// Unknown keys and unparseable values throw ContractError.
void set_config_key(RunConfig& cfg, const std::string& key,
                    const std::string& value);

// Lines of `key = value`; '#' starts a comment; blank lines ignored.
RunConfig parse_config_file(const std::string& path);
RunConfig parse_config_text(const std::string& text);

// Every key in declaration order; parse_config_text round-trips it.
std::string serialize_config(const RunConfig& cfg);

std::unique_ptr<EnvFamily> make_family(const RunConfig& cfg);

}  // namespace ezm
