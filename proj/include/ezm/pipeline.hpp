#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "ezm/config.hpp"
#include "ezm/metrics.hpp"
#include "ezm/params.hpp"
#include "ezm/replay.hpp"

namespace ezm {

// Single-slot broadcast of immutable parameter snapshots. Readers only ever
// see complete published versions; versions must strictly increase.
class SnapshotChannel {
 public:
  struct Snapshot {
    int64_t version = -1;
    std::shared_ptr<const ParameterStore> params;
  };

  void publish(int64_t version, std::shared_ptr<const ParameterStore> params);
  Snapshot latest() const;
  int64_t latest_version() const;

 private:
  mutable std::mutex mu_;
  Snapshot cur_;
};

struct PipelineCounters {
  std::atomic<int64_t> env_steps{0};
  std::atomic<int64_t> episodes{0};
  std::atomic<int64_t> learner_steps{0};
  std::atomic<int64_t> published{0};
  std::atomic<int64_t> rejected_batches{0};
  std::atomic<int64_t> env_aborts{0};
};

struct EvalSummary {
  std::vector<double> raw;   // per-task mean episode return
  std::vector<double> norm;  // per-task normalized score
  double mean_norm = 0.0;    // task average
};

// Greedy evaluation: zeroed Gumbel keys, fresh searches, no training side
// effects. Episodes here never count against the env-step budget.
EvalSummary evaluate_policy(const EnvFamily& fam, const WorldModel& model,
                            const ParameterStore& params,
                            const std::vector<TaskSpec>& specs,
                            const PlanConfig& plan, int episodes,
                            uint64_t seed);

// Optional in-training probe: at a fixed learner-step period, compute
// single-task batch gradients and record pairwise cosine similarity of the
// flattened gradients restricted to a module group.
struct GradProbeSpec {
  int64_t period = 0;  // learner steps between probes; 0 disables
  int batch_per_task = 32;
  std::vector<std::pair<int, int>> pairs;
  std::vector<std::string> groups = {"dyn", "rew", "vp"};
};

// Parameter-name prefixes of one Fig-style module group: "dyn" covers the
// latent transition (dynamics + action encoder), "rew" the reward trunk,
// "vp" the shared value-policy trunk and its heads.
std::vector<std::string> module_group_prefixes(const std::string& group);

// Cosine over the union of prefix-matched entries (missing entries read as
// zero). A zero-norm side reports similarity 0 and sets *zero_flag.
double masked_grad_cosine(const GradientStore& a, const GradientStore& b,
                          const std::vector<std::string>& prefixes,
                          bool* zero_flag = nullptr);

struct RunResult {
  int64_t env_steps = 0;
  int64_t learner_steps = 0;
  int64_t episodes = 0;
  int64_t rejected_batches = 0;
  int64_t env_aborts = 0;
  std::vector<double> final_per_task_norm;
  double final_mean_norm = 0.0;
  bool early_stopped = false;
  int64_t steps_to_threshold = -1;  // env steps at the first passing eval
  std::string metrics_path;
  std::string checkpoint_path;
};

// Fully deterministic single-thread driver: balanced episode collection,
// update-to-data-paced learner steps, periodic greedy evals, one metrics
// file (byte-identical across runs of the same seed).
RunResult run_sync(const RunConfig& cfg, const std::string& out_dir,
                   const GradProbeSpec* probe = nullptr);

// Rollout workers + learner thread glued by the replay set (thread-safe
// sink) and the snapshot channel. The learner paces itself to the same
// update-to-data ratio as the synchronous driver.
RunResult run_async(const RunConfig& cfg, const std::string& out_dir);

// Dispatch on cfg.mode.
RunResult run_training(const RunConfig& cfg, const std::string& out_dir);

}  // namespace ezm
