#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "ezm/common.hpp"
#include "ezm/env.hpp"
#include "ezm/task.hpp"
#include "ezm/world_model.hpp"

namespace ezm {

// Search-time knobs. sigma(q) = (c_visit + max_child_visits) * c_scale * q
// rescales normalized dive values before they are added to prior logits.
struct PlanConfig {
  int simulations = 32;
  int candidates = 16;     // root samples m (capped at the valid action count)
  int branch_samples = 4;  // sampled child actions per interior node (continuous)
  double gamma = 0.99;
  double c_visit = 50.0;
  double c_scale = 0.1;
  bool zero_keys = false;  // deterministic mode: every Gumbel key is 0
};

// What the search needs from a model. Latents are opaque columns; batched
// calls carry one column per concurrent root so searches share model calls.
class PlannerModel {
 public:
  virtual ~PlannerModel() = default;

  virtual bool discrete() const = 0;
  virtual int action_width() const = 0;
  virtual const TaskSpec& task_spec(int id) const = 0;

  virtual Mat encode(const Mat& obs, const std::vector<int>& tasks) = 0;

  struct Eval {
    Vec value;
    Vec value_variance;
    Mat policy_raw;
  };
  virtual Eval evaluate(const Mat& h, const std::vector<int>& tasks) = 0;

  struct Trans {
    Mat h_next;
    Vec reward;
  };
  virtual Trans step(const Mat& h, const Mat& actions,
                     const std::vector<int>& tasks) = 0;

  virtual PolicyOut policy(const Mat& raw, Eigen::Index col,
                           const TaskSpec& task) const = 0;
};

// pi' = (candidates, softmax(logit + sigma(qhat_norm)), chosen) plus the
// visit-weighted root value. The weights deliberately exclude the Gumbel
// keys: keys implement sampling-without-replacement, halving survival, and
// the final argmax, while the key-free softmax carries the policy
// improvement guarantee used as a learning target.
struct ImprovedPolicy {
  bool discrete = true;
  std::vector<int> action_index;  // discrete candidates (global indices)
  Mat actions;                    // continuous candidates, action_width x m
  Vec logits;                     // candidate prior logits / log-densities
  Vec qhat;                       // raw dive-value estimate per candidate
  Vec weights;                    // improved policy over candidates, sums to 1
  int chosen = 0;                 // candidate position of the filtered action
  double root_value = 0.0;
  double root_value_variance = 0.0;  // value-head ensemble variance at the root
};

EnvAction chosen_action(const ImprovedPolicy& p);

struct PlanRequest {
  Vec obs;  // padded to the family-global width
  int task = 0;
  uint64_t seed = 0;
};

// --- pieces exposed for direct testing -------------------------------------

// Min-max to [0,1]; a degenerate spread (max == min) maps everything to 0.5.
Vec minmax_normalize(const Vec& q);
double sigma_q(double q_norm, int max_child_visits, const PlanConfig& cfg);
// argmax of prior(a) - visits(a)/(1 + sum visits); repeated selection makes
// empirical visit frequencies track the prior. Lowest index wins ties.
int select_by_visit_deficit(const Vec& prior, const Eigen::VectorXi& visits);
Vec improved_weights(const Vec& logits, const Vec& q_norm, int max_child_visits,
                     const PlanConfig& cfg);

// Per-phase (survivor count, dives per survivor); leftover dives go to the
// best-scoring arm after the last phase. Phase dives + leftover == budget.
struct HalvingSchedule {
  std::vector<std::pair<int, int>> phases;
  int leftover = 0;
};
HalvingSchedule halving_schedule(int m, int simulations);

struct RootCandidates {
  std::vector<int> action_index;  // discrete
  Mat actions;                    // continuous, action_width x m
  Vec keys;
  Vec logits;
};
// Gumbel top-m over valid logits (exact without-replacement sampling).
RootCandidates sample_root_candidates_discrete(const Vec& logits, const Vec& mask,
                                               int m, bool zero_keys, Rng& rng);
// 2m proposals from the squashed policy, keep m by Gumbel-perturbed
// log-density (without-replacement surrogate on a continuous support).
RootCandidates sample_root_candidates_continuous(const PolicyOut& p, const Vec& mask,
                                                 int m, bool zero_keys, Rng& rng);

// ----------------------------------------------------------------------------

// Runs one independent search per request in lockstep so every simulation
// step is a single batched model call across roots.
std::vector<ImprovedPolicy> plan_batch(PlannerModel& model, const PlanConfig& cfg,
                                       const std::vector<PlanRequest>& requests);
ImprovedPolicy plan(PlannerModel& model, const PlanConfig& cfg,
                    const PlanRequest& request);

// Planner view of a learned model snapshot (one per thread, like ModelEval).
class LearnedPlannerModel : public PlannerModel {
 public:
  LearnedPlannerModel(ModelEval& eval, std::vector<TaskSpec> specs);

  bool discrete() const override;
  int action_width() const override;
  const TaskSpec& task_spec(int id) const override {
    return specs_.at(size_t(id));
  }
  Mat encode(const Mat& obs, const std::vector<int>& tasks) override;
  Eval evaluate(const Mat& h, const std::vector<int>& tasks) override;
  Trans step(const Mat& h, const Mat& actions,
             const std::vector<int>& tasks) override;
  PolicyOut policy(const Mat& raw, Eigen::Index col,
                   const TaskSpec& task) const override;

 private:
  ModelEval* eval_;
  std::vector<TaskSpec> specs_;
};

inline std::vector<TaskSpec> family_specs(const EnvFamily& fam) {
  std::vector<TaskSpec> out;
  out.reserve(size_t(fam.num_tasks()));
  for (int k = 0; k < fam.num_tasks(); ++k) out.push_back(fam.task(k));
  return out;
}

}  // namespace ezm
