#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ezm/common.hpp"
#include "ezm/task.hpp"

namespace ezm {

// One action in the family-global action space. Discrete families use
// `index`; continuous families use `box` (global width, masked dims zero).
struct EnvAction {
  int index = -1;
  Vec box;
};

struct StepResult {
  double reward = 0.0;
  bool terminal = false;   // environment-defined absorbing end
  bool truncated = false;  // step cap hit (value bootstrapping stays valid)
  int clamped_dims = 0;    // continuous action components outside the box
};

// A family is a set of tasks sharing transition dynamics (and global
// observation/action widths after padding/masking). Environments are
// deterministic given (state, action); randomness enters through reset.
class EnvFamily {
 public:
  virtual ~EnvFamily() = default;

  struct State {
    Vec x;
    int steps = 0;
    bool done = false;
  };

  virtual std::string name() const = 0;
  virtual int num_tasks() const = 0;
  virtual const TaskSpec& task(int id) const = 0;
  virtual int obs_width() const = 0;
  virtual int action_width() const = 0;
  virtual bool discrete() const = 0;
  virtual int horizon() const = 0;

  virtual State reset(int task, Rng& rng) const = 0;
  virtual StepResult step(State& s, const EnvAction& a, int task) const = 0;
  virtual Vec observe(const State& s, int task) const = 0;  // padded

  // Direction of a near-optimal controller's action from `s` (unit-ish,
  // global action width); used by the conflicting-action certificate.
  virtual Vec expert_action_direction(const State& s, int task) const = 0;
};

// 7x7 grid, 4 moves (up/down/left/right), -0.01 per step, +1 exactly on
// reaching the goal (the goal reward replaces the step cost), episode cap
// 100. Tasks differ only in goal cell. With `with_corridor`, a 1x7 corridor
// task (valid actions: left/right only) is appended to exercise observation
// padding and action masking inside one family.
class GridNavFamily : public EnvFamily {
 public:
  explicit GridNavFamily(int num_tasks, bool with_corridor = false);

  std::string name() const override { return name_; }
  int num_tasks() const override { return int(tasks_.size()); }
  const TaskSpec& task(int id) const override { return tasks_.at(size_t(id)); }
  int obs_width() const override { return 49; }
  int action_width() const override { return 4; }
  bool discrete() const override { return true; }
  int horizon() const override { return 100; }

  State reset(int task, Rng& rng) const override;
  StepResult step(State& s, const EnvAction& a, int task) const override;
  Vec observe(const State& s, int task) const override;
  Vec expert_action_direction(const State& s, int task) const override;

  static constexpr int kSide = 7;
  bool is_corridor(int task) const { return with_corridor_ && task == int(tasks_.size()) - 1; }
  std::pair<int, int> goal(int task) const { return goals_.at(size_t(task)); }
  int cell_of(const State& s) const { return int(s.x(0)) * kSide + int(s.x(1)); }

 private:
  std::string name_;
  bool with_corridor_ = false;
  std::vector<TaskSpec> tasks_;
  std::vector<std::pair<int, int>> goals_;  // corridor goal stored as (0, col)
};

// Exact discounted value iteration for one grid task, iterated to `tol`
// residual, plus shortest-path undiscounted optimal returns.
struct GridOracle {
  Mat v;                          // 7x7 (or 1x7) discounted V*
  Mat q;                          // cells x 4, -inf on masked actions
  Eigen::MatrixXi best_action;    // argmax_a Q, lowest index wins ties
  Mat undiscounted_return;        // optimal episode return from each cell
  Eigen::MatrixXi distance;       // BFS steps to goal
};
GridOracle gridnav_oracle(const GridNavFamily& fam, int task, double gamma,
                          double tol = 1e-10);

// Planar double integrator: dt=0.05, semi-implicit Euler, positions and
// velocities clamped to [-1,1], reward 0.05*exp(-8*d^2) to the task goal,
// cap 200 steps, no terminal states. Task goals sit 0.6 from the origin at
// evenly spread angles so optimal controls conflict. Observations are
// [pos, vel, goal - pos] padded to the family width; with `pad_probe`, one
// extra task also observes its absolute goal (wider native obs).
class PointMassFamily : public EnvFamily {
 public:
  explicit PointMassFamily(int num_tasks, bool pad_probe = false);

  std::string name() const override { return name_; }
  int num_tasks() const override { return int(tasks_.size()); }
  const TaskSpec& task(int id) const override { return tasks_.at(size_t(id)); }
  int obs_width() const override { return obs_width_; }
  int action_width() const override { return 2; }
  bool discrete() const override { return false; }
  int horizon() const override { return 200; }

  State reset(int task, Rng& rng) const override;
  StepResult step(State& s, const EnvAction& a, int task) const override;
  Vec observe(const State& s, int task) const override;
  Vec expert_action_direction(const State& s, int task) const override;

  Vec goal(int task) const { return goals_.at(size_t(task)); }
  // PD controller used for the success reference score.
  Vec pd_action(const State& s, int task) const;

  static constexpr double kDt = 0.05;

 private:
  std::string name_;
  int obs_width_ = 6;
  std::vector<TaskSpec> tasks_;
  std::vector<Vec> goals_;
};

// Scans reset states of both tasks for the probe state whose expert action
// directions disagree the most; `inner` < 0 certifies conflicting optimal
// actions from a shared state.
struct ConflictProbe {
  Vec state;
  Vec dir_a, dir_b;
  double inner = 1.0;
};
ConflictProbe find_conflict(const EnvFamily& fam, int task_a, int task_b,
                            int probes = 64, uint64_t seed = 12345);

// Undiscounted episode return of a fixed policy, for reference scores.
double rollout_return(const EnvFamily& fam, int task,
                      const std::function<EnvAction(const EnvFamily::State&)>& pi,
                      Rng& reset_rng);

}  // namespace ezm
