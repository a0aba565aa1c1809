#include "ezm/env.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace ezm {

namespace {

// Goal cells spread over the grid so optimal routes disagree across tasks.
const std::pair<int, int> kGridGoals[8] = {{6, 6}, {0, 0}, {0, 6}, {6, 0},
                                           {3, 6}, {3, 0}, {0, 3}, {6, 3}};
constexpr double kStepCost = -0.01;
constexpr double kGoalReward = 1.0;

struct GridMove {
  int dr, dc;
};
const GridMove kMoves[4] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};  // up,down,left,right

}  // namespace

GridNavFamily::GridNavFamily(int num_tasks, bool with_corridor)
    : with_corridor_(with_corridor) {
  require(num_tasks >= 1 && num_tasks <= 8, "GridNavFamily: supports 1..8 goal tasks");
  name_ = "gridnav" + std::to_string(num_tasks) + (with_corridor ? "+corridor" : "");
  for (int k = 0; k < num_tasks; ++k) goals_.push_back(kGridGoals[k]);
  if (with_corridor) goals_.push_back({0, kSide - 1});

  const int total = num_tasks + (with_corridor ? 1 : 0);
  for (int k = 0; k < total; ++k) {
    TaskSpec t;
    t.id = k;
    const bool corridor = with_corridor && k == total - 1;
    t.name = corridor ? "corridor"
                      : "grid_goal_" + std::to_string(goals_[size_t(k)].first) + "_" +
                            std::to_string(goals_[size_t(k)].second);
    t.obs_dim = corridor ? kSide : kSide * kSide;
    t.action_dim = corridor ? 2 : 4;
    t.discrete = true;
    t.action_mask = Vec::Ones(4);
    if (corridor) {
      t.action_mask(0) = 0.0;  // up/down never valid in the corridor
      t.action_mask(1) = 0.0;
    }
    tasks_.push_back(std::move(t));
  }

  // Reference scores: optimal return in closed form from BFS distances;
  // random-policy return by exact finite-horizon dynamic programming over
  // valid actions.
  for (int k = 0; k < total; ++k) {
    const bool corridor = is_corridor(k);
    const int rows = corridor ? 1 : kSide;
    const auto [gr, gc] = goals_[size_t(k)];
    auto dist = [&](int r, int c) { return std::abs(r - gr) + std::abs(c - gc); };

    double success_sum = 0.0;
    int starts = 0;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < kSide; ++c) {
        if (r == gr && c == gc) continue;
        success_sum += kGoalReward + kStepCost * (dist(r, c) - 1);
        ++starts;
      }
    tasks_[size_t(k)].success_score = success_sum / starts;

    const int cap = horizon();
    Mat u = Mat::Zero(rows, kSide);  // value-to-go under the random policy
    for (int t = cap - 1; t >= 0; --t) {
      Mat next = Mat::Zero(rows, kSide);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < kSide; ++c) {
          if (r == gr && c == gc) continue;
          double acc = 0.0;
          int n = 0;
          for (int a = 0; a < 4; ++a) {
            if (tasks_[size_t(k)].action_mask(a) == 0.0) continue;
            int nr = std::clamp(r + kMoves[a].dr, 0, rows - 1);
            int nc = std::clamp(c + kMoves[a].dc, 0, kSide - 1);
            if (nr == gr && nc == gc)
              acc += kGoalReward;
            else
              acc += kStepCost + u(nr, nc);
            ++n;
          }
          next(r, c) = acc / n;
        }
      u = next;
    }
    double random_sum = 0.0;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < kSide; ++c)
        if (!(r == gr && c == gc)) random_sum += u(r, c);
    tasks_[size_t(k)].random_score = random_sum / starts;
  }
}

EnvFamily::State GridNavFamily::reset(int task, Rng& rng) const {
  const bool corridor = is_corridor(task);
  const int rows = corridor ? 1 : kSide;
  const auto [gr, gc] = goals_[size_t(task)];
  int r, c;
  do {
    r = rng.uniform_int(rows);
    c = rng.uniform_int(kSide);
  } while (r == gr && c == gc);
  State s;
  s.x = Vec::Zero(2);
  s.x << double(r), double(c);
  return s;
}

StepResult GridNavFamily::step(State& s, const EnvAction& a, int task) const {
  require(!s.done, "GridNavFamily::step: episode already terminal");
  require(a.index >= 0 && a.index < 4, "GridNavFamily::step: bad action index");
  require(tasks_[size_t(task)].action_mask(a.index) != 0.0,
          "GridNavFamily::step: masked action taken");
  const bool corridor = is_corridor(task);
  const int rows = corridor ? 1 : kSide;
  const auto [gr, gc] = goals_[size_t(task)];
  int r = std::clamp(int(s.x(0)) + kMoves[a.index].dr, 0, rows - 1);
  int c = std::clamp(int(s.x(1)) + kMoves[a.index].dc, 0, kSide - 1);
  s.x << double(r), double(c);
  s.steps += 1;
  StepResult out;
  if (r == gr && c == gc) {
    out.reward = kGoalReward;  // replaces the step cost on the final move
    out.terminal = true;
    s.done = true;
  } else {
    out.reward = kStepCost;
    out.truncated = s.steps >= horizon();
  }
  return out;
}

Vec GridNavFamily::observe(const State& s, int task) const {
  const bool corridor = is_corridor(task);
  if (corridor) return pad_rows(one_hot(int(s.x(1)), kSide), obs_width());
  return one_hot(cell_of(s), kSide * kSide);
}

Vec GridNavFamily::expert_action_direction(const State& s, int task) const {
  const auto [gr, gc] = goals_[size_t(task)];
  const int dr = gr - int(s.x(0)), dc = gc - int(s.x(1));
  // pick the lowest-index optimal move, report its displacement
  for (int a = 0; a < 4; ++a) {
    if (tasks_[size_t(task)].action_mask(a) == 0.0) continue;
    if (kMoves[a].dr * dr > 0 || kMoves[a].dc * dc > 0) {
      Vec d(2);
      d << double(kMoves[a].dr), double(kMoves[a].dc);
      return d;
    }
  }
  return Vec::Zero(2);  // already at the goal
}

GridOracle gridnav_oracle(const GridNavFamily& fam, int task, double gamma,
                          double tol) {
  const bool corridor = fam.is_corridor(task);
  const int rows = corridor ? 1 : GridNavFamily::kSide;
  const int cols = GridNavFamily::kSide;
  const auto [gr, gc] = fam.goal(task);
  const Vec& mask = fam.task(task).action_mask;

  GridOracle o;
  o.v = Mat::Zero(rows, cols);
  o.q = Mat::Constant(rows * cols, 4, -std::numeric_limits<double>::infinity());
  o.best_action = Eigen::MatrixXi::Zero(rows, cols);
  o.undiscounted_return = Mat::Zero(rows, cols);
  o.distance = Eigen::MatrixXi::Constant(rows, cols, -1);

  // value iteration to fixed point
  double residual = 1.0;
  while (residual > tol) {
    residual = 0.0;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        if (r == gr && c == gc) continue;
        double best = -std::numeric_limits<double>::infinity();
        for (int a = 0; a < 4; ++a) {
          if (mask(a) == 0.0) continue;
          const int nr = std::clamp(r + kMoves[a].dr, 0, rows - 1);
          const int nc = std::clamp(c + kMoves[a].dc, 0, cols - 1);
          const double q = (nr == gr && nc == gc)
                               ? kGoalReward
                               : kStepCost + gamma * o.v(nr, nc);
          best = std::max(best, q);
        }
        residual = std::max(residual, std::abs(best - o.v(r, c)));
        o.v(r, c) = best;
      }
  }
  // greedy policy + Q table off the converged values
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      if (r == gr && c == gc) continue;
      double best = -std::numeric_limits<double>::infinity();
      int barg = 0;
      for (int a = 0; a < 4; ++a) {
        if (mask(a) == 0.0) continue;
        const int nr = std::clamp(r + kMoves[a].dr, 0, rows - 1);
        const int nc = std::clamp(c + kMoves[a].dc, 0, cols - 1);
        const double q =
            (nr == gr && nc == gc) ? kGoalReward : kStepCost + gamma * o.v(nr, nc);
        o.q(r * cols + c, a) = q;
        if (q > best) {
          best = q;
          barg = a;
        }
      }
      o.best_action(r, c) = barg;
    }

  // BFS distances and optimal undiscounted returns
  std::deque<std::pair<int, int>> frontier{{gr, gc}};
  o.distance(gr, gc) = 0;
  while (!frontier.empty()) {
    auto [r, c] = frontier.front();
    frontier.pop_front();
    for (int a = 0; a < 4; ++a) {
      if (mask(a) == 0.0) continue;
      const int nr = r - kMoves[a].dr, nc = c - kMoves[a].dc;
      if (nr < 0 || nr >= rows || nc < 0 || nc >= cols) continue;
      if (o.distance(nr, nc) >= 0) continue;
      o.distance(nr, nc) = o.distance(r, c) + 1;
      frontier.push_back({nr, nc});
    }
  }
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const int d = o.distance(r, c);
      o.undiscounted_return(r, c) = d == 0 ? 0.0 : kGoalReward + kStepCost * (d - 1);
    }
  return o;
}

// ---- point mass ----

namespace {
constexpr double kRewardScale = 0.05;
constexpr double kRewardSharpness = 8.0;
constexpr double kGoalRadius = 0.6;
constexpr double kPdP = 8.0, kPdD = 4.0;

double pm_reward(const Vec& pos, const Vec& goal) {
  const double d2 = (pos - goal).squaredNorm();
  return kRewardScale * std::exp(-kRewardSharpness * d2);
}
}  // namespace

PointMassFamily::PointMassFamily(int num_tasks, bool pad_probe) {
  require(num_tasks >= 1 && num_tasks <= 8, "PointMassFamily: supports 1..8 tasks");
  name_ = "pointmass" + std::to_string(num_tasks) + (pad_probe ? "+probe" : "");
  const int total = num_tasks + (pad_probe ? 1 : 0);
  obs_width_ = pad_probe ? 8 : 6;
  for (int k = 0; k < total; ++k) {
    const double angle = 2.0 * M_PI * k / total;
    Vec g(2);
    g << kGoalRadius * std::cos(angle), kGoalRadius * std::sin(angle);
    goals_.push_back(g);
    TaskSpec t;
    t.id = k;
    const bool probe = pad_probe && k == total - 1;
    t.name = (probe ? "pm_probe_" : "pm_goal_") + std::to_string(k);
    t.obs_dim = probe ? 8 : 6;
    t.action_dim = 2;
    t.discrete = false;
    t.action_mask = Vec::Ones(2);
    tasks_.push_back(std::move(t));
  }

  // Reference scores: fixed-seed Monte Carlo for the random policy, PD
  // controller rollouts from the same number of seeded starts for success.
  const int episodes = 256;
  for (int k = 0; k < total; ++k) {
    Rng rand_rng(derive_seed(0x5c07e5u, uint64_t(k), 0));
    double rand_sum = 0.0;
    for (int e = 0; e < episodes; ++e) {
      Rng action_rng(derive_seed(0x5c07e5u, uint64_t(k), 100 + uint64_t(e)));
      rand_sum += rollout_return(
          *this, k,
          [&](const State&) {
            EnvAction a;
            a.box = Vec(2);
            a.box << action_rng.uniform(-1.0, 1.0), action_rng.uniform(-1.0, 1.0);
            return a;
          },
          rand_rng);
    }
    tasks_[size_t(k)].random_score = rand_sum / episodes;

    Rng pd_rng(derive_seed(0x5c07e5u, uint64_t(k), 1));
    double pd_sum = 0.0;
    for (int e = 0; e < episodes; ++e) {
      pd_sum += rollout_return(
          *this, k,
          [&](const State& s) {
            EnvAction a;
            a.box = pd_action(s, k);
            return a;
          },
          pd_rng);
    }
    tasks_[size_t(k)].success_score = pd_sum / episodes;
  }
}

EnvFamily::State PointMassFamily::reset(int task, Rng& rng) const {
  (void)task;
  State s;
  s.x = Vec::Zero(4);
  s.x(0) = rng.uniform(-0.8, 0.8);
  s.x(1) = rng.uniform(-0.8, 0.8);
  return s;
}

StepResult PointMassFamily::step(State& s, const EnvAction& a, int task) const {
  require(!s.done, "PointMassFamily::step: episode already done");
  require(a.box.size() == 2, "PointMassFamily::step: bad action size");
  StepResult out;
  Vec act = a.box;
  for (int d = 0; d < 2; ++d) {
    if (act(d) < -1.0 || act(d) > 1.0) {
      act(d) = std::clamp(act(d), -1.0, 1.0);
      ++out.clamped_dims;
    }
  }
  Vec pos = s.x.head(2), vel = s.x.tail(2);
  vel = (vel + kDt * act).cwiseMax(-1.0).cwiseMin(1.0);
  pos = (pos + kDt * vel).cwiseMax(-1.0).cwiseMin(1.0);
  s.x.head(2) = pos;
  s.x.tail(2) = vel;
  s.steps += 1;
  out.reward = pm_reward(pos, goals_[size_t(task)]);
  out.truncated = s.steps >= horizon();
  return out;
}

Vec PointMassFamily::observe(const State& s, int task) const {
  const TaskSpec& t = tasks_[size_t(task)];
  Vec native(t.obs_dim);
  native.head(4) = s.x;
  native.segment(4, 2) = goals_[size_t(task)] - s.x.head(2);
  if (t.obs_dim == 8) native.tail(2) = goals_[size_t(task)];
  return pad_rows(native, obs_width_);
}

Vec PointMassFamily::pd_action(const State& s, int task) const {
  Vec a = kPdP * (goals_[size_t(task)] - s.x.head(2)) - kPdD * s.x.tail(2);
  return a.cwiseMax(-1.0).cwiseMin(1.0);
}

Vec PointMassFamily::expert_action_direction(const State& s, int task) const {
  Vec a = pd_action(s, task);
  const double n = a.norm();
  return n > 1e-12 ? Vec(a / n) : Vec(Vec::Zero(2));
}

ConflictProbe find_conflict(const EnvFamily& fam, int task_a, int task_b,
                            int probes, uint64_t seed) {
  Rng rng(seed);
  ConflictProbe best;
  for (int i = 0; i < probes; ++i) {
    EnvFamily::State s = fam.reset(task_a, rng);
    const Vec da = fam.expert_action_direction(s, task_a);
    const Vec db = fam.expert_action_direction(s, task_b);
    if (da.norm() < 1e-9 || db.norm() < 1e-9) continue;
    const double inner = da.dot(db);
    if (inner < best.inner) {
      best.inner = inner;
      best.state = s.x;
      best.dir_a = da;
      best.dir_b = db;
    }
  }
  return best;
}

double rollout_return(const EnvFamily& fam, int task,
                      const std::function<EnvAction(const EnvFamily::State&)>& pi,
                      Rng& reset_rng) {
  EnvFamily::State s = fam.reset(task, reset_rng);
  double total = 0.0;
  while (true) {
    const StepResult r = fam.step(s, pi(s), task);
    total += r.reward;
    if (r.terminal || r.truncated) break;
  }
  return total;
}

}  // namespace ezm
