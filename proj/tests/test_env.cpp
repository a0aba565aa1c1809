#include <cmath>
#include <set>

#include "doctest.h"
#include "ezm/env.hpp"
#include "test_util.hpp"

using namespace ezm;

TEST_SUITE("env") {

TEST_CASE("grid steps: wall bumps, step cost, exact terminal reward") {
  GridNavFamily fam(1);  // goal (6,6)
  EnvFamily::State s;
  s.x = Vec(2);
  s.x << 0, 0;
  EnvAction up{0, {}};
  StepResult r = fam.step(s, up, 0);
  CHECK(s.x(0) == 0);  // bumped the top wall, stayed put
  CHECK(r.reward == -0.01);
  CHECK(!r.terminal);

  s.x << 6, 5;
  EnvAction right{3, {}};
  r = fam.step(s, right, 0);
  CHECK(r.reward == 1.0);  // goal reward replaces the step cost
  CHECK(r.terminal);
  CHECK(s.done);
  CHECK_THROWS_AS(fam.step(s, right, 0), ContractError);
}

TEST_CASE("grid episodes truncate at the cap without a terminal flag") {
  GridNavFamily fam(1);
  EnvFamily::State s;
  s.x = Vec(2);
  s.x << 0, 0;
  StepResult r;
  for (int i = 0; i < 100; ++i) {
    // bounce between (0,0) and (1,0): never reaches (6,6)
    r = fam.step(s, EnvAction{i % 2 == 0 ? 1 : 0, {}}, 0);
  }
  CHECK(r.truncated);
  CHECK(!r.terminal);
  CHECK(!s.done);
  CHECK(s.steps == 100);
}

TEST_CASE("reset never starts on the goal and is deterministic per seed") {
  GridNavFamily fam(2);
  for (int task = 0; task < 2; ++task) {
    Rng r1(42), r2(42);
    std::set<int> seen;
    for (int i = 0; i < 200; ++i) {
      EnvFamily::State a = fam.reset(task, r1);
      EnvFamily::State b = fam.reset(task, r2);
      CHECK(a.x == b.x);
      const int cell = fam.cell_of(a);
      const auto [gr, gc] = fam.goal(task);
      CHECK(cell != gr * 7 + gc);
      seen.insert(cell);
    }
    CHECK(seen.size() > 30);  // start distribution covers the grid
  }
}

TEST_CASE("value iteration matches the closed-form geometric value") {
  GridNavFamily fam(1);
  const double gamma = 0.99;
  GridOracle o = gridnav_oracle(fam, 0, gamma);
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < 7; ++c) {
      const int d = o.distance(r, c);
      if (d == 0) continue;
      // d-1 step costs then the terminal +1, discounted
      double expect = std::pow(gamma, d - 1);
      for (int t = 0; t < d - 1; ++t) expect += -0.01 * std::pow(gamma, t);
      CHECK(o.v(r, c) == doctest::Approx(expect).epsilon(1e-9));
    }
  // goal-adjacent cells have value exactly 1
  CHECK(o.v(6, 5) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(o.v(5, 6) == doctest::Approx(1.0).epsilon(1e-12));
  // greedy action moves toward the goal everywhere
  CHECK(o.best_action(0, 0) == 1);  // down (lowest index among ties with right)
  CHECK(o.undiscounted_return(0, 0) == doctest::Approx(1.0 - 0.01 * 11).epsilon(1e-12));
}

TEST_CASE("reference scores: optimal return closed form and exact random baseline") {
  GridNavFamily fam(1);
  const TaskSpec& t = fam.task(0);
  // mean over the 48 non-goal starts of 1 - 0.01*(d-1), mean d = 294/48
  const double mean_d = 294.0 / 48.0;
  CHECK(t.success_score == doctest::Approx(1.0 - 0.01 * (mean_d - 1.0)).epsilon(1e-12));
  // the random policy on a 7x7 grid with a 100-step cap loses money often
  CHECK(t.random_score < t.success_score);
  CHECK(t.random_score > -1.0);
  CHECK(t.random_score < 0.9);

  // normalization formula on published reference numbers
  TaskSpec h1;
  h1.random_score = 10.545;
  h1.success_score = 800.0;
  CHECK(normalized_score(806.034, h1) == doctest::Approx(1.0076429).epsilon(1e-5));
  CHECK(normalized_score(t.success_score, t) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(normalized_score(t.random_score, t) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("corridor task: masked actions rejected, padded observations") {
  GridNavFamily fam(2, /*with_corridor=*/true);
  CHECK(fam.num_tasks() == 3);
  const TaskSpec& cor = fam.task(2);
  CHECK(cor.obs_dim == 7);
  CHECK(cor.action_mask(0) == 0.0);
  CHECK(cor.action_mask(1) == 0.0);
  CHECK(cor.action_mask(2) == 1.0);

  Rng rng(7);
  EnvFamily::State s = fam.reset(2, rng);
  CHECK_THROWS_AS(fam.step(s, EnvAction{0, {}}, 2), ContractError);
  Vec obs = fam.observe(s, 2);
  CHECK(obs.size() == 49);
  CHECK(obs.tail(42).isZero(0.0));  // corridor obs live in the first 7 dims
  CHECK(obs.head(7).sum() == doctest::Approx(1.0));

  // walking right reaches the goal
  EnvFamily::State w;
  w.x = Vec(2);
  w.x << 0, 0;
  StepResult r;
  for (int i = 0; i < 6; ++i) r = fam.step(w, EnvAction{3, {}}, 2);
  CHECK(r.terminal);
  CHECK(r.reward == 1.0);

  GridOracle o = gridnav_oracle(fam, 2, 0.99);
  CHECK(o.v(0, 5) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(o.best_action(0, 0) == 3);
}

TEST_CASE("point mass: semi-implicit Euler update, hand-checked") {
  PointMassFamily fam(1);  // goal (0.6, 0)
  EnvFamily::State s;
  s.x = Vec::Zero(4);
  s.x << 0.1, 0.0, 0.0, 0.0;
  EnvAction a;
  a.box = Vec(2);
  a.box << 1.0, -1.0;
  StepResult r = fam.step(s, a, 0);
  CHECK(s.x(2) == doctest::Approx(0.05).epsilon(1e-12));   // vel += dt*a
  CHECK(s.x(3) == doctest::Approx(-0.05).epsilon(1e-12));
  CHECK(s.x(0) == doctest::Approx(0.1025).epsilon(1e-12)); // pos += dt*vel'
  CHECK(s.x(1) == doctest::Approx(-0.0025).epsilon(1e-12));
  const double d2 = std::pow(0.1025 - 0.6, 2) + std::pow(-0.0025, 2);
  CHECK(r.reward == doctest::Approx(0.05 * std::exp(-8.0 * d2)).epsilon(1e-12));
  CHECK(r.clamped_dims == 0);

  EnvAction big;
  big.box = Vec(2);
  big.box << 3.0, -0.5;
  r = fam.step(s, big, 0);
  CHECK(r.clamped_dims == 1);
}

TEST_CASE("point mass episodes run to the 200-step cap") {
  PointMassFamily fam(1);
  Rng rng(3);
  EnvFamily::State s = fam.reset(0, rng);
  StepResult r;
  int n = 0;
  while (true) {
    EnvAction a;
    a.box = Vec::Zero(2);
    r = fam.step(s, a, 0);
    ++n;
    if (r.terminal || r.truncated) break;
  }
  CHECK(n == 200);
  CHECK(r.truncated);
  CHECK(!r.terminal);
}

TEST_CASE("PD controller settles on the goal and defines the success score") {
  PointMassFamily fam(2);
  for (int task = 0; task < 2; ++task) {
    Rng rng(11 + uint64_t(task));
    for (int e = 0; e < 5; ++e) {
      EnvFamily::State s = fam.reset(task, rng);
      while (true) {
        EnvAction a;
        a.box = fam.pd_action(s, task);
        const StepResult r = fam.step(s, a, task);
        if (r.terminal || r.truncated) break;
      }
      CHECK((s.x.head(2) - fam.goal(task)).norm() < 0.1);
    }
    const TaskSpec& t = fam.task(task);
    CHECK(t.success_score > 5.0);   // sits in the reward bowl most of the episode
    CHECK(t.success_score > 3.0 * std::max(t.random_score, 0.01));
  }
  // scores are deterministic: a second instance reproduces them exactly
  PointMassFamily fam2(2);
  CHECK(fam2.task(0).random_score == fam.task(0).random_score);
  CHECK(fam2.task(1).success_score == fam.task(1).success_score);
}

TEST_CASE("conflicting-action certificate for both families") {
  GridNavFamily grid(2);  // goals (6,6) and (0,0)
  ConflictProbe g = find_conflict(grid, 0, 1);
  CHECK(g.inner < 0.0);

  PointMassFamily pm(2);  // goals at +/-0.6 on the x axis
  ConflictProbe p = find_conflict(pm, 0, 1);
  CHECK(p.inner < 0.0);
}

TEST_CASE("probe task widens the family observation and pads the others") {
  PointMassFamily fam(2, /*pad_probe=*/true);
  CHECK(fam.num_tasks() == 3);
  CHECK(fam.obs_width() == 8);
  Rng rng(5);
  EnvFamily::State s = fam.reset(0, rng);
  Vec obs = fam.observe(s, 0);
  CHECK(obs.size() == 8);
  CHECK(obs.tail(2).isZero(0.0));  // non-probe tasks zero-padded
  Vec probe_obs = fam.observe(s, 2);
  CHECK(probe_obs.tail(2) == fam.goal(2));
}

TEST_CASE("task quotas and schedules stay balanced") {
  std::vector<int> q = batch_quota(10, 4, /*rotation=*/0);
  CHECK(q == std::vector<int>{3, 3, 2, 2});
  int total = 0;
  for (int v : batch_quota(512, 3, 1)) total += v;
  CHECK(total == 512);
  std::vector<int> q2 = batch_quota(10, 4, 2);
  CHECK(q2 == std::vector<int>{2, 2, 3, 3});

  // schedule: per-task episode counts differ by at most one at every prefix
  std::vector<int> counts(3, 0);
  for (uint64_t e = 0; e < 100; ++e) {
    counts[size_t(balanced_task_schedule(3, 0, e))] += 1;
    const int mx = *std::max_element(counts.begin(), counts.end());
    const int mn = *std::min_element(counts.begin(), counts.end());
    CHECK(mx - mn <= 1);
  }
}

}  // TEST_SUITE
