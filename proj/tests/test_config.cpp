#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "ezm/config.hpp"
#include "test_util.hpp"

using namespace ezm;

TEST_SUITE("config") {

TEST_CASE("defaults are the humanoid-scale settings") {
  RunConfig c;
  CHECK(c.gamma == 0.99);
  CHECK(c.unroll_steps == 5);
  CHECK(c.td_steps == 5);
  CHECK(c.batch_size == 512);
  CHECK(c.replay_capacity == 1000000);
  CHECK(c.training_steps == 200000);
  CHECK(c.hidden == 512);
  CHECK(c.embedding == 128);
  CHECK(c.res_blocks == 3);
  CHECK(c.simulations == 32);
  CHECK(c.top_actions == 16);
  CHECK(c.sampled_actions == 16);
  CHECK(c.lr == 1e-4);
  CHECK(c.weight_decay == 2e-5);
  CHECK(c.value_heads == 5);
  CHECK(c.dropout == 0.1);
  CHECK(c.consistency_loss_weight == 2.0);
  CHECK(c.independent_replay);
  CHECK(c.path_consistency);
}

TEST_CASE("parse text: comments, whitespace, all value kinds") {
  RunConfig c = parse_config_text(
      "# a comment\n"
      "family = pointmass\n"
      "  num_tasks=3   # trailing comment\n"
      "\n"
      "gamma = 0.95\n"
      "seed = 42\n"
      "replay_capacity = 250000\n"
      "independent_replay = false\n"
      "te_dyn = 0\n");
  CHECK(c.family == "pointmass");
  CHECK(c.num_tasks == 3);
  CHECK(c.gamma == 0.95);
  CHECK(c.seed == 42);
  CHECK(c.replay_capacity == 250000);
  CHECK_FALSE(c.independent_replay);
  CHECK_FALSE(c.te_dyn);
  CHECK(c.te_rew);  // untouched
}

TEST_CASE("serialize then parse is the identity") {
  RunConfig c;
  c.family = "pointmass+probe";
  c.num_tasks = 7;
  c.task_offset = 3;
  c.family_total_tasks = 12;
  c.gamma = 0.9871;
  c.lr = 3.25e-4;
  c.updates_per_env_step = 0.125;
  c.stop_threshold = 0.85;
  c.mode = "async";
  c.te_vp = false;
  c.independent_replay = false;
  const std::string text = serialize_config(c);
  RunConfig back = parse_config_text(text);
  CHECK(serialize_config(back) == text);
  CHECK(back.family == c.family);
  CHECK(back.gamma == c.gamma);           // exact: round-trip precision
  CHECK(back.lr == c.lr);
  CHECK(back.te_vp == c.te_vp);
  CHECK(back.mode == "async");
}

TEST_CASE("bad inputs throw with context") {
  CHECK_THROWS_AS(parse_config_text("nonsense_key = 3\n"), ContractError);
  CHECK_THROWS_AS(parse_config_text("gamma 0.9\n"), ContractError);      // no '='
  CHECK_THROWS_AS(parse_config_text("gamma = zebra\n"), ContractError);  // bad number
  CHECK_THROWS_AS(parse_config_text("num_tasks = 3.5\n"), ContractError);
  CHECK_THROWS_AS(parse_config_text("te_rep = maybe\n"), ContractError);

  RunConfig c;
  c.family = "marswalker";
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = RunConfig{};
  c.gamma = 1.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = RunConfig{};
  c.batch_size = 2;
  c.num_tasks = 4;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = RunConfig{};
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = RunConfig{};
  c.mode = "turbo";
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = RunConfig{};
  c.task_offset = 3;
  c.family_total_tasks = 4;  // window [3,7) exceeds the base
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("config file round-trips through disk") {
  RunConfig c;
  c.num_tasks = 2;
  c.hidden = 48;
  const std::string path = "test_config_roundtrip.conf";
  {
    std::ofstream f(path);
    f << serialize_config(c);
  }
  RunConfig back = parse_config_file(path);
  CHECK(back.num_tasks == 2);
  CHECK(back.hidden == 48);
  std::remove(path.c_str());
}

TEST_CASE("plan/model/loss views mirror the flat fields") {
  RunConfig c;
  c.top_actions = 6;
  c.sampled_actions = 9;
  c.simulations = 20;
  c.path_consistency = false;
  c.path_consistency_weight = 0.7;
  c.te_rew = false;
  PlanConfig p = c.plan_config();
  CHECK(p.candidates == 9);  // max of the two root budgets
  CHECK(p.simulations == 20);
  LossWeights w = c.loss_weights();
  CHECK(w.path_consistency == 0.0);  // ablation zeroes the term
  CHECK(w.consistency == 2.0);

  GridNavFamily fam(2);
  ModelConfig m = c.model_config(fam);
  CHECK(m.obs_width == fam.obs_width());
  CHECK(m.num_tasks == 2);
  CHECK_FALSE(m.te_rew);
  CHECK(m.te_dyn);
}

TEST_CASE("subset window re-indexes tasks but keeps base geometry") {
  RunConfig whole;
  whole.family = "pointmass";
  whole.num_tasks = 8;
  auto base = make_family(whole);

  RunConfig win;
  win.family = "pointmass";
  win.family_total_tasks = 8;
  win.task_offset = 6;
  win.num_tasks = 2;
  auto sub = make_family(win);

  CHECK(sub->num_tasks() == 2);
  CHECK(sub->obs_width() == base->obs_width());
  for (int k = 0; k < 2; ++k) {
    const TaskSpec& a = sub->task(k);
    const TaskSpec& b = base->task(6 + k);
    CHECK(a.id == k);  // re-indexed
    CHECK(a.name == b.name);
    CHECK(a.random_score == b.random_score);
    CHECK(a.success_score == b.success_score);
  }

  // Same reset/step behaviour as the base task it maps to.
  Rng r1(9), r2(9);
  auto s_sub = sub->reset(1, r1);
  auto s_base = base->reset(7, r2);
  CHECK(testutil::all_close(s_sub.x, s_base.x));
  CHECK(testutil::all_close(sub->observe(s_sub, 1), base->observe(s_base, 7)));

  // A freshly built 2-task family has different goal geometry, which is
  // exactly why the sweep uses windows instead.
  RunConfig fresh;
  fresh.family = "pointmass";
  fresh.num_tasks = 2;
  auto small = make_family(fresh);
  CHECK(small->task(1).name != sub->task(1).name);
}

TEST_CASE("corridor variant keeps its extra task when not windowed") {
  RunConfig c;
  c.family = "gridnav+corridor";
  c.num_tasks = 2;
  auto fam = make_family(c);
  CHECK(fam->num_tasks() == 3);  // two goals + the corridor task
}

}  // TEST_SUITE
