#include "doctest.h"

#include <cmath>
#include <memory>

#include "ezm/env.hpp"
#include "ezm/learning.hpp"

using namespace ezm;

namespace {

ModelConfig tiny_cfg(bool discrete, int obs_w, int act_w, int num_tasks) {
  ModelConfig c;
  c.obs_width = obs_w;
  c.action_width = act_w;
  c.discrete_actions = discrete;
  c.num_tasks = num_tasks;
  c.hidden = 16;
  c.embedding = 6;
  c.action_embedding = 6;
  c.head_width = 12;
  c.proj_hidden = 16;
  c.proj_width = 8;
  c.res_blocks = 1;
  c.dropout = 0.0;
  return c;
}

std::vector<TaskSpec> plain_specs(int n, int obs_w, int act_w, bool discrete) {
  std::vector<TaskSpec> out;
  for (int i = 0; i < n; ++i) {
    TaskSpec s;
    s.id = i;
    s.name = "t" + std::to_string(i);
    s.obs_dim = obs_w;
    s.action_dim = act_w;
    s.action_mask = Vec::Ones(act_w);
    s.discrete = discrete;
    out.push_back(std::move(s));
  }
  return out;
}

std::shared_ptr<TrajectorySegment> rand_segment(Rng& rng, int task, uint64_t uid,
                                                int T, int obs_w, int act_w,
                                                bool discrete, bool terminal) {
  auto seg = std::make_shared<TrajectorySegment>();
  seg->task_id = task;
  seg->uid = uid;
  seg->obs = rng.uniform_mat(obs_w, T + 1, -1.0, 1.0);
  seg->actions = Mat::Zero(act_w, T);
  for (int t = 0; t < T; ++t) {
    if (discrete)
      seg->actions.col(t) = one_hot(rng.uniform_int(act_w), act_w);
    else
      seg->actions.col(t) = rng.uniform_mat(act_w, 1, -0.9, 0.9);
  }
  seg->rewards = rng.uniform_mat(T, 1, -0.1, 0.1);
  seg->terminal = terminal;
  seg->root_values = Vec::Zero(T);
  return seg;
}

ImprovedPolicy fake_policy(Rng& rng, const TaskSpec& spec) {
  ImprovedPolicy p;
  p.discrete = spec.discrete;
  if (spec.discrete) {
    for (Eigen::Index d = 0; d < spec.action_mask.size(); ++d)
      if (spec.action_mask(d) != 0.0) p.action_index.push_back(int(d));
    p.weights = Vec::Constant(Eigen::Index(p.action_index.size()),
                              1.0 / double(p.action_index.size()));
    p.chosen = int(rng.uniform_int(int(p.action_index.size())));
  } else {
    const Eigen::Index A = spec.action_mask.size();
    p.actions = rng.uniform_mat(A, 2, -0.9, 0.9);
    for (Eigen::Index d = 0; d < A; ++d)
      if (spec.action_mask(d) == 0.0) p.actions.row(d).setZero();
    p.weights = Vec(2);
    p.weights << 0.6, 0.4;
    p.chosen = 0;
  }
  return p;
}

// batch over hand-made segments with synthetic reanalyze targets
UnrollBatch fake_batch(Rng& rng, const std::vector<TaskSpec>& specs, int per_task,
                       int T, int K, int obs_w, int act_w, bool discrete,
                       bool terminal = true, int k0 = 0) {
  std::vector<UnrollBatch::Item> items;
  uint64_t uid = 1;
  for (const auto& spec : specs)
    for (int i = 0; i < per_task; ++i)
      items.push_back({rand_segment(rng, spec.id, uid++, T, obs_w, act_w,
                                    discrete, terminal),
                       k0});
  UnrollBatch batch = make_unroll(std::move(items), K, 5, 0.99);
  for (int b = 0; b < batch.batch(); ++b) {
    const auto& spec = specs[size_t(batch.items[size_t(b)].seg->task_id)];
    for (int k = 0; k <= K; ++k) {
      if (batch.policy_w(k, b) <= 0.0) continue;
      batch.policy_targets[size_t(b)][size_t(k)] = fake_policy(rng, spec);
      batch.v_td(k, b) = rng.uniform(-0.5, 0.5);
      batch.v_model(k, b) = rng.uniform(-0.5, 0.5);
      batch.var_model(k, b) = rng.uniform(0.0, 1.0);
    }
  }
  return batch;
}

ParameterStore init_store(const WorldModel& model, uint64_t seed) {
  ParameterStore store;
  Rng rng(seed);
  model.init_params(store, rng);
  return store;
}

void zero_final_linear(ParameterStore& store, const std::string& net) {
  int last = -1;
  for (const auto& [name, e] : store.entries()) {
    if (name.rfind(net + ".", 0) != 0 || name.size() < 2) continue;
    const auto dot = name.find('.', net.size() + 1);
    if (name.substr(name.size() - 2) != ".W") continue;
    const int idx = std::stoi(name.substr(net.size() + 1, dot - net.size() - 1));
    last = std::max(last, idx);
  }
  REQUIRE(last >= 0);
  const std::string base = net + "." + std::to_string(last);
  store.mutable_value(base + ".W").setZero();
  store.mutable_value(base + ".b").setZero();
}

// The value heads ship with zero-initialized output linears, which blocks any
// gradient (and any dropout influence) from reaching the layers beneath them
// at a fresh init. Warm those layers up so tests can observe the full path.
void warm_value_heads(ParameterStore& store, int heads, Rng& rng) {
  for (int i = 0; i < heads; ++i) {
    const std::string net = "val" + std::to_string(i);
    int last = -1;
    for (const auto& [name, e] : store.entries()) {
      if (name.rfind(net + ".", 0) != 0) continue;
      const auto dot = name.find('.', net.size() + 1);
      if (name.substr(name.size() - 2) != ".W") continue;
      const int idx =
          std::stoi(name.substr(net.size() + 1, dot - net.size() - 1));
      last = std::max(last, idx);
    }
    REQUIRE(last >= 0);
    Mat& w = store.mutable_value(net + "." + std::to_string(last) + ".W");
    w = rng.uniform_mat(w.rows(), w.cols(), -0.05, 0.05);
  }
}

double eval_total(const WorldModel& model, const std::vector<TaskSpec>& specs,
                  const ParameterStore& store, const UnrollBatch& batch,
                  const LossOptions& opt) {
  return base_loss(model, specs, store, batch, opt).report.overall.total;
}

}  // namespace

TEST_SUITE("learning") {

TEST_CASE("ensemble variance: frozen examples and symmetry") {
  CHECK(value_variance(Vec::Constant(5, 3.7)) == 0.0);
  Vec v(5);
  v << 0, 0, 0, 0, 5;
  CHECK(value_variance(v) == doctest::Approx(4.0));
  Vec w(5);
  w << 5, 0, 0, 0, 0;
  CHECK(value_variance(w) == doctest::Approx(value_variance(v)));
}

TEST_CASE("variance-mixed value targets") {
  // batch variances [0.1, 0.5, 0.3] span alpha over [0, 1, 0.5]
  CHECK(mix_alpha(0.1, 0.1, 0.5) == 0.0);
  CHECK(mix_alpha(0.5, 0.1, 0.5) == 1.0);
  CHECK(mix_alpha(0.3, 0.1, 0.5) == doctest::Approx(0.5));
  CHECK(mix_alpha(0.7, 0.2, 0.2) == 0.5);  // spread-free batch: tie rule
  CHECK(mixed_value_target(2.0, 4.0, 0.2, 0.1, 0.5) == doctest::Approx(3.5));
  // alpha = 1 leans fully on the TD target
  CHECK(mixed_value_target(2.0, 4.0, 0.5, 0.1, 0.5) == doctest::Approx(2.0));
  // monotone: higher variance never lowers alpha
  double prev = -1.0;
  for (double var = 0.0; var <= 1.0; var += 0.05) {
    const double a = mix_alpha(var, 0.2, 0.8);
    CHECK(a >= prev);
    prev = a;
  }
}

TEST_CASE("fresh zero-init heads: reward/value CE = log 51, masked policy = log(valid)") {
  GridNavFamily fam(1, /*with_corridor=*/true);  // task 1 allows 2 of 4 actions
  const auto specs = family_specs(fam);
  ModelConfig cfg = tiny_cfg(true, fam.obs_width(), fam.action_width(), 2);
  WorldModel model(cfg);
  ParameterStore store = init_store(model, 11);
  zero_final_linear(store, "pol");

  Rng rng(5);
  auto batch = fake_batch(rng, specs, 2, 8, 5, fam.obs_width(), fam.action_width(),
                          true);
  // keep chosen actions legal for the corridor's mask
  LossOptions opt;
  opt.weights.consistency = 0.0;
  opt.weights.path_consistency = 0.0;
  opt.train = false;
  auto res = base_loss(model, specs, store, batch, opt);

  const double log51 = std::log(51.0);
  for (int t = 0; t < 2; ++t) {
    CHECK(res.report.per_task[size_t(t)].reward == doctest::Approx(log51).epsilon(1e-9));
    CHECK(res.report.per_task[size_t(t)].value ==
          doctest::Approx(2.0 * log51).epsilon(1e-9));
  }
  CHECK(res.report.per_task[0].policy ==
        doctest::Approx(2.0 * std::log(4.0)).epsilon(1e-9));
  CHECK(res.report.per_task[1].policy ==
        doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-9));
  CHECK(res.report.overall.total ==
        doctest::Approx(res.report.per_task[0].total + res.report.per_task[1].total));
}

TEST_CASE("continuous policy loss equals the squashed gaussian density") {
  const int A = 2, obs_w = 5;
  auto specs = plain_specs(2, obs_w, A, false);
  specs[1].action_mask(1) = 0.0;  // second task: one live dimension
  ModelConfig cfg = tiny_cfg(false, obs_w, A, 2);
  WorldModel model(cfg);
  ParameterStore store = init_store(model, 21);

  Rng rng(9);
  auto batch = fake_batch(rng, specs, 1, 4, 0, obs_w, A, false);
  LossOptions opt;
  opt.weights = LossWeights{0.0, 0.0, 1.0, 0.0, 0.0, false};
  opt.train = false;
  auto res = base_loss(model, specs, store, batch, opt);

  ModelEval eval(model, store);
  Mat obs(obs_w, 2);
  std::vector<int> tasks;
  for (int b = 0; b < 2; ++b) {
    obs.col(b) = batch.items[size_t(b)].seg->obs.col(0);
    tasks.push_back(batch.items[size_t(b)].seg->task_id);
  }
  const Mat h = eval.encode(obs, tasks);
  const auto heads = eval.heads(h, tasks);
  for (int b = 0; b < 2; ++b) {
    const auto& spec = specs[size_t(tasks[size_t(b)])];
    const PolicyOut p = model.extract_policy(heads.policy_raw, b, spec);
    const EnvAction a = chosen_action(batch.policy_targets[size_t(b)][0]);
    const double expect = -squashed_log_density(p, spec.action_mask, a.box);
    CHECK(res.report.per_task[size_t(tasks[size_t(b)])].policy ==
          doctest::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("policy targets on masked actions are rejected") {
  GridNavFamily fam(1, /*with_corridor=*/true);
  const auto specs = family_specs(fam);
  ModelConfig cfg = tiny_cfg(true, fam.obs_width(), fam.action_width(), 2);
  WorldModel model(cfg);
  ParameterStore store = init_store(model, 3);
  Rng rng(6);
  auto batch = fake_batch(rng, specs, 1, 6, 2, fam.obs_width(), fam.action_width(),
                          true);
  // corridor sample (task 1): force an up/down target, which its mask forbids
  ImprovedPolicy bad;
  bad.discrete = true;
  bad.action_index = {0};
  bad.weights = Vec::Ones(1);
  bad.chosen = 0;
  batch.policy_targets[1][0] = bad;
  LossOptions opt;
  CHECK_THROWS_AS(base_loss(model, specs, store, batch, opt), ContractError);
}

TEST_CASE("missing reanalyze targets are rejected") {
  const auto specs = plain_specs(1, 4, 3, true);
  ModelConfig cfg = tiny_cfg(true, 4, 3, 1);
  WorldModel model(cfg);
  ParameterStore store = init_store(model, 3);
  Rng rng(8);
  auto batch = fake_batch(rng, specs, 2, 6, 2, 4, 3, true);
  batch.policy_targets[0][1] = ImprovedPolicy{};  // wipe one real position
  LossOptions opt;
  CHECK_THROWS_AS(base_loss(model, specs, store, batch, opt), ContractError);
}

TEST_CASE("analytic gradients match finite differences (grounded-target losses)") {
  const int obs_w = 5, act_w = 3;
  const auto specs = plain_specs(2, obs_w, act_w, true);
  ModelConfig cfg = tiny_cfg(true, obs_w, act_w, 2);
  WorldModel model(cfg);
  ParameterStore store = init_store(model, 33);
  Rng rng(17);
  auto batch = fake_batch(rng, specs, 2, 7, 2, obs_w, act_w, true);
  LossOptions opt;
  opt.weights.consistency = 0.0;
  opt.weights.path_consistency = 0.0;
  opt.train = true;
  opt.seed = 99;
  opt.latent_grad_scale = 1.0;  // exact derivative, no unroll attenuation

  auto res = base_loss(model, specs, store, batch, opt);
  const double eps = 1e-4;
  int checked = 0;
  for (const auto& [name, entry] : store.entries()) {
    if (!store.trainable(name)) continue;
    const auto it = res.grads.find(name);
    const Mat g = it == res.grads.end()
                      ? Mat::Zero(entry.value.rows(), entry.value.cols())
                      : it->second;
    const Eigen::Index r = 0, c = entry.value.cols() - 1;
    Mat& v = store.mutable_value(name);
    const double orig = v(r, c);
    v(r, c) = orig + eps;
    const double fp = eval_total(model, specs, store, batch, opt);
    v(r, c) = orig - eps;
    const double fm = eval_total(model, specs, store, batch, opt);
    v(r, c) = orig;
    const double fd = (fp - fm) / (2.0 * eps);
    const double denom = std::max({std::abs(g(r, c)), std::abs(fd), 1e-3});
    CHECK(std::abs(g(r, c) - fd) / denom < 1e-4);
    checked += 1;
  }
  CHECK(checked > 50);
}

TEST_CASE("stop-gradient firewall: frozen targets leave gradients bit-identical") {
  const int obs_w = 5, act_w = 3;
  const auto specs = plain_specs(2, obs_w, act_w, true);
  ModelConfig cfg = tiny_cfg(true, obs_w, act_w, 2);
  WorldModel model(cfg);
  ParameterStore store = init_store(model, 41);
  Rng rng(29);
  warm_value_heads(store, cfg.value_heads, rng);
  auto batch = fake_batch(rng, specs, 2, 7, 2, obs_w, act_w, true);
  LossOptions opt;
  opt.train = true;
  opt.seed = 7;
  opt.latent_grad_scale = 1.0;  // exact derivative, no unroll attenuation

  auto full = base_loss(model, specs, store, batch, opt);
  REQUIRE(full.cons_targets.size() == 2);
  REQUIRE(full.pc_targets.size() == 2);

  LossOptions frozen = opt;
  frozen.override_cons_targets = &full.cons_targets;
  frozen.override_pc_targets = &full.pc_targets;
  auto fixed = base_loss(model, specs, store, batch, frozen);

  CHECK(fixed.report.overall.total == full.report.overall.total);
  REQUIRE(fixed.grads.size() == full.grads.size());
  for (const auto& [name, g] : full.grads) {
    REQUIRE(fixed.grads.count(name) == 1);
    CHECK((g - fixed.grads.at(name)).cwiseAbs().maxCoeff() == 0.0);
  }

  // with stop-gradients held fixed, the whole objective is differentiable:
  // finite differences now cover consistency and path consistency too
  const double eps = 1e-4;
  int spot = 0;
  for (const auto& [name, entry] : store.entries()) {
    if (!store.trainable(name)) continue;
    if (spot++ % 3 != 0) continue;  // subsample for speed
    const auto it = fixed.grads.find(name);
    const Mat g = it == fixed.grads.end()
                      ? Mat::Zero(entry.value.rows(), entry.value.cols())
                      : it->second;
    const Eigen::Index r = entry.value.rows() - 1, c = 0;
    Mat& v = store.mutable_value(name);
    const double orig = v(r, c);
    v(r, c) = orig + eps;
    const double fp = eval_total(model, specs, store, batch, frozen);
    v(r, c) = orig - eps;
    const double fm = eval_total(model, specs, store, batch, frozen);
    v(r, c) = orig;
    const double fd = (fp - fm) / (2.0 * eps);
    const double denom = std::max({std::abs(g(r, c)), std::abs(fd), 1e-3});
    CHECK(std::abs(g(r, c) - fd) / denom < 1e-4);
  }
}

TEST_CASE("path consistency never touches reward-head parameters") {
  const int obs_w = 5, act_w = 3;
  const auto specs = plain_specs(2, obs_w, act_w, true);
  ModelConfig cfg = tiny_cfg(true, obs_w, act_w, 2);
  WorldModel model(cfg);
  ParameterStore store = init_store(model, 55);
  Rng rng(31);
  warm_value_heads(store, cfg.value_heads, rng);
  auto batch = fake_batch(rng, specs, 2, 7, 3, obs_w, act_w, true);
  LossOptions opt;
  opt.weights = LossWeights{0.0, 0.0, 0.0, 0.0, 1.0, false};
  opt.train = true;
  auto res = base_loss(model, specs, store, batch, opt);

  REQUIRE(!res.grads.empty());
  bool latent_path_touched = false;
  for (const auto& [name, g] : res.grads) {
    CHECK(name.rfind("rew.", 0) != 0);  // reward net must stay untouched
    if (name.rfind("dyn.", 0) == 0 || name.rfind("rep.", 0) == 0)
      if (g.cwiseAbs().maxCoeff() > 0.0) latent_path_touched = true;
  }
  CHECK(latent_path_touched);  // ...while the latent chain still learns
}

TEST_CASE("one optimizer step on a fixed batch decreases its loss") {
  const int obs_w = 6, act_w = 4;
  const auto specs = plain_specs(2, obs_w, act_w, true);
  ModelConfig cfg = tiny_cfg(true, obs_w, act_w, 2);
  WorldModel model(cfg);
  ParameterStore store = init_store(model, 61);
  Rng rng(37);
  auto batch = fake_batch(rng, specs, 3, 8, 3, obs_w, act_w, true);
  LossOptions opt;
  opt.train = true;
  opt.seed = 4;

  auto before = base_loss(model, specs, store, batch, opt);
  AdamState adam;
  AdamConfig acfg;
  acfg.lr = 1e-3;
  CHECK(adamw_step(store, before.grads, adam, acfg) == StepStatus::Applied);
  auto after = base_loss(model, specs, store, batch, opt);
  CHECK(after.report.overall.total < before.report.overall.total);
}

TEST_CASE("task additivity: permuting the batch leaves the report unchanged") {
  const int obs_w = 5, act_w = 3;
  const auto specs = plain_specs(3, obs_w, act_w, true);
  ModelConfig cfg = tiny_cfg(true, obs_w, act_w, 3);
  WorldModel model(cfg);
  ParameterStore store = init_store(model, 71);
  Rng rng(43);
  auto batch = fake_batch(rng, specs, 2, 7, 2, obs_w, act_w, true);

  const int B = batch.batch();
  std::vector<int> perm(static_cast<size_t>(B));
  for (int b = 0; b < B; ++b) perm[size_t(b)] = (b * 5 + 3) % B;  // 5 ⊥ 6
  UnrollBatch shuf;
  shuf.unroll = batch.unroll;
  shuf.td = batch.td;
  shuf.gamma = batch.gamma;
  std::vector<UnrollBatch::Item> items;
  for (int b = 0; b < B; ++b) items.push_back(batch.items[size_t(perm[size_t(b)])]);
  shuf = make_unroll(items, batch.unroll, batch.td, batch.gamma);
  for (int b = 0; b < B; ++b) {
    const int src = perm[size_t(b)];
    shuf.v_td.col(b) = batch.v_td.col(src);
    shuf.v_model.col(b) = batch.v_model.col(src);
    shuf.var_model.col(b) = batch.var_model.col(src);
    shuf.policy_targets[size_t(b)] = batch.policy_targets[size_t(src)];
  }

  LossOptions opt;
  opt.weights.consistency = 0.0;  // dropout-free, order-independent components
  opt.weights.path_consistency = 0.0;
  opt.train = false;
  auto a = base_loss(model, specs, store, batch, opt);
  auto p = base_loss(model, specs, store, shuf, opt);
  CHECK(a.report.overall.total == doctest::Approx(p.report.overall.total).epsilon(1e-9));
  for (int t = 0; t < 3; ++t) {
    CHECK(a.report.per_task[size_t(t)].total ==
          doctest::Approx(p.report.per_task[size_t(t)].total).epsilon(1e-9));
    CHECK(a.report.per_task[size_t(t)].samples == p.report.per_task[size_t(t)].samples);
  }
}

TEST_CASE("representation-only batches (K = 0) train value and policy heads") {
  const auto specs = plain_specs(2, 4, 3, true);
  ModelConfig cfg = tiny_cfg(true, 4, 3, 2);
  WorldModel model(cfg);
  ParameterStore store = init_store(model, 81);
  Rng rng(47);
  auto batch = fake_batch(rng, specs, 2, 5, 0, 4, 3, true);
  LossOptions opt;
  opt.train = false;
  auto res = base_loss(model, specs, store, batch, opt);
  CHECK(res.report.overall.reward == 0.0);
  CHECK(res.report.overall.consistency == 0.0);
  CHECK(res.report.overall.path_consistency == 0.0);
  CHECK(res.report.per_task[0].value == doctest::Approx(std::log(51.0)).epsilon(1e-9));
  CHECK(std::isfinite(res.report.overall.policy));
  bool value_grads = false;
  for (const auto& [name, g] : res.grads)
    if (name.rfind("val", 0) == 0 && g.cwiseAbs().maxCoeff() > 0.0) value_grads = true;
  CHECK(value_grads);
}

TEST_CASE("dropout stream is seed-deterministic") {
  const auto specs = plain_specs(1, 4, 3, true);
  ModelConfig cfg = tiny_cfg(true, 4, 3, 1);
  cfg.dropout = 0.25;
  WorldModel model(cfg);
  ParameterStore store = init_store(model, 91);
  Rng rng(53);
  warm_value_heads(store, cfg.value_heads, rng);
  auto batch = fake_batch(rng, specs, 4, 6, 1, 4, 3, true);
  LossOptions opt;
  opt.train = true;
  opt.seed = 1234;
  auto a = base_loss(model, specs, store, batch, opt);
  auto b = base_loss(model, specs, store, batch, opt);
  CHECK(a.report.overall.total == b.report.overall.total);
  for (const auto& [name, g] : a.grads)
    CHECK((g - b.grads.at(name)).cwiseAbs().maxCoeff() == 0.0);
  LossOptions other = opt;
  other.seed = 1235;
  auto c = base_loss(model, specs, store, batch, other);
  CHECK(a.report.overall.total != c.report.overall.total);
}

TEST_CASE("non-finite parameters reject the batch with diagnostics") {
  const auto specs = plain_specs(1, 4, 3, true);
  ModelConfig cfg = tiny_cfg(true, 4, 3, 1);
  WorldModel model(cfg);
  ParameterStore store = init_store(model, 95);
  Rng rng(59);
  auto batch = fake_batch(rng, specs, 2, 5, 1, 4, 3, true);
  store.mutable_value("rep.0.W")(0, 0) = std::numeric_limits<double>::quiet_NaN();
  LossOptions opt;
  CHECK_THROWS_AS(base_loss(model, specs, store, batch, opt), std::runtime_error);
}

}  // TEST_SUITE
