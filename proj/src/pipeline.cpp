#include "ezm/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <thread>

#include "ezm/learning.hpp"
#include "ezm/planner.hpp"

namespace ezm {

namespace {

namespace fs = std::filesystem;

constexpr uint64_t kSeedPlan = 0x706c616eull;     // per-episode search keys
constexpr uint64_t kSeedReset = 0x72657365ull;    // per-episode env reset
constexpr uint64_t kSeedBatch = 0x62617463ull;    // replay sampling stream
constexpr uint64_t kSeedReana = 0x7265616eull;    // per-step reanalyze search
constexpr uint64_t kSeedDrop = 0x64726f70ull;     // per-step dropout stream
constexpr uint64_t kSeedEval = 0x6576616cull;     // evaluation episodes
constexpr uint64_t kSeedProbe = 0x70726f62ull;    // gradient probes

Vec action_column(const EnvAction& a, const EnvFamily& fam) {
  if (fam.discrete()) return one_hot(a.index, fam.action_width());
  return a.box;
}

// Warmup behavior before the buffers reach min-fill: uniform over valid
// actions / the valid box dims. Planning with untrained weights just locks
// onto value-head noise, which starves sparse-reward tasks of the first few
// successes everything else bootstraps from.
EnvAction random_action(const TaskSpec& spec, const EnvFamily& fam, Rng& rng) {
  EnvAction a;
  if (fam.discrete()) {
    int pick = int(rng.uniform_int(uint64_t(spec.action_mask.sum())));
    for (int i = 0; i < int(spec.action_mask.size()); ++i) {
      if (spec.action_mask(i) == 0.0) continue;
      if (pick-- == 0) {
        a.index = i;
        break;
      }
    }
  } else {
    a.box = Vec::Zero(fam.action_width());
    for (int i = 0; i < int(spec.action_mask.size()); ++i)
      if (spec.action_mask(i) != 0.0) a.box(i) = rng.uniform(-1.0, 1.0);
  }
  return a;
}

struct Collected {
  std::shared_ptr<TrajectorySegment> seg;
  double episode_return = 0.0;
  int steps = 0;
};

// One episode played with the planner against a fixed parameter snapshot
// (or uniformly at random during warmup).
Collected collect_episode(const EnvFamily& fam, const WorldModel& model,
                          const ParameterStore& params,
                          const std::vector<TaskSpec>& specs,
                          const PlanConfig& plan_cfg, int task, int64_t uid,
                          uint64_t plan_seed, uint64_t reset_seed,
                          int64_t model_version, bool warmup) {
  ModelEval eval(model, params);
  LearnedPlannerModel pm(eval, specs);
  Rng reset_rng(reset_seed);
  EnvFamily::State st = fam.reset(task, reset_rng);

  std::vector<Vec> obs_cols, act_cols;
  std::vector<double> rewards, roots;
  bool terminal = false;
  Collected out;
  for (int t = 0; t < fam.horizon(); ++t) {
    obs_cols.push_back(fam.observe(st, task));
    EnvAction a;
    double root_value = 0.0;
    if (warmup) {
      Rng warm_rng(derive_seed(plan_seed, uint64_t(uid), uint64_t(t)));
      a = random_action(specs.at(size_t(task)), fam, warm_rng);
    } else {
      PlanRequest req;
      req.obs = obs_cols.back();
      req.task = task;
      req.seed = derive_seed(plan_seed, uint64_t(uid), uint64_t(t));
      const ImprovedPolicy ip = plan(pm, plan_cfg, req);
      a = chosen_action(ip);
      root_value = ip.root_value;
    }
    const StepResult sr = fam.step(st, a, task);
    act_cols.push_back(action_column(a, fam));
    rewards.push_back(sr.reward);
    roots.push_back(root_value);
    out.episode_return += sr.reward;
    if (sr.terminal || sr.truncated) {
      terminal = sr.terminal;
      break;
    }
  }
  obs_cols.push_back(fam.observe(st, task));  // bootstrap observation

  const int T = int(act_cols.size());
  auto seg = std::make_shared<TrajectorySegment>();
  seg->task_id = task;
  seg->uid = uid;
  seg->plan_seed = plan_seed;
  seg->model_version = model_version;
  seg->obs = Mat(fam.obs_width(), T + 1);
  for (int i = 0; i <= T; ++i) seg->obs.col(i) = obs_cols[size_t(i)];
  seg->actions = Mat(fam.action_width(), T);
  for (int i = 0; i < T; ++i) seg->actions.col(i) = act_cols[size_t(i)];
  seg->rewards = Eigen::Map<Vec>(rewards.data(), T);
  seg->root_values = Eigen::Map<Vec>(roots.data(), T);
  seg->terminal = terminal;
  out.seg = std::move(seg);
  out.steps = T;
  return out;
}

Json eval_record(const char* kind, int64_t env_steps, int64_t learner_steps,
                 const EvalSummary& ev) {
  Json rec;
  rec["record"] = kind;
  rec["env_steps"] = env_steps;
  rec["learner_steps"] = learner_steps;
  rec["per_task_raw"] = ev.raw;
  rec["per_task_norm"] = ev.norm;
  rec["mean_norm"] = ev.mean_norm;
  return rec;
}

Json loss_record(int64_t env_steps, int64_t learner_steps,
                 const LossReport& rep) {
  Json rec;
  rec["record"] = "train";
  rec["env_steps"] = env_steps;
  rec["learner_steps"] = learner_steps;
  rec["total"] = rep.overall.total;
  rec["reward"] = rep.overall.reward;
  rec["value"] = rep.overall.value;
  rec["policy"] = rep.overall.policy;
  rec["consistency"] = rep.overall.consistency;
  rec["path_consistency"] = rep.overall.path_consistency;
  rec["alpha_mean"] = rep.alpha_mean;
  return rec;
}

// Learner-side state shared by the two drivers.
struct Trainer {
  explicit Trainer(const RunConfig& cfg_in)
      : cfg(cfg_in),
        fam(make_family(cfg_in)),
        specs(family_specs(*fam)),
        model(cfg_in.model_config(*fam)),
        params(),
        replay(fam->num_tasks(),
               size_t(cfg_in.replay_capacity),
               cfg_in.independent_replay),
        rng_batch(derive_seed(cfg_in.seed, kSeedBatch)) {
    Rng rng_init(derive_seed(cfg.seed, 0x696e6974ull));
    model.init_params(params, rng_init);
    target = snapshot_of(params);
    acfg.lr = cfg.lr;
    acfg.weight_decay = cfg.weight_decay;
    plan_cfg = cfg.plan_config();
  }

  const RunConfig& cfg;
  std::unique_ptr<EnvFamily> fam;
  std::vector<TaskSpec> specs;
  WorldModel model;
  ParameterStore params;
  std::shared_ptr<const ParameterStore> target;
  ReplaySet replay;
  AdamState adam;
  AdamConfig acfg;
  PlanConfig plan_cfg;
  Rng rng_batch;
  PipelineCounters counters;
  LossReport last_report;
  bool have_report = false;

  // One sample → reanalyze → loss → optimizer step. False when the batch or
  // the step was rejected; training just moves on.
  bool learner_step(int64_t step_idx, MetricsWriter* mw, std::mutex* mw_mu) {
    UnrollBatch batch = replay.sample_batch(
        cfg.batch_size, int(step_idx % int64_t(std::max(1, fam->num_tasks()))),
        cfg.unroll_steps, cfg.td_steps, cfg.gamma, rng_batch);
    ModelEval cur_eval(model, params);
    ModelEval tgt_eval(model, *target);
    LearnedPlannerModel cur(cur_eval, specs), tgt(tgt_eval, specs);
    ReanalyzeOptions ro;
    ro.plan = plan_cfg;
    ro.seed = derive_seed(cfg.seed, kSeedReana, uint64_t(step_idx));
    reanalyze(batch, cur, tgt, ro);

    LossOptions lo;
    lo.weights = cfg.loss_weights();
    lo.train = true;
    lo.seed = derive_seed(cfg.seed, kSeedDrop, uint64_t(step_idx));
    LossResult res;
    try {
      res = base_loss(model, specs, params, batch, lo);
    } catch (const std::runtime_error& e) {
      counters.rejected_batches.fetch_add(1);
      if (mw) {
        Json rec;
        rec["record"] = "rejected_batch";
        rec["learner_steps"] = step_idx;
        rec["what"] = e.what();
        std::lock_guard<std::mutex> lk(*mw_mu);
        mw->write(rec);
      }
      return false;
    }

    std::string bad;
    if (adamw_step(params, res.grads, adam, acfg, &bad) ==
        StepStatus::RejectedNonFinite) {
      counters.rejected_batches.fetch_add(1);
      if (mw) {
        Json rec;
        rec["record"] = "rejected_step";
        rec["learner_steps"] = step_idx;
        rec["param"] = bad;
        std::lock_guard<std::mutex> lk(*mw_mu);
        mw->write(rec);
      }
      return false;
    }
    apply_stats_updates(params, res.stats, cfg.bn_momentum);
    max_norm_project(params, "emb.table", 1.0);
    last_report = res.report;
    have_report = true;

    const int64_t done = counters.learner_steps.fetch_add(1) + 1;
    if (done % cfg.target_period == 0) target = snapshot_of(params);
    return true;
  }

  EvalSummary run_eval(uint64_t eval_idx) const {
    return evaluate_policy(*fam, model, params, specs, plan_cfg,
                           cfg.eval_episodes,
                           derive_seed(cfg.seed, kSeedEval, eval_idx));
  }
};

Json header_record(const RunConfig& cfg) {
  Json rec;
  rec["record"] = "header";
  rec["mode"] = cfg.mode;
  rec["family"] = cfg.family;
  rec["num_tasks"] = cfg.num_tasks;
  rec["seed"] = cfg.seed;
  rec["config"] = serialize_config(cfg);
  return rec;
}

Json final_record(const RunResult& r) {
  Json rec;
  rec["record"] = "final";
  rec["env_steps"] = r.env_steps;
  rec["learner_steps"] = r.learner_steps;
  rec["episodes"] = r.episodes;
  rec["rejected_batches"] = r.rejected_batches;
  rec["env_aborts"] = r.env_aborts;
  rec["per_task_norm"] = r.final_per_task_norm;
  rec["mean_norm"] = r.final_mean_norm;
  rec["early_stopped"] = r.early_stopped;
  rec["steps_to_threshold"] = r.steps_to_threshold;
  return rec;
}

// Single-task probe batch: sample, reanalyze, eval-mode loss, gradients.
GradientStore task_gradient(Trainer& tr, int task, int batch_per_task,
                            uint64_t seed) {
  const TaskReplayBuffer& buf = tr.replay.buffer(tr.cfg.independent_replay ? task : 0);
  Rng rng(seed);
  std::vector<UnrollBatch::Item> items;
  int tries = 0;
  while (int(items.size()) < batch_per_task) {
    require(++tries <= 200 * batch_per_task,
            "task_gradient: task absent from the shared buffer");
    auto [seg, k0] = buf.sample(rng);
    // monolithic buffer: rejection-sample the wanted task
    if (!tr.cfg.independent_replay && seg->task_id != task) continue;
    items.push_back({seg, k0});
  }
  UnrollBatch batch = make_unroll(std::move(items), tr.cfg.unroll_steps,
                                  tr.cfg.td_steps, tr.cfg.gamma);
  ModelEval cur_eval(tr.model, tr.params);
  ModelEval tgt_eval(tr.model, *tr.target);
  LearnedPlannerModel cur(cur_eval, tr.specs), tgt(tgt_eval, tr.specs);
  ReanalyzeOptions ro;
  ro.plan = tr.plan_cfg;
  ro.seed = derive_seed(seed, 1);
  reanalyze(batch, cur, tgt, ro);

  LossOptions lo;
  lo.weights = tr.cfg.loss_weights();
  lo.train = false;  // frozen batch stats, no dropout: clean comparison
  return base_loss(tr.model, tr.specs, tr.params, batch, lo).grads;
}

void run_grad_probe(Trainer& tr, const GradProbeSpec& probe, int64_t step,
                    MetricsWriter& mw, std::mutex& mw_mu) {
  std::vector<int> tasks;
  for (auto [a, b] : probe.pairs) {
    tasks.push_back(a);
    tasks.push_back(b);
  }
  std::sort(tasks.begin(), tasks.end());
  tasks.erase(std::unique(tasks.begin(), tasks.end()), tasks.end());
  std::map<int, GradientStore> grads;
  for (int t : tasks)
    grads[t] = task_gradient(tr, t, probe.batch_per_task,
                             derive_seed(tr.cfg.seed, kSeedProbe,
                                         uint64_t(step), uint64_t(t)));
  for (auto [a, b] : probe.pairs) {
    for (const std::string& group : probe.groups) {
      bool zero = false;
      const double sim = masked_grad_cosine(grads.at(a), grads.at(b),
                                            module_group_prefixes(group), &zero);
      Json rec;
      rec["record"] = "grad_sim";
      rec["learner_steps"] = step;
      rec["env_steps"] = tr.counters.env_steps.load();
      rec["pair"] = {a, b};
      rec["group"] = group;
      rec["sim"] = sim;
      rec["zero"] = zero;
      std::lock_guard<std::mutex> lk(mw_mu);
      mw.write(rec);
    }
  }
}

RunResult finish_run(Trainer& tr, MetricsWriter& mw, const std::string& out_dir,
                     bool early_stopped, int64_t steps_to_threshold) {
  RunResult r;
  r.env_steps = tr.counters.env_steps.load();
  r.learner_steps = tr.counters.learner_steps.load();
  r.episodes = tr.counters.episodes.load();
  r.rejected_batches = tr.counters.rejected_batches.load();
  r.env_aborts = tr.counters.env_aborts.load();
  const EvalSummary ev = tr.run_eval(~0ull);
  r.final_per_task_norm = ev.norm;
  r.final_mean_norm = ev.mean_norm;
  r.early_stopped = early_stopped;
  r.steps_to_threshold = steps_to_threshold;
  mw.write(eval_record("final_eval", r.env_steps, r.learner_steps, ev));
  r.checkpoint_path = out_dir + "/ckpt.bin";
  save_checkpoint(tr.params, r.checkpoint_path);
  mw.write(final_record(r));
  r.metrics_path = mw.path();
  return r;
}

}  // namespace

void SnapshotChannel::publish(int64_t version,
                              std::shared_ptr<const ParameterStore> params) {
  require(params != nullptr, "SnapshotChannel: null snapshot");
  std::lock_guard<std::mutex> lk(mu_);
  require(version > cur_.version, "SnapshotChannel: version must increase");
  cur_ = Snapshot{version, std::move(params)};
}

SnapshotChannel::Snapshot SnapshotChannel::latest() const {
  std::lock_guard<std::mutex> lk(mu_);
  return cur_;
}

int64_t SnapshotChannel::latest_version() const {
  std::lock_guard<std::mutex> lk(mu_);
  return cur_.version;
}

std::vector<std::string> module_group_prefixes(const std::string& group) {
  if (group == "dyn") return {"dyn.", "act."};
  if (group == "rew") return {"rew."};
  if (group == "vp") return {"vp.", "pol.", "val"};
  throw ContractError("module_group_prefixes: unknown group '" + group + "'");
}

double masked_grad_cosine(const GradientStore& a, const GradientStore& b,
                          const std::vector<std::string>& prefixes,
                          bool* zero_flag) {
  auto matches = [&](const std::string& name) {
    for (const auto& p : prefixes)
      if (name.rfind(p, 0) == 0) return true;
    return false;
  };
  std::vector<std::string> keys;
  for (const auto& [name, g] : a)
    if (matches(name)) keys.push_back(name);
  for (const auto& [name, g] : b)
    if (matches(name) && a.find(name) == a.end()) keys.push_back(name);
  std::sort(keys.begin(), keys.end());

  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& k : keys) {
    const auto ia = a.find(k), ib = b.find(k);
    if (ia != a.end()) na += ia->second.squaredNorm();
    if (ib != b.end()) nb += ib->second.squaredNorm();
    if (ia != a.end() && ib != b.end())
      dot += (ia->second.array() * ib->second.array()).sum();
  }
  if (zero_flag) *zero_flag = false;
  if (na < 1e-30 || nb < 1e-30) {
    if (zero_flag) *zero_flag = true;
    return 0.0;
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

EvalSummary evaluate_policy(const EnvFamily& fam, const WorldModel& model,
                            const ParameterStore& params,
                            const std::vector<TaskSpec>& specs,
                            const PlanConfig& plan_cfg, int episodes,
                            uint64_t seed) {
  require(episodes >= 1, "evaluate_policy: needs at least one episode");
  PlanConfig greedy = plan_cfg;
  greedy.zero_keys = true;
  ModelEval eval(model, params);
  LearnedPlannerModel pm(eval, specs);
  EvalSummary out;
  for (int task = 0; task < fam.num_tasks(); ++task) {
    double acc = 0.0;
    for (int e = 0; e < episodes; ++e) {
      Rng reset_rng(derive_seed(seed, uint64_t(task), uint64_t(e)));
      EnvFamily::State st = fam.reset(task, reset_rng);
      double ret = 0.0;
      for (int t = 0; t < fam.horizon(); ++t) {
        PlanRequest req;
        req.obs = fam.observe(st, task);
        req.task = task;
        req.seed = derive_seed(seed, uint64_t(task) * 1000 + uint64_t(e), uint64_t(t));
        const ImprovedPolicy ip = plan(pm, greedy, req);
        const StepResult sr = fam.step(st, chosen_action(ip), task);
        ret += sr.reward;
        if (sr.terminal || sr.truncated) break;
      }
      acc += ret;
    }
    const double raw = acc / double(episodes);
    out.raw.push_back(raw);
    out.norm.push_back(normalized_score(raw, specs.at(size_t(task))));
  }
  double m = 0.0;
  for (double v : out.norm) m += v;
  out.mean_norm = m / double(out.norm.size());
  return out;
}

RunResult run_sync(const RunConfig& cfg, const std::string& out_dir,
                   const GradProbeSpec* probe) {
  cfg.validate();
  require(cfg.mode == "sync", "run_sync: config mode is not sync");
  fs::create_directories(out_dir);
  Trainer tr(cfg);
  MetricsWriter mw(out_dir + "/metrics.jsonl");
  std::mutex mw_mu;
  mw.write(header_record(cfg));

  double updates_owed = 0.0;
  int64_t next_eval = cfg.eval_period;
  uint64_t eval_idx = 0;
  bool early = false;
  int64_t steps_to_threshold = -1;
  int consecutive_aborts = 0;

  while (!early && tr.counters.env_steps.load() < cfg.env_step_budget &&
         tr.counters.learner_steps.load() < cfg.training_steps) {
    const int64_t uid = tr.counters.episodes.fetch_add(1);
    const int task = balanced_task_schedule(tr.fam->num_tasks(), 0, uint64_t(uid));
    Collected col;
    try {
      col = collect_episode(*tr.fam, tr.model, tr.params, tr.specs, tr.plan_cfg,
                            task, uid, derive_seed(cfg.seed, kSeedPlan, uint64_t(uid)),
                            derive_seed(cfg.seed, kSeedReset, uint64_t(uid)),
                            tr.counters.learner_steps.load());
      consecutive_aborts = 0;
    } catch (const std::runtime_error&) {
      tr.counters.env_aborts.fetch_add(1);
      require(++consecutive_aborts < 500, "run_sync: environment keeps failing");
      continue;
    }
    tr.replay.store(col.seg);
    tr.counters.env_steps.fetch_add(col.steps);

    if (tr.replay.min_filled(size_t(cfg.min_fill_per_task))) {
      updates_owed += double(col.steps) * cfg.updates_per_env_step;
      while (updates_owed >= 1.0 &&
             tr.counters.learner_steps.load() < cfg.training_steps) {
        updates_owed -= 1.0;
        const int64_t step = tr.counters.learner_steps.load();
        if (!tr.learner_step(step, &mw, &mw_mu)) continue;
        const int64_t done = step + 1;
        if (done % cfg.train_log_period == 0)
          mw.write(loss_record(tr.counters.env_steps.load(), done, tr.last_report));
        if (probe && probe->period > 0 && done % probe->period == 0)
          run_grad_probe(tr, *probe, done, mw, mw_mu);
        if (cfg.checkpoint_period > 0 && done % cfg.checkpoint_period == 0)
          save_checkpoint(tr.params,
                          out_dir + "/ckpt_step" + std::to_string(done) + ".bin");
      }
    }

    while (tr.counters.env_steps.load() >= next_eval) {
      const EvalSummary ev = tr.run_eval(eval_idx++);
      mw.write(eval_record("eval", tr.counters.env_steps.load(),
                           tr.counters.learner_steps.load(), ev));
      if (cfg.stop_threshold >= 0.0 && ev.mean_norm >= cfg.stop_threshold) {
        steps_to_threshold = tr.counters.env_steps.load();
        early = true;
        break;
      }
      next_eval += cfg.eval_period;
    }
  }

  return finish_run(tr, mw, out_dir, early, steps_to_threshold);
}

RunResult run_async(const RunConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  require(cfg.mode == "async", "run_async: config mode is not async");
  fs::create_directories(out_dir);
  Trainer tr(cfg);
  MetricsWriter mw(out_dir + "/metrics.jsonl");
  std::mutex mw_mu;
  mw.write(header_record(cfg));

  SnapshotChannel channel;
  channel.publish(0, snapshot_of(tr.params));
  std::atomic<bool> stop{false};
  std::atomic<int64_t> steps_to_threshold{-1};
  std::atomic<bool> early{false};

  auto rollout = [&](int worker) {
    uint64_t local = 0;
    int consecutive_aborts = 0;
    while (!stop.load() && tr.counters.env_steps.load() < cfg.env_step_budget) {
      const int64_t uid = tr.counters.episodes.fetch_add(1);
      const int task = balanced_task_schedule(tr.fam->num_tasks(),
                                              uint64_t(worker), local++);
      // Refreshing at episode boundaries keeps planning well inside the
      // staleness bound (publish period 100 << bound 1000, episodes are
      // short); the explicit check below enforces the contract regardless.
      SnapshotChannel::Snapshot snap = channel.latest();
      try {
        if (channel.latest_version() - snap.version > cfg.staleness_bound)
          snap = channel.latest();
        Collected col = collect_episode(
            *tr.fam, tr.model, *snap.params, tr.specs, tr.plan_cfg, task, uid,
            derive_seed(cfg.seed, kSeedPlan, uint64_t(uid)),
            derive_seed(cfg.seed, kSeedReset, uint64_t(uid)), snap.version);
        tr.replay.store(col.seg);
        tr.counters.env_steps.fetch_add(col.steps);
        consecutive_aborts = 0;
      } catch (const std::runtime_error&) {
        tr.counters.env_aborts.fetch_add(1);
        if (++consecutive_aborts >= 500) break;  // broken env: give up
      }
    }
  };

  auto learner = [&]() {
    while (!stop.load() &&
           !tr.replay.min_filled(size_t(cfg.min_fill_per_task)))
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    int64_t next_eval = cfg.eval_period;
    uint64_t eval_idx = 0;
    while (!stop.load()) {
      const int64_t applied = tr.counters.learner_steps.load();
      if (applied >= cfg.training_steps) break;
      // Pace attempts to the configured update-to-data ratio so both drivers
      // train in the same regime; when collection ends, drain the remainder.
      const int64_t attempts = applied + tr.counters.rejected_batches.load();
      const double owed =
          double(tr.counters.env_steps.load()) * cfg.updates_per_env_step;
      if (double(attempts + 1) > owed) {
        if (tr.counters.env_steps.load() >= cfg.env_step_budget) break;
        std::this_thread::sleep_for(std::chrono::milliseconds(1));
        continue;
      }
      if (tr.learner_step(applied, &mw, &mw_mu)) {
        const int64_t done = tr.counters.learner_steps.load();
        if (done % cfg.train_log_period == 0) {
          std::lock_guard<std::mutex> lk(mw_mu);
          mw.write(loss_record(tr.counters.env_steps.load(), done,
                               tr.last_report));
        }
        if (done % cfg.publish_period == 0) {
          channel.publish(done, snapshot_of(tr.params));
          tr.counters.published.fetch_add(1);
        }
        if (cfg.checkpoint_period > 0 && done % cfg.checkpoint_period == 0)
          save_checkpoint(tr.params, out_dir + "/ckpt_step" +
                                         std::to_string(done) + ".bin");
        const int64_t env_now = tr.counters.env_steps.load();
        if (env_now >= next_eval) {
          const EvalSummary ev = tr.run_eval(eval_idx++);
          {
            std::lock_guard<std::mutex> lk(mw_mu);
            mw.write(eval_record("eval", env_now, done, ev));
          }
          if (cfg.stop_threshold >= 0.0 && ev.mean_norm >= cfg.stop_threshold) {
            steps_to_threshold.store(env_now);
            early.store(true);
            break;
          }
          while (next_eval <= env_now) next_eval += cfg.eval_period;
        }
      }
    }
    stop.store(true);
  };

  std::vector<std::thread> workers;
  for (int w = 0; w < cfg.rollout_workers; ++w)
    workers.emplace_back(rollout, w);
  std::thread learner_thread(learner);
  for (auto& t : workers) t.join();
  learner_thread.join();

  return finish_run(tr, mw, out_dir, early.load(), steps_to_threshold.load());
}

RunResult run_training(const RunConfig& cfg, const std::string& out_dir) {
  if (cfg.mode == "async") return run_async(cfg, out_dir);
  return run_sync(cfg, out_dir);
}

}  // namespace ezm
