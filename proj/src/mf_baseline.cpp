#include "ezm/mf_baseline.hpp"

#include <cmath>

#include "ezm/network.hpp"
#include "ezm/task.hpp"

namespace ezm {

namespace {

constexpr double kMaskPenalty = -1e9;

struct MfNets {
  NetworkSpec trunk, pol, val;
  int obs_w = 0, act_w = 0, emb = 0;

  MfNets(const EnvFamily& fam, const MfConfig& cfg) {
    obs_w = fam.obs_width();
    act_w = fam.action_width();
    emb = cfg.embedding;
    trunk = NetworkSpec("mft", obs_w + emb);
    trunk.linear(cfg.hidden).layer_norm().tanh();
    trunk.linear(cfg.hidden).layer_norm().tanh();
    pol = NetworkSpec("mfp", cfg.hidden);
    pol.linear(act_w);
    val = NetworkSpec("mfv", cfg.hidden);
    val.linear(1);
  }

  void init(ParameterStore& store, int num_tasks, Rng& rng) const {
    store.create("mfe.table", rng.uniform_mat(emb, num_tasks, -0.05, 0.05));
    trunk.init_params(store, rng);
    pol.init_params(store, rng);
    val.init_params(store, rng);
  }
};

Mat mask_penalty(const TaskSpec& spec, int cols) {
  Mat pen(spec.action_mask.size(), cols);
  for (int c = 0; c < cols; ++c)
    pen.col(c) = (1.0 - spec.action_mask.array()) * kMaskPenalty;
  return pen;
}

// Stable softmax over the valid actions of one column.
Vec masked_softmax(const Vec& logits, const Vec& mask) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    if (mask(i) > 0.5) mx = std::max(mx, logits(i));
  Vec p = Vec::Zero(logits.size());
  double z = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    if (mask(i) > 0.5) z += (p(i) = std::exp(logits(i) - mx));
  return p / z;
}

int sample_action(const Vec& p, Rng& rng) {
  double u = rng.uniform(0.0, 1.0), acc = 0.0;
  int last = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p(i) <= 0.0) continue;
    last = int(i);
    acc += p(i);
    if (u <= acc) return int(i);
  }
  return last;
}

struct Actor {
  const EnvFamily& fam;
  const MfNets& nets;
  const ParameterStore& store;

  // Policy logits and values for a whole observation matrix, one tape.
  struct Heads {
    ad::Var logits, values;
  };
  Heads forward(ad::Tape& tape, ParamContext& pc, const Mat& obs, int task) const {
    std::vector<int> ids(size_t(obs.cols()), task);
    ad::Var x = tape.constant(obs);
    ad::Var e = ad::gather_cols(pc["mfe.table"], ids);
    ad::Var h = nets.trunk.forward(pc, ad::concat_rows({x, e}), ForwardOptions{});
    return {nets.pol.forward(pc, h, ForwardOptions{}),
            nets.val.forward(pc, h, ForwardOptions{})};
  }

  Vec policy_probs(const Mat& obs_col, int task) const {
    ad::Tape tape(false);
    ParamContext pc(tape, store);
    Heads h = forward(tape, pc, obs_col, task);
    return masked_softmax(h.logits.value().col(0), fam.task(task).action_mask);
  }

  double greedy_return(int task, uint64_t seed) const {
    Rng reset_rng(seed);
    EnvFamily::State st = fam.reset(task, reset_rng);
    double ret = 0.0;
    for (int t = 0; t < fam.horizon(); ++t) {
      const Vec p = policy_probs(fam.observe(st, task), task);
      int best = 0;
      for (Eigen::Index i = 1; i < p.size(); ++i)
        if (p(i) > p(best)) best = int(i);
      EnvAction a;
      a.index = best;
      const StepResult sr = fam.step(st, a, task);
      ret += sr.reward;
      if (sr.terminal || sr.truncated) break;
    }
    return ret;
  }
};

struct Episode {
  Mat obs;         // obs_w x (T+1)
  std::vector<int> actions;
  std::vector<double> rewards;
  bool terminal = false;
  double raw_return = 0.0;
};

Episode play_episode(const EnvFamily& fam, const Actor& actor, int task,
                     uint64_t reset_seed, uint64_t act_seed) {
  Rng reset_rng(reset_seed), act_rng(act_seed);
  EnvFamily::State st = fam.reset(task, reset_rng);
  std::vector<Vec> cols;
  Episode ep;
  for (int t = 0; t < fam.horizon(); ++t) {
    cols.push_back(fam.observe(st, task));
    const Vec p = actor.policy_probs(cols.back(), task);
    EnvAction a;
    a.index = sample_action(p, act_rng);
    const StepResult sr = fam.step(st, a, task);
    ep.actions.push_back(a.index);
    ep.rewards.push_back(sr.reward);
    ep.raw_return += sr.reward;
    if (sr.terminal || sr.truncated) {
      ep.terminal = sr.terminal;
      break;
    }
  }
  cols.push_back(fam.observe(st, task));
  ep.obs = Mat(fam.obs_width(), Eigen::Index(cols.size()));
  for (size_t i = 0; i < cols.size(); ++i) ep.obs.col(Eigen::Index(i)) = cols[i];
  return ep;
}

}  // namespace

MfResult run_mf_baseline(const EnvFamily& fam, const MfConfig& cfg,
                         MetricsWriter* metrics) {
  require(fam.discrete(), "mf baseline: discrete action families only");
  MfNets nets(fam, cfg);
  ParameterStore store;
  Rng rng_init(derive_seed(cfg.seed, 0x6d66696eull));
  nets.init(store, fam.num_tasks(), rng_init);
  AdamState adam;
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.weight_decay = 0.0;
  Actor actor{fam, nets, store};

  auto eval_all = [&](uint64_t tag) {
    std::vector<double> norm;
    double mean = 0.0;
    for (int task = 0; task < fam.num_tasks(); ++task) {
      double acc = 0.0;
      for (int e = 0; e < cfg.eval_episodes; ++e)
        acc += actor.greedy_return(
            task, derive_seed(cfg.seed, 0x6d666576ull + tag,
                              uint64_t(task), uint64_t(e)));
      norm.push_back(
          normalized_score(acc / cfg.eval_episodes, fam.task(task)));
      mean += norm.back();
    }
    mean /= double(norm.size());
    return std::make_pair(norm, mean);
  };

  MfResult res;
  int64_t next_eval = cfg.eval_period;
  uint64_t eval_idx = 0;
  bool early = false;

  while (!early && res.env_steps < cfg.env_step_budget) {
    const int task = balanced_task_schedule(fam.num_tasks(), 0,
                                            uint64_t(res.episodes));
    const Episode ep = play_episode(
        fam, actor, task, derive_seed(cfg.seed, 0x6d667273ull, uint64_t(res.episodes)),
        derive_seed(cfg.seed, 0x6d666163ull, uint64_t(res.episodes)));
    const int T = int(ep.actions.size());
    res.env_steps += T;
    res.episodes += 1;

    // One tape over the whole episode: policy-gradient, value, entropy terms.
    ad::Tape tape(true);
    ParamContext pc(tape, store);
    Actor::Heads heads = actor.forward(tape, pc, ep.obs, task);
    std::vector<int> first_T(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) first_T[size_t(t)] = t;

    const TaskSpec& spec = fam.task(task);
    ad::Var logits_T = ad::gather_cols(heads.logits, first_T);
    ad::Var masked = ad::add_const(logits_T, mask_penalty(spec, T));
    ad::Var values_T = ad::gather_cols(heads.values, first_T);

    // Monte-Carlo returns; a truncated tail bootstraps from the value head.
    const double boot =
        ep.terminal ? 0.0 : heads.values.value()(0, Eigen::Index(T));
    Mat g_row(1, T);
    double g = boot;
    for (int t = T - 1; t >= 0; --t) {
      g = ep.rewards[size_t(t)] + cfg.gamma * g;
      g_row(0, t) = g;
    }
    Mat adv = g_row - values_T.value();

    Mat onehot = Mat::Zero(fam.action_width(), T);
    for (int t = 0; t < T; ++t) onehot(ep.actions[size_t(t)], t) = 1.0;

    ad::Var pg = ad::cmul(ad::softmax_ce(masked, onehot), adv);
    ad::Var verr = ad::sub(values_T, tape.constant(g_row));
    ad::Var vloss = ad::scale(ad::mul(verr, verr), cfg.value_coef);
    // entropy of the masked softmax, built from a stabilized log-softmax
    Mat shift(1, T);
    for (int t = 0; t < T; ++t) shift(0, t) = masked.value().col(t).maxCoeff();
    ad::Var zs = ad::add_const(masked, (Mat::Ones(fam.action_width(), 1) * shift) * -1.0);
    ad::Var lse = ad::log_op(ad::colwise_sum(ad::exp_op(zs)));
    ad::Var logp = ad::sub(zs, ad::matmul(tape.constant(Mat::Ones(fam.action_width(), 1)), lse));
    ad::Var ent = ad::neg(ad::colwise_sum(ad::mul(ad::exp_op(logp), logp)));

    ad::Var per_step = ad::sub(ad::add(pg, vloss), ad::scale(ent, cfg.entropy_bonus));
    ad::Var total = ad::weighted_sum(per_step, RowVec::Constant(T, 1.0 / T));
    tape.backward(total);
    adamw_step(store, pc.collect_gradients(), adam, acfg);

    while (!early && res.env_steps >= next_eval) {
      auto [norm, mean] = eval_all(eval_idx++);
      if (metrics) {
        Json rec;
        rec["record"] = "eval";
        rec["env_steps"] = res.env_steps;
        rec["episodes"] = res.episodes;
        rec["per_task_norm"] = norm;
        rec["mean_norm"] = mean;
        metrics->write(rec);
      }
      if (cfg.stop_threshold >= 0.0 && mean >= cfg.stop_threshold) {
        res.steps_to_threshold = res.env_steps;
        early = true;
      }
      next_eval += cfg.eval_period;
    }
  }

  auto [norm, mean] = eval_all(~0ull);
  res.final_per_task_norm = norm;
  res.final_mean_norm = mean;
  res.early_stopped = early;
  if (metrics) {
    Json rec;
    rec["record"] = "final";
    rec["env_steps"] = res.env_steps;
    rec["episodes"] = res.episodes;
    rec["per_task_norm"] = norm;
    rec["mean_norm"] = mean;
    rec["early_stopped"] = early;
    rec["steps_to_threshold"] = res.steps_to_threshold;
    metrics->write(rec);
  }
  return res;
}

}  // namespace ezm
