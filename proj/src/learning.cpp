#include "ezm/learning.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ezm {

double value_variance(const Vec& head_values) {
  require(head_values.size() >= 1, "value_variance: empty ensemble");
  const double mean = head_values.mean();
  return (head_values.array() - mean).square().mean();
}

double mix_alpha(double variance, double var_min, double var_max) {
  require(var_max >= var_min && var_min >= 0.0, "mix_alpha: bad variance range");
  if (var_max <= var_min) return 0.5;
  return std::clamp((variance - var_min) / (var_max - var_min), 0.0, 1.0);
}

double mixed_value_target(double v_td, double v_model, double variance,
                          double var_min, double var_max) {
  const double a = mix_alpha(variance, var_min, var_max);
  return a * v_td + (1.0 - a) * v_model;
}

AlphaStats batch_variance_range(const UnrollBatch& batch) {
  AlphaStats st;
  bool first = true;
  for (int b = 0; b < batch.batch(); ++b)
    for (int k = 0; k <= batch.unroll; ++k) {
      if (batch.policy_w(k, b) <= 0.0) continue;
      const double v = batch.var_model(k, b);
      if (first) {
        st.var_min = st.var_max = v;
        first = false;
      }
      st.var_min = std::min(st.var_min, v);
      st.var_max = std::max(st.var_max, v);
      st.count += 1;
    }
  if (st.count > 0) {
    double acc = 0.0;
    for (int b = 0; b < batch.batch(); ++b)
      for (int k = 0; k <= batch.unroll; ++k)
        if (batch.policy_w(k, b) > 0.0)
          acc += mix_alpha(batch.var_model(k, b), st.var_min, st.var_max);
    st.mean = acc / st.count;
  }
  return st;
}

namespace {

constexpr double kHalfLog2Pi = 0.9189385332046727;
constexpr double kMaskPenalty = -1e9;
constexpr double kAtanhClip = 1.0 - 1e-9;

int filler_action(const TaskSpec& spec) {
  for (Eigen::Index d = 0; d < spec.action_mask.size(); ++d)
    if (spec.action_mask(d) != 0.0) return int(d);
  require(false, "base_loss: task with empty action mask");
  return 0;
}

// -log of the tanh-squashed gaussian density of fixed target actions; must
// stay numerically identical to squashed_log_density (same clipping, same
// epsilon) so planner-side densities and the loss agree.
ad::Var continuous_nll(const WorldModel& model, ad::Var praw, const Mat& targets,
                       const Mat& mask) {
  const Eigen::Index A = targets.rows();
  const Eigen::Index B = targets.cols();
  Mat z(A, B);
  Mat const_row = Mat::Zero(1, B);
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index d = 0; d < A; ++d) {
      if (mask(d, b) == 0.0) {
        z(d, b) = 0.0;
        continue;
      }
      const double a = std::min(kAtanhClip, std::max(-kAtanhClip, targets(d, b)));
      z(d, b) = std::atanh(a);
      const_row(0, b) += kHalfLog2Pi + std::log(1.0 - a * a + 1e-12);
    }
  ad::Var mu = ad::slice_rows(praw, 0, A);
  ad::Var ls = model.squash_log_std(ad::slice_rows(praw, A, A));
  ad::Var t = ad::mul(ad::sub(praw.tape->constant(z), mu), ad::exp_op(ad::neg(ls)));
  ad::Var per_dim = ad::add(ad::scale(ad::mul(t, t), 0.5), ls);
  ad::Var row = ad::colwise_sum(ad::cmul(per_dim, mask));
  return ad::add_const(row, const_row);
}

}  // namespace

LossResult base_loss(const WorldModel& model, const std::vector<TaskSpec>& specs,
                     const ParameterStore& params, const UnrollBatch& batch,
                     const LossOptions& opt) {
  const ModelConfig& cfg = model.config();
  const Support& sup = cfg.support;
  const int B = batch.batch();
  const int K = batch.unroll;
  const int S = sup.size;
  const int A = cfg.action_width;
  require(B >= 1, "base_loss: empty batch");
  require(!opt.train || B >= 2, "base_loss: train-mode batch norm needs B >= 2");
  require(int(specs.size()) == cfg.num_tasks, "base_loss: task spec count mismatch");
  const LossWeights& w = opt.weights;
  const bool build_cons = w.consistency != 0.0;
  const bool build_pc = w.path_consistency != 0.0;

  std::vector<int> tasks(static_cast<size_t>(B));
  std::vector<int> task_count(size_t(cfg.num_tasks), 0);
  for (int b = 0; b < B; ++b) {
    const int t = batch.items[size_t(b)].seg->task_id;
    require(t >= 0 && t < cfg.num_tasks, "base_loss: task id out of range");
    tasks[size_t(b)] = t;
    task_count[size_t(t)] += 1;
  }

  const AlphaStats ast = batch_variance_range(batch);

  // ---- constants derived from the batch ----------------------------------
  std::vector<Mat> O(size_t(K) + 1), U(static_cast<size_t>(K));
  std::vector<Mat> TR(static_cast<size_t>(K)), TV(size_t(K) + 1), TP(size_t(K) + 1);
  std::vector<Mat> PA(size_t(K) + 1);  // continuous target actions per step
  Mat pen, maskm;
  if (cfg.discrete_actions) {
    pen = Mat::Zero(A, B);
    for (int b = 0; b < B; ++b)
      for (int d = 0; d < A; ++d)
        if (specs[size_t(tasks[size_t(b)])].action_mask(d) == 0.0)
          pen(d, b) = kMaskPenalty;
  } else {
    maskm = Mat::Zero(A, B);
    for (int b = 0; b < B; ++b)
      maskm.col(b) = specs[size_t(tasks[size_t(b)])].action_mask;
  }

  for (int k = 0; k <= K; ++k) {
    O[size_t(k)] = Mat(cfg.obs_width, B);
    TV[size_t(k)] = Mat(S, B);
    if (cfg.discrete_actions)
      TP[size_t(k)] = Mat::Zero(A, B);
    else
      PA[size_t(k)] = Mat::Zero(A, B);
    if (k < K) {
      U[size_t(k)] = Mat(A, B);
      TR[size_t(k)] = Mat(S, B);
    }
    for (int b = 0; b < B; ++b) {
      const auto& item = batch.items[size_t(b)];
      const TrajectorySegment& seg = *item.seg;
      const TaskSpec& spec = specs[size_t(tasks[size_t(b)])];
      const int T = seg.length();
      const int s = item.k0 + k;
      O[size_t(k)].col(b) = seg.obs.col(std::min(s, T));
      if (k < K) {
        if (s < T) {
          U[size_t(k)].col(b) = seg.actions.col(s);
        } else if (cfg.discrete_actions) {
          U[size_t(k)].col(b) = one_hot(filler_action(spec), A);
        } else {
          U[size_t(k)].col(b) = Vec::Zero(A);
        }
        TR[size_t(k)].col(b) = scalar_to_twohot(batch.reward_target(k, b), sup);
      }

      double v_target = 0.0;
      if (batch.policy_w(k, b) > 0.0) {
        const auto& pol = batch.policy_targets[size_t(b)][size_t(k)];
        require(pol.weights.size() > 0,
                "base_loss: reanalyze targets missing at a real position");
        v_target = mixed_value_target(batch.v_td(k, b), batch.v_model(k, b),
                                      batch.var_model(k, b), ast.var_min,
                                      ast.var_max);
        const EnvAction chosen = chosen_action(pol);
        if (cfg.discrete_actions) {
          require(spec.action_mask(chosen.index) != 0.0,
                  "base_loss: policy target on a masked action");
          if (w.policy_full_distribution) {
            for (Eigen::Index c = 0; c < pol.weights.size(); ++c)
              TP[size_t(k)](pol.action_index[size_t(c)], b) = pol.weights(c);
          } else {
            TP[size_t(k)](chosen.index, b) = 1.0;
          }
        } else {
          for (int d = 0; d < A; ++d)
            require(spec.action_mask(d) != 0.0 || chosen.box(d) == 0.0,
                    "base_loss: policy target nonzero on a masked dimension");
          PA[size_t(k)].col(b) = chosen.box;
        }
      } else if (cfg.discrete_actions) {
        // dead position: any valid distribution, weight is zero anyway
        const double p = 1.0 / spec.action_mask.sum();
        for (int d = 0; d < A; ++d)
          if (spec.action_mask(d) != 0.0) TP[size_t(k)](d, b) = p;
      }
      TV[size_t(k)].col(b) = scalar_to_twohot(v_target, sup);
    }
  }

  // row weights: masks x component weight x unroll scaling
  const double kinv = K > 0 ? 1.0 / double(K) : 1.0;
  std::vector<Mat> wv(size_t(K) + 1), wp(size_t(K) + 1), wr(static_cast<size_t>(K)),
      wc(static_cast<size_t>(K)), wpc(static_cast<size_t>(K));
  for (int k = 0; k <= K; ++k) {
    const double step_scale = k == 0 ? 1.0 : kinv;
    wv[size_t(k)] = batch.value_w.row(k) * (w.value * step_scale);
    wp[size_t(k)] = batch.policy_w.row(k) * (w.policy * step_scale);
    if (k < K) {
      wr[size_t(k)] = batch.reward_w.row(k) * (w.reward * kinv);
      wc[size_t(k)] = batch.cons_w.row(k) * (w.consistency * kinv);
      wpc[size_t(k)] = (batch.value_w.row(k).cwiseProduct(batch.value_w.row(k + 1))) *
                       (w.path_consistency * kinv);
    }
  }

  // ---- training graph -----------------------------------------------------
  LossResult out;
  ad::Tape tape(true);
  ParamContext pc(tape, params);
  Rng rng_main(derive_seed(opt.seed, 0x6d61696eull));
  Rng rng_tgt(derive_seed(opt.seed, 0x74677400ull));
  ForwardOptions fo;
  fo.train = opt.train;
  fo.rng = &rng_main;
  fo.stats = &out.stats;
  ForwardOptions fo_t = fo;
  fo_t.rng = &rng_tgt;

  std::vector<ad::Var> value_rows(size_t(K) + 1), policy_rows(size_t(K) + 1);
  std::vector<ad::Var> reward_rows(static_cast<size_t>(K)), cons_rows(static_cast<size_t>(K)), pc_rows(static_cast<size_t>(K));
  std::vector<std::vector<ad::Var>> vheads_all(size_t(K) + 1);
  std::vector<Vec> vdec(size_t(K) + 1), rdec(static_cast<size_t>(K));

  ad::Var h = model.encode_state(pc, tape.constant(O[0]), tasks, fo);
  for (int k = 0; k <= K; ++k) {
    ad::Var trunk = model.vp_trunk(pc, h, tasks, fo);
    auto vheads = model.value_logits(pc, trunk, fo);
    ad::Var vrow = ad::softmax_ce(vheads[0], TV[size_t(k)]);
    for (size_t i = 1; i < vheads.size(); ++i)
      vrow = ad::add(vrow, ad::softmax_ce(vheads[i], TV[size_t(k)]));
    value_rows[size_t(k)] = ad::scale(vrow, 1.0 / double(vheads.size()));
    Mat dec(Eigen::Index(vheads.size()), B);
    for (size_t i = 0; i < vheads.size(); ++i)
      dec.row(Eigen::Index(i)) = decode_logits_cols(vheads[i].value(), sup).transpose();
    vdec[size_t(k)] = dec.colwise().mean().transpose();
    vheads_all[size_t(k)] = std::move(vheads);

    ad::Var praw = model.policy_raw(pc, trunk, fo);
    policy_rows[size_t(k)] =
        cfg.discrete_actions
            ? ad::softmax_ce(ad::add_const(praw, pen), TP[size_t(k)])
            : continuous_nll(model, praw, PA[size_t(k)], maskm);

    if (k == K) break;
    ad::Var hs = ad::scale_gradient(h, opt.latent_grad_scale);
    ad::Var u = model.encode_action(pc, tape.constant(U[size_t(k)]), fo);
    ad::Var rlog = model.reward_logits(pc, hs, u, tasks, fo);
    reward_rows[size_t(k)] = ad::softmax_ce(rlog, TR[size_t(k)]);
    rdec[size_t(k)] = decode_logits_cols(rlog.value(), sup);
    h = model.dynamics(pc, hs, u, tasks, fo);

    if (build_cons) {
      ad::Var tgt;
      if (opt.override_cons_targets) {
        tgt = tape.constant(opt.override_cons_targets->at(size_t(k)));
      } else {
        ad::Var ht = model.encode_state(pc, tape.constant(O[size_t(k) + 1]), tasks, fo_t);
        tgt = ad::stop_gradient(model.project(pc, ht, fo_t));
      }
      out.cons_targets.push_back(tgt.value());
      ad::Var prd = model.predict(pc, model.project(pc, h, fo), fo);
      cons_rows[size_t(k)] =
          ad::neg(ad::cosine_cols(prd, tgt, &out.report.degenerate_cosine));
    }
  }

  if (build_pc) {
    for (int k = 0; k < K; ++k) {
      Mat scal(1, B);
      if (opt.override_pc_targets) {
        scal = opt.override_pc_targets->at(size_t(k));
      } else {
        for (int b = 0; b < B; ++b)
          scal(0, b) = rdec[size_t(k)](b) + batch.gamma * vdec[size_t(k) + 1](b);
      }
      out.pc_targets.push_back(scal);
      Mat tpc(S, B);
      for (int b = 0; b < B; ++b) tpc.col(b) = scalar_to_twohot(scal(0, b), sup);
      ad::Var row = ad::softmax_ce(vheads_all[size_t(k)][0], tpc);
      for (size_t i = 1; i < vheads_all[size_t(k)].size(); ++i)
        row = ad::add(row, ad::softmax_ce(vheads_all[size_t(k)][i], tpc));
      pc_rows[size_t(k)] = ad::scale(row, 1.0 / double(vheads_all[size_t(k)].size()));
    }
  }

  // ---- weighted total and per-task report ---------------------------------
  ad::Var loss_row;
  auto add_term = [&](const ad::Var& row, const Mat& wrow) {
    if (wrow.cwiseAbs().maxCoeff() == 0.0) return;  // keep dead paths off the tape
    ad::Var term = ad::cmul(row, wrow);
    loss_row = loss_row.valid() ? ad::add(loss_row, term) : term;
  };
  for (int k = 0; k <= K; ++k) {
    add_term(value_rows[size_t(k)], wv[size_t(k)]);
    add_term(policy_rows[size_t(k)], wp[size_t(k)]);
    if (k < K) {
      add_term(reward_rows[size_t(k)], wr[size_t(k)]);
      if (build_cons) add_term(cons_rows[size_t(k)], wc[size_t(k)]);
      if (build_pc) add_term(pc_rows[size_t(k)], wpc[size_t(k)]);
    }
  }
  if (!loss_row.valid()) loss_row = tape.constant(Mat::Zero(1, B));
  RowVec norm(B);
  for (int b = 0; b < B; ++b) norm(b) = 1.0 / double(task_count[size_t(tasks[size_t(b)])]);
  ad::Var total = ad::weighted_sum(loss_row, norm);

  LossReport& rep = out.report;
  rep.per_task.assign(size_t(cfg.num_tasks), LossComponents{});
  auto accumulate = [&](double LossComponents::*field, const ad::Var& row, const Mat& wrow) {
    const Mat& v = row.value();
    for (int b = 0; b < B; ++b) {
      const int t = tasks[size_t(b)];
      rep.per_task[size_t(t)].*field += v(0, b) * wrow(0, b) / double(task_count[size_t(t)]);
    }
  };
  for (int k = 0; k <= K; ++k) {
    accumulate(&LossComponents::value, value_rows[size_t(k)], wv[size_t(k)]);
    accumulate(&LossComponents::policy, policy_rows[size_t(k)], wp[size_t(k)]);
    if (k < K) {
      accumulate(&LossComponents::reward, reward_rows[size_t(k)], wr[size_t(k)]);
      if (build_cons)
        accumulate(&LossComponents::consistency, cons_rows[size_t(k)], wc[size_t(k)]);
      if (build_pc)
        accumulate(&LossComponents::path_consistency, pc_rows[size_t(k)], wpc[size_t(k)]);
    }
  }
  for (int t = 0; t < cfg.num_tasks; ++t) {
    LossComponents& c = rep.per_task[size_t(t)];
    c.samples = task_count[size_t(t)];
    c.total = c.reward + c.value + c.policy + c.consistency + c.path_consistency;
    rep.overall.reward += c.reward;
    rep.overall.value += c.value;
    rep.overall.policy += c.policy;
    rep.overall.consistency += c.consistency;
    rep.overall.path_consistency += c.path_consistency;
    rep.overall.total += c.total;
  }
  rep.overall.samples = B;
  rep.alpha_mean = ast.mean;
  rep.alpha_min = ast.count > 0 ? mix_alpha(ast.var_min, ast.var_min, ast.var_max) : 0.0;
  rep.alpha_max = ast.count > 0 ? mix_alpha(ast.var_max, ast.var_min, ast.var_max) : 0.0;

  if (!std::isfinite(total.scalar())) {
    std::ostringstream msg;
    msg << "base_loss: non-finite loss (reward=" << rep.overall.reward
        << " value=" << rep.overall.value << " policy=" << rep.overall.policy
        << " consistency=" << rep.overall.consistency
        << " path=" << rep.overall.path_consistency << ")";
    throw ContractError(msg.str());
  }

  tape.backward(total);
  out.grads = pc.collect_gradients();
  return out;
}

}  // namespace ezm
