#include "ezm/oracle_models.hpp"

#include <cmath>

namespace ezm {

GridOraclePlannerModel::GridOraclePlannerModel(const GridNavFamily& fam,
                                               double gamma, double prior_logit)
    : fam_(&fam), gamma_(gamma), prior_logit_(prior_logit) {
  for (int k = 0; k < fam.num_tasks(); ++k)
    oracles_.push_back(gridnav_oracle(fam, k, gamma));
}

Mat GridOraclePlannerModel::encode(const Mat& obs, const std::vector<int>& tasks) {
  require(int(tasks.size()) == int(obs.cols()), "oracle encode: task count mismatch");
  Mat h(3, obs.cols());
  for (Eigen::Index j = 0; j < obs.cols(); ++j) {
    Eigen::Index cell = 0;
    obs.col(j).maxCoeff(&cell);
    if (fam_->is_corridor(tasks[size_t(j)])) {
      h.col(j) << 0.0, double(cell), 0.0;
    } else {
      h.col(j) << double(cell / GridNavFamily::kSide),
          double(cell % GridNavFamily::kSide), 0.0;
    }
  }
  return h;
}

PlannerModel::Eval GridOraclePlannerModel::evaluate(const Mat& h,
                                                    const std::vector<int>& tasks) {
  const Eigen::Index n = h.cols();
  Eval ev;
  ev.value = Vec::Zero(n);
  ev.value_variance = Vec::Zero(n);
  ev.policy_raw = Mat::Zero(fam_->action_width(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (h(2, j) > 0.5) continue;  // absorbing: value 0, uniform prior
    const GridOracle& o = oracles_[size_t(tasks[size_t(j)])];
    const int r = int(h(0, j)), c = int(h(1, j));
    ev.value(j) = o.v(r, c);
    ev.policy_raw(o.best_action(r, c), j) = prior_logit_;
  }
  return ev;
}

PlannerModel::Trans GridOraclePlannerModel::step(const Mat& h, const Mat& actions,
                                                 const std::vector<int>& tasks) {
  const Eigen::Index n = h.cols();
  Trans tr;
  tr.h_next = Mat(3, n);
  tr.reward = Vec::Zero(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    expansions_ += 1;
    if (h(2, j) > 0.5) {  // absorbing state: stay, no reward
      tr.h_next.col(j) = h.col(j);
      continue;
    }
    EnvFamily::State s;
    s.x = Vec(2);
    s.x << h(0, j), h(1, j);
    EnvAction a;
    actions.col(j).maxCoeff(&a.index);
    const StepResult res = fam_->step(s, a, tasks[size_t(j)]);
    tr.h_next.col(j) << s.x(0), s.x(1), res.terminal ? 1.0 : 0.0;
    tr.reward(j) = res.reward;
  }
  return tr;
}

PolicyOut GridOraclePlannerModel::policy(const Mat& raw, Eigen::Index col,
                                         const TaskSpec&) const {
  PolicyOut p;
  p.discrete = true;
  p.logits = raw.col(col);
  return p;
}

BanditPlannerModel::BanditPlannerModel(int arms, double beta)
    : arms_(arms), beta_(beta), values_(Vec::Zero(arms)) {
  require(arms >= 1, "BanditPlannerModel: no arms");
  spec_.id = 0;
  spec_.name = "bandit";
  spec_.obs_dim = 1;
  spec_.action_dim = arms;
  spec_.action_mask = Vec::Ones(arms);
  spec_.discrete = true;
  spec_.success_score = 1.0;
}

void BanditPlannerModel::set_values(const Vec& values) {
  require(values.size() == arms_, "BanditPlannerModel: value count mismatch");
  values_ = values;
}

Mat BanditPlannerModel::encode(const Mat& obs, const std::vector<int>&) {
  return Mat::Zero(1, obs.cols());
}

PlannerModel::Eval BanditPlannerModel::evaluate(const Mat& h,
                                                const std::vector<int>&) {
  const Eigen::Index n = h.cols();
  Eval ev;
  ev.value = Vec::Zero(n);
  ev.value_variance = Vec::Zero(n);
  ev.policy_raw = Mat::Zero(arms_, n);
  for (Eigen::Index j = 0; j < n; ++j)
    if (h(0, j) < 0.5) ev.policy_raw.col(j) = beta_ * values_;
  return ev;
}

PlannerModel::Trans BanditPlannerModel::step(const Mat& h, const Mat& actions,
                                             const std::vector<int>&) {
  const Eigen::Index n = h.cols();
  Trans tr;
  tr.h_next = Mat::Ones(1, n);  // every pull lands in the absorbing state
  tr.reward = Vec::Zero(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (h(0, j) < 0.5) {
      Eigen::Index arm = 0;
      actions.col(j).maxCoeff(&arm);
      tr.reward(j) = values_(arm);
    }
  }
  return tr;
}

PolicyOut BanditPlannerModel::policy(const Mat& raw, Eigen::Index col,
                                     const TaskSpec&) const {
  PolicyOut p;
  p.discrete = true;
  p.logits = raw.col(col);
  return p;
}

}  // namespace ezm
