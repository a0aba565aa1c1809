#pragma once

#include <vector>

#include "ezm/env.hpp"
#include "ezm/planner.hpp"

namespace ezm {

// Exact GridNav model for isolating the search from model-learning error:
// latents are (row, col, done), rewards come from the real environment step,
// values from value iteration, and priors are a one-hot logit on the optimal
// action. Counts step columns so tests can pin the expansion budget.
class GridOraclePlannerModel : public PlannerModel {
 public:
  GridOraclePlannerModel(const GridNavFamily& fam, double gamma,
                         double prior_logit = 10.0);

  bool discrete() const override { return true; }
  int action_width() const override { return fam_->action_width(); }
  const TaskSpec& task_spec(int id) const override { return fam_->task(id); }

  Mat encode(const Mat& obs, const std::vector<int>& tasks) override;
  Eval evaluate(const Mat& h, const std::vector<int>& tasks) override;
  Trans step(const Mat& h, const Mat& actions, const std::vector<int>& tasks) override;
  PolicyOut policy(const Mat& raw, Eigen::Index col,
                   const TaskSpec& task) const override;

  const GridOracle& oracle(int task) const { return oracles_.at(size_t(task)); }
  int64_t expansions() const { return expansions_; }

 private:
  const GridNavFamily* fam_;
  double gamma_;
  double prior_logit_;
  std::vector<GridOracle> oracles_;
  int64_t expansions_ = 0;
};

// One-shot bandit exposed as a planner model: pulling arm i from the root
// pays values[i] once and lands in a zero-value absorbing state. Priors are
// beta * values, the informative regime the search sees from a trained
// policy head.
class BanditPlannerModel : public PlannerModel {
 public:
  BanditPlannerModel(int arms, double beta);

  void set_values(const Vec& values);
  const Vec& values() const { return values_; }

  bool discrete() const override { return true; }
  int action_width() const override { return arms_; }
  const TaskSpec& task_spec(int) const override { return spec_; }

  Mat encode(const Mat& obs, const std::vector<int>& tasks) override;
  Eval evaluate(const Mat& h, const std::vector<int>& tasks) override;
  Trans step(const Mat& h, const Mat& actions, const std::vector<int>& tasks) override;
  PolicyOut policy(const Mat& raw, Eigen::Index col,
                   const TaskSpec& task) const override;

 private:
  int arms_;
  double beta_;
  Vec values_;
  TaskSpec spec_;
};

}  // namespace ezm
