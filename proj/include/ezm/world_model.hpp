#pragma once

#include <vector>

#include "ezm/network.hpp"
#include "ezm/support.hpp"
#include "ezm/task.hpp"

namespace ezm {

// Latent world model
//   h   = rep(obs [, e])          state encoder
//   u   = act(a)                  action encoder
//   h'  = dyn(h, u [, e])         latent dynamics
//   r~  = rew(h, u [, e])         reward logits (own trunk; not a function
//                                 of the successor latent)
//   v~i = val_i(vp(h [, e]))      5-head value logits over the same support
//   p   = pol(vp(h [, e]))        policy head
// plus proj/pred for the temporal-consistency target. e is a learnable
// per-task embedding (max-norm 1); each of the four trunk injection sites
// can be switched off independently.
struct ModelConfig {
  int obs_width = 0;      // family-global padded observation width
  int action_width = 0;   // family-global action width
  bool discrete_actions = true;
  int num_tasks = 1;

  int hidden = 512;
  int embedding = 128;
  int action_embedding = 64;
  int head_width = 512;
  int proj_hidden = 1024;
  int proj_width = 512;
  int res_blocks = 3;
  int value_heads = 5;
  double dropout = 0.1;
  double bn_momentum = 0.1;

  Support support;

  bool te_rep = true, te_dyn = true, te_rew = true, te_vp = true;
  double log_std_min = -5.0, log_std_max = 2.0;

  int policy_out_width() const {
    return discrete_actions ? action_width : 2 * action_width;
  }
  int trunk_width() const { return hidden + (te_vp ? embedding : 0); }
};

// Policy head output for one sample. Continuous params are already squashed
// and masked (masked dims: mean 0, log_std 0).
struct PolicyOut {
  bool discrete = true;
  Vec logits;            // discrete: global action width, pre-masking
  Vec mean, log_std;     // continuous
};

class WorldModel {
 public:
  explicit WorldModel(ModelConfig cfg);
  const ModelConfig& config() const { return cfg_; }

  void init_params(ParameterStore& store, Rng& rng) const;
  size_t expected_param_count() const;

  using Tasks = std::vector<int>;

  ad::Var task_embedding(ParamContext& pc, const Tasks& tasks) const;
  ad::Var encode_state(ParamContext& pc, ad::Var obs, const Tasks& tasks,
                       const ForwardOptions& opt) const;
  ad::Var encode_action(ParamContext& pc, ad::Var actions,
                        const ForwardOptions& opt) const;
  ad::Var dynamics(ParamContext& pc, ad::Var h, ad::Var u, const Tasks& tasks,
                   const ForwardOptions& opt) const;
  ad::Var reward_logits(ParamContext& pc, ad::Var h, ad::Var u,
                        const Tasks& tasks, const ForwardOptions& opt) const;
  ad::Var vp_trunk(ParamContext& pc, ad::Var h, const Tasks& tasks,
                   const ForwardOptions& opt) const;
  std::vector<ad::Var> value_logits(ParamContext& pc, ad::Var trunk,
                                    const ForwardOptions& opt) const;
  ad::Var policy_raw(ParamContext& pc, ad::Var trunk,
                     const ForwardOptions& opt) const;
  ad::Var project(ParamContext& pc, ad::Var h, const ForwardOptions& opt) const;
  ad::Var predict(ParamContext& pc, ad::Var proj, const ForwardOptions& opt) const;

  // Squashed log-std from the raw head rows, as a tape op (for the loss).
  ad::Var squash_log_std(ad::Var raw) const;

  PolicyOut extract_policy(const Mat& raw, Eigen::Index col,
                           const TaskSpec& task) const;

 private:
  ModelConfig cfg_;
  NetworkSpec rep_, act_, dyn_, rew_, vp_, pol_, proj_, pred_;
  std::vector<NetworkSpec> val_;
};

// Continuous actions are tanh-squashed gaussians; masked dims are excluded
// from both sampling and density.
Vec sample_squashed_gaussian(const PolicyOut& p, const Vec& mask, Rng& rng);
double squashed_log_density(const PolicyOut& p, const Vec& mask, const Vec& action);

// Inference-only evaluator bound to one parameter snapshot. Re-uses a single
// non-recording tape; parameters are copied in once at construction. Not
// thread-safe: one instance per thread.
class ModelEval {
 public:
  ModelEval(const WorldModel& model, const ParameterStore& params);

  Mat encode(const Mat& obs_padded, const WorldModel::Tasks& tasks);

  struct Heads {
    Vec value;           // ensemble mean of decoded heads
    Vec value_variance;  // population variance of decoded heads
    Mat policy_raw;
  };
  Heads heads(const Mat& h, const WorldModel::Tasks& tasks);

  struct Step {
    Mat h_next;
    Vec reward;
  };
  Step step(const Mat& h, const Mat& actions, const WorldModel::Tasks& tasks);

  const WorldModel& model() const { return *model_; }
  const ParameterStore& params() const { return *params_; }

 private:
  void reset_scratch() { tape_.truncate(watermark_); }
  const WorldModel* model_;
  const ParameterStore* params_;
  ad::Tape tape_{false};
  ParamContext pc_;
  size_t watermark_ = 0;
};

}  // namespace ezm
