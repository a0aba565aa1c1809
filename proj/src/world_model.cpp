#include "ezm/world_model.hpp"

#include <cmath>

namespace ezm {

namespace {
size_t linear_params(int in, int out) { return size_t(out) * size_t(in) + size_t(out); }
}

WorldModel::WorldModel(ModelConfig cfg) : cfg_(cfg) {
  require(cfg_.obs_width > 0 && cfg_.action_width > 0, "WorldModel: widths unset");
  require(cfg_.value_heads >= 1, "WorldModel: needs at least one value head");
  const int emb = cfg_.embedding;

  rep_ = NetworkSpec("rep", cfg_.obs_width + (cfg_.te_rep ? emb : 0));
  rep_.linear(cfg_.hidden).layer_norm().tanh().residual(cfg_.res_blocks);

  act_ = NetworkSpec("act", cfg_.action_width);
  act_.linear(cfg_.action_embedding).layer_norm().tanh();

  const int dyn_in = cfg_.hidden + cfg_.action_embedding + (cfg_.te_dyn ? emb : 0);
  dyn_ = NetworkSpec("dyn", dyn_in);
  dyn_.layer_norm().linear(cfg_.hidden).relu().linear(cfg_.hidden).residual(cfg_.res_blocks);

  const int rew_in = cfg_.hidden + cfg_.action_embedding + (cfg_.te_rew ? emb : 0);
  rew_ = NetworkSpec("rew", rew_in);
  rew_.layer_norm().linear(cfg_.hidden).relu().linear(cfg_.hidden).residual(cfg_.res_blocks);
  rew_.linear(cfg_.head_width).batch_norm().relu();
  rew_.linear(cfg_.head_width).batch_norm().relu();
  rew_.linear(cfg_.support.size, /*zero_init=*/true);

  vp_ = NetworkSpec("vp", cfg_.trunk_width());
  vp_.residual(cfg_.res_blocks);

  val_.clear();
  for (int i = 0; i < cfg_.value_heads; ++i) {
    NetworkSpec v("val" + std::to_string(i), cfg_.trunk_width());
    v.linear(cfg_.head_width).dropout(cfg_.dropout).batch_norm().relu();
    v.linear(cfg_.head_width).dropout(cfg_.dropout).batch_norm().relu();
    v.linear(cfg_.support.size, /*zero_init=*/true);
    val_.push_back(std::move(v));
  }

  pol_ = NetworkSpec("pol", cfg_.trunk_width());
  pol_.linear(cfg_.head_width).batch_norm().relu();
  pol_.linear(cfg_.head_width).batch_norm().relu();
  pol_.linear(cfg_.policy_out_width());

  proj_ = NetworkSpec("proj", cfg_.hidden);
  proj_.linear(cfg_.proj_hidden).layer_norm().relu();
  proj_.linear(cfg_.proj_hidden).layer_norm().relu();
  proj_.linear(cfg_.proj_width).layer_norm();

  pred_ = NetworkSpec("pred", cfg_.proj_width);
  pred_.linear(cfg_.proj_hidden).layer_norm().relu();
  pred_.linear(cfg_.proj_width);
}

void WorldModel::init_params(ParameterStore& store, Rng& rng) const {
  store.create("emb.table",
               rng.uniform_mat(cfg_.embedding, cfg_.num_tasks,
                               -1.0 / std::sqrt(double(cfg_.embedding)),
                               1.0 / std::sqrt(double(cfg_.embedding))));
  rep_.init_params(store, rng);
  act_.init_params(store, rng);
  dyn_.init_params(store, rng);
  rew_.init_params(store, rng);
  vp_.init_params(store, rng);
  for (const NetworkSpec& v : val_) v.init_params(store, rng);
  pol_.init_params(store, rng);
  proj_.init_params(store, rng);
  pred_.init_params(store, rng);
}

size_t WorldModel::expected_param_count() const {
  const int emb = cfg_.embedding;
  const int H = cfg_.hidden, U = cfg_.action_embedding, W = cfg_.head_width;
  const int S = cfg_.support.size, T = cfg_.trunk_width();
  auto resblock = [](int w) { return 2 * linear_params(w, w) + 2 * size_t(w); };
  size_t n = size_t(emb) * size_t(cfg_.num_tasks);
  // rep
  n += linear_params(rep_.input_width(), H) + 2 * size_t(H) +
       size_t(cfg_.res_blocks) * resblock(H);
  // act
  n += linear_params(cfg_.action_width, U) + 2 * size_t(U);
  // dyn: LN(in) + two linears + blocks
  n += 2 * size_t(dyn_.input_width()) + linear_params(dyn_.input_width(), H) +
       linear_params(H, H) + size_t(cfg_.res_blocks) * resblock(H);
  // rew trunk + head (batch norm: gamma/beta trainable, mean/var buffers)
  n += 2 * size_t(rew_.input_width()) + linear_params(rew_.input_width(), H) +
       linear_params(H, H) + size_t(cfg_.res_blocks) * resblock(H);
  n += linear_params(H, W) + 4 * size_t(W) + linear_params(W, W) + 4 * size_t(W) +
       linear_params(W, S);
  // vp trunk
  n += size_t(cfg_.res_blocks) * resblock(T);
  // value heads
  n += size_t(cfg_.value_heads) *
       (linear_params(T, W) + 4 * size_t(W) + linear_params(W, W) + 4 * size_t(W) +
        linear_params(W, S));
  // policy head
  n += linear_params(T, W) + 4 * size_t(W) + linear_params(W, W) + 4 * size_t(W) +
       linear_params(W, cfg_.policy_out_width());
  // projection + prediction
  n += linear_params(H, cfg_.proj_hidden) + 2 * size_t(cfg_.proj_hidden);
  n += linear_params(cfg_.proj_hidden, cfg_.proj_hidden) + 2 * size_t(cfg_.proj_hidden);
  n += linear_params(cfg_.proj_hidden, cfg_.proj_width) + 2 * size_t(cfg_.proj_width);
  n += linear_params(cfg_.proj_width, cfg_.proj_hidden) + 2 * size_t(cfg_.proj_hidden);
  n += linear_params(cfg_.proj_hidden, cfg_.proj_width);
  return n;
}

ad::Var WorldModel::task_embedding(ParamContext& pc, const Tasks& tasks) const {
  for (int t : tasks)
    require(t >= 0 && t < cfg_.num_tasks, "task_embedding: task id out of range");
  return ad::gather_cols(pc["emb.table"], tasks);
}

ad::Var WorldModel::encode_state(ParamContext& pc, ad::Var obs, const Tasks& tasks,
                                 const ForwardOptions& opt) const {
  require(size_t(obs.cols()) == tasks.size(), "encode_state: batch mismatch");
  ad::Var x = obs;
  if (cfg_.te_rep) x = ad::concat_rows({obs, task_embedding(pc, tasks)});
  return rep_.forward(pc, x, opt);
}

ad::Var WorldModel::encode_action(ParamContext& pc, ad::Var actions,
                                  const ForwardOptions& opt) const {
  return act_.forward(pc, actions, opt);
}

ad::Var WorldModel::dynamics(ParamContext& pc, ad::Var h, ad::Var u,
                             const Tasks& tasks, const ForwardOptions& opt) const {
  std::vector<ad::Var> parts{h, u};
  if (cfg_.te_dyn) parts.push_back(task_embedding(pc, tasks));
  return dyn_.forward(pc, ad::concat_rows(parts), opt);
}

ad::Var WorldModel::reward_logits(ParamContext& pc, ad::Var h, ad::Var u,
                                  const Tasks& tasks,
                                  const ForwardOptions& opt) const {
  std::vector<ad::Var> parts{h, u};
  if (cfg_.te_rew) parts.push_back(task_embedding(pc, tasks));
  return rew_.forward(pc, ad::concat_rows(parts), opt);
}

ad::Var WorldModel::vp_trunk(ParamContext& pc, ad::Var h, const Tasks& tasks,
                             const ForwardOptions& opt) const {
  ad::Var x = h;
  if (cfg_.te_vp) x = ad::concat_rows({h, task_embedding(pc, tasks)});
  return vp_.forward(pc, x, opt);
}

std::vector<ad::Var> WorldModel::value_logits(ParamContext& pc, ad::Var trunk,
                                              const ForwardOptions& opt) const {
  std::vector<ad::Var> out;
  out.reserve(val_.size());
  for (const NetworkSpec& v : val_) out.push_back(v.forward(pc, trunk, opt));
  return out;
}

ad::Var WorldModel::policy_raw(ParamContext& pc, ad::Var trunk,
                               const ForwardOptions& opt) const {
  return pol_.forward(pc, trunk, opt);
}

ad::Var WorldModel::project(ParamContext& pc, ad::Var h,
                            const ForwardOptions& opt) const {
  return proj_.forward(pc, h, opt);
}

ad::Var WorldModel::predict(ParamContext& pc, ad::Var proj,
                            const ForwardOptions& opt) const {
  return pred_.forward(pc, proj, opt);
}

ad::Var WorldModel::squash_log_std(ad::Var raw) const {
  const double lo = cfg_.log_std_min, hi = cfg_.log_std_max;
  return ad::add_scalar(ad::scale(ad::tanh_op(raw), 0.5 * (hi - lo)),
                        lo + 0.5 * (hi - lo));
}

PolicyOut WorldModel::extract_policy(const Mat& raw, Eigen::Index col,
                                     const TaskSpec& task) const {
  PolicyOut out;
  out.discrete = cfg_.discrete_actions;
  if (cfg_.discrete_actions) {
    require(raw.rows() == cfg_.action_width, "extract_policy: bad logit rows");
    out.logits = raw.col(col);
    return out;
  }
  const int A = cfg_.action_width;
  require(raw.rows() == 2 * A, "extract_policy: bad continuous head rows");
  out.mean = raw.col(col).head(A);
  const double lo = cfg_.log_std_min, hi = cfg_.log_std_max;
  out.log_std =
      (raw.col(col).tail(A).array().tanh() * 0.5 * (hi - lo) + lo + 0.5 * (hi - lo))
          .matrix();
  for (int d = 0; d < A; ++d) {
    if (task.action_mask(d) == 0.0) {
      out.mean(d) = 0.0;
      out.log_std(d) = 0.0;
    }
  }
  return out;
}

Vec sample_squashed_gaussian(const PolicyOut& p, const Vec& mask, Rng& rng) {
  require(!p.discrete, "sample_squashed_gaussian: discrete policy");
  const Eigen::Index A = p.mean.size();
  Vec a = Vec::Zero(A);
  for (Eigen::Index d = 0; d < A; ++d) {
    if (mask(d) == 0.0) continue;  // masked dims stay exactly zero
    const double z = p.mean(d) + std::exp(p.log_std(d)) * rng.gaussian();
    a(d) = std::tanh(z);
  }
  return a;
}

double squashed_log_density(const PolicyOut& p, const Vec& mask, const Vec& action) {
  require(!p.discrete, "squashed_log_density: discrete policy");
  constexpr double kHalfLog2Pi = 0.9189385332046727;
  double lp = 0.0;
  for (Eigen::Index d = 0; d < p.mean.size(); ++d) {
    if (mask(d) == 0.0) continue;
    const double a = std::min(1.0 - 1e-9, std::max(-1.0 + 1e-9, action(d)));
    const double z = std::atanh(a);
    const double s = std::exp(p.log_std(d));
    const double t = (z - p.mean(d)) / s;
    lp += -0.5 * t * t - p.log_std(d) - kHalfLog2Pi;
    lp -= std::log(1.0 - a * a + 1e-12);  // tanh change of variables
  }
  return lp;
}

ModelEval::ModelEval(const WorldModel& model, const ParameterStore& params)
    : model_(&model), params_(&params), pc_(tape_, params) {
  pc_.bind_all();
  watermark_ = tape_.size();
}

Mat ModelEval::encode(const Mat& obs_padded, const WorldModel::Tasks& tasks) {
  reset_scratch();
  ForwardOptions opt;
  opt.check_finite = false;
  return model_->encode_state(pc_, tape_.leaf(obs_padded), tasks, opt).value();
}

ModelEval::Heads ModelEval::heads(const Mat& h, const WorldModel::Tasks& tasks) {
  reset_scratch();
  ForwardOptions opt;
  opt.check_finite = false;
  ad::Var trunk = model_->vp_trunk(pc_, tape_.leaf(h), tasks, opt);
  std::vector<ad::Var> vlogits = model_->value_logits(pc_, trunk, opt);
  const Support& sup = model_->config().support;
  const Eigen::Index B = h.cols();
  Mat decoded(Eigen::Index(vlogits.size()), B);
  for (size_t i = 0; i < vlogits.size(); ++i)
    decoded.row(Eigen::Index(i)) = decode_logits_cols(vlogits[i].value(), sup).transpose();
  Heads out;
  out.value = decoded.colwise().mean().transpose();
  out.value_variance = (decoded.rowwise() - out.value.transpose())
                           .array()
                           .square()
                           .colwise()
                           .mean()
                           .transpose();
  out.policy_raw = model_->policy_raw(pc_, trunk, opt).value();
  return out;
}

ModelEval::Step ModelEval::step(const Mat& h, const Mat& actions,
                                const WorldModel::Tasks& tasks) {
  reset_scratch();
  ForwardOptions opt;
  opt.check_finite = false;
  ad::Var hv = tape_.leaf(h);
  ad::Var u = model_->encode_action(pc_, tape_.leaf(actions), opt);
  Step out;
  out.h_next = model_->dynamics(pc_, hv, u, tasks, opt).value();
  out.reward = decode_logits_cols(
      model_->reward_logits(pc_, hv, u, tasks, opt).value(), model_->config().support);
  return out;
}

}  // namespace ezm
