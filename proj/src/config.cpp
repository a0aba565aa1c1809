#include "ezm/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <variant>

namespace ezm {

namespace {

struct Field {
  const char* key;
  std::variant<int*, int64_t*, uint64_t*, double*, bool*, std::string*> ref;
};

// One table drives parsing, serialization, and the unknown-key check.
std::vector<Field> fields(RunConfig& c) {
  return {
      {"family", &c.family},
      {"num_tasks", &c.num_tasks},
      {"task_offset", &c.task_offset},
      {"family_total_tasks", &c.family_total_tasks},
      {"seed", &c.seed},
      {"mode", &c.mode},
      {"gamma", &c.gamma},
      {"unroll_steps", &c.unroll_steps},
      {"td_steps", &c.td_steps},
      {"batch_size", &c.batch_size},
      {"replay_capacity", &c.replay_capacity},
      {"training_steps", &c.training_steps},
      {"hidden", &c.hidden},
      {"embedding", &c.embedding},
      {"res_blocks", &c.res_blocks},
      {"simulations", &c.simulations},
      {"top_actions", &c.top_actions},
      {"sampled_actions", &c.sampled_actions},
      {"lr", &c.lr},
      {"weight_decay", &c.weight_decay},
      {"action_embedding", &c.action_embedding},
      {"head_width", &c.head_width},
      {"proj_hidden", &c.proj_hidden},
      {"proj_width", &c.proj_width},
      {"value_heads", &c.value_heads},
      {"dropout", &c.dropout},
      {"bn_momentum", &c.bn_momentum},
      {"branch_samples", &c.branch_samples},
      {"c_visit", &c.c_visit},
      {"c_scale", &c.c_scale},
      {"reward_loss_weight", &c.reward_loss_weight},
      {"value_loss_weight", &c.value_loss_weight},
      {"policy_loss_weight", &c.policy_loss_weight},
      {"consistency_loss_weight", &c.consistency_loss_weight},
      {"path_consistency_weight", &c.path_consistency_weight},
      {"policy_full_distribution", &c.policy_full_distribution},
      {"env_step_budget", &c.env_step_budget},
      {"updates_per_env_step", &c.updates_per_env_step},
      {"min_fill_per_task", &c.min_fill_per_task},
      {"publish_period", &c.publish_period},
      {"staleness_bound", &c.staleness_bound},
      {"target_period", &c.target_period},
      {"eval_period", &c.eval_period},
      {"eval_episodes", &c.eval_episodes},
      {"train_log_period", &c.train_log_period},
      {"stop_threshold", &c.stop_threshold},
      {"rollout_workers", &c.rollout_workers},
      {"checkpoint_period", &c.checkpoint_period},
      {"independent_replay", &c.independent_replay},
      {"path_consistency", &c.path_consistency},
      {"te_rep", &c.te_rep},
      {"te_dyn", &c.te_dyn},
      {"te_rew", &c.te_rew},
      {"te_vp", &c.te_vp},
  };
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <class T>
T parse_number(const std::string& v, const std::string& key) {
  std::istringstream in(v);
  T out{};
  in >> out;
  std::string rest;
  if (in.fail() || (in >> rest && !rest.empty()))
    throw ContractError("config: bad value '" + v + "' for key '" + key + "'");
  return out;
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ContractError("config: bad bool '" + v + "' for key '" + key + "'");
}

std::string to_text(const Field& f) {
  std::ostringstream out;
  out.precision(17);
  std::visit(
      [&](auto* p) {
        using P = std::decay_t<decltype(*p)>;
        if constexpr (std::is_same_v<P, bool>)
          out << (*p ? "true" : "false");
        else
          out << *p;
      },
      f.ref);
  return out.str();
}

}  // namespace

void set_config_key(RunConfig& cfg, const std::string& key,
                    const std::string& value) {
  for (const Field& f : fields(cfg)) {
    if (key != f.key) continue;
    std::visit(
        [&](auto* p) {
          using P = std::decay_t<decltype(*p)>;
          if constexpr (std::is_same_v<P, bool>)
            *p = parse_bool(value, key);
          else if constexpr (std::is_same_v<P, std::string>)
            *p = value;
          else
            *p = parse_number<P>(value, key);
        },
        f.ref);
    return;
  }
  throw ContractError("config: unknown key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    lineno += 1;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ContractError("config: line " + std::to_string(lineno) +
                          " is not 'key = value'");
    try {
      set_config_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ContractError& e) {
      throw ContractError(std::string(e.what()) + " (line " +
                          std::to_string(lineno) + ")");
    }
  }
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream out;
  for (const Field& f : fields(const_cast<RunConfig&>(cfg)))
    out << f.key << " = " << to_text(f) << "\n";
  return out.str();
}

void RunConfig::validate() const {
  auto positive = [](double v, const char* k) {
    if (!(v > 0)) throw ContractError(std::string("config: ") + k + " must be positive");
  };
  if (family != "gridnav" && family != "gridnav+corridor" &&
      family != "pointmass" && family != "pointmass+probe")
    throw ContractError("config: unknown family '" + family + "'");
  if (mode != "sync" && mode != "async")
    throw ContractError("config: mode must be sync or async");
  positive(num_tasks, "num_tasks");
  if (task_offset < 0) throw ContractError("config: task_offset must be >= 0");
  if (family_total_tasks != 0 && family_total_tasks < task_offset + num_tasks)
    throw ContractError("config: family_total_tasks smaller than the task window");
  if (!(gamma > 0.0 && gamma < 1.0))
    throw ContractError("config: gamma must be in (0, 1)");
  positive(unroll_steps, "unroll_steps");
  positive(td_steps, "td_steps");
  positive(batch_size, "batch_size");
  if (batch_size < num_tasks)
    throw ContractError("config: batch_size below the task count");
  positive(double(replay_capacity), "replay_capacity");
  positive(double(training_steps), "training_steps");
  positive(hidden, "hidden");
  positive(embedding, "embedding");
  if (res_blocks < 0) throw ContractError("config: res_blocks must be >= 0");
  positive(simulations, "simulations");
  positive(top_actions, "top_actions");
  positive(sampled_actions, "sampled_actions");
  positive(lr, "lr");
  if (weight_decay < 0) throw ContractError("config: weight_decay must be >= 0");
  positive(action_embedding, "action_embedding");
  positive(head_width, "head_width");
  positive(proj_hidden, "proj_hidden");
  positive(proj_width, "proj_width");
  positive(value_heads, "value_heads");
  if (dropout < 0.0 || dropout >= 1.0)
    throw ContractError("config: dropout must be in [0, 1)");
  if (bn_momentum <= 0.0 || bn_momentum > 1.0)
    throw ContractError("config: bn_momentum must be in (0, 1]");
  positive(branch_samples, "branch_samples");
  positive(double(env_step_budget), "env_step_budget");
  positive(updates_per_env_step, "updates_per_env_step");
  positive(double(min_fill_per_task), "min_fill_per_task");
  positive(publish_period, "publish_period");
  positive(staleness_bound, "staleness_bound");
  positive(target_period, "target_period");
  positive(eval_period, "eval_period");
  positive(eval_episodes, "eval_episodes");
  positive(train_log_period, "train_log_period");
  positive(rollout_workers, "rollout_workers");
  if (checkpoint_period < 0)
    throw ContractError("config: checkpoint_period must be >= 0");
  for (double w : {reward_loss_weight, value_loss_weight, policy_loss_weight,
                   consistency_loss_weight, path_consistency_weight})
    if (w < 0) throw ContractError("config: loss weights must be >= 0");
}

ModelConfig RunConfig::model_config(const EnvFamily& fam) const {
  ModelConfig m;
  m.obs_width = fam.obs_width();
  m.action_width = fam.action_width();
  m.discrete_actions = fam.discrete();
  m.num_tasks = fam.num_tasks();
  m.hidden = hidden;
  m.embedding = embedding;
  m.action_embedding = action_embedding;
  m.head_width = head_width;
  m.proj_hidden = proj_hidden;
  m.proj_width = proj_width;
  m.res_blocks = res_blocks;
  m.value_heads = value_heads;
  m.dropout = dropout;
  m.bn_momentum = bn_momentum;
  m.te_rep = te_rep;
  m.te_dyn = te_dyn;
  m.te_rew = te_rew;
  m.te_vp = te_vp;
  return m;
}

PlanConfig RunConfig::plan_config() const {
  PlanConfig p;
  p.simulations = simulations;
  p.candidates = std::max(top_actions, sampled_actions);
  p.branch_samples = branch_samples;
  p.gamma = gamma;
  p.c_visit = c_visit;
  p.c_scale = c_scale;
  return p;
}

LossWeights RunConfig::loss_weights() const {
  LossWeights w;
  w.reward = reward_loss_weight;
  w.value = value_loss_weight;
  w.policy = policy_loss_weight;
  w.consistency = consistency_loss_weight;
  w.path_consistency = path_consistency ? path_consistency_weight : 0.0;
  w.policy_full_distribution = policy_full_distribution;
  return w;
}

namespace {

// Re-indexed window over a wider family; the base keeps its geometry, so
// different windows over the same base share identical tasks.
class SubsetFamily : public EnvFamily {
 public:
  SubsetFamily(std::unique_ptr<EnvFamily> base, int offset, int count)
      : base_(std::move(base)), offset_(offset) {
    require(offset >= 0 && count >= 1 &&
                offset + count <= base_->num_tasks(),
            "SubsetFamily: window out of range");
    for (int k = 0; k < count; ++k) {
      TaskSpec t = base_->task(offset + k);
      t.id = k;
      tasks_.push_back(std::move(t));
    }
    name_ = base_->name() + "[" + std::to_string(offset) + ".." +
            std::to_string(offset + count - 1) + "]";
  }

  std::string name() const override { return name_; }
  int num_tasks() const override { return int(tasks_.size()); }
  const TaskSpec& task(int id) const override { return tasks_.at(size_t(id)); }
  int obs_width() const override { return base_->obs_width(); }
  int action_width() const override { return base_->action_width(); }
  bool discrete() const override { return base_->discrete(); }
  int horizon() const override { return base_->horizon(); }
  State reset(int task, Rng& rng) const override {
    return base_->reset(task + offset_, rng);
  }
  StepResult step(State& s, const EnvAction& a, int task) const override {
    return base_->step(s, a, task + offset_);
  }
  Vec observe(const State& s, int task) const override {
    return base_->observe(s, task + offset_);
  }
  Vec expert_action_direction(const State& s, int task) const override {
    return base_->expert_action_direction(s, task + offset_);
  }

 private:
  std::unique_ptr<EnvFamily> base_;
  int offset_;
  std::vector<TaskSpec> tasks_;
  std::string name_;
};

std::unique_ptr<EnvFamily> make_base_family(const std::string& family, int total) {
  if (family == "gridnav") return std::make_unique<GridNavFamily>(total);
  if (family == "gridnav+corridor")
    return std::make_unique<GridNavFamily>(total, true);
  if (family == "pointmass") return std::make_unique<PointMassFamily>(total);
  if (family == "pointmass+probe")
    return std::make_unique<PointMassFamily>(total, true);
  throw ContractError("config: unknown family '" + family + "'");
}

}  // namespace

std::unique_ptr<EnvFamily> make_family(const RunConfig& cfg) {
  if (cfg.task_offset == 0 && cfg.family_total_tasks == 0)
    return make_base_family(cfg.family, cfg.num_tasks);
  const int total = cfg.family_total_tasks > 0
                        ? cfg.family_total_tasks
                        : cfg.task_offset + cfg.num_tasks;
  auto base = make_base_family(cfg.family, total);
  return std::make_unique<SubsetFamily>(std::move(base), cfg.task_offset,
                                        cfg.num_tasks);
}

}  // namespace ezm
