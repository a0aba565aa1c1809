#include "ezm/planner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ezm/support.hpp"

namespace ezm {

EnvAction chosen_action(const ImprovedPolicy& p) {
  EnvAction a;
  if (p.discrete) {
    a.index = p.action_index.at(size_t(p.chosen));
  } else {
    a.box = p.actions.col(p.chosen);
  }
  return a;
}

Vec minmax_normalize(const Vec& q) {
  if (q.size() == 0) return q;
  const double lo = q.minCoeff(), hi = q.maxCoeff();
  if (hi - lo < 1e-12) return Vec::Constant(q.size(), 0.5);
  return ((q.array() - lo) / (hi - lo)).matrix();
}

double sigma_q(double q_norm, int max_child_visits, const PlanConfig& cfg) {
  return (cfg.c_visit + double(max_child_visits)) * cfg.c_scale * q_norm;
}

int select_by_visit_deficit(const Vec& prior, const Eigen::VectorXi& visits) {
  require(prior.size() == visits.size() && prior.size() > 0,
          "select_by_visit_deficit: size mismatch");
  const double total = double(visits.sum());
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < prior.size(); ++i) {
    const double s = prior(i) - double(visits(int(i))) / (1.0 + total);
    if (s > best_score + 1e-9) {
      best_score = s;
      best = int(i);
    }
  }
  return best;
}

Vec improved_weights(const Vec& logits, const Vec& q_norm, int max_child_visits,
                     const PlanConfig& cfg) {
  require(logits.size() == q_norm.size() && logits.size() > 0,
          "improved_weights: size mismatch");
  Vec score = logits;
  for (Eigen::Index i = 0; i < score.size(); ++i)
    score(i) += sigma_q(q_norm(i), max_child_visits, cfg);
  return softmax(score);
}

HalvingSchedule halving_schedule(int m, int simulations) {
  require(m >= 1, "halving_schedule: no candidates");
  require(simulations >= m, "halving_schedule: budget below one visit per candidate");
  HalvingSchedule hs;
  int phases = 0;
  while ((1 << phases) < m) ++phases;
  int remaining = simulations;
  int size = m;
  for (int p = 0; p < phases; ++p) {
    const int desired = std::max(1, simulations / (phases * size));
    const int actual = std::min(desired, remaining / size);
    hs.phases.emplace_back(size, actual);
    remaining -= actual * size;
    size = std::max(1, (size + 1) / 2);
  }
  hs.leftover = remaining;
  return hs;
}

namespace {

// Stable ranking: higher score first, lower position wins ties.
std::vector<int> rank_desc(const Vec& score) {
  std::vector<int> idx(size_t(score.size()));
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (score(a) != score(b)) return score(a) > score(b);
    return a < b;
  });
  return idx;
}

}  // namespace

RootCandidates sample_root_candidates_discrete(const Vec& logits, const Vec& mask,
                                               int m, bool zero_keys, Rng& rng) {
  require(m >= 1, "sample_root_candidates: need at least one candidate");
  require(logits.size() == mask.size(), "sample_root_candidates: mask size mismatch");
  std::vector<int> valid;
  for (Eigen::Index a = 0; a < mask.size(); ++a)
    if (mask(a) > 0.5) valid.push_back(int(a));
  require(!valid.empty(), "sample_root_candidates: no valid actions");
  const int take = std::min<int>(m, int(valid.size()));

  Vec keys = Vec::Zero(Eigen::Index(valid.size()));
  if (!zero_keys)
    for (Eigen::Index i = 0; i < keys.size(); ++i) keys(i) = rng.gumbel();
  Vec score(keys.size());
  for (size_t i = 0; i < valid.size(); ++i)
    score(Eigen::Index(i)) = keys(Eigen::Index(i)) + logits(valid[i]);

  const std::vector<int> order = rank_desc(score);
  RootCandidates out;
  out.keys = Vec(take);
  out.logits = Vec(take);
  for (int i = 0; i < take; ++i) {
    const int slot = order[size_t(i)];
    out.action_index.push_back(valid[size_t(slot)]);
    out.keys(i) = keys(slot);
    out.logits(i) = logits(valid[size_t(slot)]);
  }
  return out;
}

RootCandidates sample_root_candidates_continuous(const PolicyOut& p, const Vec& mask,
                                                 int m, bool zero_keys, Rng& rng) {
  require(m >= 1, "sample_root_candidates: need at least one candidate");
  const int pool = 2 * m;
  Mat proposals(mask.size(), pool);
  Vec keys = Vec::Zero(pool), logd(pool);
  for (int i = 0; i < pool; ++i) {
    proposals.col(i) = sample_squashed_gaussian(p, mask, rng);
    logd(i) = squashed_log_density(p, mask, proposals.col(i));
    if (!zero_keys) keys(i) = rng.gumbel();
  }
  const std::vector<int> order = rank_desc((keys + logd).eval());
  RootCandidates out;
  out.actions = Mat(mask.size(), m);
  out.keys = Vec(m);
  out.logits = Vec(m);
  for (int i = 0; i < m; ++i) {
    const int slot = order[size_t(i)];
    out.actions.col(i) = proposals.col(slot);
    out.keys(i) = keys(slot);
    out.logits(i) = logd(slot);
  }
  return out;
}

namespace {

struct Node {
  Vec latent;
  double reward_in = 0.0;  // model reward on the edge into this node
  double value_sum = 0.0;  // discounted dive returns measured from this node
  int visits = 0;
  Vec prior;                     // over child slots
  std::vector<int> slot_action;  // discrete global action index per slot
  Mat slot_box;                  // continuous action per slot
  std::vector<int> child;        // node id per slot, -1 = unexpanded
};

struct RootSearch {
  int task = 0;
  const TaskSpec* spec = nullptr;
  Rng rng;
  std::vector<Node> nodes;  // nodes[0] = root
  RootCandidates cand;
  int m = 0;
  double root_eval_value = 0.0;
  double root_eval_var = 0.0;

  HalvingSchedule sched;
  std::vector<int> cur;  // alive candidate positions, ranked
  int phase = 0, round = 0, arm_pos = 0;
  bool in_leftover = false;
  int leftover_arm = 0;

  // per-tick transient dive state
  std::vector<int> path;  // node ids below the root, excluding the new node
  int parent_id = 0;
  int parent_slot = 0;
};

double qhat_of(const RootSearch& rs, int cand_pos, double gamma) {
  const int id = rs.nodes[0].child[size_t(cand_pos)];
  if (id < 0 || rs.nodes[size_t(id)].visits == 0) return 0.0;
  const Node& c = rs.nodes[size_t(id)];
  return c.reward_in + gamma * (c.value_sum / double(c.visits));
}

int max_root_child_visits(const RootSearch& rs) {
  int mx = 0;
  for (int id : rs.nodes[0].child)
    if (id >= 0) mx = std::max(mx, rs.nodes[size_t(id)].visits);
  return mx;
}

// key + logit + sigma(q normalized across `set`), per candidate in `set`.
Vec keyed_scores(const RootSearch& rs, const std::vector<int>& set,
                 const PlanConfig& cfg) {
  Vec q(Eigen::Index(set.size()));
  for (size_t i = 0; i < set.size(); ++i)
    q(Eigen::Index(i)) = qhat_of(rs, set[i], cfg.gamma);
  const Vec qn = minmax_normalize(q);
  const int mx = max_root_child_visits(rs);
  Vec s(Eigen::Index(set.size()));
  for (size_t i = 0; i < set.size(); ++i) {
    const int c = set[i];
    s(Eigen::Index(i)) = (cfg.zero_keys ? 0.0 : rs.cand.keys(c)) +
                         rs.cand.logits(c) + sigma_q(qn(Eigen::Index(i)), mx, cfg);
  }
  return s;
}

void halve(RootSearch& rs, const PlanConfig& cfg) {
  const int keep = std::max(1, (int(rs.cur.size()) + 1) / 2);
  const Vec s = keyed_scores(rs, rs.cur, cfg);
  const std::vector<int> order = rank_desc(s);
  std::vector<int> next;
  next.reserve(size_t(keep));
  for (int i = 0; i < keep; ++i) next.push_back(rs.cur[size_t(order[size_t(i)])]);
  rs.cur = std::move(next);
}

void enter_leftover(RootSearch& rs, const PlanConfig& cfg) {
  rs.in_leftover = true;
  const Vec s = keyed_scores(rs, rs.cur, cfg);
  rs.leftover_arm = rs.cur[size_t(rank_desc(s)[0])];
}

void finish_phase(RootSearch& rs, const PlanConfig& cfg) {
  while (true) {
    if (rs.phase < int(rs.sched.phases.size()) - 1) halve(rs, cfg);
    rs.phase += 1;
    if (rs.phase >= int(rs.sched.phases.size())) {
      enter_leftover(rs, cfg);
      return;
    }
    if (rs.sched.phases[size_t(rs.phase)].second > 0) return;
  }
}

int current_arm(const RootSearch& rs) {
  return rs.in_leftover ? rs.leftover_arm : rs.cur[size_t(rs.arm_pos)];
}

void advance_schedule(RootSearch& rs, const PlanConfig& cfg) {
  if (rs.in_leftover) return;
  rs.arm_pos += 1;
  if (rs.arm_pos < int(rs.cur.size())) return;
  rs.arm_pos = 0;
  rs.round += 1;
  if (rs.round < rs.sched.phases[size_t(rs.phase)].second) return;
  rs.round = 0;
  finish_phase(rs, cfg);
}

// Walk from the root through `arm` to the first unexpanded slot; record the
// pending expansion edge and the node path for backprop.
void select_dive(RootSearch& rs, int arm) {
  rs.path.clear();
  int node = 0;
  int slot = arm;
  while (true) {
    const int child = rs.nodes[size_t(node)].child[size_t(slot)];
    if (child < 0) {
      rs.parent_id = node;
      rs.parent_slot = slot;
      return;
    }
    rs.path.push_back(child);
    node = child;
    const Node& nd = rs.nodes[size_t(node)];
    Eigen::VectorXi visits(Eigen::Index(nd.child.size()));
    for (size_t i = 0; i < nd.child.size(); ++i)
      visits(Eigen::Index(i)) =
          nd.child[i] < 0 ? 0 : rs.nodes[size_t(nd.child[i])].visits;
    slot = select_by_visit_deficit(nd.prior, visits);
  }
}

Vec pending_action(const RootSearch& rs, int action_width, bool discrete) {
  const Node& parent = rs.nodes[size_t(rs.parent_id)];
  if (discrete)
    return one_hot(parent.slot_action[size_t(rs.parent_slot)], action_width);
  return parent.slot_box.col(rs.parent_slot);
}

// Child-slot setup from the node's own policy evaluation.
void attach_slots(Node& nd, const PolicyOut& po, const TaskSpec& spec,
                  const PlanConfig& cfg, Rng& rng) {
  if (po.discrete) {
    std::vector<int> valid;
    for (Eigen::Index a = 0; a < spec.action_mask.size(); ++a)
      if (spec.action_mask(a) > 0.5) valid.push_back(int(a));
    Vec logits(Eigen::Index(valid.size()));
    for (size_t i = 0; i < valid.size(); ++i)
      logits(Eigen::Index(i)) = po.logits(valid[i]);
    nd.prior = softmax(logits);
    nd.slot_action = std::move(valid);
    nd.child.assign(nd.slot_action.size(), -1);
  } else {
    const int j = cfg.branch_samples;
    nd.slot_box = Mat(spec.action_mask.size(), j);
    for (int i = 0; i < j; ++i)
      nd.slot_box.col(i) = sample_squashed_gaussian(po, spec.action_mask, rng);
    nd.prior = Vec::Constant(j, 1.0 / double(j));
    nd.child.assign(size_t(j), -1);
  }
}

void backprop(RootSearch& rs, int new_id, double leaf_value, double gamma) {
  double g = leaf_value;
  rs.path.push_back(new_id);
  for (size_t i = rs.path.size(); i-- > 0;) {
    Node& nd = rs.nodes[size_t(rs.path[i])];
    nd.visits += 1;
    nd.value_sum += g;
    g = nd.reward_in + gamma * g;
  }
  rs.nodes[0].visits += 1;
  rs.nodes[0].value_sum += g;
}

ImprovedPolicy finalize(RootSearch& rs, const PlanConfig& cfg, bool discrete) {
  ImprovedPolicy out;
  out.discrete = discrete;
  out.action_index = rs.cand.action_index;
  out.actions = rs.cand.actions;
  out.logits = rs.cand.logits;

  out.qhat = Vec(rs.m);
  for (int c = 0; c < rs.m; ++c) out.qhat(c) = qhat_of(rs, c, cfg.gamma);
  const int mx = max_root_child_visits(rs);
  out.weights = improved_weights(out.logits, minmax_normalize(out.qhat), mx, cfg);

  const Vec s = keyed_scores(rs, rs.cur, cfg);
  out.chosen = rs.cur[size_t(rank_desc(s)[0])];

  const Node& root = rs.nodes[0];
  out.root_value =
      (rs.root_eval_value + root.value_sum) / (1.0 + double(root.visits));
  out.root_value_variance = rs.root_eval_var;
  require(std::isfinite(out.root_value), "plan: non-finite root value");
  return out;
}

}  // namespace

std::vector<ImprovedPolicy> plan_batch(PlannerModel& model, const PlanConfig& cfg,
                                       const std::vector<PlanRequest>& requests) {
  require(!requests.empty(), "plan_batch: no requests");
  require(cfg.simulations >= 1, "plan_batch: no simulation budget");
  require(cfg.candidates >= 1, "plan_batch: no candidate budget");
  const int R = int(requests.size());
  const int A = model.action_width();
  const bool discrete = model.discrete();

  const Eigen::Index obs_w = requests[0].obs.size();
  Mat obs(obs_w, R);
  std::vector<int> tasks(static_cast<size_t>(R));
  for (int r = 0; r < R; ++r) {
    require(requests[size_t(r)].obs.size() == obs_w, "plan_batch: ragged observations");
    obs.col(r) = requests[size_t(r)].obs;
    tasks[size_t(r)] = requests[size_t(r)].task;
  }
  const Mat h0 = model.encode(obs, tasks);
  const PlannerModel::Eval ev0 = model.evaluate(h0, tasks);

  std::vector<RootSearch> rs(static_cast<size_t>(R));
  for (int r = 0; r < R; ++r) {
    RootSearch& s = rs[size_t(r)];
    s.task = tasks[size_t(r)];
    s.spec = &model.task_spec(s.task);
    s.rng = Rng(requests[size_t(r)].seed);
    s.root_eval_value = ev0.value(r);
    s.root_eval_var = ev0.value_variance(r);

    const PolicyOut po = model.policy(ev0.policy_raw, r, *s.spec);
    s.cand = discrete
                 ? sample_root_candidates_discrete(po.logits, s.spec->action_mask,
                                                   cfg.candidates, cfg.zero_keys, s.rng)
                 : sample_root_candidates_continuous(po, s.spec->action_mask,
                                                     cfg.candidates, cfg.zero_keys, s.rng);
    s.m = discrete ? int(s.cand.action_index.size()) : int(s.cand.actions.cols());

    Node root;
    root.latent = h0.col(r);
    root.slot_action = s.cand.action_index;
    root.slot_box = s.cand.actions;
    root.child.assign(size_t(s.m), -1);
    root.prior = softmax(s.cand.logits);  // diagnostics only; schedule drives dives
    s.nodes.push_back(std::move(root));

    s.sched = halving_schedule(s.m, cfg.simulations);
    s.cur.resize(size_t(s.m));
    for (int i = 0; i < s.m; ++i) s.cur[size_t(i)] = i;
    if (s.sched.phases.empty()) enter_leftover(s, cfg);
  }

  const Eigen::Index lat_w = h0.rows();
  Mat parents(lat_w, R), actions(A, R);
  for (int t = 0; t < cfg.simulations; ++t) {
    for (int r = 0; r < R; ++r) {
      select_dive(rs[size_t(r)], current_arm(rs[size_t(r)]));
      parents.col(r) = rs[size_t(r)].nodes[size_t(rs[size_t(r)].parent_id)].latent;
      actions.col(r) = pending_action(rs[size_t(r)], A, discrete);
    }
    const PlannerModel::Trans tr = model.step(parents, actions, tasks);
    const PlannerModel::Eval ev = model.evaluate(tr.h_next, tasks);
    for (int r = 0; r < R; ++r) {
      RootSearch& s = rs[size_t(r)];
      Node nd;
      nd.latent = tr.h_next.col(r);
      nd.reward_in = tr.reward(r);
      attach_slots(nd, model.policy(ev.policy_raw, r, *s.spec), *s.spec, cfg, s.rng);
      const int id = int(s.nodes.size());
      s.nodes.push_back(std::move(nd));
      s.nodes[size_t(s.parent_id)].child[size_t(s.parent_slot)] = id;
      backprop(s, id, ev.value(r), cfg.gamma);
      advance_schedule(s, cfg);
    }
  }

  std::vector<ImprovedPolicy> out;
  out.reserve(size_t(R));
  for (int r = 0; r < R; ++r) out.push_back(finalize(rs[size_t(r)], cfg, discrete));
  return out;
}

ImprovedPolicy plan(PlannerModel& model, const PlanConfig& cfg,
                    const PlanRequest& request) {
  return plan_batch(model, cfg, {request})[0];
}

LearnedPlannerModel::LearnedPlannerModel(ModelEval& eval, std::vector<TaskSpec> specs)
    : eval_(&eval), specs_(std::move(specs)) {
  require(!specs_.empty(), "LearnedPlannerModel: no task specs");
}

bool LearnedPlannerModel::discrete() const {
  return eval_->model().config().discrete_actions;
}

int LearnedPlannerModel::action_width() const {
  return eval_->model().config().action_width;
}

Mat LearnedPlannerModel::encode(const Mat& obs, const std::vector<int>& tasks) {
  return eval_->encode(obs, tasks);
}

PlannerModel::Eval LearnedPlannerModel::evaluate(const Mat& h,
                                                 const std::vector<int>& tasks) {
  ModelEval::Heads hd = eval_->heads(h, tasks);
  return Eval{std::move(hd.value), std::move(hd.value_variance),
              std::move(hd.policy_raw)};
}

PlannerModel::Trans LearnedPlannerModel::step(const Mat& h, const Mat& actions,
                                              const std::vector<int>& tasks) {
  ModelEval::Step st = eval_->step(h, actions, tasks);
  return Trans{std::move(st.h_next), std::move(st.reward)};
}

PolicyOut LearnedPlannerModel::policy(const Mat& raw, Eigen::Index col,
                                      const TaskSpec& task) const {
  return eval_->model().extract_policy(raw, col, task);
}

}  // namespace ezm
