#include "ezm/replay.hpp"

#include <algorithm>
#include <cmath>

namespace ezm {

namespace {

void check_segment(const TrajectorySegment& seg) {
  const int T = seg.length();
  require(T >= 1, "replay: empty segment");
  require(seg.obs.cols() == T + 1, "replay: obs must cover T+1 states");
  require(seg.actions.cols() == T, "replay: actions must cover T transitions");
  require(seg.root_values.size() == T, "replay: root_values must cover T steps");
  require_finite(seg.obs, "segment obs");
  require_finite(seg.rewards, "segment rewards");
}

}  // namespace

void TaskReplayBuffer::store(std::shared_ptr<const TrajectorySegment> seg) {
  require(seg != nullptr, "replay: null segment");
  check_segment(*seg);
  require(task_id_ < 0 || seg->task_id == task_id_,
          "replay: segment task does not match buffer task");
  std::lock_guard<std::mutex> lock(mu_);
  transitions_ += size_t(seg->length());
  segs_.push_back(std::move(seg));
  while (transitions_ > capacity_ && segs_.size() > 1) {
    transitions_ -= size_t(segs_.front()->length());
    segs_.pop_front();
  }
}

size_t TaskReplayBuffer::transitions() const {
  std::lock_guard<std::mutex> lock(mu_);
  return transitions_;
}

size_t TaskReplayBuffer::segments() const {
  std::lock_guard<std::mutex> lock(mu_);
  return segs_.size();
}

std::vector<uint64_t> TaskReplayBuffer::segment_uids() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<uint64_t> out;
  out.reserve(segs_.size());
  for (const auto& s : segs_) out.push_back(s->uid);
  return out;
}

std::pair<std::shared_ptr<const TrajectorySegment>, int> TaskReplayBuffer::sample(
    Rng& rng) const {
  std::lock_guard<std::mutex> lock(mu_);
  require(transitions_ > 0, "replay: sampling from an empty buffer");
  int64_t idx = rng.uniform_i64(int64_t(transitions_));
  for (const auto& s : segs_) {
    if (idx < s->length()) return {s, int(idx)};
    idx -= s->length();
  }
  require(false, "replay: transition index out of range");
  return {nullptr, 0};
}

ReplaySet::ReplaySet(int num_tasks, size_t capacity_per_task, bool independent)
    : num_tasks_(num_tasks), independent_(independent) {
  require(num_tasks >= 1, "replay: need at least one task");
  if (independent_) {
    for (int i = 0; i < num_tasks; ++i)
      buffers_.push_back(std::make_unique<TaskReplayBuffer>(i, capacity_per_task));
  } else {
    // One shared ring sized for the whole task set; task mixture in a batch
    // then follows the data distribution instead of fixed quotas.
    buffers_.push_back(std::make_unique<TaskReplayBuffer>(
        -1, capacity_per_task * size_t(num_tasks)));
  }
}

void ReplaySet::store(std::shared_ptr<const TrajectorySegment> seg) {
  require(seg != nullptr, "replay: null segment");
  require(seg->task_id >= 0 && seg->task_id < num_tasks_,
          "replay: segment task out of range");
  buffers_[independent_ ? size_t(seg->task_id) : 0]->store(std::move(seg));
}

bool ReplaySet::min_filled(size_t per_task_transitions) const {
  if (!independent_)
    return buffers_[0]->transitions() >= per_task_transitions * size_t(num_tasks_);
  for (const auto& b : buffers_)
    if (b->transitions() < per_task_transitions) return false;
  return true;
}

size_t ReplaySet::total_transitions() const {
  size_t n = 0;
  for (const auto& b : buffers_) n += b->transitions();
  return n;
}

namespace {

// Structural weights for one unroll window; see the mask conventions on
// UnrollBatch.
void fill_masks(UnrollBatch& batch, int col) {
  const auto& item = batch.items[size_t(col)];
  const TrajectorySegment& seg = *item.seg;
  const int T = seg.length();
  const int K = batch.unroll;
  for (int k = 0; k <= K; ++k) {
    const int s = item.k0 + k;
    const bool real = s < T;
    batch.policy_w(k, col) = real ? 1.0 : 0.0;
    batch.value_w(k, col) = (real || seg.terminal) ? 1.0 : 0.0;
    if (k < K) {
      batch.reward_w(k, col) = (real || seg.terminal) ? 1.0 : 0.0;
      batch.cons_w(k, col) = (s + 1 <= T) ? 1.0 : 0.0;
      batch.reward_target(k, col) = real ? seg.rewards(s) : 0.0;
    }
  }
}

}  // namespace

UnrollBatch make_unroll(std::vector<UnrollBatch::Item> items, int unroll,
                        int td, double gamma) {
  require(unroll >= 0 && td >= 1, "replay: bad unroll shape");
  require(!items.empty(), "replay: empty unroll batch");
  UnrollBatch batch;
  batch.unroll = unroll;
  batch.td = td;
  batch.gamma = gamma;
  batch.items = std::move(items);
  const int B = batch.batch();
  for (const auto& it : batch.items) {
    require(it.seg != nullptr, "replay: null segment in batch");
    require(it.k0 >= 0 && it.k0 < it.seg->length(), "replay: window start out of range");
  }
  batch.value_w = Mat::Zero(unroll + 1, B);
  batch.policy_w = Mat::Zero(unroll + 1, B);
  batch.reward_w = Mat::Zero(unroll + 1, B);
  batch.cons_w = Mat::Zero(unroll + 1, B);
  batch.reward_target = Mat::Zero(unroll + 1, B);
  batch.v_td = Mat::Zero(unroll + 1, B);
  batch.v_model = Mat::Zero(unroll + 1, B);
  batch.var_model = Mat::Zero(unroll + 1, B);
  batch.policy_targets.assign(size_t(B),
                              std::vector<ImprovedPolicy>(size_t(unroll + 1)));
  for (int b = 0; b < B; ++b) fill_masks(batch, b);
  return batch;
}

UnrollBatch ReplaySet::sample_batch(int batch_size, int rotation, int unroll,
                                    int td, double gamma, Rng& rng) const {
  require(batch_size >= 1, "replay: bad batch size");
  std::vector<UnrollBatch::Item> items;
  if (independent_) {
    const auto quota = batch_quota(batch_size, num_tasks_, rotation);
    for (int t = 0; t < num_tasks_; ++t) {
      if (buffers_[size_t(t)]->transitions() == 0) {
        starved_.fetch_add(1);
        continue;
      }
      for (int i = 0; i < quota[size_t(t)]; ++i) {
        auto [seg, k0] = buffers_[size_t(t)]->sample(rng);
        items.push_back({std::move(seg), k0});
      }
    }
  } else {
    require(buffers_[0]->transitions() > 0, "replay: sampling before any data");
    for (int i = 0; i < batch_size; ++i) {
      auto [seg, k0] = buffers_[0]->sample(rng);
      items.push_back({std::move(seg), k0});
    }
  }
  require(!items.empty(), "replay: every task buffer is empty");
  return make_unroll(std::move(items), unroll, td, gamma);
}

double td_target(const Vec& rewards, double bootstrap, double gamma, int n) {
  const int m = int(rewards.size());
  require(n >= 1 && m <= n, "td_target: window longer than horizon");
  double acc = 0.0;
  double disc = 1.0;
  for (int t = 0; t < m; ++t) {
    acc += disc * rewards(t);
    disc *= gamma;
  }
  return acc + disc * bootstrap;
}

void reanalyze(UnrollBatch& batch, PlannerModel& current, PlannerModel& target,
               const ReanalyzeOptions& opt) {
  const int B = batch.batch();
  const int K = batch.unroll;
  require(B > 0, "reanalyze: empty batch");
  require(batch.value_w.rows() == K + 1 && batch.value_w.cols() == B,
          "reanalyze: batch masks not initialized");

  // Bootstrap states for the n-step targets, deduplicated per (item, offset).
  struct Boot {
    int b, k;
    int m;  // rewards consumed before the bootstrap
  };
  std::vector<Boot> boots;
  std::vector<int> boot_tasks;
  std::vector<Vec> boot_obs;
  for (int b = 0; b < B; ++b) {
    const auto& item = batch.items[size_t(b)];
    const TrajectorySegment& seg = *item.seg;
    const int T = seg.length();
    for (int k = 0; k <= K; ++k) {
      if (batch.value_w(k, b) <= 0.0) continue;
      const int s = item.k0 + k;
      if (s >= T) {  // absorbing: terminal value, no rewards left
        batch.v_td(k, b) = 0.0;
        continue;
      }
      const int e = std::min(s + batch.td, T);
      const Vec window = seg.rewards.segment(s, e - s);
      if (seg.terminal && e == T) {
        batch.v_td(k, b) = td_target(window, 0.0, batch.gamma, batch.td);
      } else {
        boots.push_back({b, k, e - s});
        boot_tasks.push_back(seg.task_id);
        boot_obs.push_back(seg.obs.col(e));
      }
    }
  }
  if (!boots.empty()) {
    Mat obs(boot_obs[0].size(), Eigen::Index(boot_obs.size()));
    for (size_t i = 0; i < boot_obs.size(); ++i) obs.col(Eigen::Index(i)) = boot_obs[i];
    const Mat h = target.encode(obs, boot_tasks);
    const auto ev = target.evaluate(h, boot_tasks);
    for (size_t i = 0; i < boots.size(); ++i) {
      const auto& bt = boots[i];
      const auto& item = batch.items[size_t(bt.b)];
      const Vec window = item.seg->rewards.segment(item.k0 + bt.k, bt.m);
      batch.v_td(bt.k, bt.b) =
          td_target(window, ev.value(Eigen::Index(i)), batch.gamma, batch.td);
    }
  }

  // Fresh searches at every real position, one lockstep planning call.
  std::vector<std::pair<int, int>> where;
  std::vector<PlanRequest> reqs;
  for (int b = 0; b < B; ++b) {
    const auto& item = batch.items[size_t(b)];
    const TrajectorySegment& seg = *item.seg;
    const uint64_t base = opt.use_stored_seeds ? seg.plan_seed : opt.seed;
    for (int k = 0; k <= K; ++k) {
      if (batch.policy_w(k, b) <= 0.0) continue;
      const int s = item.k0 + k;
      where.emplace_back(b, k);
      reqs.push_back({seg.obs.col(s), seg.task_id, derive_seed(base, seg.uid, uint64_t(s))});
    }
  }
  auto results = plan_batch(current, opt.plan, reqs);
  for (size_t i = 0; i < where.size(); ++i) {
    const auto [b, k] = where[i];
    batch.v_model(k, b) = results[i].root_value;
    batch.var_model(k, b) = results[i].root_value_variance;
    batch.policy_targets[size_t(b)][size_t(k)] = std::move(results[i]);
  }
}

}  // namespace ezm
