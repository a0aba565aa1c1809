#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ezm/common.hpp"
#include "ezm/tape.hpp"

namespace ezm {

// Named parameter tensors. std::map keeps iteration order deterministic,
// which checkpointing, optimisation and gradient flattening rely on.
class ParameterStore {
 public:
  struct Entry {
    Mat value;
    bool trainable = true;
  };

  void create(const std::string& name, Mat value, bool trainable = true) {
    require(entries_.find(name) == entries_.end(),
            "ParameterStore: duplicate parameter " + name);
    entries_[name] = Entry{std::move(value), trainable};
  }
  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  const Mat& get(const std::string& name) const { return at(name).value; }
  Mat& mutable_value(const std::string& name) {
    return const_cast<Entry&>(at(name)).value;
  }
  bool trainable(const std::string& name) const { return at(name).trainable; }

  const std::map<std::string, Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }
  int64_t version() const { return version_; }
  void bump_version() { ++version_; }
  void set_version(int64_t v) { version_ = v; }

  size_t parameter_count() const {
    size_t n = 0;
    for (const auto& [k, e] : entries_) n += size_t(e.value.size());
    return n;
  }

 private:
  const Entry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw ContractError("ParameterStore: unknown parameter " + name);
    return it->second;
  }
  std::map<std::string, Entry> entries_;
  int64_t version_ = 0;
};

using GradientStore = std::map<std::string, Mat>;

// Deferred running-statistic updates (batch-norm means/vars). The forward
// pass reports them; the learner applies them after the optimiser step so
// loss evaluation stays a pure function of (params, batch).
struct StatsUpdate {
  std::string name;
  Mat batch_value;
};
using StatsUpdates = std::vector<StatsUpdate>;

inline void apply_stats_updates(ParameterStore& store, const StatsUpdates& ups,
                                double momentum) {
  for (const StatsUpdate& u : ups) {
    Mat& run = store.mutable_value(u.name);
    run = (1.0 - momentum) * run + momentum * u.batch_value;
  }
}

// Binds store parameters onto a tape as leaves (once per name) and collects
// gradients back out by name after backward().
class ParamContext {
 public:
  ParamContext(ad::Tape& tape, const ParameterStore& store)
      : tape_(&tape), store_(&store) {}

  ad::Var operator[](const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const bool ng = store_->trainable(name) && tape_->recording();
    ad::Var v = tape_->leaf(store_->get(name), ng);
    bound_.emplace(name, v);
    return v;
  }
  const Mat& value(const std::string& name) const { return store_->get(name); }

  // Pre-binds every store entry; long-lived inference contexts call this
  // once so the tape can be truncated back to the binding watermark.
  void bind_all() {
    for (const auto& [name, e] : store_->entries()) (*this)[name];
  }

  GradientStore collect_gradients() const {
    GradientStore g;
    for (const auto& [name, var] : bound_) {
      if (!store_->trainable(name)) continue;
      if (tape_->grad_live(var.id)) g[name] = tape_->grad_of(var);
    }
    return g;
  }

  ad::Tape& tape() { return *tape_; }
  const ParameterStore& store() const { return *store_; }
  size_t bound_count() const { return bound_.size(); }

 private:
  ad::Tape* tape_;
  const ParameterStore* store_;
  std::map<std::string, ad::Var> bound_;
};

// AdamW: Adam moments on the raw gradient, weight decay applied directly to
// the parameter (decoupled), bias-corrected.
struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 2e-5;
};

class AdamState {
 public:
  int64_t step_count = 0;
  struct Moments {
    Mat m, v;
  };
  std::map<std::string, Moments> slots;
};

enum class StepStatus { Applied, RejectedNonFinite };

// Applies one AdamW step over every trainable parameter present in `grads`.
// Missing gradients leave the parameter untouched (moments untouched too).
// Non-finite gradients reject the whole step and leave everything unchanged.
StepStatus adamw_step(ParameterStore& store, const GradientStore& grads,
                      AdamState& state, const AdamConfig& cfg,
                      std::string* rejected_name = nullptr);

// Renormalises each column of `name` to at most `max_norm`.
void max_norm_project(ParameterStore& store, const std::string& name,
                      double max_norm);

// Checkpoints: little-endian binary, format documented in README.
void save_checkpoint(const ParameterStore& store, const std::string& path);
void load_checkpoint(ParameterStore& store, const std::string& path);

// Deep copy helper for target networks / snapshots.
inline std::shared_ptr<const ParameterStore> snapshot_of(const ParameterStore& s) {
  return std::make_shared<const ParameterStore>(s);
}

}  // namespace ezm
