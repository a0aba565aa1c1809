#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ezm/config.hpp"
#include "ezm/metrics.hpp"
#include "ezm/pipeline.hpp"

namespace ezm {

// One experiment request: which analysis, on which config, over which seeds.
struct ExperimentManifest {
  std::string kind;  // train | scale-sweep | grad-sim | ablate | thm1
  RunConfig base;
  std::vector<uint64_t> seeds = {1, 2, 3};
  std::string out_dir = "out";

  std::vector<int> k_values = {1, 2, 4};         // scale-sweep / thm1
  std::vector<std::pair<int, int>> pairs;        // grad-sim task pairs
  int grad_probe_period = 200;                   // learner steps
  int grad_probe_batch = 32;
  std::vector<std::string> variants = {"full", "-ier", "-pathcons"};  // ablate
  double threshold = 0.9;                        // thm1 target score

  void validate() const;
};

// Mean/CI curve over seeds, one point per eval record index (series are
// truncated to the shortest run). Smoothing is a window-5 moving average of
// the mean; the raw series stays in the per-seed files.
struct CurvePoint {
  double env_steps = 0.0;  // mean across seeds
  MeanCI score;
  double smooth = 0.0;
};
std::vector<CurvePoint> aggregate_eval_curves(
    const std::vector<std::string>& metrics_paths);
void write_curve_csv(const std::string& path,
                     const std::vector<CurvePoint>& curve);

struct TrainOutcome {
  std::vector<RunResult> per_seed;
  std::vector<std::string> metrics_paths;
  std::string aggregate_csv;
  MeanCI final_score;
};
// Per-seed training runs plus the aggregated curve and final-score CI.
// A crashing seed keeps the other seeds' artifacts and rethrows at the end.
TrainOutcome experiment_train(const ExperimentManifest& m);

struct SweepRow {
  int k = 0;
  MeanCI score;                   // task-average over the common eval set
  std::vector<double> per_seed;   // one task-average score per seed
};
// Disjoint-subset protocol: the base family is built with max(K) tasks; for
// each K the eval set is covered by max(K)/K runs of K tasks each, every run
// getting the same total env-step budget. Scores are averaged over the
// common eval set.
std::vector<SweepRow> experiment_scale_sweep(const ExperimentManifest& m);

struct GradSimRow {
  std::pair<int, int> pair;
  std::string group;
  double mean_sim = 0.0;  // across probes and seeds
  int samples = 0;
  int zero_flagged = 0;
};
std::vector<GradSimRow> experiment_grad_sim(const ExperimentManifest& m);

struct AblationRow {
  std::string variant;
  MeanCI score;
  std::vector<double> per_seed;
};
std::vector<AblationRow> experiment_ablation(const ExperimentManifest& m);

struct Thm1Row {
  int k = 0;
  std::string learner;      // "mb" | "mf"
  double mean_steps = 0.0;  // env steps to threshold (budget when censored)
  double per_task = 0.0;    // mean_steps / k
  int censored = 0;         // seeds that never reached the threshold
  std::vector<double> per_seed;
};
// Samples-to-threshold on the grid family for the latent-model learner vs
// the bundled model-free comparator, for each task count.
std::vector<Thm1Row> experiment_thm1(const ExperimentManifest& m);

}  // namespace ezm
