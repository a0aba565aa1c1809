#include "ezm/experiments.hpp"

#include <algorithm>
#include <filesystem>
#include <map>

#include "ezm/mf_baseline.hpp"

namespace ezm {

namespace {

namespace fs = std::filesystem;

std::vector<std::pair<double, double>> eval_series(const std::string& path) {
  std::vector<std::pair<double, double>> out;
  for (const Json& rec : read_jsonl(path))
    if (rec.value("record", "") == "eval")
      out.emplace_back(rec.at("env_steps").get<double>(),
                       rec.at("mean_norm").get<double>());
  return out;
}

RunConfig seeded(const RunConfig& base, uint64_t seed) {
  RunConfig cfg = base;
  cfg.seed = seed;
  return cfg;
}

std::string seed_dir(const std::string& root, uint64_t seed) {
  return root + "/seed" + std::to_string(seed);
}

}  // namespace

void ExperimentManifest::validate() const {
  static const char* kinds[] = {"train", "scale-sweep", "grad-sim", "ablate",
                                "thm1"};
  if (std::find_if(std::begin(kinds), std::end(kinds), [&](const char* k) {
        return kind == k;
      }) == std::end(kinds))
    throw ContractError("manifest: unknown kind '" + kind + "'");
  if (seeds.empty()) throw ContractError("manifest: seeds must be non-empty");
  if (out_dir.empty()) throw ContractError("manifest: out_dir must be set");
  base.validate();
  if (kind == "scale-sweep" || kind == "thm1") {
    if (k_values.empty()) throw ContractError("manifest: k_values empty");
    for (int k : k_values)
      if (k < 1) throw ContractError("manifest: k_values must be positive");
  }
  if (kind == "grad-sim") {
    if (pairs.empty()) throw ContractError("manifest: grad-sim needs task pairs");
    for (auto [a, b] : pairs)
      if (a < 0 || b < 0 || a >= base.num_tasks || b >= base.num_tasks)
        throw ContractError("manifest: pair outside the task set");
    if (grad_probe_period < 1 || grad_probe_batch < 1)
      throw ContractError("manifest: bad grad probe settings");
  }
  if (kind == "ablate" && variants.empty())
    throw ContractError("manifest: variants empty");
  if (kind == "thm1" && !(threshold > 0.0 && threshold <= 1.0))
    throw ContractError("manifest: threshold must be in (0, 1]");
}

std::vector<CurvePoint> aggregate_eval_curves(
    const std::vector<std::string>& metrics_paths) {
  require(!metrics_paths.empty(), "aggregate: no metrics files");
  std::vector<std::vector<std::pair<double, double>>> series;
  size_t shortest = SIZE_MAX;
  for (const auto& p : metrics_paths) {
    series.push_back(eval_series(p));
    shortest = std::min(shortest, series.back().size());
  }
  std::vector<CurvePoint> curve;
  if (shortest == SIZE_MAX || shortest == 0) return curve;
  std::vector<double> means;
  for (size_t i = 0; i < shortest; ++i) {
    CurvePoint pt;
    std::vector<double> scores;
    double steps = 0.0;
    for (const auto& s : series) {
      steps += s[i].first;
      scores.push_back(s[i].second);
    }
    pt.env_steps = steps / double(series.size());
    pt.score = mean_ci95(scores);
    means.push_back(pt.score.mean);
    curve.push_back(pt);
  }
  const std::vector<double> smooth = moving_average(means, 5);
  for (size_t i = 0; i < curve.size(); ++i) curve[i].smooth = smooth[i];
  return curve;
}

void write_curve_csv(const std::string& path,
                     const std::vector<CurvePoint>& curve) {
  std::vector<std::vector<std::string>> rows;
  for (const CurvePoint& pt : curve)
    rows.push_back({csv_num(pt.env_steps), csv_num(pt.score.mean),
                    csv_num(pt.score.lo), csv_num(pt.score.hi),
                    csv_num(pt.smooth), std::to_string(pt.score.n)});
  write_csv(path, {"env_steps", "mean_norm", "ci_lo", "ci_hi", "smooth", "n"},
            rows);
}

TrainOutcome experiment_train(const ExperimentManifest& m) {
  m.validate();
  fs::create_directories(m.out_dir);
  TrainOutcome out;
  std::string failures;
  for (uint64_t seed : m.seeds) {
    try {
      RunResult r = run_training(seeded(m.base, seed), seed_dir(m.out_dir, seed));
      out.metrics_paths.push_back(r.metrics_path);
      out.per_seed.push_back(std::move(r));
    } catch (const std::exception& e) {
      failures += "seed " + std::to_string(seed) + ": " + e.what() + "; ";
    }
  }
  if (!out.per_seed.empty()) {
    std::vector<double> finals;
    for (const RunResult& r : out.per_seed) finals.push_back(r.final_mean_norm);
    out.final_score = mean_ci95(finals);
    out.aggregate_csv = m.out_dir + "/curve.csv";
    write_curve_csv(out.aggregate_csv, aggregate_eval_curves(out.metrics_paths));
  }
  if (!failures.empty())
    throw ContractError("train: failed seeds kept partial results: " + failures);
  return out;
}

std::vector<SweepRow> experiment_scale_sweep(const ExperimentManifest& m) {
  m.validate();
  fs::create_directories(m.out_dir);
  const int total = *std::max_element(m.k_values.begin(), m.k_values.end());
  std::vector<SweepRow> rows;
  for (int k : m.k_values) {
    require(total % k == 0, "scale sweep: K must divide the eval set size");
    SweepRow row;
    row.k = k;
    for (uint64_t seed : m.seeds) {
      // cover the eval set with total/k disjoint windows, same budget each
      std::vector<double> task_scores;
      for (int part = 0; part < total / k; ++part) {
        RunConfig cfg = seeded(m.base, seed);
        cfg.num_tasks = k;
        cfg.task_offset = part * k;
        cfg.family_total_tasks = total;
        const std::string dir = m.out_dir + "/k" + std::to_string(k) + "_p" +
                                std::to_string(part) + "_s" +
                                std::to_string(seed);
        const RunResult r = run_training(cfg, dir);
        for (double v : r.final_per_task_norm) task_scores.push_back(v);
      }
      require(int(task_scores.size()) == total, "scale sweep: eval gap");
      double mean = 0.0;
      for (double v : task_scores) mean += v;
      row.per_seed.push_back(mean / double(total));
    }
    row.score = mean_ci95(row.per_seed);
    rows.push_back(std::move(row));
  }
  std::vector<std::vector<std::string>> csv;
  for (const SweepRow& r : rows) {
    std::vector<std::string> cells = {std::to_string(r.k), csv_num(r.score.mean),
                                      csv_num(r.score.lo), csv_num(r.score.hi)};
    for (double v : r.per_seed) cells.push_back(csv_num(v));
    while (cells.size() < 4 + m.seeds.size()) cells.push_back("");
    csv.push_back(std::move(cells));
  }
  std::vector<std::string> header = {"k", "mean_norm", "ci_lo", "ci_hi"};
  for (size_t i = 0; i < m.seeds.size(); ++i)
    header.push_back("seed" + std::to_string(m.seeds[i]));
  write_csv(m.out_dir + "/scale_sweep.csv", header, csv);
  return rows;
}

std::vector<GradSimRow> experiment_grad_sim(const ExperimentManifest& m) {
  m.validate();
  fs::create_directories(m.out_dir);
  GradProbeSpec probe;
  probe.period = m.grad_probe_period;
  probe.batch_per_task = m.grad_probe_batch;
  probe.pairs = m.pairs;

  std::map<std::string, GradSimRow> acc;
  for (uint64_t seed : m.seeds) {
    RunConfig cfg = seeded(m.base, seed);
    require(cfg.mode == "sync", "grad-sim: requires the deterministic driver");
    const RunResult r = run_sync(cfg, seed_dir(m.out_dir, seed), &probe);
    for (const Json& rec : read_jsonl(r.metrics_path)) {
      if (rec.value("record", "") != "grad_sim") continue;
      const int a = rec.at("pair")[0].get<int>();
      const int b = rec.at("pair")[1].get<int>();
      const std::string group = rec.at("group").get<std::string>();
      const std::string key =
          std::to_string(a) + "-" + std::to_string(b) + ":" + group;
      GradSimRow& row = acc[key];
      row.pair = {a, b};
      row.group = group;
      row.mean_sim += rec.at("sim").get<double>();
      row.samples += 1;
      row.zero_flagged += rec.at("zero").get<bool>() ? 1 : 0;
    }
  }
  std::vector<GradSimRow> rows;
  std::vector<std::vector<std::string>> csv;
  for (auto& [key, row] : acc) {
    require(row.samples > 0, "grad-sim: no probe records");
    row.mean_sim /= double(row.samples);
    csv.push_back({std::to_string(row.pair.first),
                   std::to_string(row.pair.second), row.group,
                   csv_num(row.mean_sim), std::to_string(row.samples),
                   std::to_string(row.zero_flagged)});
    rows.push_back(row);
  }
  write_csv(m.out_dir + "/grad_sim.csv",
            {"task_a", "task_b", "group", "mean_sim", "samples", "zero_flagged"},
            csv);
  return rows;
}

std::vector<AblationRow> experiment_ablation(const ExperimentManifest& m) {
  m.validate();
  fs::create_directories(m.out_dir);
  std::vector<AblationRow> rows;
  for (const std::string& variant : m.variants) {
    RunConfig cfg = m.base;
    if (variant == "full") {
    } else if (variant == "-ier") {
      cfg.independent_replay = false;
    } else if (variant == "-pathcons") {
      cfg.path_consistency = false;
    } else if (variant.rfind("-te:", 0) == 0) {
      for (size_t pos = 4; pos < variant.size();) {
        size_t comma = variant.find(',', pos);
        if (comma == std::string::npos) comma = variant.size();
        const std::string part = variant.substr(pos, comma - pos);
        if (part == "rep") cfg.te_rep = false;
        else if (part == "dyn") cfg.te_dyn = false;
        else if (part == "rew") cfg.te_rew = false;
        else if (part == "vp") cfg.te_vp = false;
        else throw ContractError("ablate: unknown embedding site '" + part + "'");
        pos = comma + 1;
      }
    } else {
      throw ContractError("ablate: unknown variant '" + variant + "'");
    }

    AblationRow row;
    row.variant = variant;
    for (uint64_t seed : m.seeds) {
      const RunResult r = run_training(
          seeded(cfg, seed), m.out_dir + "/" + (variant == "full" ? "full" : variant.substr(1)) +
                                 "_s" + std::to_string(seed));
      row.per_seed.push_back(r.final_mean_norm);
    }
    row.score = mean_ci95(row.per_seed);
    rows.push_back(std::move(row));
  }
  std::vector<std::vector<std::string>> csv;
  for (const AblationRow& r : rows) {
    std::vector<std::string> cells = {r.variant, csv_num(r.score.mean),
                                      csv_num(r.score.lo), csv_num(r.score.hi)};
    for (double v : r.per_seed) cells.push_back(csv_num(v));
    csv.push_back(std::move(cells));
  }
  std::vector<std::string> header = {"variant", "mean_norm", "ci_lo", "ci_hi"};
  for (uint64_t s : m.seeds) header.push_back("seed" + std::to_string(s));
  write_csv(m.out_dir + "/ablations.csv", header, csv);
  return rows;
}

std::vector<Thm1Row> experiment_thm1(const ExperimentManifest& m) {
  m.validate();
  require(m.base.family == "gridnav", "thm1: defined on the grid family");
  fs::create_directories(m.out_dir);
  std::vector<Thm1Row> rows;
  for (int k : m.k_values) {
    Thm1Row mb, mf;
    mb.k = mf.k = k;
    mb.learner = "mb";
    mf.learner = "mf";
    for (uint64_t seed : m.seeds) {
      RunConfig cfg = seeded(m.base, seed);
      cfg.num_tasks = k;
      cfg.stop_threshold = m.threshold;
      const RunResult r = run_training(
          cfg, m.out_dir + "/mb_k" + std::to_string(k) + "_s" + std::to_string(seed));
      const bool censored = r.steps_to_threshold < 0;
      mb.per_seed.push_back(censored ? double(cfg.env_step_budget)
                                     : double(r.steps_to_threshold));
      mb.censored += censored ? 1 : 0;

      GridNavFamily fam(k);
      MfConfig mc;
      mc.seed = seed;
      mc.gamma = m.base.gamma;
      mc.env_step_budget = m.base.env_step_budget;
      mc.eval_period = m.base.eval_period;
      mc.eval_episodes = m.base.eval_episodes;
      mc.stop_threshold = m.threshold;
      const std::string mf_dir =
          m.out_dir + "/mf_k" + std::to_string(k) + "_s" + std::to_string(seed);
      fs::create_directories(mf_dir);
      MetricsWriter mw(mf_dir + "/metrics.jsonl");
      const MfResult mr = run_mf_baseline(fam, mc, &mw);
      const bool mf_censored = mr.steps_to_threshold < 0;
      mf.per_seed.push_back(mf_censored ? double(mc.env_step_budget)
                                        : double(mr.steps_to_threshold));
      mf.censored += mf_censored ? 1 : 0;
    }
    for (Thm1Row* r : {&mb, &mf}) {
      double acc = 0.0;
      for (double v : r->per_seed) acc += v;
      r->mean_steps = acc / double(r->per_seed.size());
      r->per_task = r->mean_steps / double(k);
    }
    rows.push_back(std::move(mb));
    rows.push_back(std::move(mf));
  }
  std::vector<std::vector<std::string>> csv;
  for (const Thm1Row& r : rows) {
    std::vector<std::string> cells = {std::to_string(r.k), r.learner,
                                      csv_num(r.mean_steps), csv_num(r.per_task),
                                      std::to_string(r.censored)};
    for (double v : r.per_seed) cells.push_back(csv_num(v));
    csv.push_back(std::move(cells));
  }
  std::vector<std::string> header = {"k", "learner", "mean_steps",
                                     "steps_per_task", "censored"};
  for (uint64_t s : m.seeds) header.push_back("seed" + std::to_string(s));
  write_csv(m.out_dir + "/thm1.csv", header, csv);
  return rows;
}

}  // namespace ezm
