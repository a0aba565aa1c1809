#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "ezm/experiments.hpp"
#include "ezm/mf_baseline.hpp"

namespace {

using namespace ezm;

std::vector<uint64_t> parse_seed_list(const std::string& s) {
  std::vector<uint64_t> out;
  size_t pos = 0;
  while (pos <= s.size()) {
    size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    const std::string part = s.substr(pos, comma - pos);
    if (!part.empty()) out.push_back(std::stoull(part));
    pos = comma + 1;
  }
  if (out.empty()) throw ContractError("--seed: empty list");
  return out;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  for (uint64_t v : parse_seed_list(s)) out.push_back(int(v));
  return out;
}

std::vector<std::pair<int, int>> parse_pairs(const std::string& s) {
  std::vector<std::pair<int, int>> out;
  size_t pos = 0;
  while (pos <= s.size()) {
    size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    const std::string part = s.substr(pos, comma - pos);
    if (!part.empty()) {
      const size_t dash = part.find('-');
      if (dash == std::string::npos)
        throw ContractError("--pairs: expected a-b entries");
      out.emplace_back(std::stoi(part.substr(0, dash)),
                       std::stoi(part.substr(dash + 1)));
    }
    pos = comma + 1;
  }
  return out;
}

// Options shared by every subcommand that trains.
struct CommonOpts {
  std::string config_path;
  std::string seeds = "1,2,3";
  std::string out = "out";
  bool sync = false;
  bool async_mode = false;
  bool no_path_consistency = false;
  bool no_ier = false;
  std::string no_task_embedding;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "config file (key = value lines)");
  cmd->add_option("--seed", o.seeds, "comma-separated seed list");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_flag("--sync", o.sync, "deterministic single-thread driver");
  cmd->add_flag("--async", o.async_mode, "rollout workers + learner thread");
  cmd->add_flag("--no-path-consistency", o.no_path_consistency,
                "drop the value-path consistency term");
  cmd->add_flag("--no-ier", o.no_ier,
                "one monolithic replay buffer instead of per-task buffers");
  cmd->add_option("--no-task-embedding", o.no_task_embedding,
                  "comma list of sites to strip: rep,dyn,rew,vp");
  cmd->add_option("--set", o.overrides, "extra key=value config overrides")
      ->take_all();
}

RunConfig build_config(const CommonOpts& o) {
  RunConfig cfg;
  if (!o.config_path.empty()) cfg = parse_config_file(o.config_path);
  for (const std::string& kv : o.overrides) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw ContractError("--set: expected key=value, got '" + kv + "'");
    set_config_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.sync) cfg.mode = "sync";
  if (o.async_mode) cfg.mode = "async";
  if (o.no_path_consistency) cfg.path_consistency = false;
  if (o.no_ier) cfg.independent_replay = false;
  if (!o.no_task_embedding.empty()) {
    size_t pos = 0;
    const std::string& s = o.no_task_embedding;
    while (pos <= s.size()) {
      size_t comma = s.find(',', pos);
      if (comma == std::string::npos) comma = s.size();
      const std::string part = s.substr(pos, comma - pos);
      if (part == "rep") cfg.te_rep = false;
      else if (part == "dyn") cfg.te_dyn = false;
      else if (part == "rew") cfg.te_rew = false;
      else if (part == "vp") cfg.te_vp = false;
      else if (!part.empty())
        throw ContractError("--no-task-embedding: unknown site '" + part + "'");
      pos = comma + 1;
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentManifest build_manifest(const std::string& kind, const CommonOpts& o) {
  ExperimentManifest m;
  m.kind = kind;
  m.base = build_config(o);
  m.seeds = parse_seed_list(o.seeds);
  m.out_dir = o.out;
  return m;
}

int cmd_train(const CommonOpts& o) {
  const TrainOutcome out = experiment_train(build_manifest("train", o));
  for (size_t i = 0; i < out.per_seed.size(); ++i) {
    const RunResult& r = out.per_seed[i];
    std::printf("seed run %zu: env_steps=%lld learner_steps=%lld final=%.4f%s\n",
                i, (long long)r.env_steps, (long long)r.learner_steps,
                r.final_mean_norm, r.early_stopped ? " (early stop)" : "");
  }
  std::printf("final normalized score: %.4f  [%.4f, %.4f]  (n=%d)\n",
              out.final_score.mean, out.final_score.lo, out.final_score.hi,
              out.final_score.n);
  std::printf("curve: %s\n", out.aggregate_csv.c_str());
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& ckpt,
             const std::string& out, int episodes, uint64_t seed) {
  RunConfig cfg;
  if (!config_path.empty()) cfg = parse_config_file(config_path);
  cfg.validate();
  auto fam = make_family(cfg);
  WorldModel model(cfg.model_config(*fam));
  ParameterStore params;
  Rng rng(derive_seed(cfg.seed, 0x696e6974ull));
  model.init_params(params, rng);
  load_checkpoint(params, ckpt);
  const EvalSummary ev = evaluate_policy(*fam, model, params,
                                         family_specs(*fam), cfg.plan_config(),
                                         episodes, seed);
  Json rec;
  rec["per_task_raw"] = ev.raw;
  rec["per_task_norm"] = ev.norm;
  rec["mean_norm"] = ev.mean_norm;
  std::cout << rec.dump(2) << "\n";
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    MetricsWriter mw(out + "/eval.jsonl");
    mw.write(rec);
  }
  return 0;
}

int cmd_scale_sweep(const CommonOpts& o, const std::string& ks) {
  ExperimentManifest m = build_manifest("scale-sweep", o);
  m.k_values = parse_int_list(ks);
  const auto rows = experiment_scale_sweep(m);
  std::printf("%4s  %10s  %22s\n", "K", "mean", "95%% CI");
  for (const SweepRow& r : rows)
    std::printf("%4d  %10.4f  [%8.4f, %8.4f]\n", r.k, r.score.mean, r.score.lo,
                r.score.hi);
  return 0;
}

int cmd_grad_sim(const CommonOpts& o, const std::string& pairs, int period,
                 int batch) {
  ExperimentManifest m = build_manifest("grad-sim", o);
  m.pairs = parse_pairs(pairs);
  m.grad_probe_period = period;
  m.grad_probe_batch = batch;
  const auto rows = experiment_grad_sim(m);
  for (const GradSimRow& r : rows)
    std::printf("pair (%d,%d) %-4s mean_sim=%+.4f over %d probes (%d zero)\n",
                r.pair.first, r.pair.second, r.group.c_str(), r.mean_sim,
                r.samples, r.zero_flagged);
  return 0;
}

int cmd_ablate(const CommonOpts& o, const std::string& variants) {
  ExperimentManifest m = build_manifest("ablate", o);
  if (!variants.empty()) {
    m.variants.clear();
    size_t pos = 0;
    while (pos <= variants.size()) {
      size_t comma = variants.find(',', pos);
      if (comma == std::string::npos) comma = variants.size();
      if (comma > pos) m.variants.push_back(variants.substr(pos, comma - pos));
      pos = comma + 1;
    }
  }
  const auto rows = experiment_ablation(m);
  for (const AblationRow& r : rows)
    std::printf("%-12s  %8.4f  [%8.4f, %8.4f]\n", r.variant.c_str(),
                r.score.mean, r.score.lo, r.score.hi);
  return 0;
}

int cmd_thm1(const CommonOpts& o, const std::string& ks, double threshold) {
  ExperimentManifest m = build_manifest("thm1", o);
  m.k_values = parse_int_list(ks);
  m.threshold = threshold;
  const auto rows = experiment_thm1(m);
  std::printf("%4s  %4s  %12s  %12s  %s\n", "K", "who", "steps", "steps/task",
              "censored");
  for (const Thm1Row& r : rows)
    std::printf("%4d  %4s  %12.0f  %12.1f  %d\n", r.k, r.learner.c_str(),
                r.mean_steps, r.per_task, r.censored);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multitask latent-model planner: training and analyses"};
  app.require_subcommand(1);

  CommonOpts train_o, sweep_o, grad_o, ablate_o, thm1_o;
  std::string eval_config, eval_ckpt, eval_out;
  int eval_episodes = 8;
  uint64_t eval_seed = 7;
  std::string sweep_ks = "1,2,4", thm1_ks = "1,2,4,8";
  std::string grad_pairs = "0-4,0-1", ablate_variants;
  int grad_period = 200, grad_batch = 32;
  double thm1_threshold = 0.9;

  add_common(app.add_subcommand("train", "train on a task family"), train_o);

  CLI::App* ev = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  ev->add_option("--config", eval_config, "config the checkpoint was trained with");
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  ev->add_option("--out", eval_out, "optional output directory");
  ev->add_option("--episodes", eval_episodes, "episodes per task");
  ev->add_option("--seed", eval_seed, "evaluation seed");

  CLI::App* sw = app.add_subcommand("scale-sweep", "score vs task count");
  add_common(sw, sweep_o);
  sw->add_option("--k-values", sweep_ks, "comma list of task counts");

  CLI::App* gs = app.add_subcommand("grad-sim", "inter-task gradient cosine");
  add_common(gs, grad_o);
  gs->add_option("--pairs", grad_pairs, "task pairs, e.g. 0-4,0-1");
  gs->add_option("--period", grad_period, "learner steps between probes");
  gs->add_option("--probe-batch", grad_batch, "samples per task per probe");

  CLI::App* ab = app.add_subcommand("ablate", "component ablation table");
  add_common(ab, ablate_o);
  ab->add_option("--variants", ablate_variants,
                 "comma list: full,-ier,-pathcons,-te:dyn[,...]");

  CLI::App* t1 = app.add_subcommand("thm1", "samples-to-threshold vs task count");
  add_common(t1, thm1_o);
  t1->add_option("--k-values", thm1_ks, "comma list of task counts");
  t1->add_option("--threshold", thm1_threshold, "normalized score target");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("train")) return cmd_train(train_o);
    if (app.got_subcommand("eval"))
      return cmd_eval(eval_config, eval_ckpt, eval_out, eval_episodes, eval_seed);
    if (app.got_subcommand("scale-sweep")) return cmd_scale_sweep(sweep_o, sweep_ks);
    if (app.got_subcommand("grad-sim"))
      return cmd_grad_sim(grad_o, grad_pairs, grad_period, grad_batch);
    if (app.got_subcommand("ablate")) return cmd_ablate(ablate_o, ablate_variants);
    if (app.got_subcommand("thm1")) return cmd_thm1(thm1_o, thm1_ks, thm1_threshold);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
