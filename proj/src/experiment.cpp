#include "stepdpo/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <unordered_map>

#include "stepdpo/checkpoint.hpp"
#include "stepdpo/curves.hpp"
#include "stepdpo/error.hpp"
#include "stepdpo/eval.hpp"
#include "stepdpo/json_io.hpp"
#include "stepdpo/rng.hpp"
#include "stepdpo/version.hpp"

namespace fs = std::filesystem;

namespace stepdpo {

// ---------------------------------------------------------------------------
// Config

void ExperimentConfig::validate() const {
  if (n_problems < 1) throw Error(ErrorKind::config, "n_problems must be >= 1");
  task.validate();
  model.validate();
  if (task.max_sequence_tokens() > model.context_len) {
    throw Error(ErrorKind::config, "task sequences need " + std::to_string(task.max_sequence_tokens()) +
                                       " tokens but the model context is " + std::to_string(model.context_len));
  }
  sft.validate();
  pipeline.validate();
  pref.validate();
  if (pair_problems < 0 || heldout_problems < 0) throw Error(ErrorKind::config, "pair problem counts must be >= 0");
  if (heldout_pairs < 1) throw Error(ErrorKind::config, "heldout_pairs must be >= 1");
  if (eval_max_new < 0 || eval_problems < 0) throw Error(ErrorKind::config, "eval limits must be >= 0");
  if (ablation_seeds.empty()) throw Error(ErrorKind::config, "ablation_seeds must not be empty");
  if (out_dir.empty()) throw Error(ErrorKind::config, "out_dir must not be empty");
  if (workers < 1) throw Error(ErrorKind::config, "workers must be >= 1");
}

void ExperimentConfig::propagate_workers() {
  sft.workers = workers;
  pipeline.workers = workers;
  pref.workers = workers;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json eval = {{"max_new", c.eval_max_new}, {"max_problems", c.eval_problems}};
  return {{"seed", c.seed},
          {"n_problems", c.n_problems},
          {"task", c.task},
          {"model", c.model},
          {"sft", c.sft},
          {"pipeline", c.pipeline},
          {"pair_problems", c.pair_problems},
          {"heldout_problems", c.heldout_problems},
          {"heldout_pairs", c.heldout_pairs},
          {"pref", c.pref},
          {"eval", eval},
          {"ablation_seeds", c.ablation_seeds},
          {"out_dir", c.out_dir},
          {"workers", c.workers}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  require_known_keys(j,
                     {"seed", "n_problems", "task", "model", "sft", "pipeline", "pair_problems", "heldout_problems",
                      "heldout_pairs", "pref", "eval", "ablation_seeds", "out_dir", "workers"},
                     "config");
  ExperimentConfig c;
  try {
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("n_problems")) c.n_problems = j.at("n_problems").get<long>();
    if (j.contains("task")) c.task = j.at("task").get<GenConfig>();
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("sft")) c.sft = j.at("sft").get<TrainConfig>();
    if (j.contains("pipeline")) c.pipeline = j.at("pipeline").get<PipelineConfig>();
    if (j.contains("pair_problems")) c.pair_problems = j.at("pair_problems").get<long>();
    if (j.contains("heldout_problems")) c.heldout_problems = j.at("heldout_problems").get<long>();
    if (j.contains("heldout_pairs")) c.heldout_pairs = j.at("heldout_pairs").get<long>();
    if (j.contains("pref")) c.pref = j.at("pref").get<PrefConfig>();
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      require_known_keys(e, {"max_new", "max_problems"}, "eval");
      if (e.contains("max_new")) c.eval_max_new = e.at("max_new").get<int>();
      if (e.contains("max_problems")) c.eval_problems = e.at("max_problems").get<long>();
    }
    if (j.contains("ablation_seeds")) c.ablation_seeds = j.at("ablation_seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("workers")) c.workers = j.at("workers").get<int>();
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::config, std::string("config: ") + ex.what());
  }
  c.validate();
  c.propagate_workers();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::missing_input, "cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorKind::config, path + ": " + ex.what());
  }
  return experiment_config_from_json(j);
}

std::string config_hash(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("out_dir");
  j.erase("workers");
  return json_hash(j);
}

nlohmann::ordered_json provenance(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["config_hash"] = config_hash(c);
  j["tool_version"] = kToolVersion;
  return j;
}

const char* to_string(Arm a) {
  switch (a) {
    case Arm::dpo: return "dpo";
    case Arm::step_dpo: return "step-dpo";
    default: return "step-dpo-ood";
  }
}

Arm arm_from_string(const std::string& s) {
  if (s == "dpo") return Arm::dpo;
  if (s == "step-dpo") return Arm::step_dpo;
  if (s == "step-dpo-ood") return Arm::step_dpo_ood;
  throw Error(ErrorKind::config, "unknown mode \"" + s + "\" (expected dpo, step-dpo or step-dpo-ood)");
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

void info(const std::string& msg) { std::clog << "[stepdpo] " << msg << std::endl; }

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error(ErrorKind::io, "cannot create output directory " + dir);
}

void require_file(const std::string& path, const std::string& hint) {
  if (!fs::exists(path)) throw Error(ErrorKind::missing_input, "missing " + path + " (" + hint + ")");
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path);
  out << text;
  if (!out) throw Error(ErrorKind::io, "write failed for " + path);
}

void write_json(const std::string& path, const nlohmann::ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

std::string provenance_comment(const ExperimentConfig& cfg) {
  return "config_hash " + config_hash(cfg) + " tool_version " + kToolVersion;
}

std::vector<Problem> validation_subset(const ExperimentConfig& cfg, const std::string& out) {
  auto val = read_problems_jsonl(path_in(out, files::val));
  if (cfg.eval_problems > 0 && static_cast<long>(val.size()) > cfg.eval_problems) val.resize(cfg.eval_problems);
  return val;
}

template <class F>
auto with_precision(const ModelConfig& m, F&& f) {
  if (m.precision == Precision::f64) return f(double{});
  return f(float{});
}

template <class T>
Model<T> load_reference(const std::string& out) {
  const std::string p = path_in(out, files::sft_ckpt);
  require_file(p, "run the sft command first");
  return load_checkpoint<T>(p);
}

// Self-check of the structural pair invariants before anything is written.
void check_step_pairs(const StepDataset& ds, std::span<const Problem> problems) {
  std::unordered_map<std::uint64_t, const Problem*> idx;
  for (const auto& p : problems) idx[p.id] = &p;
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    const auto& pair = ds.pairs[i];
    const Problem& p = *idx.at(pair.problem_id);
    std::string text = "Step 1:" + ds.prefixes[i];
    auto parsed = try_parse_solution(text + ds.lose_texts[i]);
    auto parsed_win = try_parse_solution(text + ds.win_texts[i]);
    bool ok = parsed && parsed_win && static_cast<int>(parsed->steps.size()) == pair.k &&
              static_cast<int>(parsed_win->steps.size()) == pair.k && pair.win_step != pair.lose_step;
    if (ok) {
      const std::vector<Step> prefix(parsed->steps.begin(), parsed->steps.end() - 1);
      StepSolution pre{prefix, std::nullopt, SolutionSource::sampled};
      ok = localize_first_error(pre, p).kind != Localization::Kind::first_error &&
           verify_step_in_context(p, prefix, parsed_win->steps.back()) == Verdict::valid &&
           verify_step_in_context(p, prefix, parsed->steps.back()) == Verdict::invalid;
    }
    if (!ok) {
      throw Error(ErrorKind::numerical, "pair self-check failed for problem " + std::to_string(pair.problem_id) +
                                            " k=" + std::to_string(pair.k));
    }
  }
  const bool identities = ds.sampled == ds.correct + ds.erroneous + ds.unparseable &&
                          ds.erroneous == ds.localized + ds.unlocatable &&
                          ds.localized == ds.rectified + ds.rectify_failed &&
                          static_cast<long>(ds.pairs.size()) == ds.rectified - ds.duplicates - ds.dropped;
  if (!identities) throw Error(ErrorKind::numerical, "pipeline accounting identities do not hold");
}

template <class T>
void build_prefs_impl(const ExperimentConfig& cfg, const std::string& out, const std::string& mode) {
  const bool step = mode == "step" || mode == "all";
  const bool full = mode == "full" || mode == "all";
  const bool ood = mode == "ood" || mode == "all";
  if (!step && !full && !ood) {
    throw Error(ErrorKind::config, "unknown build-prefs mode \"" + mode + "\" (expected step, full, ood or all)");
  }
  require_file(path_in(out, files::train), "run gen-tasks first");
  auto train = read_problems_jsonl(path_in(out, files::train));
  auto val = read_problems_jsonl(path_in(out, files::val));
  if (cfg.pair_problems > 0 && static_cast<long>(train.size()) > cfg.pair_problems) train.resize(cfg.pair_problems);
  if (cfg.heldout_problems > 0 && static_cast<long>(val.size()) > cfg.heldout_problems) {
    val.resize(cfg.heldout_problems);
  }
  const Model<T> ref = load_reference<T>(out);
  const auto prov = provenance(cfg);

  std::optional<StepDataset> step_ds;
  Collection collection;
  bool have_collection = false;
  if (step) {
    info("collecting, localizing and rectifying on " + std::to_string(train.size()) + " training problems");
    step_ds = build_step_dpo_dataset(ref, std::span<const Problem>(train), cfg.pipeline, &collection);
    have_collection = true;
    check_step_pairs(*step_ds, train);
    // Held-out pairs use the validation split and an independent stream.
    PipelineConfig held_cfg = cfg.pipeline;
    held_cfg.seed = derive_seed(cfg.pipeline.seed, 0x4e1d);
    info("building held-out pairs on " + std::to_string(val.size()) + " validation problems");
    StepDataset held = build_step_dpo_dataset(ref, std::span<const Problem>(val), held_cfg);
    check_step_pairs(held, val);
    if (static_cast<long>(held.pairs.size()) > cfg.heldout_pairs) {
      held.pairs.resize(cfg.heldout_pairs);
      held.win_texts.resize(cfg.heldout_pairs);
      held.lose_texts.resize(cfg.heldout_pairs);
      held.prefixes.resize(cfg.heldout_pairs);
    }
    write_step_pairs(path_in(out, files::step_pairs), *step_ds);
    write_step_pairs(path_in(out, files::heldout_pairs), held);
    nlohmann::ordered_json m = prov;
    m["train"] = step_manifest(*step_ds);
    m["heldout"] = step_manifest(held);
    m["heldout"]["kept"] = static_cast<long>(held.pairs.size());
    write_json(path_in(out, files::step_manifest), m);
    info("step pairs: " + std::to_string(step_ds->pairs.size()) + ", held-out pairs: " +
         std::to_string(held.pairs.size()));
  }
  if (ood) {
    if (!step_ds) {
      const std::string p = path_in(out, files::step_pairs);
      require_file(p, "ood mode needs step pairs; run build-prefs --mode step first");
      step_ds = read_step_dataset(p);
    }
    const StepDataset ood_ds = build_ood_variant(*step_ds, std::span<const Problem>(train));
    write_step_pairs(path_in(out, files::ood_pairs), ood_ds);
    const auto probe = ood_probe(ref, std::span<const PreferencePair>(step_ds->pairs),
                                 std::span<const PreferencePair>(ood_ds.pairs), cfg.workers);
    nlohmann::ordered_json m = prov;
    m["pairs"] = static_cast<long>(ood_ds.pairs.size());
    m["dropped"] = ood_ds.dropped;
    m["probe"] = to_json(probe);
    m["id_above_ood"] = probe.id_mean > probe.ood_mean;
    write_json(path_in(out, files::ood_manifest), m);
    info("ood pairs: " + std::to_string(ood_ds.pairs.size()) + ", per-token log-prob own " +
         format_number(probe.id_mean) + " vs canonical " + format_number(probe.ood_mean));
  }
  if (full) {
    if (!have_collection) collection = collect_errors(ref, std::span<const Problem>(train), cfg.pipeline);
    const FullDataset full_ds = build_full_dpo_dataset(ref, std::span<const Problem>(train), collection, cfg.pipeline);
    write_full_pairs(path_in(out, files::full_pairs), full_ds);
    nlohmann::ordered_json m = prov;
    m["full"] = full_manifest(full_ds);
    const std::string sp = path_in(out, files::step_pairs);
    if (step_ds || fs::exists(sp)) {
      const StepDataset s = step_ds ? *step_ds : read_step_dataset(sp);
      m["coverage_overlap"] = coverage_overlap(s, full_ds);
    }
    write_json(path_in(out, files::full_manifest), m);
    info("full-answer pairs: " + std::to_string(full_ds.pairs.size()));
  }
}

std::vector<ScoredPair> load_arm_pairs(const std::string& out, Arm arm) {
  switch (arm) {
    case Arm::dpo: {
      const std::string p = path_in(out, files::full_pairs);
      require_file(p, "run build-prefs --mode full first");
      const auto pairs = read_full_pairs(p);
      return to_scored(std::span<const FullPair>(pairs));
    }
    case Arm::step_dpo:
    case Arm::step_dpo_ood: {
      const std::string p = path_in(out, arm == Arm::step_dpo ? files::step_pairs : files::ood_pairs);
      require_file(p, "run build-prefs first");
      const auto pairs = read_step_pairs(p);
      return to_scored(std::span<const PreferencePair>(pairs));
    }
  }
  return {};
}

std::vector<ScoredPair> load_heldout(const std::string& out) {
  const std::string p = path_in(out, files::heldout_pairs);
  require_file(p, "run build-prefs --mode step first");
  const auto pairs = read_step_pairs(p);
  return to_scored(std::span<const PreferencePair>(pairs));
}

std::string arm_stem(Arm a) { return std::string("pref_") + to_string(a); }

template <class T>
MetricCurve train_pref_impl(const ExperimentConfig& cfg, const std::string& out, Arm arm) {
  const Model<T> sft = load_reference<T>(out);
  const auto ref = clone_frozen(sft);
  const auto train = load_arm_pairs(out, arm);
  const auto held = load_heldout(out);
  PrefConfig pc = cfg.pref;
  pc.mode = arm == Arm::dpo ? PrefMode::dpo : PrefMode::step_dpo;
  info(std::string("training ") + to_string(arm) + " on " + std::to_string(train.size()) + " pairs");
  auto res = train_pref(sft, ref, std::span<const ScoredPair>(train), std::span<const ScoredPair>(held), pc);
  const std::string stem = arm_stem(arm);
  nlohmann::ordered_json prov = provenance(cfg);
  prov["arm"] = to_string(arm);
  save_checkpoint(res.model, path_in(out, stem + ".ckpt"), prov);
  export_curves(res.curve, path_in(out, stem + "_curve.csv"), provenance_comment(cfg));
  const auto& last = res.curve.rows.back();
  info(std::string(to_string(arm)) + ": " + std::to_string(last.step) + " steps, judge_acc " +
       format_number(last.values[2]) + ", reward_margin " + format_number(last.values[3]));
  return res.curve;
}

template <class T>
nlohmann::ordered_json eval_impl(const ExperimentConfig& cfg, const std::string& out, const std::string& ckpt) {
  require_file(ckpt, "checkpoint to evaluate");
  const Model<T> m = load_checkpoint<T>(ckpt);
  const auto val = validation_subset(cfg, out);
  const auto acc = eval_accuracy(m, std::span<const Problem>(val), cfg.eval_max_new, cfg.workers);
  nlohmann::ordered_json rep = provenance(cfg);
  rep["checkpoint"] = fs::path(ckpt).filename().string();
  rep["checkpoint_checksum"] = read_checkpoint_checksum(ckpt);
  rep["accuracy"] = acc.accuracy;
  rep["n_problems"] = acc.n;
  rep["correct"] = acc.correct;
  rep["unparseable"] = acc.unparseable;
  const std::string held_path = path_in(out, files::heldout_pairs);
  if (fs::exists(held_path) && fs::exists(path_in(out, files::sft_ckpt))) {
    const auto ref = clone_frozen(load_reference<T>(out));
    const auto held = load_heldout(out);
    const auto j = judge_pairs(m, ref, std::span<const ScoredPair>(held), cfg.pref.beta, cfg.workers);
    rep["judge_accuracy"] = j.judge_accuracy;
    rep["mean_reward_margin"] = j.mean_margin;
    rep["n_pairs"] = j.margins.size();
    rep["per_pair_margins"] = j.margins;
  }
  return rep;
}

}  // namespace

// ---------------------------------------------------------------------------
// Commands

void cmd_gen_tasks(const ExperimentConfig& cfg, const std::string& out) {
  ensure_dir(out);
  const auto problems = gen_problems(cfg.seed, static_cast<std::size_t>(cfg.n_problems), cfg.task);
  std::vector<Problem> train, val;
  for (const auto& p : problems) (is_validation(p.id) ? val : train).push_back(p);
  if (train.empty() || val.empty()) throw Error(ErrorKind::config, "n_problems too small for a train/val split");
  write_problems_jsonl(path_in(out, files::problems), problems, true);
  write_problems_jsonl(path_in(out, files::train), train, true);
  write_problems_jsonl(path_in(out, files::val), val, false);
  nlohmann::ordered_json m = provenance(cfg);
  m["n_problems"] = problems.size();
  m["n_train"] = train.size();
  m["n_val"] = val.size();
  m["split_rule"] = "splitmix64(id) % 10 == 0 is validation";
  write_json(path_in(out, files::split), m);
  info("generated " + std::to_string(problems.size()) + " problems (" + std::to_string(val.size()) + " validation)");
}

void cmd_sft(const ExperimentConfig& cfg, const std::string& out) {
  require_file(path_in(out, files::train), "run gen-tasks first");
  const auto train = read_problems_jsonl(path_in(out, files::train));
  std::vector<SftExample> data;
  for (const auto& p : train) data.push_back(make_sft_example(p));
  with_precision(cfg.model, [&](auto tag) {
    using T = decltype(tag);
    info("sft on " + std::to_string(data.size()) + " examples");
    auto res = train_sft(Model<T>(cfg.model), std::span<const SftExample>(data), cfg.sft);
    nlohmann::ordered_json prov = provenance(cfg);
    save_checkpoint(res.model, path_in(out, files::sft_ckpt), prov);
    export_curves(res.curve, path_in(out, files::sft_curve), provenance_comment(cfg));
    nlohmann::ordered_json rep = prov;
    rep["steps"] = res.curve.rows.back().step;
    rep["final_loss"] = res.curve.rows.back().values[1];
    rep["checkpoint_checksum"] = param_checksum(res.model);
    write_json(path_in(out, files::sft_report), rep);
    info("sft done: " + std::to_string(res.curve.rows.back().step) + " steps, loss " +
         format_number(res.curve.rows.back().values[1]));
    return 0;
  });
}

void cmd_build_prefs(const ExperimentConfig& cfg, const std::string& out, const std::string& mode) {
  with_precision(cfg.model, [&](auto tag) {
    build_prefs_impl<decltype(tag)>(cfg, out, mode);
    return 0;
  });
}

void cmd_train_pref(const ExperimentConfig& cfg, const std::string& out, Arm arm) {
  with_precision(cfg.model, [&](auto tag) {
    train_pref_impl<decltype(tag)>(cfg, out, arm);
    return 0;
  });
}

nlohmann::ordered_json cmd_eval(const ExperimentConfig& cfg, const std::string& out, const std::string& checkpoint) {
  // Relative checkpoint paths name files inside the run directory.
  const std::string ckpt = checkpoint.empty()                        ? path_in(out, files::sft_ckpt)
                           : fs::path(checkpoint).is_relative() ? path_in(out, checkpoint)
                                                                 : checkpoint;
  auto rep = with_precision(cfg.model, [&](auto tag) { return eval_impl<decltype(tag)>(cfg, out, ckpt); });
  write_json(path_in(out, "eval_" + fs::path(ckpt).stem().string() + ".json"), rep);
  info("eval " + fs::path(ckpt).filename().string() + ": accuracy " + format_number(rep["accuracy"].get<double>()));
  return rep;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw Error(ErrorKind::argument, "spearman: need two equal series");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += rx[i] / n;
    my += ry[i] / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

nlohmann::ordered_json cmd_ablate(const ExperimentConfig& cfg, const std::string& out) {
  ensure_dir(out);
  if (!fs::exists(path_in(out, files::train)) || !fs::exists(path_in(out, files::val))) cmd_gen_tasks(cfg, out);
  if (!fs::exists(path_in(out, files::sft_ckpt))) cmd_sft(cfg, out);
  const std::string sft_ckpt = path_in(out, files::sft_ckpt);
  const auto sft_eval = cmd_eval(cfg, out, files::sft_ckpt);
  const double sft_acc = sft_eval["accuracy"].get<double>();

  // Step-DPO first: its step count is the budget the other arms are matched to.
  constexpr Arm kArms[] = {Arm::step_dpo, Arm::dpo, Arm::step_dpo_ood};
  nlohmann::ordered_json report = provenance(cfg);
  report["sft_accuracy"] = sft_acc;
  report["sft_checkpoint_checksum"] = read_checkpoint_checksum(sft_ckpt);
  nlohmann::ordered_json seeds = nlohmann::ordered_json::array();
  std::string csv = "seed,arm,steps,pairs,accuracy,judge_acc,reward_margin,margin_step_spearman\n";
  csv += "-,sft,0,0," + format_number(sft_acc) + ",0.5,0,0\n";

  // Curves per arm across seeds for the summary figure.
  std::vector<Panel> panels{{"held-out judge accuracy", {}}, {"held-out reward margin", {}}};
  int c4 = 0, c5 = 0, c5_rho = 0, c6 = 0, c7 = 0;
  bool probe_all = true;
  for (std::uint64_t s : cfg.ablation_seeds) {
    ExperimentConfig sc = cfg;
    sc.pipeline.seed = derive_seed(cfg.pipeline.seed, s);
    sc.pref.seed = derive_seed(cfg.pref.seed, s);
    const std::string dir = path_in(out, "seed_" + std::to_string(s));
    ensure_dir(dir);
    for (const char* f : {files::train, files::val, files::sft_ckpt}) {
      fs::copy_file(path_in(out, f), path_in(dir, f), fs::copy_options::overwrite_existing);
    }
    info("ablation seed " + std::to_string(s));
    cmd_build_prefs(sc, dir, "all");
    nlohmann::ordered_json ood_m = nlohmann::ordered_json::parse(std::ifstream(path_in(dir, files::ood_manifest)));
    const bool probe_ok = ood_m["id_above_ood"].get<bool>();
    probe_all = probe_all && probe_ok;

    nlohmann::ordered_json row;
    row["seed"] = s;
    row["ood_probe"] = ood_m["probe"];
    std::map<Arm, double> acc, judge, margin, rho;
    long matched = 0;
    for (Arm a : kArms) {
      const long pairs = static_cast<long>(load_arm_pairs(dir, a).size());
      ExperimentConfig ac = sc;
      if (matched > 0) {
        const long per_epoch = (pairs + ac.pref.batch_size - 1) / ac.pref.batch_size;
        ac.pref.max_steps = static_cast<int>(matched);
        ac.pref.epochs = static_cast<int>((matched + per_epoch - 1) / per_epoch);
      }
      const MetricCurve curve = with_precision(cfg.model, [&](auto tag) {
        return train_pref_impl<decltype(tag)>(ac, dir, a);
      });
      if (a == Arm::step_dpo) matched = curve.rows.back().step;
      const auto ev = cmd_eval(sc, dir, arm_stem(a) + ".ckpt");
      acc[a] = ev["accuracy"].get<double>();
      judge[a] = ev["judge_accuracy"].get<double>();
      margin[a] = ev["mean_reward_margin"].get<double>();
      rho[a] = spearman(curve.steps(), curve.column("reward_margin"));
      nlohmann::ordered_json arm;
      arm["steps"] = curve.rows.back().step;
      arm["pairs"] = pairs;
      arm["accuracy"] = acc[a];
      arm["judge_accuracy"] = judge[a];
      arm["mean_reward_margin"] = margin[a];
      arm["margin_step_spearman"] = rho[a];
      row["arms"][to_string(a)] = arm;
      csv += std::to_string(s) + "," + to_string(a) + "," + std::to_string(curve.rows.back().step) + "," +
             std::to_string(pairs) + "," + format_number(acc[a]) + "," + format_number(judge[a]) + "," +
             format_number(margin[a]) + "," + format_number(rho[a]) + "\n";
      const std::string label = std::string(to_string(a)) + " seed " + std::to_string(s);
      panels[0].series.push_back({label, curve.steps(), curve.column("judge_acc")});
      panels[1].series.push_back({label, curve.steps(), curve.column("reward_margin")});
    }
    const Arm S = Arm::step_dpo, D = Arm::dpo, O = Arm::step_dpo_ood;
    nlohmann::ordered_json t;
    t["judge_above_0.6_and_dpo"] = judge[S] > 0.60 && judge[S] > judge[D];
    t["margin_positive_and_above_dpo"] = margin[S] > 0 && margin[S] > margin[D];
    t["margin_rises_with_step"] = rho[S] > 0;
    t["accuracy_step_ge_dpo_ge_sft"] =
        acc[S] >= acc[D] && acc[D] >= sft_acc - 0.01 && acc[S] - sft_acc >= 0.02;
    t["accuracy_id_ge_ood"] = acc[S] >= acc[O];
    t["probe_id_above_ood"] = probe_ok;
    c4 += t["judge_above_0.6_and_dpo"].get<bool>();
    c5 += t["margin_positive_and_above_dpo"].get<bool>();
    c5_rho += t["margin_rises_with_step"].get<bool>();
    c6 += t["accuracy_step_ge_dpo_ge_sft"].get<bool>();
    c7 += t["accuracy_id_ge_ood"].get<bool>();
    row["trends"] = t;
    seeds.push_back(row);
  }
  report["seeds"] = seeds;
  const int n = static_cast<int>(cfg.ablation_seeds.size());
  const int need = n / 2 + 1;
  nlohmann::ordered_json held;
  held["judge_accuracy"] = c4 >= need;
  held["reward_margin"] = c5 >= need && c5_rho >= need;
  held["accuracy_ordering"] = c6 >= need;
  held["id_vs_ood"] = c7 >= need && probe_all;
  held["seeds_needed"] = need;
  report["trends_held"] = held;
  write_text(path_in(out, files::ablation_csv), csv);
  write_text(path_in(out, "ablation.svg"), panels_to_svg("ablation", panels, provenance_comment(cfg)));
  write_json(path_in(out, files::ablation_json), report);
  return report;
}

}  // namespace stepdpo
