#pragma once

// Experiment drivers shared by the command-line tool and the test suite.
// Each CLI verb is a thin wrapper over one function here, so schemas and
// resume semantics can be exercised in-process.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "usdc/checkpoint.hpp"
#include "usdc/config.hpp"
#include "usdc/dataset.hpp"
#include "usdc/trainer.hpp"

namespace usdc {

using ExpFloat = float;  // experiment precision; doubles are for gradient checks

// ---------------------------------------------------------------------------
// data acquisition
// ---------------------------------------------------------------------------

// Synthetic datasets derive their seeds from the experiment seed, so one
// config names its data exactly; the train and eval streams are disjoint.
inline uint64_t train_data_seed(uint64_t seed) { return 1000 + seed; }
inline uint64_t eval_data_seed(uint64_t seed) { return 2000 + seed; }

inline Dataset experiment_train_data(const ExperimentConfig& cfg) {
  if (!cfg.dataset.empty()) {
    return load_dataset_dir(cfg.dataset + "/train");
  }
  if (cfg.vit.channels != 1) {
    throw ConfigError("the synthetic dataset is single-channel; point paths.dataset elsewhere");
  }
  return make_shapes10(cfg.train_count, cfg.vit.image_size, train_data_seed(cfg.train.seed));
}

inline Dataset experiment_eval_data(const ExperimentConfig& cfg) {
  if (!cfg.dataset.empty()) {
    return load_dataset_dir(cfg.dataset + "/eval");
  }
  if (cfg.vit.channels != 1) {
    throw ConfigError("the synthetic dataset is single-channel; point paths.dataset elsewhere");
  }
  return make_shapes10(cfg.eval_count, cfg.vit.image_size, eval_data_seed(cfg.train.seed));
}

// ---------------------------------------------------------------------------
// JSON artifacts
// ---------------------------------------------------------------------------

inline nlohmann::json flops_report_json(const FlopsReport& r) {
  using nlohmann::json;
  json layers = json::array();
  for (int l = 0; l < r.layer_count(); ++l) {
    json gates = json::array();
    for (const long long g : r.mac_gate[static_cast<size_t>(l)]) gates.push_back(g);
    layers.push_back({{"layer", l},
                      {"mac_attn", r.mac_attn[static_cast<size_t>(l)]},
                      {"mac_ffn", r.mac_ffn[static_cast<size_t>(l)]},
                      {"mac_gates", gates}});
  }
  return json{{"mac_total", r.mac_total}, {"mac_other", r.mac_other}, {"layers", layers}};
}

inline nlohmann::json planned_flops_json(const ViTConfig& vit) {
  return flops_report_json(make_flops_report(vit));
}

inline nlohmann::json summary_json(double accuracy, double model_cost, long long params_before,
                                   long long params_after) {
  return nlohmann::json{{"accuracy", accuracy},
                        {"model_cost", model_cost},
                        {"params_before", params_before},
                        {"params_after", params_after}};
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw SerializationError("cannot write: " + path);
  os << text;
}

// ---------------------------------------------------------------------------
// checkpoint capture
// ---------------------------------------------------------------------------

inline Checkpoint<ExpFloat> capture_stage1(const VitModel<ExpFloat>& model,
                                           const Stage1State<ExpFloat>& st, uint64_t seed,
                                           uint64_t position) {
  Checkpoint<ExpFloat> ck;
  ck.stage = 1;
  ck.model = model;
  ck.statics = st.statics;
  ck.space = st.space;
  ck.arch = st.arch;
  ck.plan = keep_all_plan(model.cfg.layers, model.cfg.heads, model.cfg.ffn_hidden);
  ck.rng_seed = seed;
  ck.rng_position = position;
  return ck;
}

inline Checkpoint<ExpFloat> capture_stage2(const VitModel<ExpFloat>& model,
                                           const TransitionResult<ExpFloat>& tr, uint64_t seed,
                                           uint64_t position) {
  Checkpoint<ExpFloat> ck;
  ck.stage = 2;
  ck.model = model;
  ck.plan = tr.plan;
  ck.selected_kinds = tr.selected_kinds;
  ck.gates = tr.gates;
  ck.rng_seed = seed;
  ck.rng_position = position;
  return ck;
}

// Rebuild the in-memory stage-1 search state from a checkpoint.
inline Stage1State<ExpFloat> stage1_from_checkpoint(const Checkpoint<ExpFloat>& ck) {
  if (ck.stage != 1) {
    throw ConfigError("this verb requires a stage-1 checkpoint; this one is already pruned");
  }
  Stage1State<ExpFloat> st;
  st.statics = ck.statics;
  st.space = ck.space;
  st.arch = ck.arch;
  st.rebuild_report(ck.cfg());
  return st;
}

// Rebuild the transition artifacts (plan, gates, pruned-model ledger) from a
// stage-2 checkpoint, exactly as `transition` produced them.
inline TransitionResult<ExpFloat> transition_from_checkpoint(const Checkpoint<ExpFloat>& ck) {
  if (ck.stage != 2) {
    throw ConfigError(
        "this verb requires a stage-2 checkpoint; run the prune step on this one first");
  }
  TransitionResult<ExpFloat> tr;
  tr.plan = ck.plan;
  tr.selected_kinds = ck.selected_kinds;
  tr.gates = ck.gates;
  tr.report = make_pruned_flops_report(ck.cfg(), ck.plan, ck.selected_kinds);
  if (ck.gates.empty()) {
    for (auto& row : tr.report.mac_gate) row.assign(row.size(), 0);
  }
  VitModel<ExpFloat> full;
  full.cfg = ck.cfg();
  RngState scratch(0);
  full.init(scratch);  // params_before depends only on shapes
  tr.params_before = full.param_count();
  tr.params_after = const_cast<VitModel<ExpFloat>&>(ck.model).param_count();
  return tr;
}

// ---------------------------------------------------------------------------
// verbs
// ---------------------------------------------------------------------------

struct TrainOutcome {
  nlohmann::json summary;
  TrainLog log1, log2;
  EvalResult final_eval;
  std::string stage1_ckpt, pruned_ckpt, final_ckpt;
};

// Full pipeline with artifacts: boundary checkpoints make every later stage
// independently resumable, and the stage logs stream one JSON object per
// step. The RNG threading matches run_pipeline call for call, so an
// uninterrupted run and a resumed one produce bit-identical artifacts.
inline TrainOutcome run_training(const ExperimentConfig& cfg) {
  cfg.validate();
  const Dataset train_data = experiment_train_data(cfg);
  const Dataset eval_data = experiment_eval_data(cfg);
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const auto path = [&](const char* name) { return (fs::path(cfg.out_dir) / name).string(); };

  TrainOutcome out;
  RngState rng(cfg.train.seed);
  VitModel<ExpFloat> model;
  model.cfg = cfg.vit;
  model.init(rng);
  Stage1State<ExpFloat> st;
  st.init(cfg.vit, cfg.train, rng);

  out.log1 = train_stage1(model, st, train_data, cfg.train, rng, &eval_data);
  out.stage1_ckpt = path("checkpoint_stage1.bin");
  save_checkpoint(out.stage1_ckpt, capture_stage1(model, st, cfg.train.seed, rng.position()));
  write_text_file(path("stage1.ldjson"), out.log1.ldjson());

  TransitionResult<ExpFloat> tr = transition(model, st, cfg.train, rng);
  out.pruned_ckpt = path("checkpoint_pruned.bin");
  save_checkpoint(out.pruned_ckpt, capture_stage2(model, tr, cfg.train.seed, rng.position()));

  out.log2 = train_stage2(model, tr, train_data, cfg.train, rng, &eval_data);
  out.final_ckpt = path("checkpoint_final.bin");
  save_checkpoint(out.final_ckpt, capture_stage2(model, tr, cfg.train.seed, rng.position()));
  write_text_file(path("stage2.ldjson"), out.log2.ldjson());

  out.final_eval = evaluate(model, tr.gates, tr.report, eval_data, cfg.train.batch_size);
  out.summary = summary_json(out.final_eval.accuracy, out.final_eval.mean_cost, tr.params_before,
                             tr.params_after);
  write_text_file(path("summary.json"), out.summary.dump(2) + "\n");
  write_text_file(path("flops.json"), planned_flops_json(cfg.vit).dump(2) + "\n");
  write_text_file(path("config.resolved.json"), dump_experiment(cfg));
  return out;
}

// Resume after stage 1: discretize, prune, and emit the stage-2 checkpoint.
inline nlohmann::json run_prune(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.checkpoint.empty()) throw ConfigError("prune needs paths.checkpoint");
  Checkpoint<ExpFloat> ck = load_checkpoint<ExpFloat>(cfg.checkpoint);
  Stage1State<ExpFloat> st = stage1_from_checkpoint(ck);
  VitModel<ExpFloat> model = ck.model;
  RngState rng = ck.restore_rng();
  TransitionResult<ExpFloat> tr = transition(model, st, cfg.train, rng);

  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const std::string out_path = (fs::path(cfg.out_dir) / "checkpoint_pruned.bin").string();
  save_checkpoint(out_path, capture_stage2(model, tr, ck.rng_seed, rng.position()));

  int alive = 0;
  for (int l = 0; l < tr.plan.layer_count(); ++l) alive += tr.plan.layer_alive(l);
  nlohmann::json gates = nlohmann::json::array();
  for (const GateKind k : tr.selected_kinds) gates.push_back(gate_kind_name(k));
  return nlohmann::json{{"checkpoint", out_path},
                        {"params_before", tr.params_before},
                        {"params_after", tr.params_after},
                        {"layers_alive", alive},
                        {"selected_gates", gates}};
}

// Resume after the transition: fine-tune under dynamic gating.
inline nlohmann::json run_finetune(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.checkpoint.empty()) throw ConfigError("finetune needs paths.checkpoint");
  Checkpoint<ExpFloat> ck = load_checkpoint<ExpFloat>(cfg.checkpoint);
  TransitionResult<ExpFloat> tr = transition_from_checkpoint(ck);
  VitModel<ExpFloat> model = ck.model;
  const Dataset train_data = experiment_train_data(cfg);
  const Dataset eval_data = experiment_eval_data(cfg);
  RngState rng = ck.restore_rng();

  TrainLog log2 = train_stage2(model, tr, train_data, cfg.train, rng, &eval_data);

  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const auto path = [&](const char* name) { return (fs::path(cfg.out_dir) / name).string(); };
  save_checkpoint(path("checkpoint_final.bin"),
                  capture_stage2(model, tr, ck.rng_seed, rng.position()));
  write_text_file(path("stage2.ldjson"), log2.ldjson());

  const EvalResult ev = evaluate(model, tr.gates, tr.report, eval_data, cfg.train.batch_size);
  nlohmann::json summary =
      summary_json(ev.accuracy, ev.mean_cost, tr.params_before, tr.params_after);
  write_text_file(path("summary.json"), summary.dump(2) + "\n");
  return summary;
}

// Accuracy/cost of a checkpoint on the eval split. A stage-1 checkpoint is
// measured through a transition preview on a scratch copy.
inline nlohmann::json run_eval(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.checkpoint.empty()) throw ConfigError("eval needs paths.checkpoint");
  Checkpoint<ExpFloat> ck = load_checkpoint<ExpFloat>(cfg.checkpoint);
  const Dataset eval_data = experiment_eval_data(cfg);
  EvalResult ev;
  if (ck.stage == 1) {
    Stage1State<ExpFloat> st = stage1_from_checkpoint(ck);
    ev = evaluate_stage1(ck.model, st, cfg.train, eval_data, cfg.train.batch_size);
  } else {
    TransitionResult<ExpFloat> tr = transition_from_checkpoint(ck);
    ev = evaluate(ck.model, tr.gates, tr.report, eval_data, cfg.train.batch_size);
  }
  return nlohmann::json{{"accuracy", ev.accuracy}, {"model_cost", ev.mean_cost}};
}

// Per-layer architecture report over an evaluation pass: what survived
// pruning, how often each surviving block actually runs, and the remaining
// cost both with gates forced open (static-only) and as realized (joint).
inline nlohmann::json run_report(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.checkpoint.empty()) throw ConfigError("report needs paths.checkpoint");
  Checkpoint<ExpFloat> ck = load_checkpoint<ExpFloat>(cfg.checkpoint);
  if (ck.stage != 2) {
    throw ConfigError(
        "report requires a stage-2 checkpoint: the execute rates and remaining-cost figures "
        "describe the pruned, gated model; run prune (and finetune) first");
  }
  TransitionResult<ExpFloat> tr = transition_from_checkpoint(ck);
  VitModel<ExpFloat> model = ck.model;
  const Dataset eval_data = experiment_eval_data(cfg);
  const EvalResult ev =
      evaluate(model, tr.gates, tr.report, eval_data, cfg.train.batch_size);

  // cost with every gate forced open: an exact integer sum over the ledger
  long long open_macs = tr.report.mac_other;
  for (int l = 0; l < tr.report.layer_count(); ++l) {
    open_macs += tr.report.mac_attn[static_cast<size_t>(l)] +
                 tr.report.mac_ffn[static_cast<size_t>(l)] +
                 tr.report.mac_gate[static_cast<size_t>(l)][0];
  }
  const double static_remaining =
      static_cast<double>(open_macs) / static_cast<double>(tr.report.mac_total);

  using nlohmann::json;
  json layers = json::array();
  int next_surviving = 0;
  for (int l = 0; l < tr.plan.layer_count(); ++l) {
    const bool alive = tr.plan.layer_alive(l);
    int kept_heads = 0, kept_channels = 0;
    if (tr.plan.kept_mhsa[static_cast<size_t>(l)]) {
      for (const bool b : tr.plan.kept_heads[static_cast<size_t>(l)]) kept_heads += b;
    }
    if (tr.plan.kept_ffn[static_cast<size_t>(l)]) {
      for (const bool b : tr.plan.kept_channels[static_cast<size_t>(l)]) kept_channels += b;
    }
    double rate_mhsa = 0.0, rate_ffn = 0.0;
    if (alive) {
      rate_mhsa = ev.execute_rates[static_cast<size_t>(next_surviving)][0];
      rate_ffn = ev.execute_rates[static_cast<size_t>(next_surviving)][1];
      ++next_surviving;
    }
    layers.push_back({{"layer", l},
                      {"alive", alive},
                      {"kept_heads", kept_heads},
                      {"total_heads", ck.cfg().heads},
                      {"kept_channels", kept_channels},
                      {"total_channels", ck.cfg().ffn_hidden},
                      {"execute_rate_mhsa", rate_mhsa},
                      {"execute_rate_ffn", rate_ffn}});
  }
  return json{{"accuracy", ev.accuracy},
              {"static_remaining", static_remaining},
              {"joint_remaining", ev.mean_cost},
              {"layers", layers}};
}

// ---------------------------------------------------------------------------
// ablations
// ---------------------------------------------------------------------------

namespace exp_detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

inline std::string fmt(double x) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << x;
  return os.str();
}

struct VariantResult {
  double acc64 = 0, acc8 = 0, acc1 = 0;  // accuracy by inference batch size
  double model_cost = 0;
  long long params_after = 0;
};

// One pipeline run under a tweaked config, evaluated at batches {64, 8, 1}.
inline VariantResult run_variant(const ExperimentConfig& base, const TrainConfig& train) {
  ExperimentConfig cfg = base;
  cfg.train = train;
  const Dataset train_data = experiment_train_data(cfg);
  const Dataset eval_data = experiment_eval_data(cfg);
  PipelineResult<ExpFloat> r =
      run_pipeline<ExpFloat>(cfg.vit, cfg.train, train_data, eval_data, false);
  VariantResult out;
  out.acc64 = evaluate(r.model, r.tr.gates, r.tr.report, eval_data, 64).accuracy;
  out.acc8 = evaluate(r.model, r.tr.gates, r.tr.report, eval_data, 8).accuracy;
  out.acc1 = evaluate(r.model, r.tr.gates, r.tr.report, eval_data, 1).accuracy;
  out.model_cost = r.final_eval.mean_cost;
  out.params_after = r.tr.params_after;
  return out;
}

}  // namespace exp_detail

// Compression options side by side: purely static, purely dynamic, and the
// joint scheme, at the same cost target. Medians over the configured seeds.
inline std::string ablate_prune_options(const ExperimentConfig& base) {
  namespace d = exp_detail;
  const std::vector<std::pair<std::string, PruneMode>> options = {
      {"static", PruneMode::StaticOnly},
      {"dynamic", PruneMode::DynamicOnly},
      {"static&dynamic", PruneMode::Joint}};
  std::vector<d::VariantResult> medians;
  for (const auto& [name, mode] : options) {
    std::vector<double> accs, costs, params;
    for (const uint64_t seed : base.ablation_seeds) {
      TrainConfig t = base.train;
      t.prune_mode = mode;
      t.seed = seed;
      const d::VariantResult r = d::run_variant(base, t);
      accs.push_back(r.acc64);
      costs.push_back(r.model_cost);
      params.push_back(static_cast<double>(r.params_after));
    }
    d::VariantResult m;
    m.acc64 = d::median(accs);
    m.model_cost = d::median(costs);
    m.params_after = static_cast<long long>(d::median(params));
    medians.push_back(m);
  }
  std::ostringstream os;
  os << "metric,static,dynamic,static&dynamic\n";
  os << "accuracy";
  for (const auto& m : medians) os << "," << d::fmt(m.acc64);
  os << "\nmodel_cost";
  for (const auto& m : medians) os << "," << d::fmt(m.model_cost);
  os << "\nparams_after";
  for (const auto& m : medians) os << "," << m.params_after;
  os << "\n";
  return os.str();
}

// Gate-sharing strategies vs inference batch size: how much accuracy moves
// when the deployment batch shrinks from 64 to 1.
inline std::string ablate_batch_size(const ExperimentConfig& base) {
  namespace d = exp_detail;
  const std::vector<GroupStrategy> strategies = {GroupStrategy::Sample, GroupStrategy::Batch,
                                                 GroupStrategy::GroupRecursive};
  std::ostringstream os;
  os << "strategy,inference_batch,accuracy\n";
  for (const GroupStrategy s : strategies) {
    std::vector<double> a64, a8, a1;
    for (const uint64_t seed : base.ablation_seeds) {
      TrainConfig t = base.train;
      t.gate_strategy = s;
      t.seed = seed;
      const d::VariantResult r = d::run_variant(base, t);
      a64.push_back(r.acc64);
      a8.push_back(r.acc8);
      a1.push_back(r.acc1);
    }
    os << group_strategy_name(s) << ",64," << d::fmt(d::median(a64)) << "\n";
    os << group_strategy_name(s) << ",8," << d::fmt(d::median(a8)) << "\n";
    os << group_strategy_name(s) << ",1," << d::fmt(d::median(a1)) << "\n";
  }
  return os.str();
}

// Group-splitting schemes: fixed average sizes, random sizes, and the
// recursive halving scheme.
inline std::string ablate_group_split(const ExperimentConfig& base) {
  namespace d = exp_detail;
  struct Variant {
    const char* label;
    GroupStrategy strategy;
    int avg_group;
  };
  const std::vector<Variant> variants = {{"avg-32", GroupStrategy::GroupAvgK, 32},
                                         {"avg-8", GroupStrategy::GroupAvgK, 8},
                                         {"random", GroupStrategy::GroupRandom, 8},
                                         {"recursive", GroupStrategy::GroupRecursive, 8}};
  std::vector<std::array<double, 4>> cols;  // acc64, acc8, acc1, spread
  for (const Variant& v : variants) {
    std::vector<double> a64, a8, a1;
    for (const uint64_t seed : base.ablation_seeds) {
      TrainConfig t = base.train;
      t.gate_strategy = v.strategy;
      t.avg_group = v.avg_group;
      t.seed = seed;
      const d::VariantResult r = d::run_variant(base, t);
      a64.push_back(r.acc64);
      a8.push_back(r.acc8);
      a1.push_back(r.acc1);
    }
    const double m64 = d::median(a64), m8 = d::median(a8), m1 = d::median(a1);
    const double spread = std::max({m64, m8, m1}) - std::min({m64, m8, m1});
    cols.push_back({m64, m8, m1, spread});
  }
  std::ostringstream os;
  os << "metric,avg-32,avg-8,random,recursive\n";
  const char* rows[4] = {"accuracy_batch64", "accuracy_batch8", "accuracy_batch1", "spread"};
  for (int r = 0; r < 4; ++r) {
    os << rows[r];
    for (const auto& c : cols) os << "," << d::fmt(c[static_cast<size_t>(r)]);
    os << "\n";
  }
  return os.str();
}

// The seven decision-network candidates trained as fixed choices.
inline std::string ablate_gate_arch(const ExperimentConfig& base) {
  namespace d = exp_detail;
  std::ostringstream os;
  os << "gate,accuracy,model_cost,gate_macs\n";
  for (int k = 0; k < kGateKindCount; ++k) {
    const GateKind kind = gate_kind_from_index(k);
    TrainConfig t = base.train;
    t.search_gates = false;
    t.fixed_gate = kind;
    t.seed = base.ablation_seeds.front();
    const d::VariantResult r = d::run_variant(base, t);
    os << gate_kind_name(kind) << "," << d::fmt(r.acc64) << "," << d::fmt(r.model_cost) << ","
       << gate_kind_macs(kind, base.vit.embed_dim, base.vit.tokens()) << "\n";
  }
  return os.str();
}

inline std::string run_ablation_csv(const ExperimentConfig& cfg, const std::string& which) {
  cfg.validate();
  if (which == "prune-options") return ablate_prune_options(cfg);
  if (which == "batch-size") return ablate_batch_size(cfg);
  if (which == "group-split") return ablate_group_split(cfg);
  if (which == "gate-arch") return ablate_gate_arch(cfg);
  throw ConfigError("unknown ablation '" + which +
                    "' (expected batch-size, gate-arch, prune-options, or group-split)");
}

}  // namespace usdc
