#pragma once

// Two-stage compression training.
//
// Stage 1 trains the supernet: backbone weights, static keep/drop logits,
// gate-architecture logits and all candidate gate networks optimize jointly
// under L_total = L_cls + gamma * L_res, with hard Gumbel skip decisions
// shared across sampled batch groups. The transition derives the prune plan,
// picks one gate network per layer, physically shrinks the model and verifies
// the pruned twin agrees with the masked supernet. Stage 2 fine-tunes what
// survives — backbone plus selected gates — under the pruned-model cost.
//
// One optimizer, one data pass (single-level search); weight matrices get
// decoupled weight decay, everything else (biases, norms, embeddings, alphas,
// architecture logits) trains without it; cosine learning-rate decay per
// stage. All randomness flows through one RngState, so a seed pins the whole
// pipeline bit for bit.

#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "usdc/dataset.hpp"
#include "usdc/flops.hpp"
#include "usdc/gating.hpp"
#include "usdc/grouping.hpp"
#include "usdc/masks.hpp"
#include "usdc/rng.hpp"
#include "usdc/tensor.hpp"
#include "usdc/vit.hpp"

namespace usdc {

// Which compression machinery is live: static-only prunes with always-open
// gates, dynamic-only skips with an untouched backbone, joint does both.
enum class PruneMode { StaticOnly, DynamicOnly, Joint };

inline const char* prune_mode_name(PruneMode m) {
  switch (m) {
    case PruneMode::StaticOnly: return "static";
    case PruneMode::DynamicOnly: return "dynamic";
    case PruneMode::Joint: return "joint";
  }
  return "?";
}

inline PruneMode parse_prune_mode(const std::string& name) {
  for (PruneMode m : {PruneMode::StaticOnly, PruneMode::DynamicOnly, PruneMode::Joint}) {
    if (name == prune_mode_name(m)) return m;
  }
  throw ValueError("unknown prune mode '" + name + "'");
}

struct TrainConfig {
  double gamma = 100.0;  // resource-loss weight
  double f_t = 0.65;     // target cost ratio
  double tau_skip = 5.0;
  double tau_search = 2.0;
  double tau_static = 2.0;
  double lr = 5e-4;
  double weight_decay = 0.05;
  int epochs_stage1 = 30;
  int epochs_stage2 = 20;
  int batch_size = 64;
  GroupStrategy gate_strategy = GroupStrategy::GroupRecursive;
  int avg_group = 8;  // group size for the fixed-size strategy
  PruneMode prune_mode = PruneMode::Joint;
  bool search_gates = true;           // false: single fixed candidate, no search
  GateKind fixed_gate = GateKind::Fc2LnRelu;
  uint64_t seed = 0;

  void validate() const {
    if (gamma < 0) throw ValueError("TrainConfig: gamma must be nonnegative");
    if (!(f_t > 0.0 && f_t <= 1.0)) throw ValueError("TrainConfig: f_t must lie in (0, 1]");
    if (tau_skip <= 0 || tau_search <= 0 || tau_static <= 0) {
      throw ValueError("TrainConfig: temperatures must be positive");
    }
    if (lr <= 0) throw ValueError("TrainConfig: lr must be positive");
    if (weight_decay < 0) throw ValueError("TrainConfig: weight_decay must be nonnegative");
    if (epochs_stage1 < 0 || epochs_stage2 < 0) throw ValueError("TrainConfig: negative epochs");
    if (batch_size < 1) throw ValueError("TrainConfig: batch_size must be positive");
    if (avg_group < 1) throw ValueError("TrainConfig: avg_group must be positive");
  }
};

// ---------------------------------------------------------------------------
// logging
// ---------------------------------------------------------------------------

struct StepRecord {
  int epoch = 0;
  long long step = 0;  // global step within the stage
  double l_cls = 0, l_res = 0, l_total = 0, model_cost = 0, lr = 0;
};

struct EvalRecord {
  int epoch = 0;
  double accuracy = 0, mean_cost = 0;
  std::vector<std::array<double, 2>> execute_rates;  // per layer {mhsa, ffn}
};

struct TrainLog {
  std::string stage;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;

  // Line-delimited JSON, steps interleaved with their epoch's eval record.
  // Numbers print at full round-trip precision, so identical runs emit
  // identical bytes.
  void append_ldjson(std::ostream& os) const {
    const auto num = [&os](double v) { os << std::setprecision(17) << v; };
    size_t ei = 0;
    const auto flush_evals_through = [&](int epoch) {
      for (; ei < evals.size() && evals[ei].epoch <= epoch; ++ei) {
        const EvalRecord& e = evals[ei];
        os << "{\"kind\":\"eval\",\"stage\":\"" << stage << "\",\"epoch\":" << e.epoch
           << ",\"accuracy\":";
        num(e.accuracy);
        os << ",\"mean_cost\":";
        num(e.mean_cost);
        os << ",\"execute_rates\":[";
        for (size_t l = 0; l < e.execute_rates.size(); ++l) {
          os << (l ? ",[" : "[");
          num(e.execute_rates[l][0]);
          os << ",";
          num(e.execute_rates[l][1]);
          os << "]";
        }
        os << "]}\n";
      }
    };
    for (const StepRecord& s : steps) {
      flush_evals_through(s.epoch - 1);
      os << "{\"kind\":\"step\",\"stage\":\"" << stage << "\",\"epoch\":" << s.epoch
         << ",\"step\":" << s.step << ",\"l_cls\":";
      num(s.l_cls);
      os << ",\"l_res\":";
      num(s.l_res);
      os << ",\"l_total\":";
      num(s.l_total);
      os << ",\"model_cost\":";
      num(s.model_cost);
      os << ",\"lr\":";
      num(s.lr);
      os << "}\n";
    }
    flush_evals_through(evals.empty() ? 0 : evals.back().epoch);
  }

  std::string ldjson() const {
    std::ostringstream os;
    append_ldjson(os);
    return os.str();
  }
};

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

inline double cosine_lr(double base, long long step, long long total_steps) {
  if (total_steps <= 0) return base;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// Adaptive-moment optimizer with decoupled weight decay. Moment state is kept
// in double regardless of the parameter scalar type; the decay list gets the
// weight-decay term, the no-decay list does not.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> decay, std::vector<Tensor<T>> no_decay, double lr,
        double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& t : decay) entries_.push_back({t, true});
    for (auto& t : no_decay) entries_.push_back({t, false});
    for (auto& e : entries_) {
      e.tensor.set_requires_grad(true);
      m_.emplace_back(static_cast<size_t>(e.tensor.numel()), 0.0);
      v_.emplace_back(static_cast<size_t>(e.tensor.numel()), 0.0);
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  size_t param_tensor_count() const { return entries_.size(); }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t pi = 0; pi < entries_.size(); ++pi) {
      auto& val = entries_[pi].tensor.value();
      const auto& grad = entries_[pi].tensor.grad();
      for (size_t i = 0; i < val.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        m_[pi][i] = beta1_ * m_[pi][i] + (1.0 - beta1_) * g;
        v_[pi][i] = beta2_ * v_[pi][i] + (1.0 - beta2_) * g * g;
        double update = (m_[pi][i] / bc1) / (std::sqrt(v_[pi][i] / bc2) + eps_);
        if (entries_[pi].decay) update += wd_ * static_cast<double>(val[i]);
        val[i] = static_cast<T>(static_cast<double>(val[i]) - lr_ * update);
      }
    }
  }

 private:
  struct Entry {
    Tensor<T> tensor;
    bool decay;
  };
  std::vector<Entry> entries_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, wd_, beta1_, beta2_, eps_;
  long long t_ = 0;
};

// ---------------------------------------------------------------------------
// grouped gate sampling
// ---------------------------------------------------------------------------

// Pool the skip logits over the plan's groups and draw ONE Gumbel noise row
// per group, so every member of a group receives bit-identical decisions.
// Index 0 of each logit pair means execute; hard draws are straight-through.
template <typename T>
GateOutput<T> sample_gates_grouped(const Tensor<T>& gate_logits, const GroupPlan& plan, T tau_skip,
                                   bool hard, RngState& rng) {
  if (gate_logits.rank() != 2 || gate_logits.dim(1) != kGateLogits) {
    throw ShapeError("sample_gates_grouped expects [batch, 4], got " +
                     shape_str(gate_logits.shape()));
  }
  Tensor<T> grouped = apply_plan(gate_logits, plan);
  const int b = gate_logits.dim(0);
  const int groups = static_cast<int>(plan.group_sizes.size());
  Tensor<T> per_group = gumbel_noise<T>({groups, kGateLogits}, rng);
  Tensor<T> noise({b, kGateLogits});
  size_t cursor = 0;
  for (int gi = 0; gi < groups; ++gi) {
    for (int j = 0; j < plan.group_sizes[static_cast<size_t>(gi)]; ++j, ++cursor) {
      const int row = plan.permutation[cursor];
      for (int c = 0; c < kGateLogits; ++c) {
        noise.value()[static_cast<size_t>(row * kGateLogits + c)] =
            per_group.value()[static_cast<size_t>(gi * kGateLogits + c)];
      }
    }
  }
  Tensor<T> mhsa_pair = gumbel_softmax_with_noise(slice_axis(grouped, 1, 0, 2),
                                                  slice_axis(noise, 1, 0, 2), tau_skip, hard);
  Tensor<T> ffn_pair = gumbel_softmax_with_noise(slice_axis(grouped, 1, 2, 2),
                                                 slice_axis(noise, 1, 2, 2), tau_skip, hard);
  GateOutput<T> out;
  out.g = concat<T>({slice_axis(mhsa_pair, 1, 0, 1), slice_axis(ffn_pair, 1, 0, 1)}, 1);
  return out;
}

// ---------------------------------------------------------------------------
// stage-1 state
// ---------------------------------------------------------------------------

// All candidate gate networks, layer by layer.
template <typename T>
struct GateSearchSpace {
  std::vector<std::vector<GateCandidate<T>>> layers;  // [L][K]

  int layer_count() const { return static_cast<int>(layers.size()); }
  int candidate_count() const { return layers.empty() ? 0 : static_cast<int>(layers[0].size()); }

  void init(int layer_count_, int d, bool full_space, GateKind fixed, RngState& rng) {
    layers.assign(static_cast<size_t>(layer_count_), {});
    for (auto& row : layers) {
      const int k = full_space ? kGateKindCount : 1;
      row.resize(static_cast<size_t>(k));
      for (int i = 0; i < k; ++i) {
        row[static_cast<size_t>(i)].init(full_space ? gate_kind_from_index(i) : fixed, d, rng);
      }
    }
  }

  void collect_params(std::vector<Tensor<T>>& decay, std::vector<Tensor<T>>& no_decay) {
    for (auto& row : layers) {
      for (auto& cand : row) cand.collect_params(decay, no_decay);
    }
  }
};

// The supernet's trainable compression state plus its cost ledger. The ledger
// reflects the active mode: static-only zeroes the gate columns (no decision
// networks are deployed), a fixed-gate search space has a single column.
template <typename T>
struct Stage1State {
  StaticParams<T> statics;  // undefined tensors when mode is dynamic-only
  GateSearchSpace<T> space;  // empty when mode is static-only
  GateArchParams<T> arch;
  FlopsReport report;

  bool has_statics() const { return statics.alpha_a.defined(); }
  bool has_gates() const { return !space.layers.empty(); }

  void init(const ViTConfig& vit, const TrainConfig& cfg, RngState& rng) {
    vit.validate();
    cfg.validate();
    if (cfg.prune_mode != PruneMode::DynamicOnly) {
      statics.init(vit.layers, vit.heads, vit.ffn_hidden, rng);
      statics.tau_static = static_cast<T>(cfg.tau_static);
    }
    if (cfg.prune_mode != PruneMode::StaticOnly) {
      space.init(vit.layers, vit.embed_dim, cfg.search_gates, cfg.fixed_gate, rng);
      arch.init(vit.layers, space.candidate_count());
      arch.tau_search = static_cast<T>(cfg.tau_search);
    }
    rebuild_report(vit);
  }

  // Derive the ledger from the current search state. Also used when resuming
  // from a checkpoint, so the gate columns must depend only on `space`:
  // no gates at all (static-only) prices every gate column at zero, and a
  // single-candidate space prices exactly that candidate per layer.
  void rebuild_report(const ViTConfig& vit) {
    report = make_flops_report(vit);
    if (!has_gates()) {
      for (auto& row : report.mac_gate) row.assign(row.size(), 0);
    } else if (space.candidate_count() == 1) {
      for (int l = 0; l < vit.layers; ++l) {
        report.mac_gate[static_cast<size_t>(l)] = {
            gate_kind_macs(space.layers[static_cast<size_t>(l)][0].kind, vit.embed_dim,
                           vit.tokens())};
      }
    }
  }
};

// The prune plan the current static logits imply (everything kept when static
// compression is off).
template <typename T>
PrunePlan stage1_plan(const Stage1State<T>& st, const ViTConfig& vit) {
  return st.has_statics() ? derive_prune_plan(st.statics)
                          : keep_all_plan(vit.layers, vit.heads, vit.ffn_hidden);
}

namespace detail {

inline void check_dataset(const ViTConfig& vit, const Dataset& data, const char* who) {
  if (data.size() < 1) throw ValueError(std::string(who) + ": empty dataset");
  if (data.image_size != vit.image_size || data.channels != vit.channels) {
    throw ShapeError(std::string(who) + ": dataset images are " + std::to_string(data.image_size) +
                     "x" + std::to_string(data.image_size) + "x" + std::to_string(data.channels) +
                     ", model expects " + std::to_string(vit.image_size) + "x" +
                     std::to_string(vit.image_size) + "x" + std::to_string(vit.channels));
  }
  for (int l : data.labels) {
    if (l < 0 || l >= vit.num_classes) {
      throw ValueError(std::string(who) + ": label " + std::to_string(l) + " outside " +
                       std::to_string(vit.num_classes) + " classes");
    }
  }
}

template <typename T>
Tensor<T> ones_gate_rows(int batch) {
  return Tensor<T>::full({batch, 2}, T(1));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double accuracy = 0;
  double mean_cost = 0;
  std::vector<std::array<double, 2>> execute_rates;  // per layer {mhsa, ffn}
};

// Deterministic batch-level gating: each gate pools its logits over the whole
// evaluation batch and takes the argmax (ties execute), so all samples in a
// batch follow one path and a batch of one degenerates to per-sample gating.
// `gates` holds one network per model layer, or is empty for gateless models.
// Costs come from the ledger: fixed floor (embed/classify plus gate columns)
// plus the executed blocks' counts, averaged per sample.
template <typename T>
EvalResult evaluate(const VitModel<T>& model, std::vector<GateCandidate<T>>& gates,
                    const FlopsReport& report, const Dataset& data, int batch_size) {
  detail::check_dataset(model.cfg, data, "evaluate");
  const int layers = static_cast<int>(model.layers.size());
  if (!gates.empty() && static_cast<int>(gates.size()) != layers) {
    throw ShapeError("evaluate: one gate network per layer required");
  }
  if (report.layer_count() != layers) {
    throw ShapeError("evaluate: ledger does not match the model depth");
  }
  if (batch_size < 1) throw ValueError("evaluate: batch size must be positive");

  long long fixed = report.mac_other;
  for (int l = 0; l < layers; ++l) fixed += report.mac_gate[static_cast<size_t>(l)][0];

  EvalResult out;
  out.execute_rates.assign(static_cast<size_t>(layers), {0.0, 0.0});
  const int n = data.size();
  long long correct = 0;
  double cost_acc = 0;
  for (int begin = 0; begin < n; begin += batch_size) {
    const int bn = std::min(batch_size, n - begin);
    std::vector<int> idx(static_cast<size_t>(bn));
    std::iota(idx.begin(), idx.end(), begin);
    Tensor<T> images = batch_images<T>(data, idx);
    const std::vector<int> labels = batch_labels(data, idx);

    Tensor<T> z = patch_embed(model, images);
    long long exec_macs = 0;
    for (int l = 0; l < layers; ++l) {
      bool run_mhsa = true, run_ffn = true;
      if (!gates.empty()) {
        Tensor<T> logits = gate_features(z, gates[static_cast<size_t>(l)], /*training=*/false);
        double pool[kGateLogits] = {0, 0, 0, 0};
        for (int i = 0; i < bn; ++i) {
          for (int c = 0; c < kGateLogits; ++c) {
            pool[c] += static_cast<double>(logits.value()[static_cast<size_t>(i * kGateLogits + c)]);
          }
        }
        run_mhsa = !(pool[0] < pool[1]);
        run_ffn = !(pool[2] < pool[3]);
      }
      if (run_mhsa) exec_macs += report.mac_attn[static_cast<size_t>(l)];
      if (run_ffn) exec_macs += report.mac_ffn[static_cast<size_t>(l)];
      out.execute_rates[static_cast<size_t>(l)][0] += run_mhsa ? bn : 0;
      out.execute_rates[static_cast<size_t>(l)][1] += run_ffn ? bn : 0;
      z = gated_block_fast(z, model.layers[static_cast<size_t>(l)], run_mhsa, run_ffn);
    }
    Tensor<T> logits = classify(model, z);
    const int classes = logits.dim(1);
    for (int i = 0; i < bn; ++i) {
      int best = 0;
      for (int c = 1; c < classes; ++c) {
        if (logits.value()[static_cast<size_t>(i * classes + c)] >
            logits.value()[static_cast<size_t>(i * classes + best)]) {
          best = c;
        }
      }
      correct += best == labels[static_cast<size_t>(i)];
    }
    cost_acc += static_cast<double>(bn) * (static_cast<double>(fixed + exec_macs) /
                                           static_cast<double>(report.mac_total));
  }
  out.accuracy = static_cast<double>(correct) / n;
  out.mean_cost = cost_acc / n;
  for (auto& r : out.execute_rates) {
    r[0] /= n;
    r[1] /= n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// stage 1
// ---------------------------------------------------------------------------

// Preview of the discretized model the current stage-1 state implies: derive
// the plan, pick the argmax gate per layer, prune a copy (the original keeps
// its tensors — pruning rebinds handles) and evaluate it.
template <typename T>
EvalResult evaluate_stage1(const VitModel<T>& model, Stage1State<T>& st, const TrainConfig& cfg,
                           const Dataset& data, int batch_size) {
  const PrunePlan plan = stage1_plan(st, model.cfg);
  std::vector<GateKind> kinds;
  std::vector<int> chosen;
  if (st.has_gates()) chosen = select_final_gates(st.arch);
  for (int l = 0; l < model.cfg.layers; ++l) {
    kinds.push_back(st.has_gates()
                        ? st.space.layers[static_cast<size_t>(l)][static_cast<size_t>(chosen[static_cast<size_t>(l)])].kind
                        : cfg.fixed_gate);
  }
  FlopsReport report = make_pruned_flops_report(model.cfg, plan, kinds);
  if (!st.has_gates()) {
    for (auto& row : report.mac_gate) row.assign(row.size(), 0);
  }
  VitModel<T> pruned = model;
  apply_prune(pruned, plan);
  std::vector<GateCandidate<T>> gates;
  if (st.has_gates()) {
    for (int l = 0; l < model.cfg.layers; ++l) {
      if (!plan.layer_alive(l)) continue;
      gates.push_back(st.space.layers[static_cast<size_t>(l)][static_cast<size_t>(chosen[static_cast<size_t>(l)])]);
    }
  }
  return evaluate(pruned, gates, report, data, batch_size);
}

template <typename T>
TrainLog train_stage1(VitModel<T>& model, Stage1State<T>& st, const Dataset& data,
                      const TrainConfig& cfg, RngState& rng, const Dataset* eval_data = nullptr) {
  cfg.validate();
  detail::check_dataset(model.cfg, data, "train_stage1");
  const int layers = model.cfg.layers;
  const int n = data.size();
  const int bs = std::min(cfg.batch_size, n);
  const int steps_per_epoch = std::max(1, n / bs);
  const long long total_steps = static_cast<long long>(steps_per_epoch) * cfg.epochs_stage1;

  std::vector<Tensor<T>> decay, no_decay;
  model.collect_params(decay, no_decay);
  if (st.has_gates()) {
    st.space.collect_params(decay, no_decay);
    no_decay.push_back(st.arch.logits);
  }
  if (st.has_statics()) st.statics.collect_params(no_decay);
  AdamW<T> opt(std::move(decay), std::move(no_decay), cfg.lr, cfg.weight_decay);

  // constant stand-ins for whichever half is disabled
  const RelaxedMasks<T> keep_masks =
      st.has_statics() ? RelaxedMasks<T>{}
                       : hard_masks_from_plan<T>(
                             keep_all_plan(layers, model.cfg.heads, model.cfg.ffn_hidden),
                             model.cfg.heads, model.cfg.ffn_hidden);
  const Tensor<T> uniform_arch =
      st.has_gates() ? Tensor<T>{}
                     : Tensor<T>::full({layers, static_cast<int>(st.report.mac_gate[0].size())},
                                       T(1) / static_cast<T>(st.report.mac_gate[0].size()));
  const Tensor<T> open_gate = detail::ones_gate_rows<T>(bs);

  TrainLog log;
  log.stage = "stage1";
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  long long step_index = 0;
  for (int epoch = 0; epoch < cfg.epochs_stage1; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (int s = 0; s < steps_per_epoch; ++s, ++step_index) {
      const std::vector<int> idx(order.begin() + static_cast<long long>(s) * bs,
                                 order.begin() + static_cast<long long>(s) * bs + bs);
      Tensor<T> images = batch_images<T>(data, idx);
      const std::vector<int> labels = batch_labels(data, idx);
      opt.set_lr(cosine_lr(cfg.lr, step_index, total_steps));
      opt.zero_grad();
      StepRecord rec{epoch, step_index, 0, 0, 0, 0, opt.lr()};
      {
        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        const RelaxedMasks<T> masks = st.has_statics() ? relax_masks(st.statics, rng) : keep_masks;
        const Tensor<T> arch_w = st.has_gates() ? draw_arch_weights(st.arch, rng) : uniform_arch;
        const GroupPlan plan = build_plan(bs, cfg.gate_strategy, rng, cfg.avg_group);
        Tensor<T> z = patch_embed(model, images);
        std::vector<GateOutput<T>> gates;
        gates.reserve(static_cast<size_t>(layers));
        for (int l = 0; l < layers; ++l) {
          GateOutput<T> gate;
          if (st.has_gates()) {
            Tensor<T> logits = mix_candidates_with_weights(
                z, st.space.layers[static_cast<size_t>(l)], slice_axis(arch_w, 0, l, 1), true);
            gate = sample_gates_grouped(logits, plan, static_cast<T>(cfg.tau_skip), /*hard=*/true,
                                        rng);
          } else {
            gate.g = open_gate;
          }
          gates.push_back(gate);
          z = joint_block(z, model.layers[static_cast<size_t>(l)], masks, l, gate);
        }
        Tensor<T> ce = cross_entropy(classify(model, z), labels);
        Tensor<T> cost = stage1_cost(masks, arch_w, gates, st.report);
        Tensor<T> res = resource_loss(cost, cfg.f_t);
        Tensor<T> loss = add(ce, scale(res, static_cast<T>(cfg.gamma)));
        if (!all_finite(loss)) {
          throw std::runtime_error("train_stage1 diverged: non-finite loss at step " +
                                   std::to_string(step_index) + " (epoch " +
                                   std::to_string(epoch) + ", lr " + std::to_string(opt.lr()) +
                                   ")");
        }
        tape.backward(loss);
        rec.l_cls = static_cast<double>(ce.item());
        rec.l_res = static_cast<double>(res.item());
        rec.l_total = static_cast<double>(loss.item());
        rec.model_cost = static_cast<double>(cost.item());
      }
      opt.step();
      log.steps.push_back(rec);
    }
    if (eval_data) {
      const EvalResult ev = evaluate_stage1(model, st, cfg, *eval_data, cfg.batch_size);
      log.evals.push_back({epoch, ev.accuracy, ev.mean_cost, ev.execute_rates});
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// transition
// ---------------------------------------------------------------------------

template <typename T>
struct TransitionResult {
  PrunePlan plan;
  std::vector<GateKind> selected_kinds;   // per original layer
  std::vector<GateCandidate<T>> gates;    // per surviving layer; empty without gating
  FlopsReport report;                     // pruned-model ledger for stage 2
  long long params_before = 0, params_after = 0;
};

// Discretize and shrink: derive the plan from the static logits, keep the
// argmax gate per layer, physically prune the model, and verify on random
// probes that the pruned network reproduces the hard-masked supernet. The
// probe failing means pruning and masking disagree — a bug, not a model
// property — so it aborts.
template <typename T>
TransitionResult<T> transition(VitModel<T>& model, Stage1State<T>& st, const TrainConfig& cfg,
                               RngState& rng) {
  const ViTConfig& vit = model.cfg;
  TransitionResult<T> out;
  out.plan = stage1_plan(st, vit);
  std::vector<int> chosen;
  if (st.has_gates()) chosen = select_final_gates(st.arch);
  for (int l = 0; l < vit.layers; ++l) {
    out.selected_kinds.push_back(
        st.has_gates()
            ? st.space.layers[static_cast<size_t>(l)][static_cast<size_t>(chosen[static_cast<size_t>(l)])].kind
            : cfg.fixed_gate);
  }
  out.report = make_pruned_flops_report(vit, out.plan, out.selected_kinds);
  if (!st.has_gates()) {
    for (auto& row : out.report.mac_gate) row.assign(row.size(), 0);
  }
  out.params_before = model.param_count();

  VitModel<T> pruned = model;  // copies share tensors; pruning rebinds the copy's handles
  apply_prune(pruned, out.plan);
  out.params_after = pruned.param_count();

  // equivalence probe: hard-masked original vs pruned, 100 random inputs
  const RelaxedMasks<T> hard =
      hard_masks_from_plan<T>(out.plan, vit.heads, vit.ffn_hidden);
  const int probe_batches = 10, probe_batch = 10;
  for (int pb = 0; pb < probe_batches; ++pb) {
    Tensor<T> images({probe_batch, vit.channels, vit.image_size, vit.image_size});
    for (auto& v : images.value()) v = static_cast<T>(rng.uniform());
    Tensor<T> z = patch_embed(model, images);
    for (int l = 0; l < vit.layers; ++l) {
      GateOutput<T> g;
      g.g = Tensor<T>({probe_batch, 2});
      for (int i = 0; i < probe_batch; ++i) {
        g.g.value()[static_cast<size_t>(i * 2)] =
            out.plan.kept_mhsa[static_cast<size_t>(l)] ? T(1) : T(0);
        g.g.value()[static_cast<size_t>(i * 2 + 1)] =
            out.plan.kept_ffn[static_cast<size_t>(l)] ? T(1) : T(0);
      }
      z = joint_block(z, model.layers[static_cast<size_t>(l)], hard, l, g);
    }
    Tensor<T> masked = classify(model, z);
    Tensor<T> direct = vit_forward(pruned, images);
    for (long long i = 0; i < masked.numel(); ++i) {
      const double a = static_cast<double>(masked.value()[static_cast<size_t>(i)]);
      const double b = static_cast<double>(direct.value()[static_cast<size_t>(i)]);
      const double rel = std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
      if (!(rel <= 1e-4)) {
        throw std::runtime_error(
            "transition aborted: pruned model diverges from the masked supernet (rel err " +
            std::to_string(rel) + " on probe logit " + std::to_string(i) + ")");
      }
    }
  }

  model = std::move(pruned);
  if (st.has_gates()) {
    for (int l = 0; l < vit.layers; ++l) {
      if (!out.plan.layer_alive(l)) continue;
      out.gates.push_back(
          st.space.layers[static_cast<size_t>(l)][static_cast<size_t>(chosen[static_cast<size_t>(l)])]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// stage 2
// ---------------------------------------------------------------------------

// Stage-2 parameter groups: backbone plus surviving gate networks. No static
// alphas exist here by construction.
template <typename T>
void collect_stage2_params(VitModel<T>& model, std::vector<GateCandidate<T>>& gates,
                           std::vector<Tensor<T>>& decay, std::vector<Tensor<T>>& no_decay) {
  model.collect_params(decay, no_decay);
  for (auto& g : gates) g.collect_params(decay, no_decay);
}

template <typename T>
TrainLog train_stage2(VitModel<T>& model, TransitionResult<T>& tr, const Dataset& data,
                      const TrainConfig& cfg, RngState& rng, const Dataset* eval_data = nullptr) {
  cfg.validate();
  detail::check_dataset(model.cfg, data, "train_stage2");
  const int layers = static_cast<int>(model.layers.size());
  if (!tr.gates.empty() && static_cast<int>(tr.gates.size()) != layers) {
    throw ShapeError("train_stage2: one selected gate per surviving layer required");
  }
  if (tr.report.layer_count() != layers) {
    throw ShapeError("train_stage2: ledger does not match the pruned depth");
  }
  const int n = data.size();
  const int bs = std::min(cfg.batch_size, n);
  const int steps_per_epoch = std::max(1, n / bs);
  const long long total_steps = static_cast<long long>(steps_per_epoch) * cfg.epochs_stage2;

  std::vector<Tensor<T>> decay, no_decay;
  collect_stage2_params(model, tr.gates, decay, no_decay);
  AdamW<T> opt(std::move(decay), std::move(no_decay), cfg.lr, cfg.weight_decay);

  const Tensor<T> open_gate = detail::ones_gate_rows<T>(bs);
  TrainLog log;
  log.stage = "stage2";
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  long long step_index = 0;
  for (int epoch = 0; epoch < cfg.epochs_stage2; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (int s = 0; s < steps_per_epoch; ++s, ++step_index) {
      const std::vector<int> idx(order.begin() + static_cast<long long>(s) * bs,
                                 order.begin() + static_cast<long long>(s) * bs + bs);
      Tensor<T> images = batch_images<T>(data, idx);
      const std::vector<int> labels = batch_labels(data, idx);
      opt.set_lr(cosine_lr(cfg.lr, step_index, total_steps));
      opt.zero_grad();
      StepRecord rec{epoch, step_index, 0, 0, 0, 0, opt.lr()};
      {
        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        const GroupPlan plan = build_plan(bs, cfg.gate_strategy, rng, cfg.avg_group);
        Tensor<T> z = patch_embed(model, images);
        std::vector<GateOutput<T>> gates;
        gates.reserve(static_cast<size_t>(layers));
        for (int l = 0; l < layers; ++l) {
          GateOutput<T> gate;
          if (!tr.gates.empty()) {
            Tensor<T> logits = gate_features(z, tr.gates[static_cast<size_t>(l)], /*training=*/true);
            gate = sample_gates_grouped(logits, plan, static_cast<T>(cfg.tau_skip), /*hard=*/true,
                                        rng);
          } else {
            gate.g = open_gate;
          }
          gates.push_back(gate);
          z = gated_block(z, model.layers[static_cast<size_t>(l)], gate);
        }
        Tensor<T> ce = cross_entropy(classify(model, z), labels);
        Tensor<T> cost = stage2_cost(gates, tr.report);
        Tensor<T> res = resource_loss(cost, cfg.f_t);
        Tensor<T> loss = add(ce, scale(res, static_cast<T>(cfg.gamma)));
        if (!all_finite(loss)) {
          throw std::runtime_error("train_stage2 diverged: non-finite loss at step " +
                                   std::to_string(step_index) + " (epoch " +
                                   std::to_string(epoch) + ", lr " + std::to_string(opt.lr()) +
                                   ")");
        }
        tape.backward(loss);
        rec.l_cls = static_cast<double>(ce.item());
        rec.l_res = static_cast<double>(res.item());
        rec.l_total = static_cast<double>(loss.item());
        rec.model_cost = static_cast<double>(cost.item());
      }
      opt.step();
      log.steps.push_back(rec);
    }
    if (eval_data) {
      const EvalResult ev = evaluate(model, tr.gates, tr.report, *eval_data, cfg.batch_size);
      log.evals.push_back({epoch, ev.accuracy, ev.mean_cost, ev.execute_rates});
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// full pipeline
// ---------------------------------------------------------------------------

template <typename T>
struct PipelineResult {
  VitModel<T> model;  // pruned and fine-tuned
  Stage1State<T> stage1;
  TransitionResult<T> tr;
  TrainLog log1, log2;
  EvalResult final_eval;
};

template <typename T>
PipelineResult<T> run_pipeline(const ViTConfig& vit, const TrainConfig& cfg,
                               const Dataset& train_data, const Dataset& eval_data,
                               bool eval_each_epoch = false) {
  PipelineResult<T> out;
  RngState rng(cfg.seed);
  out.model.cfg = vit;
  out.model.init(rng);
  out.stage1.init(vit, cfg, rng);
  const Dataset* during = eval_each_epoch ? &eval_data : nullptr;
  out.log1 = train_stage1(out.model, out.stage1, train_data, cfg, rng, during);
  out.tr = transition(out.model, out.stage1, cfg, rng);
  out.log2 = train_stage2(out.model, out.tr, train_data, cfg, rng, during);
  out.final_eval = evaluate(out.model, out.tr.gates, out.tr.report, eval_data, cfg.batch_size);
  return out;
}

}  // namespace usdc
