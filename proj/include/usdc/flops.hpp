#pragma once

// Compute-cost ledger. Every cost is a multiply-accumulate count (biases,
// norms, softmax and activations are free by convention), normalized by the
// uncompressed backbone's total so the full model costs exactly 1. The
// closed-form integer counts here are cross-checked in the tests against an
// instrumented forward pass that counts real matmul work.
//
// Two differentiable cost heads sit on top of the ledger: the stage-1 cost
// (relaxed masks and candidate mixing weights scale each block's share) and
// the stage-2 cost (hard gates over the pruned model, gate networks always
// paid). Both reuse the very tensors sampled in the forward pass, so the
// resource loss pushes gradient into the same decisions the network made.

#include <cmath>
#include <utility>
#include <vector>

#include "usdc/gating.hpp"
#include "usdc/masks.hpp"
#include "usdc/rng.hpp"
#include "usdc/tensor.hpp"
#include "usdc/vit.hpp"

namespace usdc {

// Per-sample MAC counts of the three backbone pieces. Attention is linear
// in the head count (score and value maps shrink with the heads), the FFN
// linear in its hidden width.
inline long long mhsa_macs(int tokens, int d, int heads, int head_width) {
  const long long t = tokens, dh = head_width;
  // per head: Q,K,V maps (3·T·d·dh), scores (T²·dh), attention·V (T²·dh),
  // plus this head's slice of the output projection (T·dh·d)
  return heads * (3 * t * d * dh + 2 * t * t * dh + t * dh * d);
}

inline long long ffn_macs(int tokens, int d, int channels) {
  return 2LL * tokens * d * channels;
}

// Patch projection plus classifier; the class token and position adds are
// free. This is the unprunable floor every configuration pays.
inline long long embed_classify_macs(const ViTConfig& cfg) {
  return static_cast<long long>(cfg.tokens() - 1) * cfg.patch_dim() * cfg.embed_dim +
         static_cast<long long>(cfg.embed_dim) * cfg.num_classes;
}

// Integer MAC ledger. `mac_total` is always the uncompressed backbone total
// (attention + FFN + embed/classify, gate networks excluded), so normalized
// shares of compressed models read as fractions of the original cost.
struct FlopsReport {
  std::vector<long long> mac_attn, mac_ffn;      // per (surviving) layer
  std::vector<std::vector<long long>> mac_gate;  // per layer, per candidate
  long long mac_other = 0;
  long long mac_total = 0;

  int layer_count() const { return static_cast<int>(mac_attn.size()); }
  double f_attn(int l) const { return static_cast<double>(mac_attn[static_cast<size_t>(l)]) / mac_total; }
  double f_ffn(int l) const { return static_cast<double>(mac_ffn[static_cast<size_t>(l)]) / mac_total; }
  double f_gate(int l, int k) const {
    return static_cast<double>(mac_gate[static_cast<size_t>(l)][static_cast<size_t>(k)]) / mac_total;
  }
  double f_other() const { return static_cast<double>(mac_other) / mac_total; }

  // Cost of running everything the report covers, gate networks excluded.
  double model_cost() const {
    long long macs = mac_other;
    for (long long m : mac_attn) macs += m;
    for (long long m : mac_ffn) macs += m;
    return static_cast<double>(macs) / static_cast<double>(mac_total);
  }
};

// Ledger of the full model with the complete candidate search space.
inline FlopsReport make_flops_report(const ViTConfig& cfg) {
  cfg.validate();
  FlopsReport r;
  const long long attn = mhsa_macs(cfg.tokens(), cfg.embed_dim, cfg.heads, cfg.head_dim());
  const long long ffn = ffn_macs(cfg.tokens(), cfg.embed_dim, cfg.ffn_hidden);
  r.mac_attn.assign(static_cast<size_t>(cfg.layers), attn);
  r.mac_ffn.assign(static_cast<size_t>(cfg.layers), ffn);
  r.mac_gate.resize(static_cast<size_t>(cfg.layers));
  for (auto& row : r.mac_gate) {
    for (int k = 0; k < kGateKindCount; ++k) {
      row.push_back(gate_kind_macs(gate_kind_from_index(k), cfg.embed_dim, cfg.tokens()));
    }
  }
  r.mac_other = embed_classify_macs(cfg);
  r.mac_total = r.mac_other + static_cast<long long>(cfg.layers) * (attn + ffn);
  return r;
}

// Ledger after pruning: one entry per surviving layer, one selected gate
// each, still normalized by the original total. `selected` indexes the
// original layers.
inline FlopsReport make_pruned_flops_report(const ViTConfig& cfg, const PrunePlan& plan,
                                            const std::vector<GateKind>& selected) {
  if (plan.layer_count() != cfg.layers ||
      static_cast<int>(selected.size()) != cfg.layers) {
    throw ShapeError("pruned ledger needs one plan row and one gate per original layer");
  }
  FlopsReport full = make_flops_report(cfg);
  FlopsReport r;
  r.mac_other = full.mac_other;
  r.mac_total = full.mac_total;
  for (int l = 0; l < cfg.layers; ++l) {
    if (!plan.layer_alive(l)) continue;
    int heads = 0, channels = 0;
    for (bool k : plan.kept_heads[static_cast<size_t>(l)]) heads += k;
    for (bool k : plan.kept_channels[static_cast<size_t>(l)]) channels += k;
    r.mac_attn.push_back(plan.kept_mhsa[static_cast<size_t>(l)]
                             ? mhsa_macs(cfg.tokens(), cfg.embed_dim, heads, cfg.head_dim())
                             : 0);
    r.mac_ffn.push_back(plan.kept_ffn[static_cast<size_t>(l)]
                            ? ffn_macs(cfg.tokens(), cfg.embed_dim, channels)
                            : 0);
    r.mac_gate.push_back({gate_kind_macs(selected[static_cast<size_t>(l)], cfg.embed_dim, cfg.tokens())});
  }
  return r;
}

// ---------------------------------------------------------------------------
// instrumented oracles
// ---------------------------------------------------------------------------

// Brute-force MAC count: run the real forward pass with the counter on and
// report what was actually multiplied. No closed forms involved.
inline long long count_flops_oracle(const ViTConfig& cfg, const PrunePlan* plan = nullptr) {
  VitModel<double> m;
  m.cfg = cfg;
  RngState rng(0);
  m.init(rng);
  if (plan) apply_prune(m, *plan);
  Tensor<double> img = Tensor<double>::zeros({1, cfg.channels, cfg.image_size, cfg.image_size});
  MacCountScope scope;
  vit_forward(m, img);
  return scope.macs();
}

// MAC count of one fully realized configuration: the pruned backbone with
// each surviving block executed or bypassed per the hard gates, plus one
// gate network per original layer (gates always run in the cost model).
inline long long count_realized_macs(const ViTConfig& cfg, const PrunePlan& plan,
                                     const std::vector<std::pair<bool, bool>>& run,
                                     const std::vector<GateKind>& gate_kinds) {
  VitModel<double> m;
  m.cfg = cfg;
  RngState rng(0);
  m.init(rng);
  std::vector<GateCandidate<double>> gates(static_cast<size_t>(cfg.layers));
  for (int l = 0; l < cfg.layers; ++l) {
    gates[static_cast<size_t>(l)].init(gate_kinds[static_cast<size_t>(l)], cfg.embed_dim, rng);
  }
  VitModel<double> pruned = m;
  apply_prune(pruned, plan);

  Tensor<double> img = Tensor<double>::zeros({1, cfg.channels, cfg.image_size, cfg.image_size});
  MacCountScope scope;
  Tensor<double> z = patch_embed(pruned, img);
  size_t survivor = 0;
  for (int l = 0; l < cfg.layers; ++l) {
    gate_features(z, gates[static_cast<size_t>(l)], /*training=*/false);
    if (!plan.layer_alive(l)) continue;
    const auto& layer = pruned.layers[survivor++];
    z = gated_block_fast(z, layer, run[static_cast<size_t>(l)].first,
                         run[static_cast<size_t>(l)].second);
  }
  classify(pruned, z);
  return scope.macs();
}

// ---------------------------------------------------------------------------
// differentiable costs
// ---------------------------------------------------------------------------

namespace detail {
// Constant tensor holding one layer's per-candidate gate MACs.
template <typename T>
Tensor<T> gate_mac_row(const FlopsReport& report, int l) {
  const auto& row = report.mac_gate[static_cast<size_t>(l)];
  Tensor<T> out({static_cast<int>(row.size())});
  for (size_t i = 0; i < row.size(); ++i) out.value()[i] = static_cast<T>(row[i]);
  return out;
}
}  // namespace detail

// Stage-1 expected cost of the relaxed model, in fractions of the original
// total: every block's share is scaled by its dynamic gate (batch mean),
// its block keep weight, and its mean head/channel keep weight; every
// candidate's share by its mixing weight. Accumulated in MAC units and
// divided once, so the all-ones state costs exactly 1 plus the gate shares.
template <typename T>
Tensor<T> stage1_cost(const RelaxedMasks<T>& masks, const Tensor<T>& arch_weights,
                      const std::vector<GateOutput<T>>& gates, const FlopsReport& report) {
  const int layers = report.layer_count();
  if (static_cast<int>(gates.size()) != layers || masks.a.dim(0) != layers ||
      arch_weights.dim(0) != layers) {
    throw ShapeError("stage1_cost: per-layer inputs do not match the ledger");
  }
  const int heads = masks.h.dim(1), channels = masks.n.dim(1);
  // true divisions throughout, so an all-ones state reduces to total/total
  Tensor<T> acc = Tensor<T>::zeros({1});
  for (int l = 0; l < layers; ++l) {
    const Tensor<T>& g = gates[static_cast<size_t>(l)].g;
    const T batch = static_cast<T>(g.dim(0));
    Tensor<T> g0 = divide(sum(slice_axis(g, 1, 0, 1)), batch);
    Tensor<T> g1 = divide(sum(slice_axis(g, 1, 1, 1)), batch);
    Tensor<T> a_keep = reshape(slice_axis(slice_axis(masks.a, 0, l, 1), 1, 0, 1), {1});
    Tensor<T> m_keep = reshape(slice_axis(slice_axis(masks.m, 0, l, 1), 1, 0, 1), {1});
    Tensor<T> h_mean =
        divide(sum(slice_axis(slice_axis(masks.h, 0, l, 1), 2, 0, 1)), static_cast<T>(heads));
    Tensor<T> n_mean =
        divide(sum(slice_axis(slice_axis(masks.n, 0, l, 1), 2, 0, 1)), static_cast<T>(channels));
    Tensor<T> attn = scale(mul(mul(g0, a_keep), h_mean),
                           static_cast<T>(report.mac_attn[static_cast<size_t>(l)]));
    Tensor<T> ffn = scale(mul(mul(g1, m_keep), n_mean),
                          static_cast<T>(report.mac_ffn[static_cast<size_t>(l)]));
    Tensor<T> gate = sum(mul(reshape(slice_axis(arch_weights, 0, l, 1),
                                     {arch_weights.dim(1)}),
                             detail::gate_mac_row<T>(report, l)));
    acc = add(add(acc, add(attn, ffn)), gate);
  }
  return divide(affine(acc, T(1), static_cast<T>(report.mac_other)),
                static_cast<T>(report.mac_total));
}

// Stage-2 cost of the pruned model under its sampled hard gates. The
// surviving gate networks run unconditionally.
template <typename T>
Tensor<T> stage2_cost(const std::vector<GateOutput<T>>& gates, const FlopsReport& report) {
  const int layers = report.layer_count();
  if (static_cast<int>(gates.size()) != layers) {
    throw ShapeError("stage2_cost: one gate pair per surviving layer required");
  }
  long long fixed = report.mac_other;
  for (int l = 0; l < layers; ++l) fixed += report.mac_gate[static_cast<size_t>(l)][0];
  Tensor<T> acc = Tensor<T>::zeros({1});
  for (int l = 0; l < layers; ++l) {
    const Tensor<T>& g = gates[static_cast<size_t>(l)].g;
    const T batch = static_cast<T>(g.dim(0));
    acc = add(acc, add(scale(divide(sum(slice_axis(g, 1, 0, 1)), batch),
                             static_cast<T>(report.mac_attn[static_cast<size_t>(l)])),
                       scale(divide(sum(slice_axis(g, 1, 1, 1)), batch),
                             static_cast<T>(report.mac_ffn[static_cast<size_t>(l)]))));
  }
  return divide(affine(acc, T(1), static_cast<T>(fixed)), static_cast<T>(report.mac_total));
}

// Squared deviation of the modeled cost from the budget target.
template <typename T>
Tensor<T> resource_loss(const Tensor<T>& cost, double f_t) {
  if (!(f_t > 0.0 && f_t <= 1.0)) {
    throw ValueError("resource target must lie in (0, 1]");
  }
  Tensor<T> diff = affine(cost, T(1), static_cast<T>(-f_t));
  return mul(diff, diff);
}

}  // namespace usdc
