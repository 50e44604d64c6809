#pragma once

// Learnable static compression masks. Four mask families — attention heads,
// FFN hidden channels, whole attention blocks, whole FFN blocks — each a
// 2-logit keep/drop pair relaxed by soft Gumbel-Softmax during training.
// After stage 1, every unit whose drop logit beats its keep logit is pruned
// physically: columns and rows disappear from the weight matrices, and a
// layer losing both blocks disappears from the model.

#include <cmath>
#include <string>
#include <vector>

#include "usdc/gating.hpp"
#include "usdc/rng.hpp"
#include "usdc/tensor.hpp"
#include "usdc/vit.hpp"

namespace usdc {

template <typename T>
struct StaticParams {
  Tensor<T> alpha_a;  // [L, 2]      attention-block keep/drop logits
  Tensor<T> alpha_m;  // [L, 2]      FFN-block keep/drop logits
  Tensor<T> alpha_h;  // [L, H, 2]   per-head logits
  Tensor<T> alpha_n;  // [L, N, 2]   per-channel logits
  T tau_static = static_cast<T>(2.0);

  // Unbiased start: both logits ~0 (keep probability one half), tiny noise
  // so ties resolve differently across seeds.
  void init(int layers, int heads, int channels, RngState& rng) {
    alpha_a = Tensor<T>({layers, 2});
    alpha_m = Tensor<T>({layers, 2});
    alpha_h = Tensor<T>({layers, heads, 2});
    alpha_n = Tensor<T>({layers, channels, 2});
    for (Tensor<T>* t : {&alpha_a, &alpha_m, &alpha_h, &alpha_n}) fill_normal(*t, 1e-3, rng);
  }

  int layer_count() const { return alpha_a.defined() ? alpha_a.dim(0) : 0; }

  void collect_params(std::vector<Tensor<T>>& out) {
    for (Tensor<T>* t : {&alpha_a, &alpha_m, &alpha_h, &alpha_n}) out.push_back(*t);
  }
};

// One soft Gumbel draw over every keep/drop pair; same shapes as the logits,
// each trailing pair sums to 1. Index 0 is the keep weight.
template <typename T>
struct RelaxedMasks {
  Tensor<T> a, m, h, n;
};

template <typename T>
RelaxedMasks<T> relax_masks(const StaticParams<T>& sp, RngState& rng) {
  RelaxedMasks<T> out;
  out.a = gumbel_softmax(sp.alpha_a, sp.tau_static, /*hard=*/false, rng);
  out.m = gumbel_softmax(sp.alpha_m, sp.tau_static, false, rng);
  out.h = gumbel_softmax(sp.alpha_h, sp.tau_static, false, rng);
  out.n = gumbel_softmax(sp.alpha_n, sp.tau_static, false, rng);
  return out;
}

// Attention with each head's output scaled by its keep weight before the
// concat and output projection. Keep weight 1 reproduces plain attention
// bit for bit; keep weight 0 erases the head's contribution.
template <typename T>
Tensor<T> masked_mhsa(const Tensor<T>& zn, const EncoderLayer<T>& layer,
                      const Tensor<T>& head_keep) {
  const int b = zn.dim(0), t = zn.dim(1);
  const int h = layer.head_count();
  if (head_keep.numel() != h) {
    throw ShapeError("masked_mhsa: " + std::to_string(head_keep.numel()) + " keep weights for " +
                     std::to_string(h) + " heads");
  }
  Tensor<T> cat;
  if (h == 0) {
    cat = Tensor<T>::zeros({b, t, 0});
  } else {
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(layer.head_width())));
    std::vector<Tensor<T>> heads;
    heads.reserve(static_cast<size_t>(h));
    for (int i = 0; i < h; ++i) {
      Tensor<T> q = linear(zn, layer.wq[i].w, layer.wq[i].b);
      Tensor<T> k = linear(zn, layer.wk[i].w, layer.wk[i].b);
      Tensor<T> v = linear(zn, layer.wv[i].w, layer.wv[i].b);
      Tensor<T> attn = softmax_last(scale(matmul(q, transpose_last2(k)), inv_sqrt));
      heads.push_back(mul(matmul(attn, v), slice_axis(head_keep, 0, i, 1)));
    }
    cat = concat(heads, 2);
  }
  return linear(cat, layer.wo.w, layer.wo.b);
}

// FFN with hidden channels scaled by their keep weights after the
// activation — the masked channel contributes nothing downstream, exactly
// as if its W^I column and W^O row were removed.
template <typename T>
Tensor<T> masked_ffn(const Tensor<T>& zn, const EncoderLayer<T>& layer,
                     const Tensor<T>& channel_keep) {
  if (channel_keep.numel() != layer.ffn_in.w.dim(1)) {
    throw ShapeError("masked_ffn: keep weights do not match hidden width");
  }
  Tensor<T> hidden = mul(gelu(linear(zn, layer.ffn_in.w, layer.ffn_in.b)), channel_keep);
  return linear(hidden, layer.ffn_out.w, layer.ffn_out.b);
}

// One encoder layer under joint static and dynamic compression. Each
// sublayer blends its masked-executed path against its input, weighted by
// the dynamic gate AND the static block mask on both branches:
//   out = g·a_keep·(sublayer(LN(z)) + z) + (1−g)·a_drop·z
// With hard 0/1 weights this reproduces keep (g=1, a=(1,0)) and skip
// (g=0, a=(0,1)) exactly; soft weights let gradients reach every mask.
template <typename T>
Tensor<T> joint_block(const Tensor<T>& z, const EncoderLayer<T>& layer,
                      const RelaxedMasks<T>& masks, int l, const GateOutput<T>& gate) {
  const int b = z.dim(0);
  const int heads = layer.head_count();
  const int channels = layer.has_ffn ? layer.ffn_in.w.dim(1) : 0;

  Tensor<T> z1 = z;
  if (layer.has_mhsa) {
    Tensor<T> a_pair = reshape(slice_axis(masks.a, 0, l, 1), {2});
    Tensor<T> a_keep = slice_axis(a_pair, 0, 0, 1);
    Tensor<T> a_drop = slice_axis(a_pair, 0, 1, 1);
    Tensor<T> head_keep = reshape(slice_axis(slice_axis(masks.h, 0, l, 1), 2, 0, 1), {heads});
    Tensor<T> g0 = reshape(slice_axis(gate.g, 1, 0, 1), {b, 1, 1});
    Tensor<T> executed =
        add(masked_mhsa(layernorm(z, layer.ln1.gain, layer.ln1.bias), layer, head_keep), z);
    z1 = add(mul(mul(g0, a_keep), executed), mul(mul(affine(g0, T(-1), T(1)), a_drop), z));
  }

  Tensor<T> z2 = z1;
  if (layer.has_ffn) {
    Tensor<T> m_pair = reshape(slice_axis(masks.m, 0, l, 1), {2});
    Tensor<T> m_keep = slice_axis(m_pair, 0, 0, 1);
    Tensor<T> m_drop = slice_axis(m_pair, 0, 1, 1);
    Tensor<T> channel_keep =
        reshape(slice_axis(slice_axis(masks.n, 0, l, 1), 2, 0, 1), {channels});
    Tensor<T> g1 = reshape(slice_axis(gate.g, 1, 1, 1), {b, 1, 1});
    Tensor<T> executed =
        add(masked_ffn(layernorm(z1, layer.ln2.gain, layer.ln2.bias), layer, channel_keep), z1);
    z2 = add(mul(mul(g1, m_keep), executed), mul(mul(affine(g1, T(-1), T(1)), m_drop), z1));
  }
  return z2;
}

// ---------------------------------------------------------------------------
// pruning
// ---------------------------------------------------------------------------

// What survives stage 1. A unit is kept unless its drop logit strictly
// exceeds its keep logit.
struct PrunePlan {
  std::vector<std::vector<bool>> kept_heads;     // [L][H]
  std::vector<std::vector<bool>> kept_channels;  // [L][N]
  std::vector<bool> kept_mhsa, kept_ffn;         // [L]

  int layer_count() const { return static_cast<int>(kept_mhsa.size()); }
  bool layer_alive(int l) const {
    return kept_mhsa[static_cast<size_t>(l)] || kept_ffn[static_cast<size_t>(l)];
  }
};

inline PrunePlan keep_all_plan(int layers, int heads, int channels) {
  PrunePlan plan;
  plan.kept_mhsa.assign(static_cast<size_t>(layers), true);
  plan.kept_ffn.assign(static_cast<size_t>(layers), true);
  plan.kept_heads.assign(static_cast<size_t>(layers),
                         std::vector<bool>(static_cast<size_t>(heads), true));
  plan.kept_channels.assign(static_cast<size_t>(layers),
                            std::vector<bool>(static_cast<size_t>(channels), true));
  return plan;
}

namespace detail {
template <typename T>
bool keep_pair(const std::vector<T>& v, size_t pair_offset) {
  return !(v[pair_offset] < v[pair_offset + 1]);
}
}  // namespace detail

template <typename T>
PrunePlan derive_prune_plan(const StaticParams<T>& sp) {
  const int layers = sp.alpha_a.dim(0);
  const int heads = sp.alpha_h.dim(1);
  const int channels = sp.alpha_n.dim(1);
  PrunePlan plan;
  plan.kept_mhsa.resize(static_cast<size_t>(layers));
  plan.kept_ffn.resize(static_cast<size_t>(layers));
  plan.kept_heads.assign(static_cast<size_t>(layers), std::vector<bool>(static_cast<size_t>(heads)));
  plan.kept_channels.assign(static_cast<size_t>(layers),
                            std::vector<bool>(static_cast<size_t>(channels)));
  for (int l = 0; l < layers; ++l) {
    plan.kept_mhsa[static_cast<size_t>(l)] = detail::keep_pair(sp.alpha_a.value(), static_cast<size_t>(l) * 2);
    plan.kept_ffn[static_cast<size_t>(l)] = detail::keep_pair(sp.alpha_m.value(), static_cast<size_t>(l) * 2);
    for (int i = 0; i < heads; ++i) {
      plan.kept_heads[static_cast<size_t>(l)][static_cast<size_t>(i)] =
          detail::keep_pair(sp.alpha_h.value(), (static_cast<size_t>(l) * heads + static_cast<size_t>(i)) * 2);
    }
    for (int i = 0; i < channels; ++i) {
      plan.kept_channels[static_cast<size_t>(l)][static_cast<size_t>(i)] =
          detail::keep_pair(sp.alpha_n.value(), (static_cast<size_t>(l) * channels + static_cast<size_t>(i)) * 2);
    }
  }
  return plan;
}

// The hard 0/1 masks a plan corresponds to; used to check pruned models
// against their masked twins.
template <typename T>
RelaxedMasks<T> hard_masks_from_plan(const PrunePlan& plan, int heads, int channels) {
  const int layers = plan.layer_count();
  RelaxedMasks<T> m;
  m.a = Tensor<T>({layers, 2});
  m.m = Tensor<T>({layers, 2});
  m.h = Tensor<T>({layers, heads, 2});
  m.n = Tensor<T>({layers, channels, 2});
  auto pair = [](std::vector<T>& v, size_t off, bool keep) {
    v[off] = keep ? T(1) : T(0);
    v[off + 1] = keep ? T(0) : T(1);
  };
  for (int l = 0; l < layers; ++l) {
    pair(m.a.value(), static_cast<size_t>(l) * 2, plan.kept_mhsa[static_cast<size_t>(l)]);
    pair(m.m.value(), static_cast<size_t>(l) * 2, plan.kept_ffn[static_cast<size_t>(l)]);
    for (int i = 0; i < heads; ++i) {
      pair(m.h.value(), (static_cast<size_t>(l) * heads + static_cast<size_t>(i)) * 2,
           plan.kept_heads[static_cast<size_t>(l)][static_cast<size_t>(i)]);
    }
    for (int i = 0; i < channels; ++i) {
      pair(m.n.value(), (static_cast<size_t>(l) * channels + static_cast<size_t>(i)) * 2,
           plan.kept_channels[static_cast<size_t>(l)][static_cast<size_t>(i)]);
    }
  }
  return m;
}

namespace detail {
// Copy the rows of `src` whose index passes `keep` into a new tensor.
template <typename T>
Tensor<T> keep_rows(const Tensor<T>& src, const std::vector<bool>& keep) {
  const int rows = src.dim(0), cols = src.dim(1);
  int kept = 0;
  for (bool k : keep) kept += k;
  Tensor<T> out({kept, cols});
  int r = 0;
  for (int i = 0; i < rows; ++i) {
    if (!keep[static_cast<size_t>(i)]) continue;
    for (int j = 0; j < cols; ++j) {
      out.value()[static_cast<size_t>(r * cols + j)] = src.value()[static_cast<size_t>(i * cols + j)];
    }
    ++r;
  }
  return out;
}

template <typename T>
Tensor<T> keep_cols(const Tensor<T>& src, const std::vector<bool>& keep) {
  return transpose_last2(keep_rows(transpose_last2(src), keep));
}

template <typename T>
Tensor<T> keep_entries(const Tensor<T>& src, const std::vector<bool>& keep) {
  int kept = 0;
  for (bool k : keep) kept += k;
  Tensor<T> out({kept});
  int r = 0;
  for (size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) out.value()[static_cast<size_t>(r++)] = src.value()[i];
  }
  return out;
}
}  // namespace detail

// Physically shrink the model to the plan: drop pruned heads' Q/K/V
// projections and their W^O rows, drop pruned channels' W^I columns and
// W^O rows, delete dead sublayers, and delete layers that lost both.
template <typename T>
void apply_prune(VitModel<T>& model, const PrunePlan& plan) {
  if (plan.layer_count() != static_cast<int>(model.layers.size())) {
    throw ShapeError("prune plan covers " + std::to_string(plan.layer_count()) +
                     " layers, model has " + std::to_string(model.layers.size()));
  }
  for (size_t l = 0; l < model.layers.size(); ++l) {
    EncoderLayer<T>& layer = model.layers[l];
    if (layer.has_mhsa) {
      const auto& kept = plan.kept_heads[l];
      if (static_cast<int>(kept.size()) != layer.head_count()) {
        throw ShapeError("prune plan head count mismatch in layer " + std::to_string(l));
      }
      if (!plan.kept_mhsa[l]) {
        layer.has_mhsa = false;
        layer.wq.clear();
        layer.wk.clear();
        layer.wv.clear();
        layer.wo = {};
        layer.ln1 = {};
      } else {
        const int dh = layer.head_width();
        std::vector<LinearParams<T>> wq, wk, wv;
        std::vector<bool> wo_rows(static_cast<size_t>(layer.head_count()) * static_cast<size_t>(dh));
        for (int i = 0; i < layer.head_count(); ++i) {
          for (int r = 0; r < dh; ++r) wo_rows[static_cast<size_t>(i * dh + r)] = kept[static_cast<size_t>(i)];
          if (!kept[static_cast<size_t>(i)]) continue;
          wq.push_back(layer.wq[static_cast<size_t>(i)]);
          wk.push_back(layer.wk[static_cast<size_t>(i)]);
          wv.push_back(layer.wv[static_cast<size_t>(i)]);
        }
        layer.wq = std::move(wq);
        layer.wk = std::move(wk);
        layer.wv = std::move(wv);
        layer.wo.w = detail::keep_rows(layer.wo.w, wo_rows);
      }
    }
    if (layer.has_ffn) {
      const auto& kept = plan.kept_channels[l];
      if (static_cast<int>(kept.size()) != layer.ffn_in.w.dim(1)) {
        throw ShapeError("prune plan channel count mismatch in layer " + std::to_string(l));
      }
      if (!plan.kept_ffn[l]) {
        layer.has_ffn = false;
        layer.ffn_in = {};
        layer.ffn_out = {};
        layer.ln2 = {};
      } else {
        layer.ffn_in.w = detail::keep_cols(layer.ffn_in.w, kept);
        layer.ffn_in.b = detail::keep_entries(layer.ffn_in.b, kept);
        layer.ffn_out.w = detail::keep_rows(layer.ffn_out.w, kept);
      }
    }
  }
  std::vector<EncoderLayer<T>> alive;
  for (size_t l = 0; l < model.layers.size(); ++l) {
    if (plan.layer_alive(static_cast<int>(l))) alive.push_back(std::move(model.layers[l]));
  }
  model.layers = std::move(alive);
}

}  // namespace usdc
