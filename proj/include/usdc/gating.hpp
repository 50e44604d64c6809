#pragma once

// Dynamic block skipping: one small decision network per encoder layer emits
// two binary gates — run or skip the attention sublayer, run or skip the FFN
// sublayer — for every sample (or group of samples, see grouping.hpp). The
// decision network's own architecture is searched over seven candidates with
// a learnable mixing weight per layer; after the search, the strongest
// candidate is kept and the rest are discarded.

#include <string>
#include <vector>

#include "usdc/rng.hpp"
#include "usdc/tensor.hpp"
#include "usdc/vit.hpp"

namespace usdc {

// The seven candidate decision networks. "Fc" candidates act on the
// mean-pooled token feature; "Conv" candidates act tokenwise (a 1x1
// convolution over the token axis) and pool afterwards.
enum class GateKind {
  Fc2LnRelu,    // FC -> LayerNorm -> ReLU -> FC
  Fc2BnRelu,    // FC -> BatchNorm -> ReLU -> FC
  Fc2LnGelu,    // FC -> LayerNorm -> GeLU -> FC
  Fc1,          // single FC
  Conv2BnRelu,  // 1x1 conv -> BatchNorm -> ReLU -> 1x1 conv, then pool
  Conv2BnGelu,  // 1x1 conv -> BatchNorm -> GeLU -> 1x1 conv, then pool
  Conv1,        // single 1x1 conv, then pool
};

constexpr int kGateKindCount = 7;

inline GateKind gate_kind_from_index(int k) {
  if (k < 0 || k >= kGateKindCount) throw ValueError("gate kind index out of range");
  return static_cast<GateKind>(k);
}

inline const char* gate_kind_name(GateKind k) {
  switch (k) {
    case GateKind::Fc2LnRelu: return "fc2-ln-relu";
    case GateKind::Fc2BnRelu: return "fc2-bn-relu";
    case GateKind::Fc2LnGelu: return "fc2-ln-gelu";
    case GateKind::Fc1: return "fc1";
    case GateKind::Conv2BnRelu: return "conv2-bn-relu";
    case GateKind::Conv2BnGelu: return "conv2-bn-gelu";
    case GateKind::Conv1: return "conv1";
  }
  return "?";
}

inline GateKind parse_gate_kind(const std::string& name) {
  for (int k = 0; k < kGateKindCount; ++k) {
    if (name == gate_kind_name(gate_kind_from_index(k))) return gate_kind_from_index(k);
  }
  throw ValueError("unknown gate kind '" + name + "'");
}

inline bool gate_kind_two_layer(GateKind k) {
  return k != GateKind::Fc1 && k != GateKind::Conv1;
}

inline bool gate_kind_tokenwise(GateKind k) {
  return k == GateKind::Conv2BnRelu || k == GateKind::Conv2BnGelu || k == GateKind::Conv1;
}

// Hidden width of the two-layer candidates; kept a small fraction of the
// embedding so gate cost stays ~0.1% of the backbone.
inline int gate_hidden_width(int d) {
  return std::max(4, d / 4);
}

// Every sample produces 4 logits: two independent binary decisions
// (execute/skip attention, execute/skip FFN), two logits each.
constexpr int kGateLogits = 4;

// Multiply-accumulate count of one candidate for one sample; only the
// linear maps count, and tokenwise candidates pay per token.
inline long long gate_kind_macs(GateKind k, int d, int tokens) {
  const long long h = gate_hidden_width(d);
  const long long per_position = gate_kind_two_layer(k)
                                     ? d * h + h * kGateLogits
                                     : static_cast<long long>(d) * kGateLogits;
  return gate_kind_tokenwise(k) ? per_position * tokens : per_position;
}

template <typename T>
struct GateCandidate {
  GateKind kind = GateKind::Fc1;
  LinearParams<T> fc1, fc2;  // fc2 unused for single-layer kinds
  LayerNormParams<T> ln;     // LN kinds only
  BatchNormState<T> bn;      // BN kinds only
  double flops_scale = 0.0;  // candidate MACs / backbone MACs, per sample

  void init(GateKind k, int d, RngState& rng) {
    kind = k;
    const int h = gate_hidden_width(d);
    if (gate_kind_two_layer(k)) {
      fc1.init(d, h, rng);
      fc2.init(h, kGateLogits, rng);
      if (k == GateKind::Fc2LnRelu || k == GateKind::Fc2LnGelu) ln.init(h);
      if (k == GateKind::Fc2BnRelu || k == GateKind::Conv2BnRelu || k == GateKind::Conv2BnGelu) {
        bn.init(h);
      }
    } else {
      fc1.init(d, kGateLogits, rng);
    }
  }

  long long macs(int d, int tokens) const { return gate_kind_macs(kind, d, tokens); }

  long long param_count() const {
    long long n = fc1.param_count();
    if (gate_kind_two_layer(kind)) {
      n += fc2.param_count();
      if (kind == GateKind::Fc2LnRelu || kind == GateKind::Fc2LnGelu) {
        n += ln.gain.numel() + ln.bias.numel();
      } else {
        n += bn.gamma.numel() + bn.beta.numel();
      }
    }
    return n;
  }

  void collect_params(std::vector<Tensor<T>>& decay, std::vector<Tensor<T>>& no_decay) {
    decay.push_back(fc1.w);
    no_decay.push_back(fc1.b);
    if (gate_kind_two_layer(kind)) {
      decay.push_back(fc2.w);
      no_decay.push_back(fc2.b);
      if (kind == GateKind::Fc2LnRelu || kind == GateKind::Fc2LnGelu) {
        no_decay.push_back(ln.gain);
        no_decay.push_back(ln.bias);
      } else {
        no_decay.push_back(bn.gamma);
        no_decay.push_back(bn.beta);
      }
    }
  }
};

// Learnable architecture weights of the candidate search: one row of logits
// per layer, softened by Gumbel-Softmax at temperature tau_search.
template <typename T>
struct GateArchParams {
  Tensor<T> logits;  // [L, K]
  T tau_search = static_cast<T>(2.0);

  void init(int layers, int kinds) {
    logits = Tensor<T>::zeros({layers, kinds});
  }
};

// Per-sample gate values for one layer: column 0 gates the attention
// sublayer, column 1 the FFN sublayer. 1 = execute, 0 = skip; soft values
// in between appear during training.
template <typename T>
struct GateOutput {
  Tensor<T> g;  // [B, 2]
};

// Run one candidate network on the previous layer's activations, producing
// the 4 skip logits per sample. `training` selects batch-norm mode.
template <typename T>
Tensor<T> gate_features(const Tensor<T>& z_prev, GateCandidate<T>& cand, bool training = true) {
  if (z_prev.rank() != 3) {
    throw ShapeError("gate_features expects [batch, tokens, dim], got " + shape_str(z_prev.shape()));
  }
  switch (cand.kind) {
    case GateKind::Fc2LnRelu: {
      Tensor<T> f = mean_axis(z_prev, 1);
      Tensor<T> h = relu(layernorm(linear(f, cand.fc1.w, cand.fc1.b), cand.ln.gain, cand.ln.bias));
      return linear(h, cand.fc2.w, cand.fc2.b);
    }
    case GateKind::Fc2BnRelu: {
      Tensor<T> f = mean_axis(z_prev, 1);
      Tensor<T> h = relu(batchnorm(linear(f, cand.fc1.w, cand.fc1.b), cand.bn, training));
      return linear(h, cand.fc2.w, cand.fc2.b);
    }
    case GateKind::Fc2LnGelu: {
      Tensor<T> f = mean_axis(z_prev, 1);
      Tensor<T> h = gelu(layernorm(linear(f, cand.fc1.w, cand.fc1.b), cand.ln.gain, cand.ln.bias));
      return linear(h, cand.fc2.w, cand.fc2.b);
    }
    case GateKind::Fc1:
      return linear(mean_axis(z_prev, 1), cand.fc1.w, cand.fc1.b);
    case GateKind::Conv2BnRelu: {
      Tensor<T> h = relu(batchnorm(linear(z_prev, cand.fc1.w, cand.fc1.b), cand.bn, training));
      return mean_axis(linear(h, cand.fc2.w, cand.fc2.b), 1);
    }
    case GateKind::Conv2BnGelu: {
      Tensor<T> h = gelu(batchnorm(linear(z_prev, cand.fc1.w, cand.fc1.b), cand.bn, training));
      return mean_axis(linear(h, cand.fc2.w, cand.fc2.b), 1);
    }
    case GateKind::Conv1:
      return mean_axis(linear(z_prev, cand.fc1.w, cand.fc1.b), 1);
  }
  throw ValueError("unreachable gate kind");
}

// One soft Gumbel-Softmax draw over every layer's architecture logits.
// The result [L, K] weights both the candidate blend and the cost ledger,
// so each training step draws it once and reuses it.
template <typename T>
Tensor<T> draw_arch_weights(const GateArchParams<T>& arch, RngState& rng) {
  return gumbel_softmax(arch.logits, arch.tau_search, /*hard=*/false, rng);
}

// Blend one layer's candidates with the given weight row [1, K].
template <typename T>
Tensor<T> mix_candidates_with_weights(const Tensor<T>& z_prev,
                                      std::vector<GateCandidate<T>>& candidates,
                                      const Tensor<T>& weights, bool training = true) {
  if (candidates.empty()) throw ValueError("mix_candidates: no candidates");
  const int k = static_cast<int>(candidates.size());
  if (weights.numel() != k) {
    throw ShapeError("mixing weights cover " + std::to_string(weights.numel()) +
                     " candidates, layer has " + std::to_string(k));
  }
  Tensor<T> row = reshape(weights, {1, k});
  Tensor<T> out;
  for (int i = 0; i < k; ++i) {
    Tensor<T> term = mul(gate_features(z_prev, candidates[static_cast<size_t>(i)], training),
                         slice_axis(row, 1, i, 1));
    out = out.defined() ? add(out, term) : term;
  }
  return out;
}

// Blend all candidates of one layer with soft Gumbel-Softmax weights over
// the layer's architecture logits. Returns [B, 4] mixed skip logits.
template <typename T>
Tensor<T> mix_candidates(const Tensor<T>& z_prev, std::vector<GateCandidate<T>>& candidates,
                         const GateArchParams<T>& arch, int layer, RngState& rng,
                         bool training = true) {
  Tensor<T> row = slice_axis(arch.logits, 0, layer, 1);  // [1, K]
  Tensor<T> w = gumbel_softmax(row, arch.tau_search, /*hard=*/false, rng);
  return mix_candidates_with_weights(z_prev, candidates, w, training);
}

// Sample the two execute/skip decisions from 4 logits. Index 0 of each pair
// is "execute"; hard mode returns straight-through one-hot draws.
template <typename T>
GateOutput<T> sample_gates(const Tensor<T>& gate_logits, T tau_skip, bool hard, RngState& rng) {
  if (gate_logits.rank() != 2 || gate_logits.dim(1) != kGateLogits) {
    throw ShapeError("sample_gates expects [batch, 4], got " + shape_str(gate_logits.shape()));
  }
  Tensor<T> mhsa_pair = gumbel_softmax(slice_axis(gate_logits, 1, 0, 2), tau_skip, hard, rng);
  Tensor<T> ffn_pair = gumbel_softmax(slice_axis(gate_logits, 1, 2, 2), tau_skip, hard, rng);
  GateOutput<T> out;
  out.g = concat<T>({slice_axis(mhsa_pair, 1, 0, 1), slice_axis(ffn_pair, 1, 0, 1)}, 1);
  return out;
}

// Gated encoder block: each sublayer's output (including its residual) is
// blended with its input by the gate value, so g=1 executes the sublayer,
// g=0 reproduces the input. Sublayers pruned away are unconditional skips.
template <typename T>
Tensor<T> gated_block(const Tensor<T>& z, const EncoderLayer<T>& layer, const GateOutput<T>& gate) {
  const int b = z.dim(0);
  if (gate.g.dim(0) != b || gate.g.dim(1) != 2) {
    throw ShapeError("gate values must be [batch, 2], got " + shape_str(gate.g.shape()));
  }
  Tensor<T> z1 = z;
  if (layer.has_mhsa) {
    Tensor<T> g0 = reshape(slice_axis(gate.g, 1, 0, 1), {b, 1, 1});
    Tensor<T> executed = add(mhsa(layernorm(z, layer.ln1.gain, layer.ln1.bias), layer), z);
    z1 = add(mul(g0, executed), mul(affine(g0, T(-1), T(1)), z));
  }
  Tensor<T> z2 = z1;
  if (layer.has_ffn) {
    Tensor<T> g1 = reshape(slice_axis(gate.g, 1, 1, 1), {b, 1, 1});
    Tensor<T> executed = add(ffn(layernorm(z1, layer.ln2.gain, layer.ln2.bias), layer), z1);
    z2 = add(mul(g1, executed), mul(affine(g1, T(-1), T(1)), z1));
  }
  return z2;
}

// Inference fast path: with one hard decision shared by the whole batch the
// skipped sublayer is bypassed outright — no LayerNorm, no residual, no
// multiply-by-zero. Bit-identical to gated_block with the same hard gates.
template <typename T>
Tensor<T> gated_block_fast(const Tensor<T>& z, const EncoderLayer<T>& layer, bool run_mhsa,
                           bool run_ffn) {
  Tensor<T> z1 = z;
  if (layer.has_mhsa && run_mhsa) {
    z1 = add(mhsa(layernorm(z, layer.ln1.gain, layer.ln1.bias), layer), z);
  }
  Tensor<T> z2 = z1;
  if (layer.has_ffn && run_ffn) {
    z2 = add(ffn(layernorm(z1, layer.ln2.gain, layer.ln2.bias), layer), z1);
  }
  return z2;
}

// End of search: keep the candidate with the largest architecture logit per
// layer; ties break to the lowest index.
template <typename T>
std::vector<int> select_final_gates(const GateArchParams<T>& arch) {
  const int layers = arch.logits.dim(0), k = arch.logits.dim(1);
  std::vector<int> best(static_cast<size_t>(layers), 0);
  for (int l = 0; l < layers; ++l) {
    for (int j = 1; j < k; ++j) {
      if (arch.logits.value()[static_cast<size_t>(l * k + j)] >
          arch.logits.value()[static_cast<size_t>(l * k + best[static_cast<size_t>(l)])]) {
        best[static_cast<size_t>(l)] = j;
      }
    }
  }
  return best;
}

}  // namespace usdc
