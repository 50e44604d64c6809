#pragma once

// Versioned binary checkpoints with a human-readable JSON manifest alongside.
//
// The binary layout is explicit little-endian with per-tensor shape headers,
// so a checkpoint written on any host can be decoded byte-by-byte from the
// format description below, without C++ in the loop:
//
//   magic "USDCCKPT" (8 bytes)  |  u32 version  |  u32 stage (1|2)
//   ViTConfig (8 x i32)          |  RngState (u64 seed, u64 position)
//   model, statics, search space, architecture logits, prune plan,
//   selected gate kinds, selected gate networks -- each from two records:
//     tensor: u8 defined, [u8 scalar width, u32 rank, i64 dims..., payload]
//     vectors: u64 count + elements
//
// A stage-1 checkpoint carries everything needed to resume the search
// (static logits, the full candidate space, architecture logits); a stage-2
// checkpoint carries the pruned backbone plus the selected gate networks.

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "usdc/gating.hpp"
#include "usdc/masks.hpp"
#include "usdc/rng.hpp"
#include "usdc/tensor.hpp"
#include "usdc/trainer.hpp"
#include "usdc/vit.hpp"

namespace usdc {

struct SerializationError : std::runtime_error {
  explicit SerializationError(const std::string& msg) : std::runtime_error(msg) {}
};

constexpr uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[8] = {'U', 'S', 'D', 'C', 'C', 'K', 'P', 'T'};

template <typename T>
struct Checkpoint {
  int stage = 1;                        // 1 = search state, 2 = pruned + gated
  VitModel<T> model;                    // model.cfg is the ORIGINAL architecture
  StaticParams<T> statics;              // stage 1 (absent when the mode had none)
  GateSearchSpace<T> space;             // stage 1 candidate networks (may be empty)
  GateArchParams<T> arch;               // stage 1 architecture logits
  PrunePlan plan;                       // stage 2: applied plan; stage 1: keep-all
  std::vector<GateKind> selected_kinds; // stage 2: per original layer
  std::vector<GateCandidate<T>> gates;  // stage 2: per surviving layer
  uint64_t rng_seed = 0;
  uint64_t rng_position = 0;

  const ViTConfig& cfg() const { return model.cfg; }

  RngState restore_rng() const {
    RngState rng;
    rng.restore(rng_seed, rng_position);
    return rng;
  }
};

namespace ckpt_detail {

// ---- primitive little-endian writers/readers -------------------------------

inline void put_u64(std::ostream& os, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

inline void put_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

inline void put_u8(std::ostream& os, uint8_t v) { os.put(static_cast<char>(v)); }
inline void put_i32(std::ostream& os, int32_t v) { put_u32(os, static_cast<uint32_t>(v)); }
inline void put_i64(std::ostream& os, int64_t v) { put_u64(os, static_cast<uint64_t>(v)); }
inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<uint64_t>(v)); }

inline uint64_t get_u64(std::istream& is) {
  char b[8];
  if (!is.read(b, 8)) throw SerializationError("checkpoint truncated");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(b[i])) << (8 * i);
  return v;
}

inline uint32_t get_u32(std::istream& is) {
  char b[4];
  if (!is.read(b, 4)) throw SerializationError("checkpoint truncated");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(b[i])) << (8 * i);
  return v;
}

inline uint8_t get_u8(std::istream& is) {
  const int c = is.get();
  if (c == EOF) throw SerializationError("checkpoint truncated");
  return static_cast<uint8_t>(c);
}

inline int32_t get_i32(std::istream& is) { return static_cast<int32_t>(get_u32(is)); }
inline int64_t get_i64(std::istream& is) { return static_cast<int64_t>(get_u64(is)); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

// ---- tensors ---------------------------------------------------------------

template <typename T>
void put_tensor(std::ostream& os, const Tensor<T>& t) {
  put_u8(os, t.defined() ? 1 : 0);
  if (!t.defined()) return;
  put_u8(os, static_cast<uint8_t>(sizeof(T)));
  put_u32(os, static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) put_i64(os, t.dim(i));
  for (const T v : t.value()) {
    if constexpr (sizeof(T) == 4) {
      put_u32(os, std::bit_cast<uint32_t>(v));
    } else {
      put_u64(os, std::bit_cast<uint64_t>(v));
    }
  }
}

template <typename T>
Tensor<T> get_tensor(std::istream& is) {
  if (get_u8(is) == 0) return Tensor<T>();
  const uint8_t width = get_u8(is);
  if (width != sizeof(T)) {
    throw SerializationError("checkpoint scalar width " + std::to_string(width) +
                             " does not match the requested precision " +
                             std::to_string(sizeof(T)));
  }
  const uint32_t rank = get_u32(is);
  if (rank > 8) throw SerializationError("corrupt tensor header: rank " + std::to_string(rank));
  std::vector<int> shape;
  long long numel = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    const int64_t d = get_i64(is);
    if (d < 0 || d > (1 << 30)) {
      throw SerializationError("corrupt tensor header: dim " + std::to_string(d));
    }
    shape.push_back(static_cast<int>(d));
    numel *= d;
  }
  Tensor<T> t(shape);
  for (long long i = 0; i < numel; ++i) {
    if constexpr (sizeof(T) == 4) {
      t.value()[static_cast<size_t>(i)] = std::bit_cast<T>(get_u32(is));
    } else {
      t.value()[static_cast<size_t>(i)] = std::bit_cast<T>(get_u64(is));
    }
  }
  return t;
}

// ---- parameter bundles -----------------------------------------------------

template <typename T>
void put_linear(std::ostream& os, const LinearParams<T>& p) {
  put_tensor(os, p.w);
  put_tensor(os, p.b);
}

template <typename T>
void get_linear(std::istream& is, LinearParams<T>& p) {
  p.w = get_tensor<T>(is);
  p.b = get_tensor<T>(is);
}

template <typename T>
void put_layernorm(std::ostream& os, const LayerNormParams<T>& p) {
  put_tensor(os, p.gain);
  put_tensor(os, p.bias);
}

template <typename T>
void get_layernorm(std::istream& is, LayerNormParams<T>& p) {
  p.gain = get_tensor<T>(is);
  p.bias = get_tensor<T>(is);
}

template <typename T>
void put_batchnorm(std::ostream& os, const BatchNormState<T>& bn) {
  put_tensor(os, bn.gamma);
  put_tensor(os, bn.beta);
  put_tensor(os, bn.run_mean);
  put_tensor(os, bn.run_var);
  put_f64(os, static_cast<double>(bn.momentum));
  put_f64(os, static_cast<double>(bn.eps));
}

template <typename T>
void get_batchnorm(std::istream& is, BatchNormState<T>& bn) {
  bn.gamma = get_tensor<T>(is);
  bn.beta = get_tensor<T>(is);
  bn.run_mean = get_tensor<T>(is);
  bn.run_var = get_tensor<T>(is);
  bn.momentum = static_cast<T>(get_f64(is));
  bn.eps = static_cast<T>(get_f64(is));
}

template <typename T>
void put_gate(std::ostream& os, const GateCandidate<T>& g) {
  put_i32(os, static_cast<int32_t>(g.kind));
  put_linear(os, g.fc1);
  put_linear(os, g.fc2);
  put_layernorm(os, g.ln);
  put_batchnorm(os, g.bn);
  put_f64(os, g.flops_scale);
}

template <typename T>
void get_gate(std::istream& is, GateCandidate<T>& g) {
  g.kind = gate_kind_from_index(get_i32(is));
  get_linear(is, g.fc1);
  get_linear(is, g.fc2);
  get_layernorm(is, g.ln);
  get_batchnorm(is, g.bn);
  g.flops_scale = get_f64(is);
}

template <typename T>
void put_layer(std::ostream& os, const EncoderLayer<T>& l) {
  put_u8(os, l.has_mhsa ? 1 : 0);
  put_u8(os, l.has_ffn ? 1 : 0);
  put_u32(os, static_cast<uint32_t>(l.wq.size()));
  for (size_t h = 0; h < l.wq.size(); ++h) {
    put_linear(os, l.wq[h]);
    put_linear(os, l.wk[h]);
    put_linear(os, l.wv[h]);
  }
  put_linear(os, l.wo);
  put_linear(os, l.ffn_in);
  put_linear(os, l.ffn_out);
  put_layernorm(os, l.ln1);
  put_layernorm(os, l.ln2);
}

template <typename T>
void get_layer(std::istream& is, EncoderLayer<T>& l) {
  l.has_mhsa = get_u8(is) != 0;
  l.has_ffn = get_u8(is) != 0;
  const uint32_t heads = get_u32(is);
  if (heads > 4096) throw SerializationError("corrupt layer header: head count");
  l.wq.resize(heads);
  l.wk.resize(heads);
  l.wv.resize(heads);
  for (uint32_t h = 0; h < heads; ++h) {
    get_linear(is, l.wq[h]);
    get_linear(is, l.wk[h]);
    get_linear(is, l.wv[h]);
  }
  get_linear(is, l.wo);
  get_linear(is, l.ffn_in);
  get_linear(is, l.ffn_out);
  get_layernorm(is, l.ln1);
  get_layernorm(is, l.ln2);
}

inline void put_bools(std::ostream& os, const std::vector<bool>& v) {
  put_u64(os, v.size());
  for (const bool b : v) put_u8(os, b ? 1 : 0);
}

inline std::vector<bool> get_bools(std::istream& is) {
  const uint64_t n = get_u64(is);
  if (n > (1u << 24)) throw SerializationError("corrupt plan: vector length");
  std::vector<bool> v(n);
  for (uint64_t i = 0; i < n; ++i) v[i] = get_u8(is) != 0;
  return v;
}

inline void put_plan(std::ostream& os, const PrunePlan& p) {
  put_bools(os, p.kept_mhsa);
  put_bools(os, p.kept_ffn);
  put_u64(os, p.kept_heads.size());
  for (const auto& v : p.kept_heads) put_bools(os, v);
  put_u64(os, p.kept_channels.size());
  for (const auto& v : p.kept_channels) put_bools(os, v);
}

inline PrunePlan get_plan(std::istream& is) {
  PrunePlan p;
  p.kept_mhsa = get_bools(is);
  p.kept_ffn = get_bools(is);
  uint64_t n = get_u64(is);
  if (n > (1u << 20)) throw SerializationError("corrupt plan: layer count");
  p.kept_heads.resize(n);
  for (auto& v : p.kept_heads) v = get_bools(is);
  n = get_u64(is);
  if (n > (1u << 20)) throw SerializationError("corrupt plan: layer count");
  p.kept_channels.resize(n);
  for (auto& v : p.kept_channels) v = get_bools(is);
  return p;
}

}  // namespace ckpt_detail

// ---------------------------------------------------------------------------
// save / load
// ---------------------------------------------------------------------------

template <typename T>
nlohmann::json checkpoint_manifest(const Checkpoint<T>& c) {
  using nlohmann::json;
  const ViTConfig& v = c.cfg();
  json m;
  m["format"] = "usdc-checkpoint";
  m["version"] = kCheckpointVersion;
  m["stage"] = c.stage;
  m["precision_bytes"] = sizeof(T);
  m["vit"] = {{"layers", v.layers},         {"heads", v.heads},
              {"embed_dim", v.embed_dim},   {"ffn_hidden", v.ffn_hidden},
              {"image_size", v.image_size}, {"patch_size", v.patch_size},
              {"channels", v.channels},     {"num_classes", v.num_classes}};
  m["rng"] = {{"seed", c.rng_seed}, {"position", c.rng_position}};
  m["layers_alive"] = c.model.layers.size();
  m["param_count"] = const_cast<VitModel<T>&>(c.model).param_count();
  json kinds = json::array();
  for (const GateKind k : c.selected_kinds) kinds.push_back(gate_kind_name(k));
  m["selected_gates"] = kinds;
  m["gate_networks"] = c.gates.size();
  m["has_static_logits"] = c.statics.alpha_a.defined();
  m["search_candidates"] = c.space.candidate_count();
  json plan = json::array();
  for (int l = 0; l < c.plan.layer_count(); ++l) {
    int heads = 0, chans = 0;
    for (const bool b : c.plan.kept_heads[static_cast<size_t>(l)]) heads += b;
    for (const bool b : c.plan.kept_channels[static_cast<size_t>(l)]) chans += b;
    plan.push_back({{"layer", l},
                    {"mhsa", c.plan.kept_mhsa[static_cast<size_t>(l)]},
                    {"ffn", c.plan.kept_ffn[static_cast<size_t>(l)]},
                    {"kept_heads", heads},
                    {"kept_channels", chans}});
  }
  m["plan"] = plan;
  return m;
}

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& c) {
  namespace d = ckpt_detail;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw SerializationError("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic, 8);
  d::put_u32(os, kCheckpointVersion);
  d::put_u32(os, static_cast<uint32_t>(c.stage));
  const ViTConfig& v = c.cfg();
  for (const int field : {v.layers, v.heads, v.embed_dim, v.ffn_hidden, v.image_size,
                          v.patch_size, v.channels, v.num_classes}) {
    d::put_i32(os, field);
  }
  d::put_u64(os, c.rng_seed);
  d::put_u64(os, c.rng_position);

  // backbone
  d::put_linear(os, c.model.patch_proj);
  d::put_tensor(os, c.model.cls_token);
  d::put_tensor(os, c.model.pos_embed);
  d::put_u32(os, static_cast<uint32_t>(c.model.layers.size()));
  for (const auto& l : c.model.layers) d::put_layer(os, l);
  d::put_linear(os, c.model.head);

  // stage-1 search state
  d::put_tensor(os, c.statics.alpha_a);
  d::put_tensor(os, c.statics.alpha_m);
  d::put_tensor(os, c.statics.alpha_h);
  d::put_tensor(os, c.statics.alpha_n);
  d::put_f64(os, static_cast<double>(c.statics.tau_static));
  d::put_u32(os, static_cast<uint32_t>(c.space.layers.size()));
  for (const auto& row : c.space.layers) {
    d::put_u32(os, static_cast<uint32_t>(row.size()));
    for (const auto& cand : row) d::put_gate(os, cand);
  }
  d::put_tensor(os, c.arch.logits);
  d::put_f64(os, static_cast<double>(c.arch.tau_search));

  // stage-2 artifacts
  d::put_plan(os, c.plan);
  d::put_u64(os, c.selected_kinds.size());
  for (const GateKind k : c.selected_kinds) d::put_i32(os, static_cast<int32_t>(k));
  d::put_u64(os, c.gates.size());
  for (const auto& g : c.gates) d::put_gate(os, g);

  if (!os) throw SerializationError("write failed: " + path);
  os.close();
  if (!os) throw SerializationError("write failed: " + path);

  std::ofstream ms(path + ".json", std::ios::trunc);
  if (!ms) throw SerializationError("cannot open manifest for writing: " + path + ".json");
  ms << checkpoint_manifest(c).dump(2) << "\n";
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  namespace d = ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw SerializationError("cannot open checkpoint: " + path);
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic)) {
    throw SerializationError("not a checkpoint file: " + path);
  }
  const uint32_t version = d::get_u32(is);
  if (version != kCheckpointVersion) {
    throw SerializationError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint<T> c;
  c.stage = static_cast<int>(d::get_u32(is));
  if (c.stage != 1 && c.stage != 2) {
    throw SerializationError("corrupt checkpoint: stage " + std::to_string(c.stage));
  }
  ViTConfig& v = c.model.cfg;
  for (int* field : {&v.layers, &v.heads, &v.embed_dim, &v.ffn_hidden, &v.image_size,
                     &v.patch_size, &v.channels, &v.num_classes}) {
    *field = d::get_i32(is);
  }
  v.validate();
  c.rng_seed = d::get_u64(is);
  c.rng_position = d::get_u64(is);

  d::get_linear(is, c.model.patch_proj);
  c.model.cls_token = d::get_tensor<T>(is);
  c.model.pos_embed = d::get_tensor<T>(is);
  const uint32_t layers = d::get_u32(is);
  if (layers > 4096) throw SerializationError("corrupt checkpoint: layer count");
  c.model.layers.resize(layers);
  for (auto& l : c.model.layers) d::get_layer(is, l);
  d::get_linear(is, c.model.head);

  c.statics.alpha_a = d::get_tensor<T>(is);
  c.statics.alpha_m = d::get_tensor<T>(is);
  c.statics.alpha_h = d::get_tensor<T>(is);
  c.statics.alpha_n = d::get_tensor<T>(is);
  c.statics.tau_static = static_cast<T>(d::get_f64(is));
  const uint32_t space_layers = d::get_u32(is);
  if (space_layers > 4096) throw SerializationError("corrupt checkpoint: search space size");
  c.space.layers.resize(space_layers);
  for (auto& row : c.space.layers) {
    const uint32_t k = d::get_u32(is);
    if (k > 64) throw SerializationError("corrupt checkpoint: candidate count");
    row.resize(k);
    for (auto& cand : row) d::get_gate(is, cand);
  }
  c.arch.logits = d::get_tensor<T>(is);
  c.arch.tau_search = static_cast<T>(d::get_f64(is));

  c.plan = d::get_plan(is);
  uint64_t n = d::get_u64(is);
  if (n > 4096) throw SerializationError("corrupt checkpoint: selection size");
  c.selected_kinds.clear();
  for (uint64_t i = 0; i < n; ++i) c.selected_kinds.push_back(gate_kind_from_index(d::get_i32(is)));
  n = d::get_u64(is);
  if (n > 4096) throw SerializationError("corrupt checkpoint: gate count");
  c.gates.resize(n);
  for (auto& g : c.gates) d::get_gate(is, g);

  if (is.peek() != EOF) throw SerializationError("trailing bytes after checkpoint: " + path);
  return c;
}

}  // namespace usdc
