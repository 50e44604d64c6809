#pragma once

// Miniature pre-norm Vision Transformer: patch embedding + class token +
// positional embedding, L encoder layers (per-head MHSA projections, FFN),
// linear classifier on the class token.
//
// Projections are stored per head so structured head pruning is a physical
// removal of whole tensors rather than index bookkeeping inside fused
// matrices. mhsa()/ffn() take already-normalized input; encoder_block() owns
// the pre-LayerNorm and residuals.

#include <vector>

#include "usdc/rng.hpp"
#include "usdc/tensor.hpp"

namespace usdc {

struct ViTConfig {
  int layers = 4;
  int heads = 4;
  int embed_dim = 32;
  int ffn_hidden = 64;
  int image_size = 16;
  int patch_size = 4;
  int channels = 1;
  int num_classes = 10;

  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid() + 1; }  // + class token
  int head_dim() const { return embed_dim / heads; }
  int patch_dim() const { return channels * patch_size * patch_size; }

  void validate() const {
    if (layers <= 0 || heads <= 0 || embed_dim <= 0 || ffn_hidden <= 0 || image_size <= 0 ||
        patch_size <= 0 || channels <= 0 || num_classes <= 0) {
      throw ValueError("ViTConfig: all dimensions must be positive");
    }
    if (embed_dim % heads != 0) throw ValueError("ViTConfig: embed_dim must be divisible by heads");
    if (image_size % patch_size != 0) {
      throw ValueError("ViTConfig: image_size must be divisible by patch_size");
    }
  }
};

template <typename T>
struct LinearParams {
  Tensor<T> w, b;

  void init(int in, int out, RngState& rng) {
    w = Tensor<T>({in, out});
    b = Tensor<T>::zeros({out});
    const double stddev = std::sqrt(2.0 / (in + out));
    fill_normal(w, stddev, rng);
  }
  long long param_count() const { return w.numel() + b.numel(); }
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain, bias;

  void init(int d) {
    gain = Tensor<T>::full({d}, T(1));
    bias = Tensor<T>::zeros({d});
  }
};

template <typename T>
struct EncoderLayer {
  std::vector<LinearParams<T>> wq, wk, wv;  // one [d, head_dim] projection per head
  LinearParams<T> wo;                       // [heads*head_dim, d]
  LinearParams<T> ffn_in;                   // [d, hidden]
  LinearParams<T> ffn_out;                  // [hidden, d]
  LayerNormParams<T> ln1, ln2;
  bool has_mhsa = true;
  bool has_ffn = true;

  int head_count() const { return static_cast<int>(wq.size()); }
  int head_width() const { return wq.empty() ? 0 : wq[0].w.dim(1); }
  int hidden_count() const { return has_ffn ? ffn_in.w.dim(1) : 0; }

  void init(int d, int heads, int hidden, RngState& rng) {
    const int dh = d / heads;
    wq.resize(heads);
    wk.resize(heads);
    wv.resize(heads);
    for (int i = 0; i < heads; ++i) {
      wq[i].init(d, dh, rng);
      wk[i].init(d, dh, rng);
      wv[i].init(d, dh, rng);
    }
    wo.init(heads * dh, d, rng);
    ffn_in.init(d, hidden, rng);
    ffn_out.init(hidden, d, rng);
    ln1.init(d);
    ln2.init(d);
  }

  // Attention-path parameters; W^O bias excluded by convention so the count
  // scales linearly with surviving heads.
  long long mhsa_param_count() const {
    if (!has_mhsa) return 0;
    long long n = 0;
    for (int i = 0; i < head_count(); ++i) {
      n += wq[i].param_count() + wk[i].param_count() + wv[i].param_count();
    }
    return n + wo.w.numel();
  }
  long long ffn_param_count() const {
    return has_ffn ? ffn_in.param_count() + ffn_out.param_count() : 0;
  }
  long long param_count() const {
    long long n = mhsa_param_count() + ffn_param_count();
    if (has_mhsa) n += wo.b.numel() + 2LL * ln1.gain.numel();
    if (has_ffn) n += 2LL * ln2.gain.numel();
    return n;
  }
};

template <typename T>
struct VitModel {
  ViTConfig cfg;
  LinearParams<T> patch_proj;  // [patch_dim, d]
  Tensor<T> cls_token;         // [1, 1, d], zero-init
  Tensor<T> pos_embed;         // [tokens, d]
  std::vector<EncoderLayer<T>> layers;
  LinearParams<T> head;  // [d, num_classes]

  void init(RngState& rng) {
    cfg.validate();
    patch_proj.init(cfg.patch_dim(), cfg.embed_dim, rng);
    cls_token = Tensor<T>::zeros({1, 1, cfg.embed_dim});
    pos_embed = Tensor<T>({cfg.tokens(), cfg.embed_dim});
    fill_normal(pos_embed, 0.02, rng);
    layers.assign(cfg.layers, {});
    for (auto& l : layers) l.init(cfg.embed_dim, cfg.heads, cfg.ffn_hidden, rng);
    head.init(cfg.embed_dim, cfg.num_classes, rng);
  }

  // Weight matrices get weight decay; biases, norms and embeddings do not.
  void collect_params(std::vector<Tensor<T>>& decay, std::vector<Tensor<T>>& no_decay) {
    decay.push_back(patch_proj.w);
    no_decay.push_back(patch_proj.b);
    no_decay.push_back(cls_token);
    no_decay.push_back(pos_embed);
    for (auto& l : layers) {
      if (l.has_mhsa) {
        for (int i = 0; i < l.head_count(); ++i) {
          decay.push_back(l.wq[i].w);
          decay.push_back(l.wk[i].w);
          decay.push_back(l.wv[i].w);
          no_decay.push_back(l.wq[i].b);
          no_decay.push_back(l.wk[i].b);
          no_decay.push_back(l.wv[i].b);
        }
        decay.push_back(l.wo.w);
        no_decay.push_back(l.wo.b);
        no_decay.push_back(l.ln1.gain);
        no_decay.push_back(l.ln1.bias);
      }
      if (l.has_ffn) {
        decay.push_back(l.ffn_in.w);
        no_decay.push_back(l.ffn_in.b);
        decay.push_back(l.ffn_out.w);
        no_decay.push_back(l.ffn_out.b);
        no_decay.push_back(l.ln2.gain);
        no_decay.push_back(l.ln2.bias);
      }
    }
    decay.push_back(head.w);
    no_decay.push_back(head.b);
  }

  long long param_count() const {
    long long n = patch_proj.param_count() + cls_token.numel() + pos_embed.numel() +
                  head.param_count();
    for (const auto& l : layers) n += l.param_count();
    return n;
  }
};

// ---------------------------------------------------------------------------
// forward ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> patch_embed(const VitModel<T>& m, const Tensor<T>& images) {
  if (images.rank() != 4 || images.dim(1) != m.cfg.channels || images.dim(2) != m.cfg.image_size ||
      images.dim(3) != m.cfg.image_size) {
    throw ShapeError("patch_embed: images must be [B," + std::to_string(m.cfg.channels) + "," +
                     std::to_string(m.cfg.image_size) + "," + std::to_string(m.cfg.image_size) +
                     "], got " + shape_str(images.shape()));
  }
  const int b = images.dim(0);
  Tensor<T> tok = linear(im2patches(images, m.cfg.patch_size), m.patch_proj.w, m.patch_proj.b);
  Tensor<T> cls = broadcast_to(m.cls_token, {b, 1, m.cfg.embed_dim});
  Tensor<T> z = concat<T>({cls, tok}, 1);
  return add(z, m.pos_embed);
}

// Attention over already-normalized input. Scale is 1/sqrt(head width); head
// width survives pruning unchanged, only the head count shrinks.
template <typename T>
Tensor<T> mhsa(const Tensor<T>& zn, const EncoderLayer<T>& layer) {
  const int b = zn.dim(0), t = zn.dim(1);
  const int h = layer.head_count();
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
      heads.push_back(matmul(attn, v));
    }
    cat = concat(heads, 2);
  }
  return linear(cat, layer.wo.w, layer.wo.b);
}

template <typename T>
Tensor<T> ffn(const Tensor<T>& zn, const EncoderLayer<T>& layer) {
  return linear(gelu(linear(zn, layer.ffn_in.w, layer.ffn_in.b)), layer.ffn_out.w,
                layer.ffn_out.b);
}

template <typename T>
Tensor<T> encoder_block(const Tensor<T>& z, const EncoderLayer<T>& layer) {
  Tensor<T> z1 = z;
  if (layer.has_mhsa) {
    z1 = add(mhsa(layernorm(z, layer.ln1.gain, layer.ln1.bias), layer), z);
  }
  Tensor<T> z2 = z1;
  if (layer.has_ffn) {
    z2 = add(ffn(layernorm(z1, layer.ln2.gain, layer.ln2.bias), layer), z1);
  }
  return z2;
}

template <typename T>
Tensor<T> classify(const VitModel<T>& m, const Tensor<T>& z) {
  Tensor<T> cls = reshape(slice_axis(z, 1, 0, 1), {z.dim(0), z.dim(2)});
  return linear(cls, m.head.w, m.head.b);
}

// Plain uncompressed forward: images -> logits.
template <typename T>
Tensor<T> vit_forward(const VitModel<T>& m, const Tensor<T>& images) {
  Tensor<T> z = patch_embed(m, images);
  for (const auto& layer : m.layers) z = encoder_block(z, layer);
  return classify(m, z);
}

}  // namespace usdc
