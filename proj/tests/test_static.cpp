#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "testutil.hpp"
#include "usdc/masks.hpp"

using namespace usdc;
using testutil::rand_tensor;

namespace {

using D = double;

EncoderLayer<D> make_layer(int d, int heads, int hidden, uint64_t seed) {
  EncoderLayer<D> layer;
  RngState rng(seed);
  layer.init(d, heads, hidden, rng);
  return layer;
}

Tensor<D> keeps(std::vector<double> v) {
  Tensor<D> t({static_cast<int>(v.size())});
  t.value() = v;
  return t;
}

VitModel<D> make_model(ViTConfig cfg, uint64_t seed) {
  VitModel<D> m;
  m.cfg = cfg;
  RngState rng(seed);
  m.init(rng);
  return m;
}

GateOutput<D> uniform_gate(int b, double g0, double g1) {
  GateOutput<D> g;
  g.g = Tensor<D>({b, 2});
  for (int i = 0; i < b; ++i) {
    g.g.value()[static_cast<size_t>(i * 2)] = g0;
    g.g.value()[static_cast<size_t>(i * 2 + 1)] = g1;
  }
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// masked sublayers
// ---------------------------------------------------------------------------

TEST_CASE("all-ones head mask reproduces plain attention", "[static]") {
  auto layer = make_layer(8, 4, 6, 1);
  RngState rng(2);
  auto zn = rand_tensor({2, 5, 8}, rng);
  auto masked = masked_mhsa(zn, layer, keeps({1, 1, 1, 1}));
  auto plain = mhsa(zn, layer);
  REQUIRE(masked.value() == plain.value());
}

TEST_CASE("a zeroed head mask erases that head's weights from the result", "[static]") {
  auto layer = make_layer(8, 4, 6, 3);
  RngState rng(4);
  auto zn = rand_tensor({2, 5, 8}, rng);
  auto before = masked_mhsa(zn, layer, keeps({1, 0, 1, 1}));
  RngState scramble(5);
  fill_normal(layer.wq[1].w, 3.0, scramble);
  fill_normal(layer.wk[1].w, 3.0, scramble);
  fill_normal(layer.wv[1].w, 3.0, scramble);
  auto after = masked_mhsa(zn, layer, keeps({1, 0, 1, 1}));
  REQUIRE(before.value() == after.value());
}

TEST_CASE("fractional head mask matches the directly scaled computation", "[static]") {
  auto layer = make_layer(6, 2, 4, 6);
  RngState rng(7);
  auto zn = rand_tensor({2, 4, 6}, rng);
  auto masked = masked_mhsa(zn, layer, keeps({0.5, 1.0}));

  // direct evaluation: per-head attention, head 0 halved, concat, project
  const D inv_sqrt = 1.0 / std::sqrt(3.0);
  std::vector<Tensor<D>> heads;
  for (int i = 0; i < 2; ++i) {
    auto q = linear(zn, layer.wq[i].w, layer.wq[i].b);
    auto k = linear(zn, layer.wk[i].w, layer.wk[i].b);
    auto v = linear(zn, layer.wv[i].w, layer.wv[i].b);
    auto head = matmul(softmax_last(scale(matmul(q, transpose_last2(k)), inv_sqrt)), v);
    heads.push_back(i == 0 ? scale(head, 0.5) : head);
  }
  auto expect = linear(concat(heads, 2), layer.wo.w, layer.wo.b);
  for (size_t i = 0; i < expect.value().size(); ++i) {
    REQUIRE(masked.value()[i] == Catch::Approx(expect.value()[i]).margin(1e-12));
  }
}

TEST_CASE("all-ones channel mask reproduces the plain FFN", "[static]") {
  auto layer = make_layer(8, 2, 6, 8);
  RngState rng(9);
  auto zn = rand_tensor({2, 5, 8}, rng);
  auto masked = masked_ffn(zn, layer, keeps({1, 1, 1, 1, 1, 1}));
  REQUIRE(masked.value() == ffn(zn, layer).value());
}

TEST_CASE("a zeroed channel ignores its output-projection row", "[static]") {
  auto layer = make_layer(8, 2, 6, 10);
  RngState rng(11);
  auto zn = rand_tensor({2, 5, 8}, rng);
  auto mask = keeps({1, 1, 0, 1, 1, 1});
  auto before = masked_ffn(zn, layer, mask);
  for (int j = 0; j < 8; ++j) layer.ffn_out.w.value()[static_cast<size_t>(2 * 8 + j)] = 77.0;
  auto after = masked_ffn(zn, layer, mask);
  REQUIRE(before.value() == after.value());
}

TEST_CASE("random channel mask matches the diagonal-matrix reference", "[static]") {
  auto layer = make_layer(8, 2, 6, 12);
  RngState rng(13);
  auto zn = rand_tensor({2, 5, 8}, rng);
  auto mask = rand_tensor({6}, rng);
  for (auto& v : mask.value()) v = std::abs(v);
  auto masked = masked_ffn(zn, layer, mask);

  Tensor<D> diag = Tensor<D>::zeros({6, 6});
  for (int i = 0; i < 6; ++i) diag.value()[static_cast<size_t>(i * 7)] = mask.value()[static_cast<size_t>(i)];
  auto expect = linear(matmul(gelu(linear(zn, layer.ffn_in.w, layer.ffn_in.b)), diag),
                       layer.ffn_out.w, layer.ffn_out.b);
  for (size_t i = 0; i < expect.value().size(); ++i) {
    REQUIRE(masked.value()[i] == Catch::Approx(expect.value()[i]).margin(1e-6));
  }
}

// ---------------------------------------------------------------------------
// joint block
// ---------------------------------------------------------------------------

TEST_CASE("open gates with keep-everything masks give the plain block", "[static]") {
  auto layer = make_layer(8, 2, 6, 14);
  RngState rng(15);
  auto z = rand_tensor({3, 4, 8}, rng);
  RelaxedMasks<D> masks;
  masks.a = Tensor<D>({1, 2});
  masks.a.value() = {1, 1};  // both branch weights 1
  masks.m = masks.a.clone();
  masks.h = Tensor<D>::full({1, 2, 2}, 1.0);
  masks.n = Tensor<D>::full({1, 6, 2}, 1.0);
  auto joint = joint_block(z, layer, masks, 0, uniform_gate(3, 1.0, 1.0));
  auto plain = encoder_block(z, layer);
  for (size_t i = 0; i < plain.value().size(); ++i) {
    REQUIRE(joint.value()[i] == Catch::Approx(plain.value()[i]).margin(1e-12));
  }
}

TEST_CASE("open gate with a dropped attention block annihilates the stream", "[static]") {
  auto layer = make_layer(8, 2, 6, 16);
  RngState rng(17);
  auto z = rand_tensor({2, 4, 8}, rng);
  RelaxedMasks<D> masks;
  masks.a = Tensor<D>({1, 2});
  masks.a.value() = {0, 1};  // keep weight 0, drop weight 1
  masks.m = Tensor<D>({1, 2});
  masks.m.value() = {1, 0};
  masks.h = Tensor<D>::full({1, 2, 2}, 1.0);
  masks.n = Tensor<D>::full({1, 6, 2}, 1.0);
  auto gate = uniform_gate(2, 1.0, 1.0);
  auto joint = joint_block(z, layer, masks, 0, gate);

  // literal blend: z1 = g·0·(mhsa path) + (1−g)·1·z = 0, then the FFN stage
  // runs on the zero stream
  auto z1 = Tensor<D>::zeros({2, 4, 8});
  auto executed = add(masked_ffn(layernorm(z1, layer.ln2.gain, layer.ln2.bias), layer,
                                 Tensor<D>::full({6}, 1.0)),
                      z1);
  for (size_t i = 0; i < joint.value().size(); ++i) {
    REQUIRE(joint.value()[i] == Catch::Approx(executed.value()[i]).margin(1e-12));
  }
}

TEST_CASE("the attention stage is affine in the block keep weight", "[static]") {
  auto layer = make_layer(8, 2, 6, 18);
  RngState rng(19);
  auto z = rand_tensor({2, 4, 8}, rng);
  auto at = [&](double a_keep) {
    RelaxedMasks<D> masks;
    masks.a = Tensor<D>({1, 2});
    masks.a.value() = {a_keep, 0.3};
    masks.m = Tensor<D>({1, 2});
    masks.m.value() = {0.9, 1.0};  // g1=0 and drop weight 1 make the FFN stage transparent
    masks.h = Tensor<D>::full({1, 2, 2}, 1.0);
    masks.n = Tensor<D>::full({1, 6, 2}, 1.0);
    return joint_block(z, layer, masks, 0, uniform_gate(2, 0.7, 0.0));
  };
  auto lo = at(0.0), mid = at(0.5), hi = at(1.0);
  for (size_t i = 0; i < mid.value().size(); ++i) {
    REQUIRE(mid.value()[i] ==
            Catch::Approx(0.5 * (lo.value()[i] + hi.value()[i])).margin(1e-10));
  }
}

// ---------------------------------------------------------------------------
// prune rule
// ---------------------------------------------------------------------------

TEST_CASE("units are pruned exactly when the drop logit wins", "[static]") {
  StaticParams<D> sp;
  RngState rng(20);
  sp.init(1, 2, 3, rng);
  sp.alpha_a.value() = {0.3, 0.7};            // pruned
  sp.alpha_m.value() = {0.7, 0.3};            // kept
  sp.alpha_h.value() = {0.5, 0.5, 0.2, 0.9};  // kept (tie), pruned
  sp.alpha_n.value() = {1, 0, 0, 1, 2, 2};    // kept, pruned, kept
  auto plan = derive_prune_plan(sp);
  REQUIRE_FALSE(plan.kept_mhsa[0]);
  REQUIRE(plan.kept_ffn[0]);
  REQUIRE(plan.kept_heads[0] == std::vector<bool>{true, false});
  REQUIRE(plan.kept_channels[0] == std::vector<bool>{true, false, true});
  REQUIRE(plan.layer_alive(0));
}

// ---------------------------------------------------------------------------
// physical pruning
// ---------------------------------------------------------------------------

TEST_CASE("a keep-everything plan changes nothing", "[static]") {
  auto m = make_model({.layers = 2, .heads = 2, .embed_dim = 8, .ffn_hidden = 6,
                       .image_size = 8, .patch_size = 4, .num_classes = 3},
                      21);
  const long long params = m.param_count();
  RngState rng(22);
  auto img = rand_tensor({2, 1, 8, 8}, rng);
  auto before = vit_forward(m, img);

  PrunePlan plan;
  plan.kept_mhsa = {true, true};
  plan.kept_ffn = {true, true};
  plan.kept_heads = {{true, true}, {true, true}};
  plan.kept_channels.assign(2, std::vector<bool>(6, true));
  apply_prune(m, plan);
  REQUIRE(m.param_count() == params);
  REQUIRE(vit_forward(m, img).value() == before.value());
}

TEST_CASE("pruning half the heads halves the attention parameter count", "[static]") {
  auto m = make_model({.layers = 1, .heads = 4, .embed_dim = 8, .ffn_hidden = 6,
                       .image_size = 8, .patch_size = 4, .num_classes = 3},
                      23);
  const long long before = m.layers[0].mhsa_param_count();
  PrunePlan plan;
  plan.kept_mhsa = {true};
  plan.kept_ffn = {true};
  plan.kept_heads = {{true, false, true, false}};
  plan.kept_channels.assign(1, std::vector<bool>(6, true));
  apply_prune(m, plan);
  REQUIRE(m.layers[0].head_count() == 2);
  REQUIRE(m.layers[0].mhsa_param_count() * 2 == before);
}

TEST_CASE("a fully pruned layer disappears from the model", "[static]") {
  auto m = make_model({.layers = 3, .heads = 2, .embed_dim = 8, .ffn_hidden = 6,
                       .image_size = 8, .patch_size = 4, .num_classes = 3},
                      24);
  PrunePlan plan;
  plan.kept_mhsa = {true, false, true};
  plan.kept_ffn = {true, false, false};
  plan.kept_heads.assign(3, std::vector<bool>(2, true));
  plan.kept_channels.assign(3, std::vector<bool>(6, true));
  apply_prune(m, plan);
  REQUIRE(m.layers.size() == 2);
  REQUIRE(m.layers[1].has_mhsa);
  REQUIRE_FALSE(m.layers[1].has_ffn);
}

TEST_CASE("plan shape mismatches are rejected", "[static]") {
  auto m = make_model({.layers = 2, .heads = 2, .embed_dim = 8, .ffn_hidden = 6,
                       .image_size = 8, .patch_size = 4, .num_classes = 3},
                      25);
  PrunePlan plan;
  plan.kept_mhsa = {true};
  plan.kept_ffn = {true};
  plan.kept_heads = {{true, true}};
  plan.kept_channels.assign(1, std::vector<bool>(6, true));
  REQUIRE_THROWS_AS(apply_prune(m, plan), ShapeError);
}

TEST_CASE("pruned forward equals hard-masked forward on 100 random inputs", "[static]") {
  const ViTConfig cfg{.layers = 2, .heads = 4, .embed_dim = 8, .ffn_hidden = 6,
                      .image_size = 8, .patch_size = 4, .num_classes = 3};
  RngState scenario(26);
  for (int round = 0; round < 5; ++round) {
    auto full = make_model(cfg, 100 + round);
    StaticParams<D> sp;
    RngState arng(200 + round);
    sp.init(cfg.layers, cfg.heads, cfg.ffn_hidden, arng);
    fill_normal(sp.alpha_a, 1.0, arng);
    fill_normal(sp.alpha_m, 1.0, arng);
    fill_normal(sp.alpha_h, 1.0, arng);
    fill_normal(sp.alpha_n, 1.0, arng);
    auto plan = derive_prune_plan(sp);
    auto hard = hard_masks_from_plan<D>(plan, cfg.heads, cfg.ffn_hidden);

    // a struct copy shares tensor payloads, but pruning only rebinds handles
    // to freshly built tensors, so `full` stays intact
    auto pruned = full;
    apply_prune(pruned, plan);

    for (int i = 0; i < 20; ++i) {
      auto img = rand_tensor({2, 1, 8, 8}, scenario);
      auto z = patch_embed(full, img);
      for (int l = 0; l < cfg.layers; ++l) {
        auto gate = uniform_gate(2, plan.kept_mhsa[static_cast<size_t>(l)] ? 1.0 : 0.0,
                                 plan.kept_ffn[static_cast<size_t>(l)] ? 1.0 : 0.0);
        z = joint_block(z, full.layers[static_cast<size_t>(l)], hard, l, gate);
      }
      auto masked_logits = classify(full, z);
      auto pruned_logits = vit_forward(pruned, img);
      for (size_t j = 0; j < masked_logits.value().size(); ++j) {
        REQUIRE(testutil::rel_err(masked_logits.value()[j], pruned_logits.value()[j]) < 1e-5);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

TEST_CASE("gradients reach every static mask family", "[static]") {
  const ViTConfig cfg{.layers = 2, .heads = 2, .embed_dim = 8, .ffn_hidden = 4,
                      .image_size = 8, .patch_size = 4, .num_classes = 3};
  auto m = make_model(cfg, 27);
  StaticParams<D> sp;
  RngState arng(28);
  sp.init(cfg.layers, cfg.heads, cfg.ffn_hidden, arng);
  RngState drng(29);
  auto img = rand_tensor({2, 1, 8, 8}, drng);
  auto w = rand_tensor({2, 3}, drng);

  auto fn = [&] {
    RngState noise(55);  // frozen Gumbel draws per call
    auto masks = relax_masks(sp, noise);
    auto z = patch_embed(m, img);
    for (int l = 0; l < cfg.layers; ++l) {
      auto gate = uniform_gate(2, 0.8, 0.6);  // fixed soft gates isolate the masks
      z = joint_block(z, m.layers[static_cast<size_t>(l)], masks, l, gate);
    }
    return sum(mul(classify(m, z), w));
  };
  auto rep = testutil::fd_check(fn, {&sp.alpha_a, &sp.alpha_m, &sp.alpha_h, &sp.alpha_n}, 1e-5, 12);
  REQUIRE(rep.max_rel_err < 1e-4);

  // the analytic gradient is not just correct but nonzero for every family
  for (Tensor<D>* t : {&sp.alpha_a, &sp.alpha_m, &sp.alpha_h, &sp.alpha_n}) {
    t->set_requires_grad(true);
    t->zero_grad();
  }
  {
    Tape<D> tape;
    Tape<D>::Scope scope(tape);
    auto loss = fn();
    tape.backward(loss);
  }
  for (Tensor<D>* t : {&sp.alpha_a, &sp.alpha_m, &sp.alpha_h, &sp.alpha_n}) {
    double norm = 0;
    for (double g : t->grad()) norm += g * g;
    REQUIRE(norm > 0.0);
    t->set_requires_grad(false);
  }
}
