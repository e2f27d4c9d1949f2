#include <gtest/gtest.h>

#include <cmath>

#include "reference.hpp"
#include "sfslots/decoder.hpp"
#include "sfslots/slot_attention.hpp"
#include "support.hpp"

using namespace sfsl;
using namespace sfsl::test::ref;
using sfsl::test::finite_difference_check;
using sfsl::test::project;
using sfsl::test::random_tensor;

namespace {

DecoderConfig small_cfg(std::size_t layers = 2, std::size_t heads = 1) {
  DecoderConfig c;
  c.positions = 5;
  c.slot_dim = 4;
  c.dim = 4;
  c.out_dim = 3;
  c.layers = layers;
  c.heads = heads;
  c.ff_hidden = 6;
  return c;
}

Mat reference_decode(const ParamStore<double>& st, const std::string& n, const Mat& slots,
                     const DecoderConfig& cfg) {
  auto P = [&](const std::string& k) { return to_mat(st.get(n + "." + k).value()); };
  auto V = [&](const std::string& k) { return to_vec(st.get(n + "." + k).value()); };
  auto kv = ln(slots, V("norm_slots.g"), V("norm_slots.b"));
  Mat x = P("queries");
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    auto qn = ln(x, V(p + "norm_q.g"), V(p + "norm_q.b"));
    auto [att, w] = mha(mm(qn, P(p + "q.w")), mm(kv, P(p + "k.w")), mm(kv, P(p + "v.w")), cfg.heads);
    x = plus(x, bias(mm(att, P(p + "o.w")), V(p + "o.b")));
    auto h = gelu_sigmoid(bias(mm(ln(x, V(p + "norm_ff.g"), V(p + "norm_ff.b")), P(p + "ff.fc1.w")),
                               V(p + "ff.fc1.b")));
    x = plus(x, bias(mm(h, P(p + "ff.fc2.w")), V(p + "ff.fc2.b")));
  }
  return bias(mm(ln(x, V("norm_out.g"), V("norm_out.b")), P("head.w")), V("head.b"));
}

}  // namespace

TEST(Decoder, OutputShape) {
  ParamStore<float> st(1);
  DecoderConfig cfg;
  ReconDecoder<float> dec(st, "dec", cfg);
  auto out = dec(VarF::constant(TensorF(Shape{8, cfg.slot_dim}, 0.1f)));
  EXPECT_EQ(out.features.dims(), (Shape{cfg.positions, cfg.out_dim}));
  ASSERT_EQ(out.attention.size(), cfg.layers);
  EXPECT_EQ(out.attention[0].dims(), (Shape{cfg.positions, 8}));
}

TEST(Decoder, MatchesLoopReference) {
  Rng rng(2);
  for (int trial = 0; trial < 6; ++trial) {
    auto cfg = small_cfg(1 + trial % 2, trial % 2 ? 2 : 1);
    ParamStore<double> st(trial);
    ReconDecoder<double> dec(st, "dec", cfg);
    randomize(st, rng);
    auto slots = random_tensor(Shape{3, 4}, rng);
    auto out = dec(VarD::constant(slots)).features.value();
    auto ref = reference_decode(st, "dec", to_mat(slots), cfg);
    for (std::size_t r = 0; r < cfg.positions; ++r)
      for (std::size_t c = 0; c < cfg.out_dim; ++c) EXPECT_NEAR(out.at(r, c), ref[r][c], 1e-10);
  }
}

TEST(Decoder, ZeroHeadEmitsBias) {
  Rng rng(3);
  ParamStore<double> st(3);
  auto cfg = small_cfg();
  ReconDecoder<double> dec(st, "dec", cfg);
  randomize(st, rng);
  st.get("dec.head.w").mutable_value() = TensorD(Shape{cfg.dim, cfg.out_dim});
  const auto b = st.get("dec.head.b").value();
  auto out = dec(VarD::constant(random_tensor(Shape{4, 4}, rng))).features.value();
  for (std::size_t r = 0; r < cfg.positions; ++r)
    for (std::size_t c = 0; c < cfg.out_dim; ++c) EXPECT_EQ(out.at(r, c), b[c]);
}

TEST(Decoder, SingleSlotGetsAllAttention) {
  Rng rng(4);
  ParamStore<double> st(4);
  ReconDecoder<double> dec(st, "dec", small_cfg(2, 2));
  randomize(st, rng);
  auto out = dec(VarD::constant(random_tensor(Shape{1, 4}, rng)));
  for (const auto& a : out.attention)
    for (double v : a.value().data()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Decoder, TwoSlotAttentionHandTrace) {
  // One layer, one head, identity projections and unit queries: logits are
  // q . ln(s) / 2 with ln(s) = +-(1,-1,1,-1) up to the layer-norm epsilon.
  auto cfg = small_cfg(1, 1);
  cfg.positions = 2;
  ParamStore<double> st(5);
  ReconDecoder<double> dec(st, "dec", cfg);
  auto eye = TensorD::matrix({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
  st.get("dec.layer0.q.w").mutable_value() = eye;
  st.get("dec.layer0.k.w").mutable_value() = eye;
  st.get("dec.queries").mutable_value() = TensorD::matrix({{1, -1, 1, -1}, {1, 1, -1, -1}});
  auto slots = TensorD::matrix({{2, 0, 2, 0}, {0, 2, 0, 2}});
  auto w = dec(VarD::constant(slots)).attention[0].value();
  const double s = 1.0 / std::sqrt(1.0 + kLayerNormEps);
  const double logit = 4.0 * s * s / 2.0;
  const double p = 1.0 / (1.0 + std::exp(-2.0 * logit));
  EXPECT_NEAR(w.at(0, 0), p, 1e-12);
  EXPECT_NEAR(w.at(0, 1), 1.0 - p, 1e-12);
  // Second query is orthogonal to both normalized slots.
  EXPECT_NEAR(w.at(1, 0), 0.5, 1e-12);
  EXPECT_NEAR(w.at(1, 1), 0.5, 1e-12);
}

TEST(Decoder, InvariantToSlotOrder) {
  Rng rng(6);
  ParamStore<double> st(6);
  ReconDecoder<double> dec(st, "dec", small_cfg(2, 2));
  randomize(st, rng);
  auto slots = VarD::constant(random_tensor(Shape{4, 4}, rng));
  auto a = dec(slots).features.value();
  auto b = dec(gather_rows(slots, {3, 1, 0, 2})).features.value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Decoder, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    ParamStore<double> st(trial);
    ReconDecoder<double> dec(st, "dec", small_cfg(2, 2));
    randomize(st, rng, 0.3);
    auto slots = VarD::parameter(random_tensor(Shape{3, 4}, rng));
    std::vector<VarD> inputs{slots};
    for (const auto& [n, v] : st.entries()) inputs.push_back(v);
    auto rep = finite_difference_check([&] { return project(dec(slots).features, 11); }, inputs, 1e-5, 1e-4,
                                       300, trial, 1e-3);
    EXPECT_EQ(rep.passed, rep.checked) << "worst " << rep.worst;
  }
}

TEST(Decoder, RejectsBadConfigAndShapes) {
  ParamStore<float> st(8);
  auto cfg = small_cfg();
  cfg.heads = 3;
  EXPECT_THROW(ReconDecoder<float>(st, "a", cfg), ConfigError);
  cfg = small_cfg();
  cfg.positions = 0;
  EXPECT_THROW(ReconDecoder<float>(st, "b", cfg), ConfigError);
  ReconDecoder<float> dec(st, "c", small_cfg());
  EXPECT_THROW(dec(VarF::constant(TensorF(Shape{2, 5}))), ShapeError);
}

TEST(ReconLoss, HandComputedValue) {
  auto p = VarD::constant(TensorD::matrix({{1, 2}, {3, 4}}));
  auto t = VarD::constant(TensorD::matrix({{1, 0}, {0, 4}}));
  EXPECT_DOUBLE_EQ(recon_loss(p, t).item(), (0.0 + 4.0 + 9.0 + 0.0) / 4.0);
}

TEST(ReconLoss, NonNegativeAndZeroIffEqual) {
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    auto a = random_tensor(Shape{3, 5}, rng);
    auto b = random_tensor(Shape{3, 5}, rng);
    EXPECT_GT(recon_loss(VarD::constant(a), VarD::constant(b)).item(), 0.0);
    EXPECT_EQ(recon_loss(VarD::constant(a), VarD::constant(a)).item(), 0.0);
    b = a;
    b[i % 15] += 1e-3;
    EXPECT_GT(recon_loss(VarD::constant(a), VarD::constant(b)).item(), 0.0);
  }
  EXPECT_THROW(recon_loss(VarD::constant(TensorD(Shape{2, 2})), VarD::constant(TensorD(Shape{2, 3}))),
               ShapeError);
}

TEST(ReconLoss, GradientReachesInitialSlots) {
  Rng rng(10);
  ParamStore<double> st(10);
  SlotAttentionConfig sc;
  sc.num_slots = 3;
  sc.input_dim = 4;
  sc.slot_dim = 4;
  sc.mlp_hidden = 8;
  SlotAttention<double> sa(st, "sa", sc);
  auto dcfg = small_cfg();
  dcfg.positions = 6;
  dcfg.out_dim = 4;
  ReconDecoder<double> dec(st, "dec", dcfg);
  auto x = VarD::constant(random_tensor(Shape{6, 4}, rng));
  backward(recon_loss(dec(sa(x).slots).features, x));
  double norm = 0;
  for (double g : sa.init_slots().grad().data()) norm += g * g;
  EXPECT_GT(norm, 0.0);
  for (double g : sa.init_slots().grad().data()) EXPECT_TRUE(std::isfinite(g));
}
