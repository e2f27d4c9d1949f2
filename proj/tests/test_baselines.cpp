#include <gtest/gtest.h>

#include <cmath>

#include "sfslots/baselines.hpp"
#include "sfslots/query_transformer.hpp"
#include "reference.hpp"
#include "support.hpp"

using namespace sfsl;
using sfsl::test::finite_difference_check;
using sfsl::test::project;
using sfsl::test::random_tensor;

namespace {

using namespace sfsl::test::ref;

struct QfRef {
  Mat tokens;
  Mat mask;  // [M x Nq], head-averaged
};

QfRef reference_query_transformer(const ParamStore<double>& st, const std::string& n, const Mat& inputs,
                                  const QueryTransformerConfig& cfg) {
  auto P = [&](const std::string& k) { return to_mat(st.get(n + "." + k).value()); };
  auto V = [&](const std::string& k) { return to_vec(st.get(n + "." + k).value()); };
  auto x = ln(inputs, V("norm_in.g"), V("norm_in.b"));
  Mat q = P("queries");
  QfRef out;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    auto qn = ln(q, V(p + "norm_cross.g"), V(p + "norm_cross.b"));
    auto [co, cw] = mha(mm(qn, P(p + "cross_q.w")), mm(x, P(p + "cross_k.w")), mm(x, P(p + "cross_v.w")), cfg.heads);
    q = plus(q, bias(mm(co, P(p + "cross_o.w")), V(p + "cross_o.b")));
    auto sn = ln(q, V(p + "norm_self.g"), V(p + "norm_self.b"));
    auto [so, sw] = mha(mm(sn, P(p + "self_q.w")), mm(sn, P(p + "self_k.w")), mm(sn, P(p + "self_v.w")), cfg.heads);
    q = plus(q, bias(mm(so, P(p + "self_o.w")), V(p + "self_o.b")));
    auto h = gelu_sigmoid(
        bias(mm(ln(q, V(p + "norm_ff.g"), V(p + "norm_ff.b")), P(p + "ff.fc1.w")), V(p + "ff.fc1.b")));
    q = plus(q, bias(mm(h, P(p + "ff.fc2.w")), V(p + "ff.fc2.b")));
    if (l + 1 == cfg.layers) {
      out.mask.assign(inputs.size(), std::vector<double>(cfg.num_queries, 0.0));
      for (const auto& w : cw)
        for (std::size_t i = 0; i < cfg.num_queries; ++i)
          for (std::size_t j = 0; j < inputs.size(); ++j) out.mask[j][i] += w[i][j] / double(cfg.heads);
    }
  }
  out.tokens = q;
  return out;
}

QueryTransformerConfig qcfg(std::size_t nq, std::size_t layers, std::size_t heads, std::size_t din = 3,
                            std::size_t dim = 4) {
  QueryTransformerConfig c;
  c.num_queries = nq;
  c.layers = layers;
  c.heads = heads;
  c.input_dim = din;
  c.dim = dim;
  c.ff_hidden = 2 * dim;
  return c;
}

}  // namespace

TEST(Pooling, TokenCountMatchesVideoChatGptStyle) {
  EXPECT_EQ(PoolingConnector<float>::token_count(100, 16, 16), 356u);
  ParamStore<float> st(1);
  PoolingConnector<float> pc(st, 4, 6);
  VideoFeatures<float> v{TensorF(Shape{100, 16, 16, 4}, 0.5f)};
  EXPECT_EQ(pc(v).dims(), (Shape{356, 6}));
}

TEST(Pooling, ConstantInputPoolsToConstant) {
  ParamStore<float> st(2);
  PoolingConnector<float> pc(st, 3, 5);
  VideoFeatures<float> v{TensorF(Shape{4, 2, 3, 3}, 0.25f)};
  auto p = pc.pool(v).value();
  ASSERT_EQ(p.dims(), (Shape{4 + 6, 3}));
  for (auto x : p.data()) EXPECT_FLOAT_EQ(x, 0.25f);
}

TEST(Pooling, TemporalMeanOfTwoFrames) {
  ParamStore<double> st(3);
  PoolingConnector<double> pc(st, 1, 2);
  VideoFeatures<double> v{TensorD(Shape{2, 1, 1, 1}, std::vector<double>{1.0, 3.0})};
  auto p = pc.pool(v).value();
  ASSERT_EQ(p.dims(), (Shape{3, 1}));
  EXPECT_DOUBLE_EQ(p[0], 1.0);  // spatial mean of frame 0
  EXPECT_DOUBLE_EQ(p[1], 3.0);  // spatial mean of frame 1
  EXPECT_DOUBLE_EQ(p[2], 2.0);  // temporal mean of the single cell
}

TEST(Pooling, SpatialAndTemporalMeansOnRandomInput) {
  Rng rng(4);
  ParamStore<double> st(4);
  PoolingConnector<double> pc(st, 2, 2);
  VideoFeatures<double> v{random_tensor(Shape{3, 2, 2, 2}, rng)};
  auto p = pc.pool(v).value();
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0;
      for (std::size_t k = 0; k < 4; ++k) m += v.grid[(t * 4 + k) * 2 + c];
      EXPECT_NEAR(p.at(t, c), m / 4, 1e-12);
    }
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0;
      for (std::size_t t = 0; t < 3; ++t) m += v.grid[(t * 4 + k) * 2 + c];
      EXPECT_NEAR(p.at(3 + k, c), m / 3, 1e-12);
    }
  EXPECT_THROW(pc.pool(VideoFeatures<double>{TensorD(Shape{1, 1, 1, 3})}), ShapeError);
}

TEST(QueryTransformer, MatchesLoopReference) {
  Rng rng(5);
  for (int trial = 0; trial < 8; ++trial) {
    auto cfg = qcfg(1 + trial % 3, 1 + trial % 2, trial % 2 ? 2 : 1);
    ParamStore<double> st(trial);
    QueryTransformer<double> qt(st, "qt", cfg);
    randomize(st, rng);
    auto x = random_tensor(Shape{5, 3}, rng);
    auto out = qt(VarD::constant(x));
    auto ref = reference_query_transformer(st, "qt", to_mat(x), cfg);
    for (std::size_t i = 0; i < cfg.num_queries; ++i)
      for (std::size_t c = 0; c < cfg.dim; ++c) EXPECT_NEAR(out.tokens.value().at(i, c), ref.tokens[i][c], 1e-10);
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t i = 0; i < cfg.num_queries; ++i) EXPECT_NEAR(out.mask.value().at(j, i), ref.mask[j][i], 1e-12);
  }
}

TEST(QueryTransformer, ThreeInputTwoQueryHandTrace) {
  // One layer, one head; cross-attention weights traced by hand.
  auto cfg = qcfg(2, 1, 1, 2, 2);
  ParamStore<double> st(6);
  QueryTransformer<double> qt(st, "qt", cfg);
  auto set = [&](const std::string& name, std::vector<double> vals) {
    auto v = st.get("qt." + name);
    v.mutable_value() = TensorD(v.dims(), std::move(vals));
  };
  set("queries", {1, 0, 0, 1});
  set("layer0.cross_q.w", {1, 0, 0, 1});
  set("layer0.cross_k.w", {1, 0, 0, 1});
  auto x = TensorD::matrix({{2, 0}, {0, 2}, {1, 1}});
  auto out = qt(VarD::constant(x));
  // Normalized inputs: (1,-1), (-1,1), (0,0) up to eps; normalized queries
  // (1,-1), (-1,1). Logits q.k / sqrt(2).
  const double a = 1.0 / std::sqrt(1.0 + kLayerNormEps), b = 1.0 / std::sqrt(1.0 + 4 * kLayerNormEps);
  const double hi = 2 * a * b / std::sqrt(2.0);
  const double e_hi = std::exp(hi), e_lo = std::exp(-hi), e_0 = 1.0;
  const double z = e_hi + e_lo + e_0;
  const auto& m = out.mask.value();
  EXPECT_NEAR(m.at(0, 0), e_hi / z, 1e-12);
  EXPECT_NEAR(m.at(1, 0), e_lo / z, 1e-12);
  EXPECT_NEAR(m.at(2, 0), e_0 / z, 1e-12);
  EXPECT_NEAR(m.at(0, 1), e_lo / z, 1e-12);
  EXPECT_NEAR(m.at(1, 1), e_hi / z, 1e-12);
  EXPECT_NEAR(m.at(2, 1), e_0 / z, 1e-12);
}

TEST(QueryTransformer, SingleQueryReadsWeightedMean) {
  // Nq=1, one layer, value/output projections identity, self-attention and
  // feed-forward zeroed: the token is query + attention-weighted mean of the
  // normalized inputs.
  auto cfg = qcfg(1, 1, 1, 2, 2);
  ParamStore<double> st(7);
  QueryTransformer<double> qt(st, "qt", cfg);
  Rng rng(7);
  randomize(st, rng);
  auto set = [&](const std::string& name, std::vector<double> vals) {
    auto v = st.get("qt." + name);
    v.mutable_value() = TensorD(v.dims(), std::move(vals));
  };
  set("norm_in.g", {1, 1});
  set("norm_in.b", {0, 0});
  set("layer0.cross_v.w", {1, 0, 0, 1});
  set("layer0.cross_o.w", {1, 0, 0, 1});
  set("layer0.cross_o.b", {0, 0});
  set("layer0.self_o.w", std::vector<double>(4, 0.0));
  set("layer0.ff.fc2.w", std::vector<double>(8, 0.0));
  set("layer0.self_o.b", {0, 0});
  set("layer0.ff.fc2.b", {0, 0});
  auto x = random_tensor(Shape{6, 2}, rng);
  auto out = qt(VarD::constant(x));
  auto xn = ln(to_mat(x), {1, 1}, {0, 0});
  const auto q0 = st.get("qt.queries").value();
  for (std::size_t c = 0; c < 2; ++c) {
    double acc = q0[c];
    for (std::size_t j = 0; j < 6; ++j) acc += out.mask.value().at(j, 0) * xn[j][c];
    EXPECT_NEAR(out.tokens.value()[c], acc, 1e-12);
  }
}

TEST(QueryTransformer, MaskColumnsSumToOnePerHead) {
  Rng rng(8);
  ParamStore<float> st(8);
  QueryTransformer<float> qt(st, "qt", qcfg(4, 2, 2, 5, 8));
  auto out = qt(VarF::constant(sfsl::test::random_tensor_f(Shape{11, 5}, rng, 2.0)));
  ASSERT_EQ(out.cross_masks.size(), 2u);
  for (const auto& w : out.cross_masks)
    for (std::size_t c = 0; c < 4; ++c) {
      double s = 0;
      for (std::size_t r = 0; r < 11; ++r) s += w.value().at(r, c);
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
}

TEST(QueryTransformer, GradientsMatchFiniteDifferences) {
  Rng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    ParamStore<double> st(trial);
    QueryTransformer<double> qt(st, "qt", qcfg(3, 2, 2, 3, 4));
    auto x = VarD::parameter(random_tensor(Shape{5, 3}, rng));
    std::vector<VarD> inputs{x};
    for (const auto& [n, v] : st.entries()) inputs.push_back(v);
    auto rep = finite_difference_check(
        [&] {
          auto o = qt(x);
          return add(project(o.tokens, 3), project(o.mask, 4));
        },
        inputs, 1e-5, 1e-4, 300, trial, 1e-3);
    EXPECT_EQ(rep.passed, rep.checked) << "worst " << rep.worst;
  }
}

TEST(QueryTransformer, RejectsBadConfigAndShapes) {
  ParamStore<float> st(10);
  EXPECT_THROW(QueryTransformer<float>(st, "a", qcfg(0, 1, 1)), ConfigError);
  EXPECT_THROW(QueryTransformer<float>(st, "b", qcfg(2, 1, 3)), ConfigError);
  QueryTransformer<float> qt(st, "c", qcfg(2, 1, 1));
  EXPECT_THROW(qt(VarF::constant(TensorF(Shape{4, 2}))), ShapeError);
}
