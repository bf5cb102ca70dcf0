#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "fusionprobe/fusion.hpp"
#include "fusionprobe/grad_check.hpp"
#include "fusionprobe/model.hpp"
#include "helpers.hpp"

using namespace fprobe;
using testutil::clip_of;
using testutil::code_of;
using testutil::randn;
using testutil::randnf;

namespace {

FusionHeadConfig head_cfg(FusionKind kind, std::size_t D = 16) {
  FusionHeadConfig c;
  c.kind = kind;
  c.model_dim = D;
  c.num_heads = 4;
  c.max_frames = 16;
  c.seed = 3;
  return c;
}

struct BoundHead {
  ParameterStore<double> store;
  std::optional<FusionHead<double>> head;

  explicit BoundHead(const FusionHeadConfig& cfg, bool randomize = false) {
    std::mt19937_64 rng(cfg.seed);
    head.emplace(cfg, store, rng);
    if (randomize) randomize_parameters(store, cfg.seed + 50, 0.3);
  }

  Tensor<double> run(const Tensor<double>& x, std::optional<std::size_t> cls) {
    Graph<double> g;
    auto p = store.bind(g, false);
    return head->forward(p, g.constant(x), cls).value();
  }

  /// Trace values copied out before the graph goes away.
  struct Traced {
    std::vector<Tensor<double>> attention;
    std::optional<Tensor<double>> token_weights;
  };

  Traced trace(const Tensor<double>& x, std::optional<std::size_t> cls) {
    Graph<double> g;
    auto p = store.bind(g, false);
    FusionTrace<double> t;
    head->forward(p, g.constant(x), cls, &t);
    Traced out;
    for (const auto& a : t.attention) out.attention.push_back(a.value());
    if (t.token_weights) out.token_weights = t.token_weights->value();
    return out;
  }
};

Tensor<double> permute_frames(const Tensor<double>& x, const std::vector<std::size_t>& perm) {
  const std::size_t row = x.size() / x.dim(0);
  Tensor<double> out(x.shape());
  for (std::size_t t = 0; t < perm.size(); ++t)
    std::copy_n(x.vec().begin() + static_cast<std::ptrdiff_t>(perm[t] * row), row,
                out.data().begin() + static_cast<std::ptrdiff_t>(t * row));
  return out;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

class EveryHead : public ::testing::TestWithParam<FusionKind> {};

TEST_P(EveryHead, OutputShape) {
  const auto kind = GetParam();
  BoundHead h(head_cfg(kind));
  const auto y = h.run(randn({6, 5, 16}, 1), 0);
  EXPECT_EQ(y.shape(), (Shape{16}));
  EXPECT_EQ(h.head->output_dim(), 16u);
  EXPECT_TRUE(y.all_finite());
}

TEST_P(EveryHead, GradientCheck) {
  ModelConfig mc;
  mc.head.kind = GetParam();
  mc.head.model_dim = 8;
  mc.head.num_heads = 2;
  mc.head.max_frames = 4;
  mc.classes = {"a", "b", "c"};
  Model<double> model(mc);
  randomize_parameters(model.params(), 17);
  const auto r = grad_check_model(model, random_clip(4, 5, 8, 3, 18));
  EXPECT_LT(r.max_relative_error, 1e-3) << r.worst;
  EXPECT_EQ(r.checked, model.params().scalar_count());
}

TEST_P(EveryHead, FrameOrderSensitivity) {
  const auto kind = GetParam();
  auto cfg = head_cfg(kind);
  cfg.use_positions = false;
  BoundHead h(cfg, true);
  const auto x = randn({6, 5, 16}, 2);
  const auto y = h.run(x, 0);
  const auto yp = h.run(permute_frames(x, {3, 0, 5, 1, 4, 2}), 0);
  if (is_order_invariant(kind))
    EXPECT_LT(max_abs_diff(y, yp), 1e-5);
  else
    EXPECT_GT(max_abs_diff(y, yp), 1e-3);
}

INSTANTIATE_TEST_SUITE_P(Heads, EveryHead, ::testing::ValuesIn(kAllFusionKinds),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(FusionHead, PositionsBreakAttentionInvariance) {
  BoundHead h(head_cfg(FusionKind::kSelfAttnAllAvg), true);
  const auto x = randn({6, 5, 16}, 2);
  EXPECT_GT(max_abs_diff(h.run(x, 0), h.run(permute_frames(x, {3, 0, 5, 1, 4, 2}), 0)), 1e-3);
}

TEST(FusionHead, PoolingValues) {
  Tensor<double> x({2, 2, 2}, {1, 2, 3, 4, 5, -6, 7, 8});
  BoundHead avg(head_cfg(FusionKind::kAvgPool, 2));
  BoundHead mx(head_cfg(FusionKind::kMaxPool, 2));
  // No CLS: frame descriptors are token means (2,3) and (6,1).
  EXPECT_EQ(avg.run(x, std::nullopt).vec(), (std::vector<double>{4, 2}));
  EXPECT_EQ(mx.run(x, std::nullopt).vec(), (std::vector<double>{6, 3}));
  // CLS at token 1: descriptors (3,4) and (7,8).
  EXPECT_EQ(avg.run(x, 1).vec(), (std::vector<double>{5, 6}));
  EXPECT_EQ(mx.run(x, 1).vec(), (std::vector<double>{7, 8}));
}

TEST(FusionHead, IdentityAtInit) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto cfg = head_cfg(FusionKind::kSelfAttnAllAvg);
    cfg.use_positions = false;
    cfg.seed = seed;
    BoundHead attn_avg(cfg);
    cfg.kind = FusionKind::kSelfAttnAllMax;
    BoundHead attn_max(cfg);
    BoundHead avg(head_cfg(FusionKind::kAvgPool));
    BoundHead mx(head_cfg(FusionKind::kMaxPool));
    const auto x = randn({6, 5, 16}, 100 + seed);
    EXPECT_EQ(attn_avg.run(x, std::nullopt), avg.run(x, std::nullopt));
    const auto x1 = randn({6, 1, 16}, 200 + seed);
    EXPECT_EQ(attn_avg.run(x1, std::nullopt), avg.run(x1, std::nullopt));
    EXPECT_EQ(attn_max.run(x1, std::nullopt), mx.run(x1, std::nullopt));
    const auto y = attn_max.run(x, std::nullopt);
    for (std::size_t d = 0; d < 16; ++d) {
      double m = -1e300;
      for (std::size_t i = 0; i < 30; ++i) m = std::max(m, x[i * 16 + d]);
      EXPECT_EQ(y[d], m);
    }
  }
}

TEST(FusionHead, PoolClsOutputs) {
  auto cfg = head_cfg(FusionKind::kSelfAttnAllAvg);
  cfg.use_positions = false;
  cfg.pool_cls_outputs = true;
  BoundHead h(cfg);
  BoundHead avg(head_cfg(FusionKind::kAvgPool));
  const auto x = randn({4, 5, 16}, 9);
  // At init the block is the identity, so pooled CLS outputs equal avg_pool over CLS descriptors.
  EXPECT_EQ(h.run(x, 2), avg.run(x, 2));
}

TEST(FusionHead, AttentionRowsSumToOne) {
  for (FusionKind kind : {FusionKind::kSelfAttnAllAvg, FusionKind::kSelfAttnClsMax, FusionKind::kCrossAttnAll,
                          FusionKind::kWeightedSelfAttn}) {
    BoundHead h(head_cfg(kind), true);
    const auto trace = h.trace(randn({5, 3, 16}, 4), 0);
    ASSERT_FALSE(trace.attention.empty());
    const auto& a = trace.attention.front();
    const std::size_t H = a.dim(0), Q = a.dim(1), K = a.dim(2);
    EXPECT_EQ(H, 4u);
    for (std::size_t r = 0; r < H * Q; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        EXPECT_GE(a[r * K + k], 0.0);
        s += a[r * K + k];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    if (kind == FusionKind::kCrossAttnAll) {
      EXPECT_EQ(Q, 1u);
    }
    if (kind == FusionKind::kCrossAttnAll || kind == FusionKind::kSelfAttnAllAvg) {
      EXPECT_EQ(K, 15u);
    }
    if (kind == FusionKind::kWeightedSelfAttn) {
      ASSERT_TRUE(trace.token_weights.has_value());
      double s = 0.0;
      for (double w : (*trace.token_weights).vec()) s += w;
      EXPECT_NEAR(s, 1.0, 1e-12);
      EXPECT_EQ((*trace.token_weights).size(), 5u);
    }
  }
}

TEST(FusionHead, WeightedAttentionIsWeightedMeanAtInit) {
  auto cfg = head_cfg(FusionKind::kWeightedSelfAttn);
  cfg.use_positions = false;
  BoundHead h(cfg);
  const auto x = randn({5, 3, 16}, 12);
  const auto y = h.run(x, 0);
  const auto w = *h.trace(x, 0).token_weights;
  for (std::size_t d = 0; d < 16; ++d) {
    double expected = 0.0;
    for (std::size_t t = 0; t < 5; ++t) expected += w[t] * x[(t * 3 + 0) * 16 + d];
    EXPECT_NEAR(y[d], expected, 1e-12);
  }
}

TEST(FusionHead, ClsVariantsNeedCls) {
  for (FusionKind kind : {FusionKind::kSelfAttnClsAvg, FusionKind::kSelfAttnClsMax, FusionKind::kCrossAttnCls}) {
    BoundHead h(head_cfg(kind));
    EXPECT_EQ(code_of([&] { h.run(randn({3, 4, 16}, 1), std::nullopt); }), ErrorCode::kNoCls);
  }
}

TEST(FusionHead, ConfigErrors) {
  auto cfg = head_cfg(FusionKind::kSelfAttnAllAvg);
  cfg.num_heads = 5;
  EXPECT_EQ(code_of([&] { BoundHead h(cfg); }), ErrorCode::kInvalidArgument);
  cfg = head_cfg(FusionKind::kCrossAttnAll);
  cfg.max_frames = 4;
  BoundHead h(cfg);
  EXPECT_EQ(code_of([&] { h.run(randn({5, 2, 16}, 1), 0); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([&] { h.run(randn({3, 2, 8}, 1), 0); }), ErrorCode::kDimension);
  EXPECT_EQ(code_of([] { parse_fusion_kind("mean_pool"); }), ErrorCode::kInvalidArgument);
}

TEST(FusionHead, ConfigJsonRoundTrip) {
  auto cfg = head_cfg(FusionKind::kTcn);
  cfg.tcn_levels = 4;
  cfg.hidden_dim = 7;
  const auto back = head_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
  EXPECT_EQ(back.output_dim(), 7u);
  for (FusionKind k : kAllFusionKinds) EXPECT_EQ(parse_fusion_kind(std::string(to_string(k))), k);
}

TEST(Lstm, MatchesScalarReference) {
  auto cfg = head_cfg(FusionKind::kLstm, 2);
  cfg.hidden_dim = 3;
  BoundHead h(cfg, true);
  const auto x = randn({4, 1, 2}, 21);
  const auto y = h.run(x, std::nullopt);
  ASSERT_EQ(y.size(), 3u);

  const char* gates[] = {"i", "f", "g", "o"};
  std::vector<double> hs(3, 0.0), cs(3, 0.0);
  for (std::size_t t = 0; t < 4; ++t) {
    std::array<std::vector<double>, 4> pre;
    for (std::size_t k = 0; k < 4; ++k) {
      const auto& W = h.store.value(std::string("head.lstm.w_") + gates[k]);
      const auto& U = h.store.value(std::string("head.lstm.u_") + gates[k]);
      const auto& b = h.store.value(std::string("head.lstm.b_") + gates[k]);
      pre[k].assign(3, 0.0);
      for (std::size_t j = 0; j < 3; ++j) {
        double s = b[j];
        for (std::size_t d = 0; d < 2; ++d) s += x[t * 2 + d] * W[d * 3 + j];
        for (std::size_t i = 0; i < 3; ++i) s += hs[i] * U[i * 3 + j];
        pre[k][j] = s;
      }
    }
    for (std::size_t j = 0; j < 3; ++j) {
      const double i = sigmoid_ref(pre[0][j]), f = sigmoid_ref(pre[1][j]), g = std::tanh(pre[2][j]);
      cs[j] = f * cs[j] + i * g;
    }
    for (std::size_t j = 0; j < 3; ++j) hs[j] = sigmoid_ref(pre[3][j]) * std::tanh(cs[j]);
  }
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(y[j], hs[j], 1e-12);
}

TEST(Tcn, ReceptiveField) {
  for (std::size_t levels : {1u, 2u}) {
    for (std::size_t k : {2u, 3u}) {
      auto cfg = head_cfg(FusionKind::kTcn, 4);
      cfg.tcn_levels = levels;
      cfg.tcn_kernel = k;
      BoundHead h(cfg, true);
      const std::size_t rf = 1 + 2 * (k - 1) * ((std::size_t{1} << levels) - 1);
      const std::size_t T = rf + 3;
      Graph<double> g;
      auto p = h.store.bind(g, false);
      auto x = g.leaf(randn({T, 1, 4}, 31));
      auto y = h.head->forward(p, x, std::nullopt);
      g.backward(sum(mul(y, g.constant(randn({4}, 32)))));
      const auto grad = g.grad(x);
      for (std::size_t t = 0; t < T; ++t) {
        double mag = 0.0;
        for (std::size_t d = 0; d < 4; ++d) mag += std::abs(grad[t * 4 + d]);
        if (T - 1 - t >= rf)
          EXPECT_EQ(mag, 0.0) << "levels " << levels << " k " << k << " t " << t;
        else
          EXPECT_GT(mag, 0.0) << "levels " << levels << " k " << k << " t " << t;
      }
    }
  }
}

TEST(Model, ClipLevelBypassesFusion) {
  ModelConfig mc;
  mc.head.kind = FusionKind::kLstm;
  mc.head.model_dim = 6;
  mc.classes = {"a", "b"};
  mc.clip_level = true;
  Model<float> model(mc);
  for (const auto& p : model.params()) EXPECT_EQ(p.name.rfind("probe.", 0), 0u) << p.name;
  auto clip = clip_of(randnf({1, 1, 6}, 3), std::nullopt);
  clip.clip_level = true;
  EXPECT_EQ(model.feature(clip).vec(), clip.tokens.vec());
  auto bad = clip_of(randnf({2, 1, 6}, 3), std::nullopt);
  EXPECT_EQ(code_of([&] { model.feature(bad); }), ErrorCode::kDimension);
}

TEST(Model, ConstructionIsDeterministic) {
  ModelConfig mc;
  mc.head = head_cfg(FusionKind::kSelfAttnAllAvg);
  mc.classes = {"a", "b", "c"};
  Model<float> a(mc), b(mc);
  EXPECT_TRUE(a.params() == b.params());
  mc.head.seed = 4;
  Model<float> c(mc);
  EXPECT_FALSE(a.params() == c.params());
}
