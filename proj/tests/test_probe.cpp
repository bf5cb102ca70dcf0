#include <cmath>

#include <gtest/gtest.h>

#include "fusionprobe/evaluator.hpp"
#include "fusionprobe/probe.hpp"
#include "fusionprobe/synth.hpp"
#include "fusionprobe/trainer.hpp"
#include "helpers.hpp"

using namespace fprobe;
using testutil::code_of;
using testutil::randn;
using testutil::TempDir;

namespace {

struct BoundProbe {
  ParameterStore<double> store;
  std::optional<Probe<double>> probe;

  explicit BoundProbe(ProbeConfig cfg) {
    std::mt19937_64 rng(4);
    probe.emplace(cfg, store, rng);
  }

  Tensor<double> logits(const Tensor<double>& f) {
    Graph<double> g;
    auto p = store.bind(g, false);
    return probe->logits(p, g.constant(f)).value();
  }
};

}  // namespace

TEST(Probe, ZeroWeightsGiveBias) {
  BoundProbe p({5, 3, false});
  p.store.value("probe.w") = Tensor<double>({3, 5});
  p.store.value("probe.b") = Tensor<double>({3}, {0.5, -1, 2});
  EXPECT_EQ(p.logits(randn({5}, 1)).vec(), (std::vector<double>{0.5, -1, 2}));
}

TEST(Probe, MatchesDotProduct) {
  BoundProbe p({6, 4, false});
  p.store.value("probe.b") = randn({4}, 2);
  const auto f = randn({6}, 3);
  const auto z = p.logits(f);
  const auto& W = p.store.value("probe.w");
  const auto& b = p.store.value("probe.b");
  ASSERT_EQ(W.shape(), (Shape{4, 6}));
  for (std::size_t c = 0; c < 4; ++c) {
    double s = b[c];
    for (std::size_t d = 0; d < 6; ++d) s += W[c * 6 + d] * f[d];
    EXPECT_NEAR(z[c], s, 1e-12);
  }
}

TEST(Probe, ReluVariant) {
  BoundProbe p({4, 3, true});
  p.store.value("probe.hidden.b") = randn({4}, 5);
  const auto f = randn({4}, 6);
  const auto z = p.logits(f);
  const auto& H = p.store.value("probe.hidden.w");
  const auto& hb = p.store.value("probe.hidden.b");
  const auto& W = p.store.value("probe.w");
  std::vector<double> h(4);
  for (std::size_t o = 0; o < 4; ++o) {
    double s = hb[o];
    for (std::size_t d = 0; d < 4; ++d) s += H[o * 4 + d] * f[d];
    h[o] = std::max(0.0, s);
  }
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t d = 0; d < 4; ++d) s += W[c * 4 + d] * h[d];
    EXPECT_NEAR(z[c], s, 1e-12);
  }
  EXPECT_EQ(p.store.size(), 4u);
}

TEST(Probe, ParameterDecayFlags) {
  BoundProbe p({4, 3, true});
  for (const auto& param : p.store) EXPECT_EQ(param.decay, param.name.back() == 'w') << param.name;
}

TEST(Probe, RejectsWrongFeatureSize) {
  BoundProbe p({4, 3, false});
  EXPECT_EQ(code_of([&] { p.logits(randn({5}, 1)); }), ErrorCode::kDimension);
  EXPECT_EQ(code_of([] { BoundProbe q({0, 3, false}); }), ErrorCode::kInvalidArgument);
}

TEST(Probe, ReluHeadsUseReluProbe) {
  for (FusionKind k : kAllFusionKinds) {
    ModelConfig mc;
    mc.head.kind = k;
    mc.head.model_dim = 8;
    mc.classes = {"a", "b"};
    Model<float> m(mc);
    bool has_hidden = false;
    for (const auto& p : m.params()) has_hidden = has_hidden || p.name == "probe.hidden.w";
    EXPECT_EQ(has_hidden, uses_relu_probe(k)) << to_string(k);
  }
}

class SeparableSet : public ::testing::TestWithParam<FusionKind> {};

TEST_P(SeparableSet, ReachesPerfectAccuracy) {
  static TempDir dir;
  static const DatasetManifest manifest = generate(testutil::separable_synth(), dir.path());
  FusionHeadConfig head;
  head.kind = GetParam();
  head.num_heads = 2;
  head.max_frames = 8;
  TrainConfig cfg;
  cfg.epochs = 25;
  cfg.batch_size = 8;
  cfg.frames_per_clip = 8;
  cfg.lr0 = 5e-3;
  cfg.eval_clips = 2;
  const auto result = train(manifest, head, cfg);
  const auto report = evaluate(result.final_model, manifest, "view0", {2, 8, FrameLayout::kContiguous});
  EXPECT_EQ(report.overall.balanced_acc, 1.0);
  EXPECT_EQ(report.overall.samples, 44u);
  EXPECT_EQ(result.log.back().train_acc, 1.0);
}

INSTANTIATE_TEST_SUITE_P(Heads, SeparableSet, ::testing::ValuesIn(kAllFusionKinds),
                         [](const auto& info) { return std::string(to_string(info.param)); });
