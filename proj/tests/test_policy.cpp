#include <fstream>
#include <random>

#include "qexplain/error.hpp"
#include "qexplain/policy.hpp"
#include "support.hpp"

using namespace qx;

namespace {

AbrState abr_with_buffer(double b) {
  AbrState s;
  s.chunk_mb.assign(8, 0.0);
  s.transmit_s.assign(8, 0.0);
  s.buffer_s = b;
  return s;
}

CcState cc_with(double loss, double ratio) {
  CcState s;
  s.sent_mbps.assign(8, 1.0);
  s.delivered_mbps.assign(8, 1.0);
  s.latency_ratio.assign(8, 1.0);
  s.loss.assign(8, 0.0);
  s.loss.back() = loss;
  s.latency_ratio.back() = ratio;
  s.rate_mbps = 1.0;
  return s;
}

EnvFactory cc_factory() {
  EnvFactory f;
  f.kind = EnvKind::cc;
  return f;
}

}  // namespace

TEST(BufferPolicy, Boundaries) {
  const AbrBufferPolicy p;
  EXPECT_EQ(p.act(abr_with_buffer(5.0)).index, 0);
  EXPECT_EQ(p.act(abr_with_buffer(10.0)).index, 4);
  EXPECT_EQ(p.act(abr_with_buffer(7.5)).index, 2);
  EXPECT_EQ(p.act(abr_with_buffer(0.0)).index, 0);
  EXPECT_EQ(p.act(abr_with_buffer(15.0)).index, 4);
  EXPECT_EQ(p.act(abr_with_buffer(9.99)).index, 3);
}

TEST(BufferPolicy, RejectsCcState) { EXPECT_THROW(AbrBufferPolicy().act(cc_with(0, 1)), UserError); }

TEST(AimdPolicy, Rules) {
  const CcAimdPolicy p;
  EXPECT_DOUBLE_EQ(p.act(cc_with(0.0, 1.0)).value, 0.1);
  EXPECT_DOUBLE_EQ(p.act(cc_with(0.05, 1.0)).value, -0.3);
  EXPECT_DOUBLE_EQ(p.act(cc_with(0.0, 1.2)).value, -0.3);
}

TEST(AimdPolicy, StrictRuleWithZeroTolerance) {
  const CcAimdPolicy p(0.0, 1.1);
  EXPECT_DOUBLE_EQ(p.act(cc_with(0.001, 1.0)).value, -0.3);
  EXPECT_DOUBLE_EQ(p.act(cc_with(0.0, 1.1)).value, 0.1);
}

TEST(Policies, DeterministicOnRandomStates) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const AbrBufferPolicy bba;
  const AbrLookaheadPolicy mpc{AbrConfig{}};
  const CcAimdPolicy aimd;
  for (int i = 0; i < 10000; ++i) {
    AbrState a = abr_with_buffer(15.0 * u(rng));
    for (int k = 0; k < 8; ++k) {
      a.chunk_mb[k] = 16.0 * u(rng) + 0.5;
      a.transmit_s[k] = 5.0 * u(rng) + 0.1;
    }
    a.last_quality = static_cast<int>(u(rng) * 5) % 5;
    EXPECT_EQ(bba.act(a), bba.act(a));
    const Action m = mpc.act(a);
    EXPECT_EQ(m, mpc.act(a));
    EXPECT_TRUE((ActionSpace{ActionKind::discrete, 5, 0, 0}.contains(m)));
    const CcState c = cc_with(0.1 * u(rng), 1.0 + u(rng));
    EXPECT_EQ(aimd.act(c), aimd.act(c));
  }
}

TEST(LookaheadPolicy, ReactsToStallWeight) {
  // Harmonic-mean estimate of 2 Mbps and a 1 s buffer: a heavy stall weight
  // picks the smallest chunk, a tiny one the largest.
  AbrState s = abr_with_buffer(1.0);
  std::fill(s.chunk_mb.begin(), s.chunk_mb.end(), 4.0);
  std::fill(s.transmit_s.begin(), s.transmit_s.end(), 2.0);
  s.last_quality = 2;
  AbrConfig heavy;
  heavy.weights = {1.0, 1.0, 100.0};
  AbrConfig light;
  light.weights = {1.0, 0.0, 0.001};
  EXPECT_EQ(AbrLookaheadPolicy(heavy).act(s).index, 0);
  EXPECT_EQ(AbrLookaheadPolicy(light).act(s).index, 4);
  EXPECT_EQ(AbrLookaheadPolicy(heavy).act(abr_with_buffer(3.0)).index, 0);  // no history yet
}

TEST(Featurize, FreshAbrIsZeros) {
  EnvFactory f;
  auto env = f.make(test::share(test::constant_trace("a", 3.0, 60.0)));
  const FeatureVector v = featurize(env->observation(), FeatureMode::raw, f);
  ASSERT_EQ(v.values.size(), 18u);
  for (double x : v.values) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(raw_feature_size(f), 18u);
}

TEST(Featurize, FullBufferIsOne) {
  EnvFactory f;
  const FeatureVector v = featurize(abr_with_buffer(15.0), FeatureMode::raw, f);
  EXPECT_EQ(v.values[16], 1.0);
}

TEST(Featurize, CcLayoutAndRange) {
  const EnvFactory f = cc_factory();
  auto env = f.make(test::share(test::constant_trace("c", 3.0, 60.0, TraceKind::cc)));
  std::mt19937_64 rng(1);
  for (int i = 0; i < 300 && !env->done(); ++i) {
    const FeatureVector v = featurize(env->observation(), FeatureMode::raw, f);
    ASSERT_EQ(v.values.size(), 33u);
    for (double x : v.values) {
      ASSERT_TRUE(std::isfinite(x));
      ASSERT_GE(x, -1.0);
      ASSERT_LE(x, 1.0);
    }
    env->step(Action::continuous(std::uniform_real_distribution<double>(-1, 1)(rng)));
  }
  EXPECT_EQ(raw_feature_size(f), 33u);
}

TEST(Featurize, EmbeddingNeedsPolicySupport) {
  EnvFactory f;
  const AbrBufferPolicy p;
  EXPECT_THROW(featurize(abr_with_buffer(1.0), FeatureMode::embedding, f, &p), UserError);
  EXPECT_THROW(featurize(abr_with_buffer(1.0), FeatureMode::embedding, f, nullptr), UserError);
}

TEST(MakePolicy, IdsAndErrors) {
  EnvFactory abr;
  EXPECT_EQ(make_policy("abr-bba", abr)->id(), "abr-bba");
  EXPECT_EQ(make_policy("abr-mpc", abr)->id(), "abr-mpc");
  EXPECT_EQ(make_policy("cc-aimd", cc_factory())->id(), "cc-aimd");
  EXPECT_THROW(make_policy("cc-aimd", abr), UserError);
  EXPECT_THROW(make_policy("abr-bba", cc_factory()), UserError);
  EXPECT_THROW(make_policy("external", abr), UserError);
  EXPECT_THROW(make_policy("nope", abr), UserError);
}

TEST(ExternalPolicy, LoadsActsAndEmbeds) {
  test::TempDir dir;
  std::mt19937_64 rng(2);
  const std::vector<int> widths{18, 6, 5};
  const DenseNet net = DenseNet::init(widths, Activation::relu, Activation::identity, rng);
  EnvFactory f;
  nlohmann::json j = f.to_json();
  j["magic"] = "qxpolicy1";
  j["net"] = net.to_json();
  std::ofstream(dir / "p.json") << j.dump();

  const auto p = make_policy("external", f, dir / "p.json");
  const AbrState s = abr_with_buffer(7.0);
  const Action a = p->act(s);
  const auto out = net.forward(std::span<const double>(featurize(s, FeatureMode::raw, f).values));
  EXPECT_EQ(a.index, static_cast<int>(std::max_element(out.begin(), out.end()) - out.begin()));
  ASSERT_TRUE(p->has_embedding());
  const FeatureVector e = featurize(s, FeatureMode::embedding, f, p.get());
  EXPECT_EQ(e.values.size(), 6u);
  EXPECT_EQ(e.mode, FeatureMode::embedding);

  j["magic"] = "other";
  std::ofstream(dir / "bad.json") << j.dump();
  EXPECT_THROW(make_policy("external", f, dir / "bad.json"), UserError);
}

TEST(LookaheadPolicy, ClimbsWhenThroughputAllows) {
  AbrState s = abr_with_buffer(12.0);
  std::fill(s.chunk_mb.begin(), s.chunk_mb.end(), 1.0);
  std::fill(s.transmit_s.begin(), s.transmit_s.end(), 0.05);
  s.last_quality = 0;
  EXPECT_GT(AbrLookaheadPolicy(AbrConfig{}).act(s).index, 0);
}
