#include <random>

#include "qexplain/env.hpp"
#include "qexplain/error.hpp"
#include "support.hpp"

using namespace qx;
using test::share;

namespace {

AbrConfig four_mb_config() {
  AbrConfig c;
  c.chunk_mb = {1.0, 4.0, 8.0, 12.0, 16.0};
  return c;
}

std::vector<StepOutcome> replay(Env& env, const std::vector<Action>& actions) {
  std::vector<StepOutcome> out;
  for (const auto& a : actions) {
    if (env.done()) break;
    out.push_back(env.step(a));
  }
  return out;
}

void expect_same(const std::vector<StepOutcome>& a, const std::vector<StepOutcome>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].components, b[i].components) << "step " << i;
    EXPECT_EQ(a[i].total, b[i].total);
    EXPECT_EQ(a[i].done, b[i].done);
  }
}

CcConfig cc_example_config() {
  CcConfig c;
  c.start_rate_mbps = 4.0;
  c.packet_mb = 0.01;
  return c;
}

Trace cc_example_trace() {
  Trace t = test::constant_trace("cc2", 2.0, 30.0, TraceKind::cc);
  t.link = CcLink{100.0, 10.0, 0.0};  // MI 0.1 s, queue 10 x 0.01 Mb = 0.1 Mb
  return t;
}

}  // namespace

TEST(Components, FixedOrder) {
  EnvFactory abr;
  EXPECT_EQ(abr.components().names, (std::vector<std::string>{"quality", "quality_change", "stalling"}));
  EXPECT_EQ(abr.components().weights, (std::vector<double>{1.0, 1.0, 4.0}));
  EnvFactory cc;
  cc.kind = EnvKind::cc;
  EXPECT_EQ(cc.components().names, (std::vector<std::string>{"throughput", "latency", "loss"}));
}

TEST(AbrEnv, ResetZeroes) {
  auto env = abr_reset(share(test::constant_trace("a", 3.0, 60.0)), AbrConfig{});
  const AbrState& s = env->state();
  EXPECT_EQ(s.buffer_s, 0.0);
  EXPECT_EQ(s.last_quality, 0);
  EXPECT_EQ(s.cursor_s, 0.0);
  EXPECT_EQ(s.chunk_mb, std::vector<double>(8, 0.0));
  EXPECT_EQ(s.transmit_s, std::vector<double>(8, 0.0));
}

TEST(AbrEnv, AcceptsCcTrace) {
  EXPECT_NO_THROW(abr_reset(share(test::constant_trace("c", 3.0, 60.0, TraceKind::cc)), AbrConfig{}));
}

TEST(AbrEnv, RejectsEmptyOrShortTrace) {
  Trace empty;
  empty.id = "e";
  EXPECT_THROW(abr_reset(share(empty), AbrConfig{}), UserError);
  // One 1 Mb chunk at 0.1 Mbps needs 10 s; the trace lasts 2 s.
  EXPECT_THROW(abr_reset(share(test::step_trace("s", {0.1, 0.1})), AbrConfig{}), UserError);
}

TEST(AbrEnv, TwoMbpsBufferExample) {
  auto env = abr_reset(share(test::constant_trace("a", 2.0, 120.0)), four_mb_config());
  env->step(Action::discrete(1));  // from an empty buffer: d = 2 s, stall 2 s, buffer 4 s
  ASSERT_DOUBLE_EQ(env->state().buffer_s, 4.0);
  const StepOutcome o = env->step(Action::discrete(1));
  EXPECT_DOUBLE_EQ(env->state().transmit_s.back(), 2.0);
  EXPECT_EQ(o.components[2], 0.0);
  EXPECT_DOUBLE_EQ(env->state().buffer_s, 6.0);
  EXPECT_EQ(o.components[1], 0.0);  // same action twice
  EXPECT_DOUBLE_EQ(o.components[0], 0.25);
}

TEST(AbrEnv, EmptyBufferStallsForWholeDownload) {
  auto env = abr_reset(share(test::constant_trace("a", 2.0, 120.0)), AbrConfig{});
  const StepOutcome o = env->step(Action::discrete(3));  // 8 Mb at 2 Mbps
  EXPECT_DOUBLE_EQ(o.components[2], -4.0);
  EXPECT_DOUBLE_EQ(o.components[1], -0.75);
  EXPECT_DOUBLE_EQ(o.total, 0.75 - 0.75 - 16.0);
}

TEST(AbrEnv, BufferCapped) {
  auto env = abr_reset(share(test::constant_trace("a", 100.0, 600.0)), AbrConfig{});
  for (int i = 0; i < 40; ++i) env->step(Action::discrete(0));
  EXPECT_DOUBLE_EQ(env->state().buffer_s, 15.0);
}

TEST(AbrEnv, ErrorsAndDone) {
  auto env = abr_reset(share(test::constant_trace("a", 16.0, 3.0)), AbrConfig{});
  EXPECT_THROW(env->step(Action::discrete(5)), UserError);
  EXPECT_THROW(env->step(Action::discrete(-1)), UserError);
  EXPECT_THROW(env->step(Action::continuous(0.0)), UserError);
  while (!env->done()) env->step(Action::discrete(4));
  EXPECT_THROW(env->step(Action::discrete(0)), UserError);
}

TEST(CcEnv, ResetState) {
  auto env = cc_reset(share(test::constant_trace("c", 5.0, 30.0, TraceKind::cc)), CcConfig{});
  const CcState& s = env->state();
  EXPECT_EQ(s.rate_mbps, 1.0);
  EXPECT_EQ(s.sent_mbps, std::vector<double>(8, 0.0));
  EXPECT_EQ(s.delivered_mbps, std::vector<double>(8, 0.0));
  EXPECT_EQ(s.loss, std::vector<double>(8, 0.0));
  EXPECT_EQ(s.latency_ratio, std::vector<double>(8, 1.0));
  auto again = cc_reset(share(test::constant_trace("c", 5.0, 30.0, TraceKind::cc)), CcConfig{});
  EXPECT_EQ(env->digest(), again->digest());
}

TEST(CcEnv, MissingLinkRejected) {
  EXPECT_THROW(cc_reset(share(test::constant_trace("a", 5.0, 30.0)), CcConfig{}), UserError);
}

TEST(CcEnv, NoQueueNoPenalty) {
  auto env = cc_reset(share(test::constant_trace("c", 5.0, 30.0, TraceKind::cc)), CcConfig{});
  const StepOutcome o = env->step(Action::continuous(0.5));
  EXPECT_EQ(o.components[1], 0.0);
  EXPECT_EQ(o.components[2], 0.0);
  EXPECT_DOUBLE_EQ(o.components[0], 1.5 / 10.0);
}

TEST(CcEnv, OverflowLossQuarter) {
  auto env = cc_reset(share(cc_example_trace()), cc_example_config());
  const StepOutcome o = env->step(Action::continuous(0.0));
  EXPECT_NEAR(o.components[2], -0.25, 1e-12);
  EXPECT_NEAR(env->state().queue_mb, 0.1, 1e-12);
  // queue 0.1 Mb over 2 Mbps x 0.1 s adds half a base RTT.
  EXPECT_NEAR(o.components[1], -0.5, 1e-12);
  EXPECT_NEAR(o.components[0], 0.2, 1e-12);
}

TEST(CcEnv, RandomLossIsExpectedValue) {
  Trace t = test::constant_trace("c", 5.0, 30.0, TraceKind::cc);
  t.link->loss_rate = 0.02;
  auto env = cc_reset(share(t), CcConfig{});
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(env->step(Action::continuous(0.0)).components[2], -0.02, 1e-15);
}

TEST(CcEnv, ClampAtMinimumRate) {
  CcConfig c;
  c.start_rate_mbps = c.min_rate_mbps;
  auto env = cc_reset(share(test::constant_trace("c", 5.0, 30.0, TraceKind::cc)), c);
  env->step(Action::continuous(0.0));
  EXPECT_EQ(env->state().rate_mbps, c.min_rate_mbps);
  env->step(Action::continuous(-1.0));
  EXPECT_EQ(env->state().rate_mbps, c.min_rate_mbps);
}

TEST(CcEnv, RejectsOutOfRangeDelta) {
  auto env = cc_reset(share(test::constant_trace("c", 5.0, 30.0, TraceKind::cc)), CcConfig{});
  EXPECT_THROW(env->step(Action::continuous(1.5)), UserError);
  EXPECT_THROW(env->step(Action::discrete(0)), UserError);
}

TEST(Envs, WeightedSumAndInvariantsOverRandomSteps) {
  const TraceSet set = generate_cc_traces(CcTraceSpec{}, 6, 4);
  std::mt19937_64 rng(3);
  std::size_t steps = 0;
  for (EnvKind kind : {EnvKind::abr, EnvKind::cc}) {
    EnvFactory f;
    f.kind = kind;
    f.abr.weights = {1.0, 2.0, 4.0};
    f.cc.weights = {1.0, 3.0, 7.0};
    std::size_t kind_steps = 0;
    for (int round = 0; kind_steps < 10000; ++round) {
      Trace t = set.traces[round % set.size()];
      if (kind == EnvKind::abr) {
        t.kind = TraceKind::abr;
        t.link.reset();
      }
      auto env = f.make(share(t));
      while (!env->done() && kind_steps < 10000) {
        Action a = kind == EnvKind::abr ? Action::discrete(std::uniform_int_distribution<int>(0, 4)(rng))
                                        : Action::continuous(std::uniform_real_distribution<double>(-1, 1)(rng));
        const StepOutcome o = env->step(a);
        ASSERT_NEAR(o.total, f.components().weighted_sum(o.components), 1e-9);
        if (kind == EnvKind::abr) {
          const auto& s = std::get<AbrState>(o.next);
          ASSERT_GE(s.buffer_s, 0.0);
          ASSERT_LE(s.buffer_s, 15.0);
        } else {
          const auto& s = std::get<CcState>(o.next);
          ASSERT_GE(s.loss.back(), 0.0);
          ASSERT_LE(s.loss.back(), 1.0);
          ASSERT_GE(s.latency_ratio.back(), 1.0);
          ASSERT_GT(s.rate_mbps, 0.0);
        }
        ++kind_steps;
      }
    }
    steps += kind_steps;
  }
  EXPECT_GE(steps, 20000u);
}

TEST(Snapshot, RestoreReplaysIdentically) {
  for (EnvKind kind : {EnvKind::abr, EnvKind::cc}) {
    EnvFactory f;
    f.kind = kind;
    const TraceKind tk = kind == EnvKind::abr ? TraceKind::abr : TraceKind::cc;
    auto env = f.make(share(test::step_trace("s", {1.0, 3.0, 0.5, 2.0, 6.0, 1.0, 2.5, 4.0, 1.0, 3.0}, tk)));
    env->step(kind == EnvKind::abr ? Action::discrete(2) : Action::continuous(0.3));
    const EnvSnapshot snap(*env);
    const std::vector<Action> actions =
        kind == EnvKind::abr
            ? std::vector<Action>{Action::discrete(1), Action::discrete(4), Action::discrete(0)}
            : std::vector<Action>{Action::continuous(0.5), Action::continuous(-0.2), Action::continuous(1.0)};
    const auto first = replay(*env, actions);
    auto r = restore(snap);
    expect_same(first, replay(*r, actions));
  }
}

TEST(Snapshot, RestoredInstancesIndependent) {
  auto env = abr_reset(share(test::step_trace("s", {1.0, 3.0, 0.5, 2.0, 6.0, 1.0})), AbrConfig{});
  const EnvSnapshot snap(*env);
  auto a = restore(snap);
  auto b = restore(snap);
  a->step(Action::discrete(4));
  EXPECT_EQ(b->digest(), snap.checksum());
  b->step(Action::discrete(0));
  EXPECT_NE(a->digest(), b->digest());
  EXPECT_EQ(restore(snap)->digest(), snap.checksum());
}

TEST(Snapshot, JsonRoundTripAndCorruption) {
  auto env = cc_reset(share(cc_example_trace()), cc_example_config());
  env->step(Action::continuous(0.2));
  const EnvSnapshot snap(*env);
  const auto j = snap.to_json();
  const EnvSnapshot back = EnvSnapshot::from_json(j);
  EXPECT_EQ(back.checksum(), snap.checksum());
  auto x = restore(snap);
  auto y = restore(back);
  expect_same(replay(*x, {Action::continuous(0.1), Action::continuous(-0.4)}),
              replay(*y, {Action::continuous(0.1), Action::continuous(-0.4)}));
  auto bad = j;
  bad["state"]["queue_mb"] = 0.05;
  EXPECT_THROW(EnvSnapshot::from_json(bad), UserError);
  auto broken = j;
  broken["state"].erase("rate_mbps");
  EXPECT_THROW(EnvSnapshot::from_json(broken), UserError);
  EXPECT_THROW(restore(EnvSnapshot{}), UserError);
}

TEST(Graft, OwnTraceAtCursorIsIdentity) {
  auto trace = share(test::step_trace("s", {1.0, 3.0, 0.5, 2.0, 6.0, 1.0, 2.5, 4.0, 1.0, 3.0, 2.0, 2.0}));
  auto env = abr_reset(trace, AbrConfig{});
  env->step(Action::discrete(1));
  env->step(Action::discrete(2));
  const EnvSnapshot snap(*env);
  const double cursor = env->state().cursor_s;
  const std::vector<Action> actions{Action::discrete(0), Action::discrete(3), Action::discrete(1)};
  auto plain = restore(snap);
  auto grafted = graft_future(snap, trace, cursor);
  expect_same(replay(*plain, actions), replay(*grafted, actions));
}

TEST(Graft, CcOwnTraceIdentity) {
  Trace t = test::step_trace("c", {1.0, 3.0, 0.5, 2.0, 6.0, 1.0, 2.5, 4.0}, TraceKind::cc);
  t.link = CcLink{80.0, 20.0, 0.01};
  auto trace = share(t);
  auto env = cc_reset(trace, CcConfig{});
  for (int i = 0; i < 7; ++i) env->step(Action::continuous(0.3));
  const EnvSnapshot snap(*env);
  const std::vector<Action> actions{Action::continuous(0.5), Action::continuous(-0.3), Action::continuous(0.0)};
  auto plain = restore(snap);
  auto grafted = graft_future(snap, trace, env->state().cursor_s);
  expect_same(replay(*plain, actions), replay(*grafted, actions));
}

TEST(Graft, ConstantTraceDownloadTimes) {
  auto env = abr_reset(share(test::step_trace("s", {1.0, 3.0, 0.5, 2.0, 6.0, 1.0, 2.5, 4.0, 1.0, 3.0})), AbrConfig{});
  env->step(Action::discrete(1));
  auto g = graft_future(EnvSnapshot(*env), share(test::constant_trace("k", 4.0, 100.0)), 10.0);
  auto& abr = dynamic_cast<AbrEnv&>(*g);
  for (int a : {0, 2, 4, 1}) {
    abr.step(Action::discrete(a));
    EXPECT_DOUBLE_EQ(abr.state().transmit_s.back(), AbrConfig{}.chunk_mb[a] / 4.0);
  }
}

TEST(Graft, DifferentTraceChangesOutcomes) {
  auto env = abr_reset(share(test::constant_trace("slow", 1.0, 200.0)), AbrConfig{});
  env->step(Action::discrete(0));
  const EnvSnapshot snap(*env);
  auto plain = restore(snap);
  auto fast = graft_future(snap, share(test::constant_trace("fast", 8.0, 200.0)), 0.0);
  const auto a = replay(*plain, {Action::discrete(3)});
  const auto b = replay(*fast, {Action::discrete(3)});
  EXPECT_NE(a[0].components[2], b[0].components[2]);
}

TEST(Graft, CcTakesLinkOfGraftedTrace) {
  auto env = cc_reset(share(test::constant_trace("c", 5.0, 30.0, TraceKind::cc)), CcConfig{});
  env->step(Action::continuous(0.0));
  Trace lossy = test::constant_trace("l", 5.0, 30.0, TraceKind::cc);
  lossy.link->loss_rate = 0.05;
  auto g = graft_future(EnvSnapshot(*env), share(lossy), 3.0);
  EXPECT_NEAR(g->step(Action::continuous(0.0)).components[2], -0.05, 1e-15);
}

TEST(Graft, Errors) {
  auto env = abr_reset(share(test::constant_trace("a", 2.0, 60.0)), AbrConfig{});
  const EnvSnapshot snap(*env);
  EXPECT_THROW(graft_future(snap, share(test::constant_trace("b", 2.0, 20.0)), 25.0), UserError);
  EXPECT_THROW(graft_future(snap, share(test::constant_trace("b", 2.0, 20.0)), -1.0), UserError);
  auto cc = cc_reset(share(test::constant_trace("c", 2.0, 60.0, TraceKind::cc)), CcConfig{});
  EXPECT_THROW(graft_future(EnvSnapshot(*cc), share(test::constant_trace("b", 2.0, 20.0)), 1.0), UserError);
}

TEST(EnvConfig, JsonRejectsUnknownKeys) {
  EnvFactory f;
  f.kind = EnvKind::cc;
  const auto j = f.to_json();
  const EnvFactory back = EnvFactory::from_json(j);
  EXPECT_EQ(back.to_json(), j);
  auto bad = j;
  bad["config"]["mystery"] = 1;
  EXPECT_THROW(EnvFactory::from_json(bad), UserError);
  EXPECT_THROW(env_kind_from_string("video"), UserError);
}
