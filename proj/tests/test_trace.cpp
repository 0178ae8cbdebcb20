#include <fstream>
#include <set>

#include "qexplain/error.hpp"
#include "qexplain/trace.hpp"
#include "support.hpp"

using namespace qx;
using qx::test::TempDir;

namespace {

void write_file(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

std::set<std::string> ids_of(const TraceSet& s) {
  std::set<std::string> out;
  for (const auto& t : s.traces) out.insert(t.id);
  return out;
}

}  // namespace

TEST(Trace, LoadTwoAbrRecords) {
  TempDir dir;
  write_file(dir / "z.jsonl",
             "{\"id\":\"t-001\",\"kind\":\"abr\",\"samples\":[{\"t\":0.0,\"bw_mbps\":3.2},{\"t\":1.0,\"bw_mbps\":2.0}]}\n"
             "{\"id\":\"t-002\",\"kind\":\"abr\",\"samples\":[{\"t\":0.0,\"bw_mbps\":1.5}]}\n");
  const TraceSet set = load_traces(dir / "z.jsonl", TraceKind::abr);
  ASSERT_EQ(set.size(), 2u);
  EXPECT_EQ(set.kind, TraceKind::abr);
  EXPECT_EQ(set.provenance, Provenance::ingested);
  EXPECT_EQ(set.traces[0].id, "t-001");
  EXPECT_EQ(set.traces[1].id, "t-002");
  EXPECT_DOUBLE_EQ(set.traces[0].samples[0].bw_mbps, 3.2);
}

TEST(Trace, NegativeBandwidthNamesLine) {
  TempDir dir;
  write_file(dir / "z.jsonl",
             "{\"id\":\"a\",\"kind\":\"abr\",\"samples\":[{\"t\":0.0,\"bw_mbps\":3.2}]}\n"
             "{\"id\":\"b\",\"kind\":\"abr\",\"samples\":[{\"t\":0.0,\"bw_mbps\":-1.0}]}\n");
  try {
    load_traces(dir / "z.jsonl", TraceKind::abr);
    FAIL() << "expected an error";
  } catch (const UserError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(Trace, EmptyFileSaysNoTraces) {
  TempDir dir;
  write_file(dir / "z.jsonl", "");
  try {
    load_traces(dir / "z.jsonl", TraceKind::abr);
    FAIL() << "expected an error";
  } catch (const UserError& e) {
    EXPECT_NE(std::string(e.what()).find("no traces"), std::string::npos);
  }
}

TEST(Trace, MissingFileAndKindMismatch) {
  TempDir dir;
  EXPECT_THROW(load_traces(dir / "absent.jsonl", TraceKind::abr), UserError);
  write_file(dir / "z.jsonl",
             "{\"id\":\"a\",\"kind\":\"cc\",\"samples\":[{\"t\":0.0,\"bw_mbps\":3.2}],"
             "\"base_rtt_ms\":50,\"queue_pkts\":100,\"loss_rate\":0.0}\n");
  EXPECT_THROW(load_traces(dir / "z.jsonl", TraceKind::abr), UserError);
  EXPECT_EQ(load_traces(dir / "z.jsonl", TraceKind::cc).size(), 1u);
}

TEST(Trace, MalformedRecordNamesLine) {
  TempDir dir;
  write_file(dir / "z.jsonl", "{\"id\":\"a\",\"kind\":\"abr\",\"samples\":[{\"t\":0.0,\"bw_mbps\":1}]}\n{oops\n");
  try {
    load_traces(dir / "z.jsonl", TraceKind::abr);
    FAIL();
  } catch (const UserError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(Trace, InvariantsRejected) {
  Trace t = test::step_trace("x", {1.0, 2.0});
  t.samples[1].t = 0.0;
  EXPECT_THROW(t.validate(), UserError);
  Trace c = test::step_trace("y", {1.0}, TraceKind::cc);
  c.link.reset();
  EXPECT_THROW(c.validate(), UserError);
  Trace a = test::step_trace("z", {1.0});
  a.link = CcLink{};
  EXPECT_THROW(a.validate(), UserError);
  Trace e;
  e.id = "e";
  EXPECT_THROW(e.validate(), UserError);
}

TEST(Trace, JsonlRoundTripUsesExactKeys) {
  Trace t = test::step_trace("t-001", {3.2, 1.0}, TraceKind::cc);
  t.link = CcLink{50.0, 100.0, 0.01};
  const std::string line = trace_to_jsonl(t);
  for (const char* key : {"\"id\"", "\"kind\"", "\"samples\"", "\"t\"", "\"bw_mbps\"", "\"base_rtt_ms\"",
                          "\"queue_pkts\"", "\"loss_rate\""})
    EXPECT_NE(line.find(key), std::string::npos) << key;
  const Trace back = trace_from_jsonl(line);
  EXPECT_EQ(back.id, t.id);
  ASSERT_EQ(back.samples.size(), 2u);
  EXPECT_EQ(back.samples[0].bw_mbps, 3.2);
  EXPECT_EQ(back.link->loss_rate, 0.01);
}

TEST(Trace, SaveLoadRoundTrip) {
  TempDir dir;
  const TraceSet set = generate_cc_traces(CcTraceSpec{}, 5, 3);
  save_traces(set, dir / "z.jsonl");
  const TraceSet back = load_traces(dir / "z.jsonl", TraceKind::cc);
  ASSERT_EQ(back.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(back.traces[i].id, set.traces[i].id);
    ASSERT_EQ(back.traces[i].samples.size(), set.traces[i].samples.size());
    for (std::size_t k = 0; k < set.traces[i].samples.size(); ++k)
      EXPECT_EQ(back.traces[i].samples[k].bw_mbps, set.traces[i].samples[k].bw_mbps);
  }
}

TEST(Generate, ZeroTraces) { EXPECT_TRUE(generate_cc_traces(CcTraceSpec{}, 0, 1).empty()); }

TEST(Generate, DeterministicForSeed) {
  const TraceSet a = generate_cc_traces(CcTraceSpec{}, 10, 7);
  const TraceSet b = generate_cc_traces(CcTraceSpec{}, 10, 7);
  ASSERT_EQ(a.size(), 10u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(trace_to_jsonl(a.traces[i]), trace_to_jsonl(b.traces[i]));
  const TraceSet c = generate_cc_traces(CcTraceSpec{}, 10, 8);
  EXPECT_NE(trace_to_jsonl(a.traces[0]), trace_to_jsonl(c.traces[0]));
}

TEST(Generate, WanderBoundsWithFixedMean) {
  CcTraceSpec spec;
  spec.mean_mbps = {1.0, 1.0};
  const TraceSet set = generate_cc_traces(spec, 25, 11);
  for (const auto& t : set.traces)
    for (const auto& s : t.samples) {
      EXPECT_GE(s.bw_mbps, 1.0 * (1.0 - spec.wander));
      EXPECT_LE(s.bw_mbps, 1.0 * (1.0 + spec.wander));
    }
}

TEST(Generate, KeyValuesWithinRanges) {
  const CcTraceSpec spec;
  for (const auto& t : generate_cc_traces(spec, 50, 2).traces) {
    ASSERT_TRUE(t.link);
    EXPECT_GE(t.link->base_rtt_ms, spec.base_rtt_ms.min);
    EXPECT_LE(t.link->base_rtt_ms, spec.base_rtt_ms.max);
    EXPECT_GE(t.link->queue_pkts, spec.queue_pkts.min);
    EXPECT_LE(t.link->queue_pkts, spec.queue_pkts.max);
    EXPECT_GE(t.link->loss_rate, spec.loss_rate.min);
    EXPECT_LE(t.link->loss_rate, spec.loss_rate.max);
    EXPECT_NEAR(t.duration(), spec.duration, 1e-9);
  }
}

TEST(Generate, InvalidSpec) {
  CcTraceSpec spec;
  spec.mean_mbps = {5.0, 1.0};
  EXPECT_THROW(generate_cc_traces(spec, 1, 1), UserError);
  spec = CcTraceSpec{};
  spec.base_rtt_ms = {0.0, 10.0};
  EXPECT_THROW(generate_cc_traces(spec, 1, 1), UserError);
}

TEST(Generate, AsAbrDropsLink) {
  const TraceSet set = as_abr(generate_cc_traces(CcTraceSpec{}, 3, 1));
  EXPECT_EQ(set.kind, TraceKind::abr);
  for (const auto& t : set.traces) {
    EXPECT_EQ(t.kind, TraceKind::abr);
    EXPECT_FALSE(t.link);
  }
}

TEST(Stats, ConstantTrace) {
  const auto s = trace_stats(test::step_trace("c", {2.0, 2.0, 2.0}));
  EXPECT_DOUBLE_EQ(s.mean_bw, 2.0);
  EXPECT_EQ(s.cov_bw, 0.0);
}

TEST(Stats, TwoValues) {
  const auto s = trace_stats(test::step_trace("c", {1.0, 3.0}));
  EXPECT_DOUBLE_EQ(s.mean_bw, 2.0);
  EXPECT_DOUBLE_EQ(s.cov_bw, 0.5);
}

TEST(Stats, SingleSample) {
  const auto s = trace_stats(test::step_trace("c", {5.0}));
  EXPECT_DOUBLE_EQ(s.mean_bw, 5.0);
  EXPECT_EQ(s.cov_bw, 0.0);
  EXPECT_DOUBLE_EQ(s.duration, 1.0);
}

TEST(Stats, ConstantCovExactlyZeroForAwkwardValue) {
  const auto s = trace_stats(test::step_trace("c", {0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1}));
  EXPECT_EQ(s.cov_bw, 0.0);
}

TEST(Split, TenTracesFifth) {
  const TraceSet set = generate_cc_traces(CcTraceSpec{}, 10, 1);
  auto [train, hold] = split_holdout(set, 0.2, 5);
  EXPECT_EQ(train.size(), 8u);
  EXPECT_EQ(hold.size(), 2u);
  auto a = ids_of(train), b = ids_of(hold);
  for (const auto& id : b) EXPECT_EQ(a.count(id), 0u);
  a.insert(b.begin(), b.end());
  EXPECT_EQ(a, ids_of(set));
}

TEST(Split, Deterministic) {
  const TraceSet set = generate_cc_traces(CcTraceSpec{}, 30, 1);
  auto [a1, b1] = split_holdout(set, 0.3, 9);
  auto [a2, b2] = split_holdout(set, 0.3, 9);
  EXPECT_EQ(ids_of(a1), ids_of(a2));
  EXPECT_EQ(ids_of(b1), ids_of(b2));
}

TEST(Split, Errors) {
  const TraceSet one = generate_cc_traces(CcTraceSpec{}, 1, 1);
  EXPECT_THROW(split_holdout(one, 0.2, 1), UserError);
  const TraceSet set = generate_cc_traces(CcTraceSpec{}, 4, 1);
  EXPECT_THROW(split_holdout(set, 0.0, 1), UserError);
  EXPECT_THROW(split_holdout(set, 1.0, 1), UserError);
  auto [a, b] = split_holdout(set, 0.01, 1);
  EXPECT_EQ(b.size(), 1u);
  EXPECT_EQ(a.size(), 3u);
}

TEST(Trace, TransferTimeIntegratesPiecewise) {
  // 1 Mbps for [0,1), 4 Mbps after: 3 Mb from t=0 takes 1 s + 2/4 s.
  const Trace t = test::step_trace("p", {1.0, 4.0, 4.0});
  EXPECT_NEAR(t.transfer_time(0.0, 3.0), 1.5, 1e-12);
  EXPECT_NEAR(t.transfer_time(0.5, 0.5), 0.5, 1e-12);
  // Past the end the last bandwidth holds.
  EXPECT_NEAR(t.transfer_time(10.0, 8.0), 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(t.bandwidth_at(1.5), 4.0);
  EXPECT_DOUBLE_EQ(t.duration(), 3.0);
}
