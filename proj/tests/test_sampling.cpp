#include <cmath>
#include <set>

#include "qexplain/error.hpp"
#include "qexplain/sampling.hpp"
#include "support.hpp"

using namespace qx;

namespace {

class LowestQuality final : public Policy {
 public:
  std::string id() const override { return "lowest"; }
  ActionSpace action_space() const override { return {ActionKind::discrete, 5, 0, 0}; }
  Action act(const Observation&) const override { return Action::discrete(0); }
};

TraceSet constants(const std::vector<double>& bws, double duration, const std::string& prefix = "t") {
  TraceSet set;
  for (std::size_t i = 0; i < bws.size(); ++i)
    set.traces.push_back(test::constant_trace(prefix + std::to_string(i), bws[i], duration));
  return set;
}

std::unique_ptr<Env> advanced(double bw, int steps, const Policy& policy) {
  auto env = EnvFactory{}.make(test::share(test::constant_trace("here", bw, 600.0)));
  for (int i = 0; i < steps; ++i) env->step(policy.act(env->observation()));
  return env;
}

// Direct rollout from the snapshot on its own trace.
std::vector<double> direct(const EnvSnapshot& snap, const Policy& policy, const Action& a, double gamma, int t_max) {
  auto env = restore(snap);
  std::vector<double> out(env->components().size(), 0.0);
  Action next = a;
  for (int k = 0; k < t_max && !env->done(); ++k) {
    const auto r = env->step(next);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += std::pow(gamma, k) * r.components[c];
    next = policy.act(env->observation());
  }
  return out;
}

}  // namespace

TEST(Naive, ConstantTracesReproduceTheFuture) {
  const LowestQuality policy;
  const auto env = advanced(1.0, 6, policy);
  const EnvSnapshot snap(*env);
  const TracePool pool = make_pool(constants({1.0, 1.0, 1.0}, 600.0));
  SamplerConfig c;
  c.seed = 3;
  for (int a = 0; a < 5; ++a) {
    const SamplerResult r = naive_estimate(snap, policy, pool, Action::discrete(a), c);
    const auto truth = direct(snap, policy, Action::discrete(a), c.gamma, c.t_max);
    for (std::size_t k = 0; k < truth.size(); ++k) EXPECT_NEAR(r.mean.values[k], truth[k], 1e-9);
  }
}

TEST(Naive, SingleSampleAndMeanOfRollouts) {
  const AbrBufferPolicy policy;
  const auto env = advanced(2.0, 5, policy);
  const EnvSnapshot snap(*env);
  const TracePool pool = make_pool(constants({0.5, 1.0, 3.0, 8.0}, 300.0));
  SamplerConfig c;
  c.n_samples = 1;
  const SamplerResult one = naive_estimate(snap, policy, pool, Action::discrete(2), c);
  ASSERT_EQ(one.rollouts.size(), 1u);
  EXPECT_EQ(one.mean.values, one.rollouts[0].values);

  c.n_samples = 20;
  const SamplerResult r = naive_estimate(snap, policy, pool, Action::discrete(2), c);
  ASSERT_EQ(r.rollouts.size(), 20u);
  for (std::size_t k = 0; k < r.mean.values.size(); ++k) {
    double sum = 0.0;
    for (const auto& x : r.rollouts) sum += x.values[k];
    EXPECT_NEAR(r.mean.values[k], sum / 20.0, 1e-12);
  }
  std::set<std::string> seen(r.trace_ids.begin(), r.trace_ids.end());
  EXPECT_GT(seen.size(), 1u);
}

TEST(Naive, OffsetsStayInsideTheWindow) {
  const AbrBufferPolicy policy;
  const auto env = advanced(2.0, 3, policy);
  const TracePool pool = make_pool(constants({1.0, 2.0}, 50.0));
  SamplerConfig c;
  c.n_samples = 200;
  const SamplerResult r = naive_estimate(EnvSnapshot(*env), policy, pool, Action::discrete(0), c);
  for (double o : r.offsets) {
    EXPECT_GE(o, 0.0);
    EXPECT_LE(o, 50.0 - c.t_max * 4.0);
  }
  const TracePool short_pool = make_pool(constants({1.0}, 10.0));
  EXPECT_THROW(naive_estimate(EnvSnapshot(*env), policy, short_pool, Action::discrete(0), c), UserError);
  EXPECT_THROW(naive_estimate(EnvSnapshot(*env), policy, TracePool{}, Action::discrete(0), c), UserError);
}

TEST(Naive, Deterministic) {
  const AbrBufferPolicy policy;
  const auto env = advanced(2.0, 4, policy);
  const TracePool pool = make_pool(constants({0.5, 1.0, 3.0}, 200.0));
  SamplerConfig c;
  c.seed = 17;
  const auto a = naive_estimate(EnvSnapshot(*env), policy, pool, Action::discrete(1), c);
  const auto b = naive_estimate(EnvSnapshot(*env), policy, pool, Action::discrete(1), c);
  EXPECT_EQ(a.mean.values, b.mean.values);
  EXPECT_EQ(a.offsets, b.offsets);
}

TEST(Clusters, SingleClusterAtOrigin) {
  const ClusterModel m = fit_clusters(constants({1, 2, 3, 4, 5}, 30.0), 1, 1);
  ASSERT_EQ(m.k(), 1);
  EXPECT_NEAR(m.centroids[0][0], 0.0, 1e-12);
  EXPECT_NEAR(m.centroids[0][1], 0.0, 1e-12);
  for (int a : m.assignment) EXPECT_EQ(a, 0);
}

TEST(Clusters, SeparatesTwoGroups) {
  const TraceSet set = constants({1, 1, 1, 50, 50, 50}, 30.0);
  const ClusterModel m = fit_clusters(set, 2, 4);
  ASSERT_EQ(m.k(), 2);
  EXPECT_EQ(m.assignment[0], m.assignment[1]);
  EXPECT_EQ(m.assignment[1], m.assignment[2]);
  EXPECT_EQ(m.assignment[3], m.assignment[4]);
  EXPECT_EQ(m.assignment[4], m.assignment[5]);
  EXPECT_NE(m.assignment[0], m.assignment[3]);
}

TEST(Clusters, OneClusterPerTraceHasZeroObjective) {
  const ClusterModel m = fit_clusters(constants({1, 2, 4, 8}, 30.0), 4, 2);
  ASSERT_FALSE(m.objective_trace.empty());
  EXPECT_NEAR(m.objective_trace.back(), 0.0, 1e-12);
  EXPECT_EQ(std::set<int>(m.assignment.begin(), m.assignment.end()).size(), 4u);
  EXPECT_THROW(fit_clusters(constants({1, 2}, 30.0), 3, 2), UserError);
}

TEST(Clusters, ObjectiveNeverIncreases) {
  CcTraceSpec spec;
  spec.mean_mbps = {0.5, 20.0};
  const TraceSet set = as_abr(generate_cc_traces(spec, 60, 8));
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ClusterModel m = fit_clusters(set, 5, seed);
    for (std::size_t i = 1; i < m.objective_trace.size(); ++i)
      EXPECT_LE(m.objective_trace[i], m.objective_trace[i - 1] + 1e-12);
  }
}

TEST(Clusters, JsonRoundTrip) {
  const ClusterModel m = fit_clusters(constants({1, 1, 50, 50}, 30.0), 2, 1);
  const ClusterModel back = ClusterModel::from_json(m.to_json());
  EXPECT_EQ(back.to_json(), m.to_json());
}

TEST(DistAware, DrawsFromTheMatchingCluster) {
  const AbrBufferPolicy policy;
  TraceSet train = constants({1, 1, 1}, 300.0, "slow");
  for (auto& t : constants({50, 50, 50}, 300.0, "fast").traces) train.traces.push_back(t);
  const ClusterModel m = fit_clusters(train, 2, 3);
  const TracePool pool = make_pool(train);
  const auto env = advanced(1.0, 6, policy);
  SamplerConfig c;
  const auto r = distribution_aware_estimate(EnvSnapshot(*env), env->observation(), policy, m, pool,
                                             Action::discrete(0), c);
  EXPECT_FALSE(r.no_observation_fallback);
  EXPECT_FALSE(r.empty_cluster_fallback);
  for (const auto& id : r.trace_ids) EXPECT_EQ(id.rfind("slow", 0), 0u) << id;
}

TEST(DistAware, SingleClusterEqualsNaive) {
  const AbrBufferPolicy policy;
  const TraceSet train = constants({0.5, 1, 2, 6}, 300.0);
  const ClusterModel m = fit_clusters(train, 1, 3);
  const TracePool pool = make_pool(train);
  const auto env = advanced(2.0, 4, policy);
  SamplerConfig c;
  c.seed = 5;
  const auto d = distribution_aware_estimate(EnvSnapshot(*env), env->observation(), policy, m, pool,
                                             Action::discrete(3), c);
  const auto n = naive_estimate(EnvSnapshot(*env), policy, pool, Action::discrete(3), c);
  EXPECT_EQ(d.mean.values, n.mean.values);
  EXPECT_EQ(d.trace_ids, n.trace_ids);
}

TEST(DistAware, NoHistoryFallsBackAndPoolMustMatch) {
  const AbrBufferPolicy policy;
  const TraceSet train = constants({1, 50}, 300.0);
  const ClusterModel m = fit_clusters(train, 2, 3);
  auto env = EnvFactory{}.make(test::share(test::constant_trace("fresh", 2.0, 300.0)));
  const auto r = distribution_aware_estimate(EnvSnapshot(*env), env->observation(), policy, m, make_pool(train),
                                             Action::discrete(0), SamplerConfig{});
  EXPECT_TRUE(r.no_observation_fallback);
  EXPECT_THROW(distribution_aware_estimate(EnvSnapshot(*env), env->observation(), policy, m,
                                           make_pool(constants({1, 50}, 300.0, "x")), Action::discrete(0),
                                           SamplerConfig{}),
               UserError);
}

TEST(ObservedSummary, AbrRates) {
  AbrState s;
  s.chunk_mb = {0, 0, 2, 4};
  s.transmit_s = {0, 0, 1, 1};
  const auto sum = observed_input_summary(s, 4);
  ASSERT_TRUE(sum);
  EXPECT_DOUBLE_EQ(sum->first, 3.0);
  EXPECT_DOUBLE_EQ(sum->second, 1.0 / 3.0);
  EXPECT_FALSE(observed_input_summary(AbrState{{0, 0}, {0, 0}}, 4));
}
