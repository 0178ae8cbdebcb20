#include "qexplain/pipeline.hpp"

#include "qexplain/error.hpp"

namespace qx {

std::string default_policy_id(EnvKind kind) { return kind == EnvKind::abr ? "abr-bba" : "cc-aimd"; }

DeskConfig desk_config(EnvKind kind) {
  DeskConfig c;
  c.env = kind;
  if (kind == EnvKind::abr) {
    c.traces.mean_mbps = {0.3, 5.0};
    c.traces.duration = 300.0;
  }
  return c;
}

TraceSet synthesize_traces(EnvKind kind, const CcTraceSpec& spec, std::size_t n, std::uint64_t seed) {
  TraceSet set = generate_cc_traces(spec, n, seed);
  return kind == EnvKind::abr ? as_abr(std::move(set)) : set;
}

Dataset build_dataset(const TraceSet& traces, const Policy& policy, const EnvFactory& factory,
                      const RolloutConfig& config) {
  auto [samples, norm] = normalize_returns(collect_rollouts(traces, policy, factory, config));
  return Dataset{factory, policy.id(), config, std::move(norm), std::move(samples)};
}

DeskRun prepare_desk_run(const DeskConfig& config, const std::function<void(const std::string&)>& log) {
  auto say = [&](const std::string& m) {
    if (log) log(m);
  };
  DeskRun run;
  run.config = config;
  run.factory.kind = config.env;
  if (config.env == EnvKind::cc) run.factory.cc.bw_cap_ref_mbps = config.traces.mean_mbps.max;

  const TraceSet all = synthesize_traces(config.env, config.traces, config.n_traces, config.seed);
  std::tie(run.train_traces, run.holdout_traces) = split_holdout(all, config.holdout_fraction, config.seed);
  run.policy = make_policy(config.policy.empty() ? default_policy_id(config.env) : config.policy, run.factory);

  say("collecting rollouts on " + std::to_string(run.train_traces.size()) + " traces");
  run.data = build_dataset(run.train_traces, *run.policy, run.factory, config.rollout);
  say("training on " + std::to_string(run.data.samples.size()) + " samples");
  run.model = train(run.data, config.train, &run.report, [&](int stage, int epoch, double loss) {
    if (epoch % 10 == 0) say("  stage " + std::to_string(stage) + " epoch " + std::to_string(epoch) + " loss " +
                             std::to_string(loss));
  });
  run.clusters = fit_clusters(run.train_traces, std::min<int>(config.clusters, static_cast<int>(run.train_traces.size())),
                              config.seed);
  run.pool = make_pool(run.train_traces);
  return run;
}

}  // namespace qx
