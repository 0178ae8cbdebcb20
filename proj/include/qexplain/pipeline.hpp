#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>

#include "qexplain/evalsuite.hpp"
#include "qexplain/predictor.hpp"
#include "qexplain/rollout.hpp"
#include "qexplain/sampling.hpp"
#include "qexplain/trace.hpp"

namespace qx {

// End-to-end desk-scale setup shared by the CLI and the acceptance suite:
// synthesize traces, split, collect rollouts, train, fit clusters.
struct DeskConfig {
  EnvKind env = EnvKind::abr;
  std::size_t n_traces = 200;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 1;
  CcTraceSpec traces;
  RolloutConfig rollout;
  TrainConfig train;
  SamplerConfig sampler;
  int clusters = 8;
  std::string policy;  // empty: the env's reference heuristic
};

struct DeskRun {
  DeskConfig config;
  EnvFactory factory;
  TraceSet train_traces;
  TraceSet holdout_traces;
  std::unique_ptr<Policy> policy;
  Dataset data;
  PredictorModel model;
  ClusterModel clusters;
  TracePool pool;  // training traces, in cluster-model order
  TrainReport report;
};

std::string default_policy_id(EnvKind kind);
// Desk-scale defaults per env. ABR traces are slower and longer than the cc
// generator's defaults so that buffers actually drain.
DeskConfig desk_config(EnvKind kind);
TraceSet synthesize_traces(EnvKind kind, const CcTraceSpec& spec, std::size_t n, std::uint64_t seed);
Dataset build_dataset(const TraceSet& traces, const Policy& policy, const EnvFactory& factory,
                      const RolloutConfig& config);
DeskRun prepare_desk_run(const DeskConfig& config,
                         const std::function<void(const std::string&)>& log = {});

}  // namespace qx
