#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qexplain/env.hpp"
#include "qexplain/policy.hpp"
#include "qexplain/rollout.hpp"
#include "qexplain/trace.hpp"

namespace qx {

using TracePool = std::vector<std::shared_ptr<const Trace>>;
TracePool make_pool(const TraceSet& traces);

using ClusterPoint = std::array<double, 2>;  // standardized (mean_bw, cov_bw)

struct ClusterModel {
  std::vector<ClusterPoint> centroids;
  ClusterPoint center{0.0, 0.0};  // standardization, from training traces only
  ClusterPoint scale{1.0, 1.0};
  std::vector<std::string> trace_ids;
  std::vector<int> assignment;          // parallel to trace_ids
  std::vector<double> objective_trace;  // within-cluster SS after each assignment pass

  int k() const { return static_cast<int>(centroids.size()); }
  ClusterPoint standardize(double mean_bw, double cov_bw) const;
  int nearest(const ClusterPoint& p) const;
  std::vector<std::size_t> members(int cluster) const;  // indices into trace_ids
  nlohmann::json to_json() const;
  static ClusterModel from_json(const nlohmann::json& j);
};

// Lloyd's algorithm on standardized (mean, cov) trace statistics with
// k-means++ seeding and an iteration cap.
ClusterModel fit_clusters(const TraceSet& traces, int k, std::uint64_t seed, int max_iterations = 100);

struct SamplerConfig {
  int n_samples = 20;
  double gamma = 0.9;
  int t_max = 5;
  int window = 4;  // recent steps summarizing the observed inputs
  std::uint64_t seed = 0;
  int max_retries = 100;

  void validate() const;
};

struct SamplerResult {
  DecomposedReturn mean;
  std::vector<DecomposedReturn> rollouts;  // one per sampled future
  std::vector<std::string> trace_ids;      // trace grafted for each rollout
  std::vector<double> offsets;
  int cluster = -1;                // distribution-aware only
  bool empty_cluster_fallback = false;
  bool no_observation_fallback = false;
};

// Mean of n rollouts from `snap`, each with the future replaced by a
// uniformly chosen trace and offset from `pool`.
SamplerResult naive_estimate(const EnvSnapshot& snap, const Policy& policy, const TracePool& pool,
                             const Action& action, const SamplerConfig& config);

// (mean, cov) of the throughput the state has observed over its last
// `window` steps; nullopt when the history is still empty.
std::optional<std::pair<double, double>> observed_input_summary(const Observation& obs, int window);

// Like naive_estimate, but futures are drawn only from traces in the cluster
// nearest to the state's observed input summary. `pool` must be the traces the
// cluster model was fitted on. A state with no history samples the whole pool.
SamplerResult distribution_aware_estimate(const EnvSnapshot& snap, const Observation& state,
                                          const Policy& policy, const ClusterModel& model,
                                          const TracePool& pool, const Action& action,
                                          const SamplerConfig& config);

}  // namespace qx
