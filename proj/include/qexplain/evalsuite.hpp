#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qexplain/env.hpp"
#include "qexplain/policy.hpp"
#include "qexplain/predictor.hpp"
#include "qexplain/rollout.hpp"
#include "qexplain/sampling.hpp"

namespace qx {

enum class QueryFlavor { factual, counterfactual };
std::string to_string(QueryFlavor f);
QueryFlavor query_flavor_from_string(const std::string& s);

// Per-component squared error between a prediction and one held-out ground
// truth sample, both scaled to [0,1].
struct FidelityRecord {
  std::string method;
  QueryFlavor flavor = QueryFlavor::factual;
  std::string trace_id;
  int anchor = 0;
  Action action;
  std::vector<double> sq_error;
  std::vector<bool> excluded;  // degenerate components
};

// Scales both returns with `spec` (clamped to [0,1]) and squares the
// per-component differences.
FidelityRecord fidelity(const DecomposedReturn& predicted, const DecomposedReturn& truth,
                        const NormalizationSpec& spec);

// One (state, action) question asked of every method.
struct Query {
  std::string trace_id;
  int anchor = 0;
  EnvSnapshot snapshot;
  Observation state;
  FeatureVector features;
  Action policy_action;
  Action action;
  DecomposedReturn truth;  // single-sample truncated return on the held-out trace
};

// Factual: the policy action. Counterfactual: every other discrete action,
// or the grid {-0.5, 0, 0.5} minus the point nearest the policy action.
std::vector<Action> query_actions(const Action& policy_action, const ActionSpace& space, QueryFlavor flavor);

// Anchors on the held-out traces placed exactly as the rollout engine places
// them along on-policy trajectories.
std::vector<Query> build_queries(const TraceSet& holdout, const Policy& policy, const EnvFactory& env,
                                 QueryFlavor flavor, const RolloutConfig& config);

// A method that estimates decomposed returns (in raw units) for a query.
class ReturnEstimator {
 public:
  virtual ~ReturnEstimator() = default;
  virtual std::string id() const = 0;
  virtual DecomposedReturn estimate(const Query& q, std::size_t index) const = 0;
};

class PredictorEstimator final : public ReturnEstimator {
 public:
  explicit PredictorEstimator(const PredictorModel& model) : model_(model) {}
  std::string id() const override { return "predictor"; }
  DecomposedReturn estimate(const Query& q, std::size_t index) const override;

 private:
  const PredictorModel& model_;
};

class NaiveEstimator final : public ReturnEstimator {
 public:
  NaiveEstimator(const Policy& policy, const TracePool& pool, SamplerConfig config)
      : policy_(policy), pool_(pool), config_(config) {}
  std::string id() const override { return "naive"; }
  DecomposedReturn estimate(const Query& q, std::size_t index) const override;

 private:
  const Policy& policy_;
  const TracePool& pool_;
  SamplerConfig config_;
};

class DistAwareEstimator final : public ReturnEstimator {
 public:
  DistAwareEstimator(const Policy& policy, const ClusterModel& clusters, const TracePool& pool, SamplerConfig config)
      : policy_(policy), clusters_(clusters), pool_(pool), config_(config) {}
  std::string id() const override { return "dist-aware"; }
  DecomposedReturn estimate(const Query& q, std::size_t index) const override;

 private:
  const Policy& policy_;
  const ClusterModel& clusters_;
  const TracePool& pool_;
  SamplerConfig config_;
};

// Per-component thresholds; an event fires when the scaled return is
// strictly below the threshold. Returns are scaled by dividing by the
// discount mass of the horizon, i.e. a discounted per-step average.
struct ThresholdSpec {
  std::vector<std::string> components;
  std::vector<double> thresholds;
};

ThresholdSpec default_thresholds(EnvKind kind);
std::vector<double> scale_for_events(const std::vector<double>& raw, double gamma, int t_max);
std::vector<bool> detect_events(const std::vector<double>& scaled_returns, const ThresholdSpec& spec);

struct EventMetrics {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double recall = 1.0;
  double fpr = 0.0;
};

EventMetrics event_metrics(const std::vector<bool>& predicted, const std::vector<bool>& truth);

struct Quantiles {
  double p25 = 0.0, p50 = 0.0, p75 = 0.0, p95 = 0.0;
};

// Linear interpolation between order statistics.
double quantile(std::vector<double> values, double q);

struct EvaluationResult {
  std::string method;
  QueryFlavor flavor = QueryFlavor::factual;
  std::vector<std::string> components;
  std::vector<FidelityRecord> records;
  std::vector<Quantiles> quantiles;      // per component
  std::vector<EventMetrics> events;      // per component
  std::vector<bool> excluded;            // degenerate components
  double seconds = 0.0;

  nlohmann::json summary_json() const;
};

EvaluationResult evaluate_method(const ReturnEstimator& method, const std::vector<Query>& queries,
                                 QueryFlavor flavor, const NormalizationSpec& spec, const ComponentSet& components,
                                 const ThresholdSpec& thresholds);

// CSV rows "method,component,flavor,sq_error", one per (query, component).
void write_fidelity_csv(std::ostream& out, const EvaluationResult& result, bool header = true);

// argmax_c |a_c - b_c|, ties broken by component order.
std::size_t dominant_component(const std::vector<double>& a, const std::vector<double>& b);
std::size_t dominant_component(const Explanation& a, const Explanation& b);

struct LatencyStats {
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double mean_ms = 0.0;
  std::size_t n = 0;
};

inline constexpr int kLatencyWarmup = 10;

// Calls fn(i) kLatencyWarmup times untimed, then n timed calls.
LatencyStats latency_benchmark(const std::function<void(std::size_t)>& fn, std::size_t n);

struct RewardDesignRow {
  double stall_weight = 0.0;
  std::size_t states = 0;
  std::size_t drop_states = 0;
  std::vector<std::size_t> dominant_counts;  // per component, over drop states
  double stalling_share() const;
};

struct RewardDesignConfig {
  std::vector<double> stall_weights{16.0, 4.0, 1.0};
  RolloutConfig rollout;
  TrainConfig train;
};

// For each stall weight: roll the weight-aware ABR controller over `train`,
// fit a predictor, then on every held-out state where the controller lowers
// the bitrate compare the explanation of that drop with keeping the bitrate,
// after weighting each component by its reward weight.
std::vector<RewardDesignRow> reward_design_sweep(const TraceSet& train, const TraceSet& holdout,
                                                 const AbrConfig& base, const RewardDesignConfig& config);

}  // namespace qx
