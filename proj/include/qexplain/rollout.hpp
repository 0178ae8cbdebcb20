#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "qexplain/env.hpp"
#include "qexplain/policy.hpp"
#include "qexplain/trace.hpp"

namespace qx {

// Per-component truncated discounted return, ordered like the ComponentSet.
struct DecomposedReturn {
  std::vector<double> values;
  double gamma = 0.9;
  int t_max = 5;
};

// value_c = sum_{dt < min(t_max, len)} gamma^dt * rewards[dt][c]
DecomposedReturn truncated_decomposed_return(const std::vector<std::vector<double>>& rewards, double gamma,
                                             int t_max);

// sum_{dt < n} gamma^dt, the weight mass of a window of n steps.
double discount_mass(double gamma, int n);

enum class Flavor { onpolicy, exploratory };
std::string to_string(Flavor f);
Flavor flavor_from_string(const std::string& s);

struct RolloutSample {
  FeatureVector features;
  std::vector<double> action_encoding;
  Action action;
  DecomposedReturn target;
  Flavor flavor = Flavor::onpolicy;
  std::string trace_id;
  int anchor = 0;  // step index within the episode
  int window = 0;  // steps actually summed (< t_max near trace end)
};

struct RolloutConfig {
  double gamma = 0.9;
  int t_max = 5;
  int spacing = 5;
  double exploratory_fraction = 0.5;
  std::uint64_t seed = 0;
  FeatureMode mode = FeatureMode::raw;

  void validate() const;
  nlohmann::json to_json() const;
  static RolloutConfig from_json(const nlohmann::json& j);
};

// Per-component affine map of returns onto [0,1]. Components whose training
// range collapsed to a point map to 0.5 and are flagged.
struct NormalizationSpec {
  std::vector<double> min;
  std::vector<double> max;
  std::vector<bool> degenerate;

  std::size_t size() const { return min.size(); }
  std::vector<double> normalize(const std::vector<double>& v) const;
  std::vector<double> denormalize(const std::vector<double>& v) const;
  nlohmann::json to_json() const;
  static NormalizationSpec from_json(const nlohmann::json& j);
};

// One-hot for discrete spaces, the scalar itself for continuous ones.
std::vector<double> encode_action(const Action& a, const ActionSpace& space);

// Picks the explorative first action of an exploratory rollout.
using ActionSampler = std::function<Action(const Observation&, std::mt19937_64&)>;

// Uniform over discrete actions. For continuous spaces, with probability 1/2
// a uniform pick from {-0.5, 0, 0.5}, otherwise uniform on [lo, hi].
ActionSampler default_action_sampler(const ActionSpace& space);

// Seed for the per-trace random substream.
std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index);

// Rolls `policy` over every trace; every `spacing` steps an anchor is taken
// and labeled with the truncated return of the next t_max steps. Each
// anchor is exploratory with probability exploratory_fraction.
std::vector<RolloutSample> collect_rollouts(const TraceSet& traces, const Policy& policy,
                                            const EnvFactory& env, const RolloutConfig& config,
                                            const ActionSampler& sampler = {});
std::vector<RolloutSample> collect_onpolicy(const TraceSet& traces, const Policy& policy,
                                            const EnvFactory& env, RolloutConfig config);
std::vector<RolloutSample> collect_exploratory(const TraceSet& traces, const Policy& policy,
                                               const EnvFactory& env, RolloutConfig config,
                                               const ActionSampler& sampler = {});

// Returns samples with targets mapped into [0,1] and the spec that did it.
std::pair<std::vector<RolloutSample>, NormalizationSpec> normalize_returns(std::vector<RolloutSample> samples);

// Samples plus the metadata needed to train and to interpret predictions.
struct Dataset {
  EnvFactory env;
  std::string policy_id;
  RolloutConfig config;
  NormalizationSpec normalization;
  std::vector<RolloutSample> samples;  // normalized targets
};

// JSONL: one header line {"header":{...}} then one sample per line:
// {"features":[...],"action":[...],"target":[...],"flavor":"onpolicy","trace":"t-001","anchor":12}
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace qx
