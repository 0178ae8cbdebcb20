#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "qexplain/env.hpp"
#include "qexplain/evalsuite.hpp"
#include "qexplain/policy.hpp"
#include "qexplain/predictor.hpp"
#include "qexplain/rollout.hpp"
#include "qexplain/sampling.hpp"
#include "qexplain/trace.hpp"

namespace qx {

// An addressable anchor state on a held-out trace.
struct StateEntry {
  std::string id;  // "<trace id>@<step>"
  std::string trace_id;
  int anchor = 0;
  double time_s = 0.0;
  EnvSnapshot snapshot;
  Observation state;
  FeatureVector features;
  Action policy_action;
  nlohmann::json history;  // arrays for charting
};

// Everything the service reads. Built once, never mutated while serving.
struct SessionStore {
  EnvFactory env;
  std::shared_ptr<const Policy> policy;
  PredictorModel model;
  std::optional<ClusterModel> clusters;
  TraceSet holdout;
  TraceSet train;  // sampler futures; empty disables the samplers
  TracePool pool;
  SamplerConfig sampler;
  ThresholdSpec thresholds;
  std::vector<StateEntry> states;
  std::unordered_map<std::string, std::size_t> index;

  const StateEntry* find(const std::string& id) const;
};

// Anchors are placed exactly as the evaluation places them: every `spacing`
// steps along the policy's trajectory on each held-out trace.
SessionStore build_session(EnvFactory env, std::shared_ptr<const Policy> policy, PredictorModel model,
                           TraceSet holdout, TraceSet train, std::optional<ClusterModel> clusters,
                           const RolloutConfig& rollout, const SamplerConfig& sampler);

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

// Transport-free request dispatch; serve() only adapts HTTP onto this.
ApiResponse handle_request(const SessionStore& store, const std::string& verb, const std::string& path,
                           const std::map<std::string, std::string>& params, const std::string& body);

// Explanation payload for one (state, action, method). Throws ApiError.
nlohmann::json explain_state(const SessionStore& store, const StateEntry& state, const Action& action,
                             const std::string& method);

struct ApiError {
  int status;
  std::string message;
};

// bind() then run(); run() blocks until stop(). Port 0 binds any free port.
class Service {
 public:
  explicit Service(const SessionStore& store, std::string static_dir = {});
  ~Service();
  bool bind(const std::string& host, int port);
  int port() const { return port_; }
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = -1;
};

}  // namespace qx
