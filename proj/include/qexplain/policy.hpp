#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "qexplain/dense.hpp"
#include "qexplain/env.hpp"

namespace qx {

enum class FeatureMode { raw, embedding };

struct FeatureVector {
  std::vector<double> values;
  FeatureMode mode = FeatureMode::raw;
};

// The fixed controller under explanation. act() must be a pure function of
// the observation.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::string id() const = 0;
  virtual ActionSpace action_space() const = 0;
  virtual Action act(const Observation& obs) const = 0;
  virtual bool has_embedding() const { return false; }
  virtual std::vector<double> embed(const Observation& obs) const;
};

// Buffer-based rate selection: lowest quality below the reservoir, highest
// above the cushion, linear in between.
class AbrBufferPolicy final : public Policy {
 public:
  explicit AbrBufferPolicy(int levels = 5, double reservoir_s = 5.0, double cushion_s = 10.0);
  std::string id() const override { return "abr-bba"; }
  ActionSpace action_space() const override { return {ActionKind::discrete, levels_, 0.0, 0.0}; }
  Action act(const Observation& obs) const override;

 private:
  int levels_;
  double reservoir_;
  double cushion_;
};

// One-chunk lookahead that maximizes the weighted reward under a harmonic-mean
// throughput estimate. Its behavior depends on the reward weights, which
// makes it the controller for reward-design sweeps.
class AbrLookaheadPolicy final : public Policy {
 public:
  AbrLookaheadPolicy(AbrConfig config, int window = 5, int horizon = 3);
  std::string id() const override { return "abr-mpc"; }
  ActionSpace action_space() const override { return {ActionKind::discrete, config_.levels, 0.0, 0.0}; }
  Action act(const Observation& obs) const override;

 private:
  AbrConfig config_;
  int window_;
  int horizon_;
};

// Additive increase / multiplicative decrease on the rate delta.
class CcAimdPolicy final : public Policy {
 public:
  explicit CcAimdPolicy(double loss_tolerance = 0.03, double latency_tolerance = 1.1);
  std::string id() const override { return "cc-aimd"; }
  ActionSpace action_space() const override { return {ActionKind::continuous, 0, -1.0, 1.0}; }
  Action act(const Observation& obs) const override;

 private:
  double loss_tolerance_;
  double latency_tolerance_;
};

// A feed-forward policy loaded from JSON:
//   {"magic":"qxpolicy1","env":"abr"|"cc","net":[layers as in the checkpoint]}
// Input is the raw feature vector. Discrete policies take the argmax output,
// continuous ones tanh(output[0]). embed() returns the last hidden layer.
class ExternalPolicy final : public Policy {
 public:
  ExternalPolicy(EnvFactory env, DenseNet net);
  static std::unique_ptr<ExternalPolicy> load(const std::filesystem::path& path);

  std::string id() const override { return "external"; }
  ActionSpace action_space() const override { return env_.action_space(); }
  Action act(const Observation& obs) const override;
  bool has_embedding() const override { return net_.layers().size() > 1; }
  std::vector<double> embed(const Observation& obs) const override;

 private:
  EnvFactory env_;
  DenseNet net_;
};

std::unique_ptr<Policy> make_policy(const std::string& id, const EnvFactory& env,
                                    const std::filesystem::path& external_path = {});

// Raw layouts: ABR 2k+2 values (chunk sizes/16 Mb, download times/10 s
// clamped to 1, buffer/B_max, last index/(L-1)); CC 4k+1 values (sent and
// delivered rates/r_max, latency ratio mapped from [1,5] to [0,1], loss,
// current rate/r_max).
FeatureVector featurize(const Observation& obs, FeatureMode mode, const EnvFactory& env,
                        const Policy* policy = nullptr);
std::size_t raw_feature_size(const EnvFactory& env);

}  // namespace qx
