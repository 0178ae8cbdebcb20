#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "qexplain/trace.hpp"

namespace qx {

enum class ActionKind { discrete, continuous };

struct Action {
  ActionKind kind = ActionKind::discrete;
  int index = 0;       // discrete
  double value = 0.0;  // continuous rate delta

  static Action discrete(int i) { return {ActionKind::discrete, i, 0.0}; }
  static Action continuous(double v) { return {ActionKind::continuous, 0, v}; }
  bool operator==(const Action&) const = default;
};

std::string to_string(const Action& a);

struct ActionSpace {
  ActionKind kind = ActionKind::discrete;
  int levels = 0;  // discrete
  double lo = -1.0;
  double hi = 1.0;

  bool contains(const Action& a) const;
  // Width of the action encoding fed to the predictor.
  std::size_t encoding_size() const { return kind == ActionKind::discrete ? levels : 1; }
};

// Reward components in their fixed global order, with the weights used to
// form the scalar reward.
struct ComponentSet {
  std::vector<std::string> names;
  std::vector<double> weights;

  std::size_t size() const { return names.size(); }
  std::size_t index_of(const std::string& name) const;
  double weighted_sum(const std::vector<double>& values) const;
  bool same_names(const ComponentSet& other) const { return names == other.names; }
};

struct AbrConfig {
  int levels = 5;
  std::vector<double> chunk_mb{1.0, 2.5, 5.0, 8.0, 16.0};
  double chunk_seconds = 4.0;
  double max_buffer_s = 15.0;
  int history = 8;
  std::vector<double> weights{1.0, 1.0, 4.0};  // quality, quality_change, stalling

  double quality(int index) const { return static_cast<double>(index) / (levels - 1); }
  void validate() const;
};

struct CcConfig {
  int history = 8;
  double start_rate_mbps = 1.0;
  double min_rate_mbps = 0.1;
  double max_rate_mbps = 50.0;
  double bw_cap_ref_mbps = 10.0;
  double packet_mb = 0.012;  // 1500-byte packets
  std::vector<double> weights{1.0, 1.0, 1.0};  // throughput, latency, loss

  void validate() const;
};

nlohmann::json to_json(const AbrConfig& c);
nlohmann::json to_json(const CcConfig& c);
AbrConfig abr_config_from_json(const nlohmann::json& j);
CcConfig cc_config_from_json(const nlohmann::json& j);

ComponentSet abr_components(const AbrConfig& c);
ComponentSet cc_components(const CcConfig& c);

// History windows are ordered oldest first and zero-padded at episode start.
struct AbrState {
  std::vector<double> chunk_mb;    // sizes of the last k downloaded chunks
  std::vector<double> transmit_s;  // their download times
  double buffer_s = 0.0;
  int last_quality = 0;
  double cursor_s = 0.0;  // episode clock
};

struct CcState {
  std::vector<double> sent_mbps;
  std::vector<double> delivered_mbps;
  std::vector<double> latency_ratio;  // padded with 1.0
  std::vector<double> loss;
  double rate_mbps = 0.0;
  double queue_mb = 0.0;  // bottleneck backlog; not observable by policies
  double cursor_s = 0.0;
};

using Observation = std::variant<AbrState, CcState>;

struct StepOutcome {
  Observation next;
  std::vector<double> components;
  double total = 0.0;
  bool done = false;
};

enum class EnvKind { abr, cc };

// A trace-driven simulator. Instances are single-owner; use clone() or a
// snapshot to branch.
class Env {
 public:
  virtual ~Env() = default;

  virtual EnvKind kind() const = 0;
  virtual const ComponentSet& components() const = 0;
  virtual ActionSpace action_space() const = 0;
  virtual Observation observation() const = 0;
  virtual StepOutcome step(const Action& action) = 0;
  virtual bool done() const = 0;
  virtual std::unique_ptr<Env> clone() const = 0;
  // Typical wall duration of one step; bounds valid graft offsets.
  virtual double nominal_step_seconds() const = 0;

  // Redirect all future input lookups (bandwidth, and the link for cc) to
  // `trace` starting at `offset`.
  void graft(std::shared_ptr<const Trace> trace, double offset);

  const Trace& source() const { return *source_; }
  std::shared_ptr<const Trace> source_ptr() const { return source_; }
  const Trace& episode_trace() const { return *episode_trace_; }
  // Position of the episode clock inside the bandwidth source.
  double trace_time() const { return cursor() + shift_; }
  // Step length once `trace` drives the env; cc takes its link along with the bandwidth.
  virtual double graft_step_seconds(const Trace&) const { return nominal_step_seconds(); }

  // FNV-1a over every field that influences future outcomes.
  std::uint64_t digest() const;
  nlohmann::json state_json() const;

 protected:
  virtual double cursor() const = 0;
  virtual void write_state(nlohmann::json& j) const = 0;
  virtual void check_graft(const Trace& trace) const = 0;
  virtual void adopt(const Trace&) {}

  std::shared_ptr<const Trace> episode_trace_;
  std::shared_ptr<const Trace> source_;
  double shift_ = 0.0;
  bool done_ = false;

  friend std::unique_ptr<Env> env_from_json(const nlohmann::json& j);
};

class AbrEnv final : public Env {
 public:
  AbrEnv(std::shared_ptr<const Trace> trace, AbrConfig config);

  EnvKind kind() const override { return EnvKind::abr; }
  const ComponentSet& components() const override { return components_; }
  ActionSpace action_space() const override;
  Observation observation() const override { return state_; }
  StepOutcome step(const Action& action) override;
  bool done() const override { return done_; }
  std::unique_ptr<Env> clone() const override { return std::make_unique<AbrEnv>(*this); }
  double nominal_step_seconds() const override { return config_.chunk_seconds; }

  const AbrState& state() const { return state_; }
  const AbrConfig& config() const { return config_; }

 protected:
  double cursor() const override { return state_.cursor_s; }
  void write_state(nlohmann::json& j) const override;
  void check_graft(const Trace&) const override {}

 private:
  friend std::unique_ptr<Env> env_from_json(const nlohmann::json& j);
  AbrConfig config_;
  ComponentSet components_;
  AbrState state_;
};

class CcEnv final : public Env {
 public:
  CcEnv(std::shared_ptr<const Trace> trace, CcConfig config);

  EnvKind kind() const override { return EnvKind::cc; }
  const ComponentSet& components() const override { return components_; }
  ActionSpace action_space() const override { return {ActionKind::continuous, 0, -1.0, 1.0}; }
  Observation observation() const override { return state_; }
  StepOutcome step(const Action& action) override;
  bool done() const override { return done_; }
  std::unique_ptr<Env> clone() const override { return std::make_unique<CcEnv>(*this); }
  double nominal_step_seconds() const override { return link_.base_rtt_ms / 1000.0; }

  const CcState& state() const { return state_; }
  const CcConfig& config() const { return config_; }
  const CcLink& link() const { return link_; }

 protected:
  double cursor() const override { return state_.cursor_s; }
  void write_state(nlohmann::json& j) const override;
  void check_graft(const Trace& trace) const override;
  double graft_step_seconds(const Trace& trace) const override { return trace.link->base_rtt_ms / 1000.0; }
  void adopt(const Trace& trace) override { link_ = *trace.link; }

 private:
  friend std::unique_ptr<Env> env_from_json(const nlohmann::json& j);
  CcConfig config_;
  ComponentSet components_;
  CcLink link_;  // follows the bandwidth source: a graft brings its link along
  CcState state_;
};

// Fresh episodes on `trace`.
std::unique_ptr<AbrEnv> abr_reset(std::shared_ptr<const Trace> trace, const AbrConfig& config);
std::unique_ptr<CcEnv> cc_reset(std::shared_ptr<const Trace> trace, const CcConfig& config);

// Complete copy of an environment, tagged with a digest checked on restore.
class EnvSnapshot {
 public:
  EnvSnapshot() = default;
  explicit EnvSnapshot(const Env& env);
  EnvSnapshot(const EnvSnapshot& other);
  EnvSnapshot& operator=(const EnvSnapshot& other);
  EnvSnapshot(EnvSnapshot&&) noexcept = default;
  EnvSnapshot& operator=(EnvSnapshot&&) noexcept = default;

  bool valid() const { return env_ != nullptr; }
  const Env& peek() const { return *env_; }
  std::uint64_t checksum() const { return checksum_; }

  // Self-contained serialized form (includes the bandwidth source trace).
  nlohmann::json to_json() const;
  static EnvSnapshot from_json(const nlohmann::json& j);

 private:
  friend std::unique_ptr<Env> restore(const EnvSnapshot& snapshot);
  std::unique_ptr<Env> env_;
  std::uint64_t checksum_ = 0;
};

EnvSnapshot snapshot(const Env& env);
std::unique_ptr<Env> restore(const EnvSnapshot& snapshot);
std::unique_ptr<Env> graft_future(const EnvSnapshot& snapshot, std::shared_ptr<const Trace> trace,
                                  double offset);

// Builds an env of the given kind from a trace.
struct EnvFactory {
  EnvKind kind = EnvKind::abr;
  AbrConfig abr;
  CcConfig cc;

  std::unique_ptr<Env> make(std::shared_ptr<const Trace> trace) const;
  ComponentSet components() const;
  ActionSpace action_space() const;
  nlohmann::json to_json() const;
  static EnvFactory from_json(const nlohmann::json& j);
};

std::string to_string(EnvKind k);
EnvKind env_kind_from_string(const std::string& s);

}  // namespace qx
