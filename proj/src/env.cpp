#include "qexplain/env.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "qexplain/error.hpp"
#include "qexplain/hash.hpp"

namespace qx {

using nlohmann::json;

std::string to_string(const Action& a) {
  std::ostringstream os;
  if (a.kind == ActionKind::discrete)
    os << a.index;
  else
    os << a.value;
  return os.str();
}

bool ActionSpace::contains(const Action& a) const {
  if (a.kind != kind) return false;
  if (kind == ActionKind::discrete) return a.index >= 0 && a.index < levels;
  return std::isfinite(a.value) && a.value >= lo && a.value <= hi;
}

std::size_t ComponentSet::index_of(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw UserError("unknown component " + name);
  return static_cast<std::size_t>(it - names.begin());
}

double ComponentSet::weighted_sum(const std::vector<double>& values) const {
  double total = 0.0;
  for (std::size_t c = 0; c < names.size(); ++c) total += weights[c] * values[c];
  return total;
}

std::string to_string(EnvKind k) { return k == EnvKind::abr ? "abr" : "cc"; }

EnvKind env_kind_from_string(const std::string& s) {
  if (s == "abr") return EnvKind::abr;
  if (s == "cc") return EnvKind::cc;
  throw UserError("unknown environment '" + s + "'");
}

// ---- configs -------------------------------------------------------------

void AbrConfig::validate() const {
  if (levels < 2) throw UserError("abr: levels must be >= 2");
  if (chunk_mb.size() != static_cast<std::size_t>(levels))
    throw UserError("abr: chunk_mb must have one entry per level");
  for (std::size_t i = 0; i < chunk_mb.size(); ++i) {
    if (!(chunk_mb[i] > 0.0)) throw UserError("abr: chunk sizes must be positive");
    if (i > 0 && chunk_mb[i] <= chunk_mb[i - 1])
      throw UserError("abr: chunk sizes must increase with quality");
  }
  if (!(chunk_seconds > 0.0)) throw UserError("abr: chunk_seconds must be > 0");
  if (!(max_buffer_s >= chunk_seconds)) throw UserError("abr: max_buffer_s must be >= chunk_seconds");
  if (history < 1) throw UserError("abr: history must be >= 1");
  if (weights.size() != 3) throw UserError("abr: weights must have 3 entries");
}

void CcConfig::validate() const {
  if (history < 1) throw UserError("cc: history must be >= 1");
  if (!(min_rate_mbps > 0.0 && min_rate_mbps <= max_rate_mbps))
    throw UserError("cc: need 0 < min_rate_mbps <= max_rate_mbps");
  if (!(start_rate_mbps >= min_rate_mbps && start_rate_mbps <= max_rate_mbps))
    throw UserError("cc: start_rate_mbps outside [min, max]");
  if (!(bw_cap_ref_mbps > 0.0)) throw UserError("cc: bw_cap_ref_mbps must be > 0");
  if (!(packet_mb > 0.0)) throw UserError("cc: packet_mb must be > 0");
  if (weights.size() != 3) throw UserError("cc: weights must have 3 entries");
}

json to_json(const AbrConfig& c) {
  return {{"levels", c.levels},         {"chunk_mb", c.chunk_mb},
          {"chunk_seconds", c.chunk_seconds}, {"max_buffer_s", c.max_buffer_s},
          {"history", c.history},       {"weights", c.weights}};
}

json to_json(const CcConfig& c) {
  return {{"history", c.history},
          {"start_rate_mbps", c.start_rate_mbps},
          {"min_rate_mbps", c.min_rate_mbps},
          {"max_rate_mbps", c.max_rate_mbps},
          {"bw_cap_ref_mbps", c.bw_cap_ref_mbps},
          {"packet_mb", c.packet_mb},
          {"weights", c.weights}};
}

namespace {

void reject_unknown_keys(const json& j, std::initializer_list<const char*> keys, const char* what) {
  if (!j.is_object()) throw UserError(std::string(what) + " config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) throw UserError(std::string(what) + " config: unknown key '" + k + "'");
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

AbrConfig abr_config_from_json(const json& j) {
  reject_unknown_keys(j, {"levels", "chunk_mb", "chunk_seconds", "max_buffer_s", "history", "weights"},
                      "abr");
  AbrConfig c;
  read_opt(j, "levels", c.levels);
  read_opt(j, "chunk_mb", c.chunk_mb);
  read_opt(j, "chunk_seconds", c.chunk_seconds);
  read_opt(j, "max_buffer_s", c.max_buffer_s);
  read_opt(j, "history", c.history);
  read_opt(j, "weights", c.weights);
  c.validate();
  return c;
}

CcConfig cc_config_from_json(const json& j) {
  reject_unknown_keys(j, {"history", "start_rate_mbps", "min_rate_mbps", "max_rate_mbps",
                          "bw_cap_ref_mbps", "packet_mb", "weights"},
                      "cc");
  CcConfig c;
  read_opt(j, "history", c.history);
  read_opt(j, "start_rate_mbps", c.start_rate_mbps);
  read_opt(j, "min_rate_mbps", c.min_rate_mbps);
  read_opt(j, "max_rate_mbps", c.max_rate_mbps);
  read_opt(j, "bw_cap_ref_mbps", c.bw_cap_ref_mbps);
  read_opt(j, "packet_mb", c.packet_mb);
  read_opt(j, "weights", c.weights);
  c.validate();
  return c;
}

ComponentSet abr_components(const AbrConfig& c) {
  return {{"quality", "quality_change", "stalling"}, c.weights};
}

ComponentSet cc_components(const CcConfig& c) { return {{"throughput", "latency", "loss"}, c.weights}; }

// ---- Env base --------------------------------------------------------------

void Env::graft(std::shared_ptr<const Trace> trace, double offset) {
  if (!trace) throw UserError("graft: null trace");
  check_graft(*trace);
  const double limit = trace->duration() - graft_step_seconds(*trace);
  if (!(offset >= 0.0) || offset > limit)
    throw UserError("graft: offset " + std::to_string(offset) + " outside [0, " +
                    std::to_string(std::max(limit, 0.0)) + "] for trace " + trace->id);
  adopt(*trace);
  source_ = std::move(trace);
  shift_ = offset - cursor();
  done_ = false;
}

json Env::state_json() const {
  json j;
  j["env"] = to_string(kind());
  j["episode_trace"] = episode_trace_->id;
  j["source_trace"] = source_->id;
  j["shift"] = shift_;
  j["done"] = done_;
  write_state(j);
  return j;
}

std::uint64_t Env::digest() const { return fnv1a(state_json().dump()); }

// ---- ABR -------------------------------------------------------------------

AbrEnv::AbrEnv(std::shared_ptr<const Trace> trace, AbrConfig config)
    : config_(std::move(config)), components_(abr_components(config_)) {
  config_.validate();
  if (!trace) throw UserError("abr: null trace");
  trace->validate();
  if (trace->duration() < config_.chunk_mb.front() / trace->min_bandwidth())
    throw UserError("abr: trace " + trace->id + " is shorter than one chunk download");
  episode_trace_ = trace;
  source_ = std::move(trace);
  state_.chunk_mb.assign(config_.history, 0.0);
  state_.transmit_s.assign(config_.history, 0.0);
}

ActionSpace AbrEnv::action_space() const { return {ActionKind::discrete, config_.levels, 0.0, 0.0}; }

namespace {

void push_window(std::vector<double>& window, double value) {
  std::rotate(window.begin(), window.begin() + 1, window.end());
  window.back() = value;
}

}  // namespace

StepOutcome AbrEnv::step(const Action& action) {
  if (done_) throw UserError("abr: step after episode end");
  if (!action_space().contains(action))
    throw UserError("abr: action " + to_string(action) + " out of range");
  const int a = action.index;
  const double size = config_.chunk_mb[a];
  const double download = source_->transfer_time(trace_time(), size);
  const double stall = std::max(0.0, download - state_.buffer_s);
  const double buffer =
      std::min(config_.max_buffer_s, std::max(state_.buffer_s - download, 0.0) + config_.chunk_seconds);

  StepOutcome out;
  const double q = config_.quality(a);
  const double q_last = config_.quality(state_.last_quality);
  out.components = {q, -std::abs(q - q_last), -stall};
  out.total = components_.weighted_sum(out.components);

  state_.buffer_s = buffer;
  state_.last_quality = a;
  state_.cursor_s += download;
  push_window(state_.chunk_mb, size);
  push_window(state_.transmit_s, download);
  done_ = trace_time() >= source_->duration();

  out.next = state_;
  out.done = done_;
  return out;
}

void AbrEnv::write_state(json& j) const {
  j["config"] = to_json(config_);
  j["chunk_mb"] = state_.chunk_mb;
  j["transmit_s"] = state_.transmit_s;
  j["buffer_s"] = state_.buffer_s;
  j["last_quality"] = state_.last_quality;
  j["cursor_s"] = state_.cursor_s;
}

std::unique_ptr<AbrEnv> abr_reset(std::shared_ptr<const Trace> trace, const AbrConfig& config) {
  return std::make_unique<AbrEnv>(std::move(trace), config);
}

// ---- CC --------------------------------------------------------------------

CcEnv::CcEnv(std::shared_ptr<const Trace> trace, CcConfig config)
    : config_(std::move(config)), components_(cc_components(config_)) {
  config_.validate();
  if (!trace) throw UserError("cc: null trace");
  trace->validate();
  if (!trace->link) throw UserError("cc: trace " + trace->id + " lacks base_rtt/queue/loss fields");
  link_ = *trace->link;
  if (trace->duration() < link_.base_rtt_ms / 1000.0)
    throw UserError("cc: trace " + trace->id + " is shorter than one monitor interval");
  episode_trace_ = trace;
  source_ = std::move(trace);
  const auto k = static_cast<std::size_t>(config_.history);
  state_.sent_mbps.assign(k, 0.0);
  state_.delivered_mbps.assign(k, 0.0);
  state_.latency_ratio.assign(k, 1.0);
  state_.loss.assign(k, 0.0);
  state_.rate_mbps = config_.start_rate_mbps;
}

void CcEnv::check_graft(const Trace& trace) const {
  if (trace.kind != TraceKind::cc) throw UserError("graft: cc environment needs a cc trace");
  if (!trace.link) throw UserError("graft: trace " + trace.id + " lacks base_rtt/queue/loss fields");
}

StepOutcome CcEnv::step(const Action& action) {
  if (done_) throw UserError("cc: step after episode end");
  if (!action_space().contains(action))
    throw UserError("cc: rate delta " + to_string(action) + " outside [-1, 1]");
  const double mi = link_.base_rtt_ms / 1000.0;
  const double rate =
      std::clamp(state_.rate_mbps * (1.0 + action.value), config_.min_rate_mbps, config_.max_rate_mbps);
  const double bw = source_->bandwidth_at(trace_time());
  const double delivered = std::min(rate, bw);
  const double sent_mb = rate * mi;
  const double capacity_mb = link_.queue_pkts * config_.packet_mb;

  const double backlog = std::max(0.0, state_.queue_mb + (rate - bw) * mi);
  const double overflow = std::max(0.0, backlog - capacity_mb);
  const double queue = std::min(backlog, capacity_mb);
  const double loss = std::clamp(overflow / sent_mb + link_.loss_rate, 0.0, 1.0);
  const double latency_ratio = 1.0 + queue / (bw * mi);

  StepOutcome out;
  out.components = {delivered / config_.bw_cap_ref_mbps, -(latency_ratio - 1.0), -loss};
  out.total = components_.weighted_sum(out.components);

  state_.rate_mbps = rate;
  state_.queue_mb = queue;
  state_.cursor_s += mi;
  push_window(state_.sent_mbps, rate);
  push_window(state_.delivered_mbps, delivered);
  push_window(state_.latency_ratio, latency_ratio);
  push_window(state_.loss, loss);
  done_ = trace_time() >= source_->duration();

  out.next = state_;
  out.done = done_;
  return out;
}

void CcEnv::write_state(json& j) const {
  j["config"] = to_json(config_);
  j["link"] = {{"base_rtt_ms", link_.base_rtt_ms},
               {"queue_pkts", link_.queue_pkts},
               {"loss_rate", link_.loss_rate}};
  j["sent_mbps"] = state_.sent_mbps;
  j["delivered_mbps"] = state_.delivered_mbps;
  j["latency_ratio"] = state_.latency_ratio;
  j["loss"] = state_.loss;
  j["rate_mbps"] = state_.rate_mbps;
  j["queue_mb"] = state_.queue_mb;
  j["cursor_s"] = state_.cursor_s;
}

std::unique_ptr<CcEnv> cc_reset(std::shared_ptr<const Trace> trace, const CcConfig& config) {
  return std::make_unique<CcEnv>(std::move(trace), config);
}

// ---- snapshots ---------------------------------------------------------------

EnvSnapshot::EnvSnapshot(const Env& env) : env_(env.clone()), checksum_(env.digest()) {}

EnvSnapshot::EnvSnapshot(const EnvSnapshot& other)
    : env_(other.env_ ? other.env_->clone() : nullptr), checksum_(other.checksum_) {}

EnvSnapshot& EnvSnapshot::operator=(const EnvSnapshot& other) {
  if (this != &other) {
    env_ = other.env_ ? other.env_->clone() : nullptr;
    checksum_ = other.checksum_;
  }
  return *this;
}

json EnvSnapshot::to_json() const {
  if (!env_) throw UserError("snapshot: empty");
  json j;
  j["state"] = env_->state_json();
  j["episode_trace"] = json::parse(trace_to_jsonl(env_->episode_trace()));
  j["source_trace"] = json::parse(trace_to_jsonl(env_->source()));
  j["checksum"] = hex64(checksum_);
  return j;
}

std::unique_ptr<Env> env_from_json(const json& j) {
  const json& st = j.at("state");
  auto episode = std::make_shared<const Trace>(trace_from_jsonl(j.at("episode_trace").dump()));
  auto source = std::make_shared<const Trace>(trace_from_jsonl(j.at("source_trace").dump()));
  if (st.at("episode_trace") != episode->id || st.at("source_trace") != source->id)
    throw UserError("snapshot: trace ids do not match state");
  std::unique_ptr<Env> env;
  if (st.at("env") == "abr") {
    auto abr = std::make_unique<AbrEnv>(episode, abr_config_from_json(st.at("config")));
    abr->state_.chunk_mb = st.at("chunk_mb").get<std::vector<double>>();
    abr->state_.transmit_s = st.at("transmit_s").get<std::vector<double>>();
    abr->state_.buffer_s = st.at("buffer_s").get<double>();
    abr->state_.last_quality = st.at("last_quality").get<int>();
    abr->state_.cursor_s = st.at("cursor_s").get<double>();
    env = std::move(abr);
  } else {
    auto cc = std::make_unique<CcEnv>(episode, cc_config_from_json(st.at("config")));
    const json& link = st.at("link");
    cc->link_ = {link.at("base_rtt_ms").get<double>(), link.at("queue_pkts").get<double>(),
                 link.at("loss_rate").get<double>()};
    cc->state_.sent_mbps = st.at("sent_mbps").get<std::vector<double>>();
    cc->state_.delivered_mbps = st.at("delivered_mbps").get<std::vector<double>>();
    cc->state_.latency_ratio = st.at("latency_ratio").get<std::vector<double>>();
    cc->state_.loss = st.at("loss").get<std::vector<double>>();
    cc->state_.rate_mbps = st.at("rate_mbps").get<double>();
    cc->state_.queue_mb = st.at("queue_mb").get<double>();
    cc->state_.cursor_s = st.at("cursor_s").get<double>();
    env = std::move(cc);
  }
  env->source_ = source;
  env->shift_ = st.at("shift").get<double>();
  env->done_ = st.at("done").get<bool>();
  return env;
}

EnvSnapshot EnvSnapshot::from_json(const json& j) {
  std::unique_ptr<Env> env;
  try {
    env = env_from_json(j);
  } catch (const UserError&) {
    throw;
  } catch (const std::exception& e) {
    throw UserError(std::string("snapshot: corrupted: ") + e.what());
  }
  EnvSnapshot snap;
  snap.checksum_ = env->digest();
  if (hex64(snap.checksum_) != j.at("checksum").get<std::string>())
    throw UserError("snapshot: checksum mismatch (corrupted snapshot)");
  snap.env_ = std::move(env);
  return snap;
}

EnvSnapshot snapshot(const Env& env) { return EnvSnapshot(env); }

std::unique_ptr<Env> restore(const EnvSnapshot& snap) {
  if (!snap.env_) throw UserError("restore: empty snapshot");
  auto env = snap.env_->clone();
  if (env->digest() != snap.checksum_) throw UserError("restore: snapshot checksum mismatch");
  return env;
}

std::unique_ptr<Env> graft_future(const EnvSnapshot& snap, std::shared_ptr<const Trace> trace,
                                  double offset) {
  auto env = restore(snap);
  env->graft(std::move(trace), offset);
  return env;
}

// ---- factory -------------------------------------------------------------------

std::unique_ptr<Env> EnvFactory::make(std::shared_ptr<const Trace> trace) const {
  if (kind == EnvKind::abr) return abr_reset(std::move(trace), abr);
  return cc_reset(std::move(trace), cc);
}

ComponentSet EnvFactory::components() const {
  return kind == EnvKind::abr ? abr_components(abr) : cc_components(cc);
}

ActionSpace EnvFactory::action_space() const {
  if (kind == EnvKind::abr) return {ActionKind::discrete, abr.levels, 0.0, 0.0};
  return {ActionKind::continuous, 0, -1.0, 1.0};
}

json EnvFactory::to_json() const {
  return {{"env", to_string(kind)}, {"config", kind == EnvKind::abr ? qx::to_json(abr) : qx::to_json(cc)}};
}

EnvFactory EnvFactory::from_json(const json& j) {
  EnvFactory f;
  f.kind = env_kind_from_string(j.at("env").get<std::string>());
  const json cfg = j.contains("config") ? j.at("config") : json::object();
  if (f.kind == EnvKind::abr)
    f.abr = abr_config_from_json(cfg);
  else
    f.cc = cc_config_from_json(cfg);
  return f;
}

}  // namespace qx
