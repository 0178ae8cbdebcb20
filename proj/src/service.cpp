#include "qexplain/service.hpp"

#include <chrono>
#include <cmath>
#include <deque>

#include <httplib.h>

#include "qexplain/error.hpp"

namespace qx {

using nlohmann::json;

const StateEntry* SessionStore::find(const std::string& id) const {
  auto it = index.find(id);
  return it == index.end() ? nullptr : &states[it->second];
}

namespace {

template <class T>
void push_bounded(std::deque<T>& d, T v, std::size_t k) {
  d.push_back(v);
  if (d.size() > k) d.pop_front();
}

json history_json(const Observation& obs, const std::deque<double>& trajectory) {
  const std::vector<double> traj(trajectory.begin(), trajectory.end());
  if (const auto* a = std::get_if<AbrState>(&obs))
    return {{"chunk_mb", a->chunk_mb}, {"transmit_s", a->transmit_s}, {"buffer_s", traj},
            {"last_quality", a->last_quality}};
  const auto& c = std::get<CcState>(obs);
  return {{"rate_mbps", traj}, {"sent_mbps", c.sent_mbps}, {"delivered_mbps", c.delivered_mbps},
          {"latency_ratio", c.latency_ratio}, {"loss", c.loss}};
}

double cursor_of(const Observation& obs) {
  if (const auto* a = std::get_if<AbrState>(&obs)) return a->cursor_s;
  return std::get<CcState>(obs).cursor_s;
}

double trajectory_value(const Observation& obs) {
  if (const auto* a = std::get_if<AbrState>(&obs)) return a->buffer_s;
  return std::get<CcState>(obs).rate_mbps;
}

json action_json(const Action& a) {
  if (a.kind == ActionKind::discrete) return a.index;
  return a.value;
}

Action parse_action(const json& j, const ActionSpace& space) {
  Action a;
  if (space.kind == ActionKind::discrete) {
    const json& v = j.is_object() && j.contains("index") ? j.at("index") : j;
    if (!v.is_number_integer()) throw ApiError{422, "action must be an integer level index"};
    a = Action::discrete(v.get<int>());
  } else {
    const json& v = j.is_object() && j.contains("value") ? j.at("value") : j;
    if (!v.is_number()) throw ApiError{422, "action must be a number"};
    a = Action::continuous(v.get<double>());
  }
  if (!space.contains(a)) throw ApiError{422, "action " + to_string(a) + " is outside the action space"};
  return a;
}

json error_body(const std::string& message) { return {{"error", message}}; }

std::size_t parse_size(const std::map<std::string, std::string>& params, const std::string& key,
                       std::size_t fallback) {
  auto it = params.find(key);
  if (it == params.end()) return fallback;
  try {
    std::size_t used = 0;
    const long long v = std::stoll(it->second, &used);
    if (used != it->second.size() || v < 0) throw std::invalid_argument(key);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ApiError{422, key + " must be a non-negative integer"};
  }
}

json state_summary(const StateEntry& s) {
  return {{"id", s.id}, {"trace_id", s.trace_id}, {"anchor", s.anchor}, {"time_s", s.time_s},
          {"policy_action", action_json(s.policy_action)}, {"history", s.history}};
}

json parse_body(const std::string& body) {
  try {
    json j = json::parse(body);
    if (!j.is_object()) throw ApiError{422, "request body must be a JSON object"};
    return j;
  } catch (const json::parse_error& e) {
    throw ApiError{422, std::string("malformed JSON body: ") + e.what()};
  }
}

const StateEntry& require_state(const SessionStore& store, const json& req) {
  if (!req.contains("state_id") || !req.at("state_id").is_string())
    throw ApiError{422, "state_id must be a string"};
  const std::string id = req.at("state_id").get<std::string>();
  const StateEntry* s = store.find(id);
  if (!s) throw ApiError{404, "unknown state id " + id};
  return *s;
}

std::string method_of(const json& req) {
  if (!req.contains("method")) return "predictor";
  if (!req.at("method").is_string()) throw ApiError{422, "method must be a string"};
  return req.at("method").get<std::string>();
}

}  // namespace

SessionStore build_session(EnvFactory env, std::shared_ptr<const Policy> policy, PredictorModel model,
                           TraceSet holdout, TraceSet train, std::optional<ClusterModel> clusters,
                           const RolloutConfig& rollout, const SamplerConfig& sampler) {
  rollout.validate();
  if (!policy) throw UserError("session: no policy");
  if (holdout.empty()) throw UserError("session: empty held-out trace set");
  if (!model.components.same_names(env.components()))
    throw UserError("session: model components do not match the environment");
  SessionStore s;
  s.env = std::move(env);
  s.policy = std::move(policy);
  s.model = std::move(model);
  s.clusters = std::move(clusters);
  s.holdout = std::move(holdout);
  s.train = std::move(train);
  s.pool = make_pool(s.train);
  s.sampler = sampler;
  s.sampler.gamma = rollout.gamma;
  s.sampler.t_max = rollout.t_max;
  s.thresholds = default_thresholds(s.env.kind);

  const auto k = static_cast<std::size_t>(s.env.kind == EnvKind::abr ? s.env.abr.history : s.env.cc.history);
  for (const Trace& trace : s.holdout.traces) {
    auto e = s.env.make(std::make_shared<const Trace>(trace));
    std::deque<double> trajectory;
    for (int step = 0; !e->done(); ++step) {
      const Observation obs = e->observation();
      push_bounded(trajectory, trajectory_value(obs), k);
      const Action pa = s.policy->act(obs);
      if (step % rollout.spacing == 0) {
        StateEntry st;
        st.id = trace.id + "@" + std::to_string(step);
        st.trace_id = trace.id;
        st.anchor = step;
        st.time_s = cursor_of(obs);
        st.snapshot = EnvSnapshot(*e);
        st.state = obs;
        st.features = featurize(obs, rollout.mode, s.env, s.policy.get());
        st.policy_action = pa;
        st.history = history_json(obs, trajectory);
        if (!s.index.emplace(st.id, s.states.size()).second) throw UserError("session: duplicate state " + st.id);
        s.states.push_back(std::move(st));
      }
      e->step(pa);
    }
  }
  return s;
}

json explain_state(const SessionStore& store, const StateEntry& state, const Action& action,
                   const std::string& method) {
  const ComponentSet& comps = store.model.components;
  const std::size_t nc = comps.size();
  std::vector<double> mean(nc, 0.0), sd(nc, 0.0);
  json extra = json::object();

  const auto t0 = std::chrono::steady_clock::now();
  if (method == "predictor") {
    const Explanation ex = store.model.predict(state.features, action);
    mean = ex.mean;
    sd = ex.std;
  } else if (method == "naive" || method == "dist-aware") {
    if (store.pool.empty()) throw ApiError{409, method + " sampling needs training traces, none were loaded"};
    if (method == "dist-aware" && !store.clusters)
      throw ApiError{409, "dist-aware sampling needs a cluster model, none was loaded"};
    SamplerConfig cfg = store.sampler;
    cfg.seed = substream_seed(store.sampler.seed, store.index.at(state.id));
    const SamplerResult r =
        method == "naive"
            ? naive_estimate(state.snapshot, *store.policy, store.pool, action, cfg)
            : distribution_aware_estimate(state.snapshot, state.state, *store.policy, *store.clusters, store.pool,
                                          action, cfg);
    mean = r.mean.values;
    for (const auto& roll : r.rollouts)
      for (std::size_t c = 0; c < nc; ++c) sd[c] += (roll.values[c] - mean[c]) * (roll.values[c] - mean[c]);
    for (auto& v : sd) v = std::sqrt(v / static_cast<double>(r.rollouts.size()));
    if (method == "dist-aware") {
      extra["cluster"] = r.cluster;
      extra["empty_cluster_fallback"] = r.empty_cluster_fallback;
      extra["no_observation_fallback"] = r.no_observation_fallback;
    }
  } else {
    throw ApiError{422, "unknown method " + method + " (predictor, naive, dist-aware)"};
  }
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  const auto flags = detect_events(scale_for_events(mean, store.model.gamma, store.model.t_max), store.thresholds);
  json components = json::array();
  json flag_obj = json::object();
  json events = json::array();
  for (std::size_t c = 0; c < nc; ++c) {
    components.push_back({{"name", comps.names[c]}, {"mean", mean[c]}, {"std", sd[c]}, {"weight", comps.weights[c]}});
    flag_obj[comps.names[c]] = static_cast<bool>(flags[c]);
    if (flags[c]) events.push_back(comps.names[c]);
  }
  json out = {{"state_id", state.id},
              {"method", method},
              {"action", action_json(action)},
              {"components", components},
              {"total", comps.weighted_sum(mean)},
              {"flags", flag_obj},
              {"events", events},
              {"latency_ms", ms}};
  if (!extra.empty()) out["sampler"] = extra;
  return out;
}

ApiResponse handle_request(const SessionStore& store, const std::string& verb, const std::string& path,
                           const std::map<std::string, std::string>& params, const std::string& body) {
  try {
    static const std::string states_prefix = "/api/states/";
    if (verb == "GET" && path == "/api/health") return {200, {{"status", "ok"}}};
    if (verb == "GET" && path == "/api/components") {
      json comps = json::array();
      for (std::size_t c = 0; c < store.model.components.size(); ++c)
        comps.push_back({{"name", store.model.components.names[c]},
                         {"weight", store.model.components.weights[c]},
                         {"threshold", store.thresholds.thresholds[c]}});
      const ActionSpace space = store.env.action_space();
      json sp = space.kind == ActionKind::discrete
                    ? json{{"kind", "discrete"}, {"levels", space.levels}}
                    : json{{"kind", "continuous"}, {"lo", space.lo}, {"hi", space.hi}};
      json methods = json::array({"predictor"});
      if (!store.pool.empty()) {
        methods.push_back("naive");
        if (store.clusters) methods.push_back("dist-aware");
      }
      return {200,
              {{"env", to_string(store.env.kind)},
               {"policy", store.policy->id()},
               {"components", comps},
               {"action_space", sp},
               {"methods", methods}}};
    }
    if (verb == "GET" && path == "/api/states") {
      const std::size_t offset = parse_size(params, "offset", 0);
      const std::size_t limit = parse_size(params, "limit", 50);
      json items = json::array();
      for (std::size_t i = offset; i < store.states.size() && i - offset < limit; ++i)
        items.push_back(state_summary(store.states[i]));
      return {200, {{"total", store.states.size()}, {"offset", offset}, {"limit", limit}, {"states", items}}};
    }
    if (verb == "GET" && path.rfind(states_prefix, 0) == 0) {
      const std::string id = path.substr(states_prefix.size());
      const StateEntry* s = store.find(id);
      if (!s) throw ApiError{404, "unknown state id " + id};
      json j = state_summary(*s);
      j["features"] = s->features.values;
      return {200, j};
    }
    if (verb == "POST" && path == "/api/explain") {
      const json req = parse_body(body);
      const StateEntry& s = require_state(store, req);
      if (!req.contains("action")) throw ApiError{422, "action is required"};
      return {200, explain_state(store, s, parse_action(req.at("action"), store.env.action_space()), method_of(req))};
    }
    if (verb == "POST" && path == "/api/compare") {
      const json req = parse_body(body);
      const StateEntry& s = require_state(store, req);
      if (!req.contains("actions") || !req.at("actions").is_array() || req.at("actions").empty())
        throw ApiError{422, "actions must be a non-empty array"};
      const std::string method = method_of(req);
      std::vector<Action> actions;
      for (const auto& a : req.at("actions")) actions.push_back(parse_action(a, store.env.action_space()));
      json out = json::array();
      for (const Action& a : actions) out.push_back(explain_state(store, s, a, method));
      return {200, out};
    }
    if (verb == "GET" && path == "/api/alerts") {
      auto it = params.find("method");
      const std::string method = it == params.end() ? "predictor" : it->second;
      json alerts = json::array();
      for (const StateEntry& s : store.states) {
        json ex = explain_state(store, s, s.policy_action, method);
        if (!ex.at("events").empty())
          alerts.push_back({{"id", s.id}, {"trace_id", s.trace_id}, {"anchor", s.anchor}, {"events", ex.at("events")},
                            {"flags", ex.at("flags")}});
      }
      return {200, {{"method", method}, {"alerts", alerts}}};
    }
    if (path.rfind("/api/", 0) == 0) return {404, error_body("no endpoint " + verb + " " + path)};
    return {404, error_body("not found: " + path)};
  } catch (const ApiError& e) {
    return {e.status, error_body(e.message)};
  } catch (const UserError& e) {
    return {422, error_body(e.what())};
  } catch (const std::exception& e) {
    return {500, error_body(std::string("internal error: ") + e.what())};
  }
}

struct Service::Impl {
  const SessionStore& store;
  httplib::Server server;
  explicit Impl(const SessionStore& s) : store(s) {}
};

Service::Service(const SessionStore& store, std::string static_dir) : impl_(std::make_unique<Impl>(store)) {
  if (!static_dir.empty() && !impl_->server.set_mount_point("/", static_dir))
    throw UserError("serve: static directory " + static_dir + " does not exist");
  auto handler = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> params;
    for (const auto& [k, v] : req.params) params.emplace(k, v);
    const ApiResponse r = handle_request(impl_->store, req.method, req.path, params, req.body);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  impl_->server.Get(".*", handler);
  impl_->server.Post(".*", handler);
}

Service::~Service() = default;

bool Service::bind(const std::string& host, int port) {
  if (port == 0) {
    port_ = impl_->server.bind_to_any_port(host);
    return port_ > 0;
  }
  if (!impl_->server.bind_to_port(host, port)) return false;
  port_ = port;
  return true;
}

void Service::run() { impl_->server.listen_after_bind(); }

void Service::stop() { impl_->server.stop(); }

}  // namespace qx
