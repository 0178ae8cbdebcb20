#include "qexplain/sampling.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "qexplain/error.hpp"

namespace qx {

using nlohmann::json;

TracePool make_pool(const TraceSet& traces) {
  TracePool pool;
  pool.reserve(traces.size());
  for (const auto& t : traces.traces) pool.push_back(std::make_shared<const Trace>(t));
  return pool;
}

namespace {

double sq_dist(const ClusterPoint& a, const ClusterPoint& b) {
  return (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]);
}

}  // namespace

ClusterPoint ClusterModel::standardize(double mean_bw, double cov_bw) const {
  return {(mean_bw - center[0]) / scale[0], (cov_bw - center[1]) / scale[1]};
}

int ClusterModel::nearest(const ClusterPoint& p) const {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < k(); ++c) {
    const double d = sq_dist(p, centroids[static_cast<std::size_t>(c)]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

std::vector<std::size_t> ClusterModel::members(int cluster) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i)
    if (assignment[i] == cluster) out.push_back(i);
  return out;
}

json ClusterModel::to_json() const {
  json cents = json::array();
  for (const auto& c : centroids) cents.push_back({c[0], c[1]});
  json assign = json::object();
  for (std::size_t i = 0; i < trace_ids.size(); ++i) assign[trace_ids[i]] = assignment[i];
  return {{"centroids", cents},
          {"standardization", {{"center", {center[0], center[1]}}, {"scale", {scale[0], scale[1]}}}},
          {"assignments", assign}};
}

ClusterModel ClusterModel::from_json(const json& j) {
  ClusterModel m;
  for (const auto& c : j.at("centroids")) m.centroids.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
  const auto& st = j.at("standardization");
  m.center = {st.at("center").at(0).get<double>(), st.at("center").at(1).get<double>()};
  m.scale = {st.at("scale").at(0).get<double>(), st.at("scale").at(1).get<double>()};
  for (const auto& [id, c] : j.at("assignments").items()) {
    m.trace_ids.push_back(id);
    m.assignment.push_back(c.get<int>());
    if (m.assignment.back() < 0 || m.assignment.back() >= m.k()) throw UserError("cluster model: bad assignment");
  }
  if (m.centroids.empty()) throw UserError("cluster model: no centroids");
  return m;
}

ClusterModel fit_clusters(const TraceSet& traces, int k, std::uint64_t seed, int max_iterations) {
  const auto n = traces.size();
  if (k < 1) throw UserError("fit_clusters: k must be >= 1");
  if (static_cast<std::size_t>(k) > n) throw UserError("fit_clusters: k exceeds the number of traces");

  ClusterModel m;
  std::vector<std::array<double, 2>> raw(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto st = trace_stats(traces.traces[i]);
    raw[i] = {st.mean_bw, st.cov_bw};
    m.trace_ids.push_back(traces.traces[i].id);
  }
  for (int d = 0; d < 2; ++d) {
    double mu = 0.0;
    for (const auto& r : raw) mu += r[d];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (const auto& r : raw) var += (r[d] - mu) * (r[d] - mu);
    const double sd = std::sqrt(var / static_cast<double>(n));
    m.center[d] = mu;
    m.scale[d] = sd > 0.0 ? sd : 1.0;
  }
  std::vector<ClusterPoint> pts(n);
  for (std::size_t i = 0; i < n; ++i) pts[i] = m.standardize(raw[i][0], raw[i][1]);

  // k-means++ seeding
  std::mt19937_64 rng(seed);
  std::vector<bool> chosen(n, false);
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  m.centroids.push_back(pts[first]);
  chosen[first] = true;
  std::vector<double> d2(n);
  while (m.k() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : m.centroids) best = std::min(best, sq_dist(pts[i], c));
      d2[i] = chosen[i] ? 0.0 : best;
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      pick = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        pick = i;
        if (r < d2[i]) break;
        r -= d2[i];
      }
    } else {
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) rest.push_back(i);
      pick = rest[std::uniform_int_distribution<std::size_t>(0, rest.size() - 1)(rng)];
    }
    chosen[pick] = true;
    m.centroids.push_back(pts[pick]);
  }

  m.assignment.assign(n, -1);
  for (int iter = 0; iter < max_iterations; ++iter) {
    bool changed = false;
    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const int c = m.nearest(pts[i]);
      if (c != m.assignment[i]) changed = true;
      m.assignment[i] = c;
      objective += sq_dist(pts[i], m.centroids[static_cast<std::size_t>(c)]);
    }
    m.objective_trace.push_back(objective);
    if (!changed && iter > 0) break;
    std::vector<ClusterPoint> sums(static_cast<std::size_t>(k), ClusterPoint{0.0, 0.0});
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto& s = sums[static_cast<std::size_t>(m.assignment[i])];
      s[0] += pts[i][0];
      s[1] += pts[i][1];
      ++counts[static_cast<std::size_t>(m.assignment[i])];
    }
    for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c)
      if (counts[c] > 0) m.centroids[c] = {sums[c][0] / counts[c], sums[c][1] / counts[c]};
  }
  // Final assignment against the final centroids.
  for (std::size_t i = 0; i < n; ++i) m.assignment[i] = m.nearest(pts[i]);
  return m;
}

void SamplerConfig::validate() const {
  if (n_samples < 1) throw UserError("sampler: n_samples must be >= 1");
  if (window < 1) throw UserError("sampler: window must be >= 1");
  if (t_max < 1) throw UserError("sampler: t_max must be >= 1");
  if (max_retries < 1) throw UserError("sampler: max_retries must be >= 1");
}

namespace {

DecomposedReturn grafted_rollout(const EnvSnapshot& snap, const Policy& policy, std::shared_ptr<const Trace> trace,
                                 double offset, const Action& action, const SamplerConfig& config) {
  auto env = graft_future(snap, std::move(trace), offset);
  std::vector<std::vector<double>> rewards;
  Action next = action;
  for (int k = 0; k < config.t_max && !env->done(); ++k) {
    rewards.push_back(env->step(next).components);
    if (!env->done()) next = policy.act(env->observation());
  }
  return truncated_decomposed_return(rewards, config.gamma, config.t_max);
}

SamplerResult sample_from(const EnvSnapshot& snap, const Policy& policy, const TracePool& pool,
                          const std::vector<std::size_t>& candidates, const Action& action,
                          const SamplerConfig& config) {
  config.validate();
  if (!snap.valid()) throw UserError("sampler: invalid snapshot");
  if (candidates.empty()) throw UserError("sampler: no traces to sample from");
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);

  SamplerResult out;
  for (int i = 0; i < config.n_samples; ++i) {
    std::shared_ptr<const Trace> trace;
    double limit = -1.0;
    for (int attempt = 0; attempt < config.max_retries && limit < 0.0; ++attempt) {
      trace = pool[candidates[pick(rng)]];
      limit = trace->duration() - config.t_max * snap.peek().graft_step_seconds(*trace);
    }
    if (limit < 0.0) throw UserError("sampler: no sampled trace is long enough for the rollout horizon");
    const double offset = limit > 0.0 ? std::uniform_real_distribution<double>(0.0, limit)(rng) : 0.0;
    out.rollouts.push_back(grafted_rollout(snap, policy, trace, offset, action, config));
    out.trace_ids.push_back(trace->id);
    out.offsets.push_back(offset);
  }
  const std::size_t nc = out.rollouts.front().values.size();
  out.mean.gamma = config.gamma;
  out.mean.t_max = config.t_max;
  out.mean.values.assign(nc, 0.0);
  for (const auto& r : out.rollouts)
    for (std::size_t c = 0; c < nc; ++c) out.mean.values[c] += r.values[c];
  for (auto& v : out.mean.values) v /= static_cast<double>(out.rollouts.size());
  return out;
}

}  // namespace

SamplerResult naive_estimate(const EnvSnapshot& snap, const Policy& policy, const TracePool& pool,
                             const Action& action, const SamplerConfig& config) {
  if (pool.empty()) throw UserError("naive_estimate: empty trace set");
  std::vector<std::size_t> all(pool.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return sample_from(snap, policy, pool, all, action, config);
}

std::optional<std::pair<double, double>> observed_input_summary(const Observation& obs, int window) {
  std::vector<double> rates;
  if (const auto* s = std::get_if<AbrState>(&obs)) {
    for (std::size_t i = s->chunk_mb.size(); i-- > 0 && static_cast<int>(rates.size()) < window;) {
      if (s->transmit_s[i] <= 0.0) break;
      rates.push_back(s->chunk_mb[i] / s->transmit_s[i]);
    }
  } else {
    const auto& c = std::get<CcState>(obs);
    for (std::size_t i = c.delivered_mbps.size(); i-- > 0 && static_cast<int>(rates.size()) < window;) {
      if (c.sent_mbps[i] <= 0.0) break;
      rates.push_back(c.delivered_mbps[i]);
    }
  }
  if (rates.empty()) return std::nullopt;
  double mean = 0.0;
  for (double r : rates) mean += r;
  mean /= static_cast<double>(rates.size());
  double var = 0.0;
  for (double r : rates) var += (r - mean) * (r - mean);
  var /= static_cast<double>(rates.size());
  return std::make_pair(mean, mean > 0.0 ? std::sqrt(var) / mean : 0.0);
}

SamplerResult distribution_aware_estimate(const EnvSnapshot& snap, const Observation& state, const Policy& policy,
                                          const ClusterModel& model, const TracePool& pool, const Action& action,
                                          const SamplerConfig& config) {
  if (pool.empty()) throw UserError("distribution_aware_estimate: empty trace set");
  if (pool.size() != model.trace_ids.size())
    throw UserError("distribution_aware_estimate: trace set does not match the cluster model");
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool[i]->id != model.trace_ids[i])
      throw UserError("distribution_aware_estimate: trace set does not match the cluster model");
  config.validate();
  const auto summary = observed_input_summary(state, config.window);
  if (!summary) {
    SamplerResult r = naive_estimate(snap, policy, pool, action, config);
    r.no_observation_fallback = true;
    return r;
  }
  const ClusterPoint p = model.standardize(summary->first, summary->second);
  int cluster = model.nearest(p);
  auto members = model.members(cluster);
  bool fallback = false;
  if (members.empty()) {
    fallback = true;
    double best = std::numeric_limits<double>::infinity();
    for (int c = 0; c < model.k(); ++c) {
      auto m = model.members(c);
      if (m.empty()) continue;
      const double d = sq_dist(p, model.centroids[static_cast<std::size_t>(c)]);
      if (d < best) {
        best = d;
        cluster = c;
        members = std::move(m);
      }
    }
  }
  SamplerResult r = sample_from(snap, policy, pool, members, action, config);
  r.cluster = cluster;
  r.empty_cluster_fallback = fallback;
  return r;
}

}  // namespace qx
