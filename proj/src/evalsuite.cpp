#include "qexplain/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "qexplain/error.hpp"
#include "qexplain/parallel.hpp"

namespace qx {

using nlohmann::json;

std::string to_string(QueryFlavor f) { return f == QueryFlavor::factual ? "factual" : "counterfactual"; }

QueryFlavor query_flavor_from_string(const std::string& s) {
  if (s == "factual") return QueryFlavor::factual;
  if (s == "counterfactual") return QueryFlavor::counterfactual;
  throw UserError("unknown flavor '" + s + "' (expected factual or counterfactual)");
}

FidelityRecord fidelity(const DecomposedReturn& predicted, const DecomposedReturn& truth,
                        const NormalizationSpec& spec) {
  if (predicted.values.size() != truth.values.size() || predicted.values.size() != spec.size())
    throw UserError("fidelity: component count mismatch");
  const auto p = spec.normalize(predicted.values);
  const auto t = spec.normalize(truth.values);
  FidelityRecord r;
  r.sq_error.resize(p.size());
  r.excluded.resize(p.size());
  for (std::size_t c = 0; c < p.size(); ++c) {
    r.excluded[c] = spec.degenerate[c];
    const double d = std::clamp(p[c], 0.0, 1.0) - std::clamp(t[c], 0.0, 1.0);
    r.sq_error[c] = spec.degenerate[c] ? 0.0 : d * d;
  }
  return r;
}

std::vector<Action> query_actions(const Action& policy_action, const ActionSpace& space, QueryFlavor flavor) {
  if (flavor == QueryFlavor::factual) return {policy_action};
  std::vector<Action> out;
  if (space.kind == ActionKind::discrete) {
    for (int a = 0; a < space.levels; ++a)
      if (a != policy_action.index) out.push_back(Action::discrete(a));
    return out;
  }
  static constexpr double kGrid[] = {-0.5, 0.0, 0.5};
  std::size_t nearest = 0;
  for (std::size_t i = 1; i < 3; ++i)
    if (std::abs(kGrid[i] - policy_action.value) < std::abs(kGrid[nearest] - policy_action.value)) nearest = i;
  for (std::size_t i = 0; i < 3; ++i)
    if (i != nearest) out.push_back(Action::continuous(kGrid[i]));
  return out;
}

namespace {

DecomposedReturn rollout_from(const EnvSnapshot& snap, const Policy& policy, const Action& first, double gamma,
                              int t_max) {
  auto env = restore(snap);
  std::vector<std::vector<double>> rewards;
  Action next = first;
  for (int k = 0; k < t_max && !env->done(); ++k) {
    rewards.push_back(env->step(next).components);
    if (!env->done()) next = policy.act(env->observation());
  }
  return truncated_decomposed_return(rewards, gamma, t_max);
}

std::vector<Query> queries_for_trace(const Trace& trace, const Policy& policy, const EnvFactory& factory,
                                     QueryFlavor flavor, const RolloutConfig& config) {
  auto env = factory.make(std::make_shared<const Trace>(trace));
  const auto space = env->action_space();
  std::vector<Query> out;
  for (int step = 0; !env->done(); ++step) {
    const Observation obs = env->observation();
    const Action pa = policy.act(obs);
    if (step % config.spacing == 0) {
      const EnvSnapshot snap(*env);
      const FeatureVector features = featurize(obs, config.mode, factory, &policy);
      for (const Action& a : query_actions(pa, space, flavor)) {
        Query q;
        q.trace_id = trace.id;
        q.anchor = step;
        q.snapshot = snap;
        q.state = obs;
        q.features = features;
        q.policy_action = pa;
        q.action = a;
        q.truth = rollout_from(snap, policy, a, config.gamma, config.t_max);
        out.push_back(std::move(q));
      }
    }
    env->step(pa);
  }
  return out;
}

}  // namespace

std::vector<Query> build_queries(const TraceSet& holdout, const Policy& policy, const EnvFactory& env,
                                 QueryFlavor flavor, const RolloutConfig& config) {
  config.validate();
  if (holdout.empty()) throw UserError("evaluate: empty held-out trace set");
  std::vector<std::vector<Query>> per_trace(holdout.size());
  parallel_for(holdout.size(), [&](std::size_t i) {
    per_trace[i] = queries_for_trace(holdout.traces[i], policy, env, flavor, config);
  });
  std::vector<Query> out;
  for (auto& v : per_trace) std::move(v.begin(), v.end(), std::back_inserter(out));
  return out;
}

DecomposedReturn PredictorEstimator::estimate(const Query& q, std::size_t) const {
  std::vector<double> mean, std;
  model_.predict_normalized(q.features.values, q.action, mean, std);
  DecomposedReturn r;
  r.values = model_.normalization.denormalize(mean);
  r.gamma = model_.gamma;
  r.t_max = model_.t_max;
  return r;
}

DecomposedReturn NaiveEstimator::estimate(const Query& q, std::size_t index) const {
  SamplerConfig cfg = config_;
  cfg.seed = substream_seed(config_.seed, index);
  return naive_estimate(q.snapshot, policy_, pool_, q.action, cfg).mean;
}

DecomposedReturn DistAwareEstimator::estimate(const Query& q, std::size_t index) const {
  SamplerConfig cfg = config_;
  cfg.seed = substream_seed(config_.seed, index);
  return distribution_aware_estimate(q.snapshot, q.state, policy_, clusters_, pool_, q.action, cfg).mean;
}

ThresholdSpec default_thresholds(EnvKind kind) {
  if (kind == EnvKind::abr) return {{"quality", "quality_change", "stalling"}, {0.55, -0.1, -0.25}};
  return {{"throughput", "latency", "loss"}, {0.3, -0.075, -0.1}};
}

std::vector<double> scale_for_events(const std::vector<double>& raw, double gamma, int t_max) {
  const double mass = discount_mass(gamma, t_max);
  std::vector<double> out(raw.size());
  for (std::size_t c = 0; c < raw.size(); ++c) out[c] = raw[c] / mass;
  return out;
}

std::vector<bool> detect_events(const std::vector<double>& scaled, const ThresholdSpec& spec) {
  if (scaled.size() != spec.thresholds.size()) throw UserError("detect_events: component count mismatch");
  std::vector<bool> flags(scaled.size());
  for (std::size_t c = 0; c < scaled.size(); ++c) flags[c] = scaled[c] < spec.thresholds[c];
  return flags;
}

EventMetrics event_metrics(const std::vector<bool>& predicted, const std::vector<bool>& truth) {
  if (predicted.size() != truth.size()) throw UserError("event_metrics: length mismatch");
  EventMetrics m;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i])
      predicted[i] ? ++m.tp : ++m.fn;
    else
      predicted[i] ? ++m.fp : ++m.tn;
  }
  m.recall = m.tp + m.fn == 0 ? 1.0 : static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
  m.fpr = m.fp + m.tn == 0 ? 0.0 : static_cast<double>(m.fp) / static_cast<double>(m.fp + m.tn);
  return m;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

json EvaluationResult::summary_json() const {
  json comps = json::object();
  for (std::size_t c = 0; c < components.size(); ++c) {
    const auto& q = quantiles[c];
    const auto& e = events[c];
    comps[components[c]] = {{"p25", q.p25},   {"p50", q.p50},       {"p75", q.p75},
                            {"p95", q.p95},   {"excluded", excluded[c] ? true : false},
                            {"events", {{"tp", e.tp}, {"fp", e.fp}, {"tn", e.tn}, {"fn", e.fn},
                                        {"recall", e.recall}, {"fpr", e.fpr}}}};
  }
  return {{"method", method}, {"flavor", to_string(flavor)}, {"queries", records.size()},
          {"seconds", seconds}, {"components", comps}};
}

EvaluationResult evaluate_method(const ReturnEstimator& method, const std::vector<Query>& queries,
                                 QueryFlavor flavor, const NormalizationSpec& spec, const ComponentSet& components,
                                 const ThresholdSpec& thresholds) {
  if (queries.empty()) throw UserError("evaluate: no queries");
  const auto start = std::chrono::steady_clock::now();
  EvaluationResult res;
  res.method = method.id();
  res.flavor = flavor;
  res.components = components.names;
  res.records.resize(queries.size());
  std::vector<std::vector<bool>> pred_flags(queries.size()), truth_flags(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) {
    const Query& q = queries[i];
    const DecomposedReturn est = method.estimate(q, i);
    FidelityRecord r = fidelity(est, q.truth, spec);
    r.method = res.method;
    r.flavor = flavor;
    r.trace_id = q.trace_id;
    r.anchor = q.anchor;
    r.action = q.action;
    res.records[i] = std::move(r);
    pred_flags[i] = detect_events(scale_for_events(est.values, q.truth.gamma, q.truth.t_max), thresholds);
    truth_flags[i] = detect_events(scale_for_events(q.truth.values, q.truth.gamma, q.truth.t_max), thresholds);
  });
  const std::size_t nc = components.size();
  res.excluded = spec.degenerate;
  for (std::size_t c = 0; c < nc; ++c) {
    std::vector<double> errs;
    std::vector<bool> pf, tf;
    errs.reserve(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
      errs.push_back(res.records[i].sq_error[c]);
      pf.push_back(pred_flags[i][c]);
      tf.push_back(truth_flags[i][c]);
    }
    res.quantiles.push_back({quantile(errs, 0.25), quantile(errs, 0.5), quantile(errs, 0.75), quantile(errs, 0.95)});
    res.events.push_back(event_metrics(pf, tf));
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

void write_fidelity_csv(std::ostream& out, const EvaluationResult& result, bool header) {
  if (header) out << "method,component,flavor,sq_error\n";
  char buf[64];
  for (const auto& r : result.records) {
    for (std::size_t c = 0; c < result.components.size(); ++c) {
      if (r.excluded[c]) continue;
      std::snprintf(buf, sizeof buf, "%.17g", r.sq_error[c]);
      out << result.method << ',' << result.components[c] << ',' << to_string(result.flavor) << ',' << buf << '\n';
    }
  }
}

std::size_t dominant_component(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw UserError("dominant_component: component mismatch");
  std::size_t best = 0;
  double best_diff = std::abs(a[0] - b[0]);
  for (std::size_t c = 1; c < a.size(); ++c) {
    const double d = std::abs(a[c] - b[c]);
    if (d > best_diff) {
      best_diff = d;
      best = c;
    }
  }
  return best;
}

std::size_t dominant_component(const Explanation& a, const Explanation& b) {
  if (!a.components.same_names(b.components)) throw UserError("dominant_component: component mismatch");
  return dominant_component(a.mean, b.mean);
}

LatencyStats latency_benchmark(const std::function<void(std::size_t)>& fn, std::size_t n) {
  if (n < 1) throw UserError("latency_benchmark: n must be >= 1");
  for (int i = 0; i < kLatencyWarmup; ++i) fn(static_cast<std::size_t>(i));
  std::vector<double> ms;
  ms.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn(i);
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  LatencyStats s;
  s.n = n;
  s.p50_ms = quantile(ms, 0.5);
  s.p95_ms = quantile(ms, 0.95);
  double sum = 0.0;
  for (double v : ms) sum += v;
  s.mean_ms = sum / static_cast<double>(n);
  return s;
}

double RewardDesignRow::stalling_share() const {
  if (drop_states == 0) return 0.0;
  return static_cast<double>(dominant_counts.at(2)) / static_cast<double>(drop_states);
}

std::vector<RewardDesignRow> reward_design_sweep(const TraceSet& train_traces, const TraceSet& holdout,
                                                 const AbrConfig& base, const RewardDesignConfig& config) {
  std::vector<RewardDesignRow> rows;
  for (double ws : config.stall_weights) {
    EnvFactory factory;
    factory.kind = EnvKind::abr;
    factory.abr = base;
    factory.abr.weights[2] = ws;
    const AbrLookaheadPolicy policy(factory.abr);

    auto [samples, norm] = normalize_returns(collect_rollouts(train_traces, policy, factory, config.rollout));
    const Dataset data{factory, policy.id(), config.rollout, norm, std::move(samples)};
    const PredictorModel model = train(data, config.train);
    const auto& weights = factory.abr.weights;

    RewardDesignRow row;
    row.stall_weight = ws;
    row.dominant_counts.assign(3, 0);
    for (const auto& trace : holdout.traces) {
      auto env = factory.make(std::make_shared<const Trace>(trace));
      while (!env->done()) {
        const Observation obs = env->observation();
        const Action a = policy.act(obs);
        const int last = std::get<AbrState>(obs).last_quality;
        ++row.states;
        if (a.index < last) {
          ++row.drop_states;
          const FeatureVector f = featurize(obs, config.rollout.mode, factory, &policy);
          Explanation drop = model.predict(f, a);
          Explanation steady = model.predict(f, Action::discrete(last));
          for (std::size_t c = 0; c < 3; ++c) {
            drop.mean[c] *= weights[c];
            steady.mean[c] *= weights[c];
          }
          ++row.dominant_counts[dominant_component(drop, steady)];
        }
        env->step(a);
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace qx
