// Acceptance suite: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qexplain/evalsuite.hpp"
#include "qexplain/pipeline.hpp"
#include "qexplain/predictor.hpp"
#include "qexplain/service.hpp"

using namespace qx;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o.precision(prec);
  o << v;
  return o.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

TraceSet synthetic(EnvKind kind, std::size_t n, std::uint64_t seed) {
  DeskConfig d = desk_config(kind);
  d.traces.duration = kind == EnvKind::abr ? 300.0 : 60.0;
  return synthesize_traces(kind, d.traces, n, seed);
}

EnvFactory factory_for(EnvKind kind) {
  EnvFactory f;
  f.kind = kind;
  if (kind == EnvKind::cc) f.cc.bw_cap_ref_mbps = desk_config(kind).traces.mean_mbps.max;
  return f;
}

// Replays a trajectory from its samples (recorded action at anchors, policy
// elsewhere); returns per-step components and totals.
struct Replay {
  std::vector<std::vector<double>> components;
  std::vector<double> totals;
};

Replay replay(const Trace& trace, const std::vector<const RolloutSample*>& samples, const Policy& policy,
              const EnvFactory& f) {
  std::map<int, Action> at;
  for (const auto* s : samples) at[s->anchor] = s->action;
  auto env = f.make(std::make_shared<const Trace>(trace));
  Replay r;
  for (int step = 0; !env->done(); ++step) {
    auto it = at.find(step);
    const Action a = it != at.end() ? it->second : policy.act(env->observation());
    const StepOutcome o = env->step(a);
    r.components.push_back(o.components);
    r.totals.push_back(o.total);
  }
  return r;
}

std::map<std::string, std::vector<const RolloutSample*>> by_trace(const std::vector<RolloutSample>& samples) {
  std::map<std::string, std::vector<const RolloutSample*>> out;
  for (const auto& s : samples) out[s.trace_id].push_back(&s);
  return out;
}

Outcome decomposition_identity() {
  std::size_t steps_checked = 0, anchors_checked = 0;
  double worst_step = 0.0, worst_anchor = 0.0;
  for (EnvKind kind : {EnvKind::abr, EnvKind::cc}) {
    const EnvFactory f = factory_for(kind);
    const ComponentSet comps = f.components();
    const TraceSet traces = synthetic(kind, kind == EnvKind::abr ? 80 : 40, 11);

    std::mt19937_64 rng(5);
    const ActionSampler pick = default_action_sampler(f.action_space());
    std::size_t steps = 0;
    for (std::size_t i = 0; steps < 10000; ++i) {
      auto env = f.make(std::make_shared<const Trace>(traces.traces[i % traces.size()]));
      while (!env->done() && steps < 10000) {
        const StepOutcome o = env->step(pick(env->observation(), rng));
        worst_step = std::max(worst_step, std::abs(o.total - comps.weighted_sum(o.components)));
        ++steps;
      }
    }
    steps_checked += steps;

    const auto policy = make_policy(default_policy_id(kind), f);
    RolloutConfig rc;
    rc.seed = 3;
    const Dataset data = build_dataset(traces, *policy, f, rc);
    std::size_t anchors = 0;
    for (const auto& [id, samples] : by_trace(data.samples)) {
      const Replay r = replay(*traces.find(id), samples, *policy, f);
      for (const auto* s : samples) {
        double expect = 0.0;
        for (int k = 0; k < s->window; ++k) expect += std::pow(rc.gamma, k) * r.totals[s->anchor + k];
        const double got = comps.weighted_sum(data.normalization.denormalize(s->target.values));
        worst_anchor = std::max(worst_anchor, std::abs(got - expect));
        ++anchors;
      }
    }
    anchors_checked += anchors;
    if (anchors < 1000) return {false, to_string(kind) + ": only " + std::to_string(anchors) + " anchors"};
  }
  const bool ok = worst_step <= 1e-9 && worst_anchor <= 1e-9;
  return {ok, std::to_string(steps_checked) + " steps (max |total - sum| " + fmt(worst_step) + "), " +
                  std::to_string(anchors_checked) + " anchors (max " + fmt(worst_anchor) + ")"};
}

Outcome rollout_oracle() {
  const auto t0 = Clock::now();
  std::size_t checked = 0;
  double worst = 0.0;
  for (EnvKind kind : {EnvKind::abr, EnvKind::cc}) {
    const EnvFactory f = factory_for(kind);
    const TraceSet traces = synthetic(kind, 4, 1234);
    const auto policy = make_policy(default_policy_id(kind), f);
    RolloutConfig rc;
    rc.seed = 77;
    rc.t_max = 5;
    const auto samples = collect_rollouts(traces, *policy, f, rc);
    std::size_t here = 0;
    for (const auto& [id, mine] : by_trace(samples)) {
      const Replay r = replay(*traces.find(id), mine, *policy, f);
      for (const auto* s : mine) {
        if (here == 50) break;
        for (std::size_t c = 0; c < s->target.values.size(); ++c) {
          double expect = 0.0;
          for (int k = 0; k < rc.t_max && s->anchor + k < static_cast<int>(r.components.size()); ++k)
            expect += std::pow(rc.gamma, k) * r.components[s->anchor + k][c];
          worst = std::max(worst, std::abs(expect - s->target.values[c]));
        }
        ++here;
      }
    }
    checked += here;
  }
  const double secs = seconds_since(t0);
  return {checked == 100 && worst <= 1e-9 && secs < 60.0,
          std::to_string(checked) + " anchors, max error " + fmt(worst) + ", " + fmt(secs, 3) + " s"};
}

double probe_loss(const DenseNet& net, const Eigen::MatrixXd& x, const Eigen::MatrixXd& coeff) {
  return (net.forward_batch(x).array() * coeff.array()).sum();
}

Outcome gradient_check() {
  const auto t0 = Clock::now();
  const TrainConfig tc;
  const EnvFactory abr = factory_for(EnvKind::abr), cc = factory_for(EnvKind::cc);
  std::vector<std::pair<std::vector<int>, Activation>> shapes;
  for (const EnvFactory* f : {&abr, &cc}) {
    std::vector<int> trunk{static_cast<int>(raw_feature_size(*f) + f->action_space().encoding_size())};
    trunk.insert(trunk.end(), tc.trunk_widths.begin(), tc.trunk_widths.end());
    shapes.push_back({trunk, Activation::relu});
  }
  std::vector<int> head{tc.trunk_widths.back()};
  head.insert(head.end(), tc.head_widths.begin(), tc.head_widths.end());
  head.push_back(2);
  shapes.push_back({head, Activation::identity});

  std::mt19937_64 rng(99);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0.0;
  std::size_t params = 0;
  for (const auto& [widths, out_act] : shapes) {
    DenseNet net = DenseNet::init(widths, Activation::relu, out_act, rng);
    for (auto& l : net.layers()) l.b = Eigen::VectorXd::NullaryExpr(l.b.size(), [&] { return 0.1 * n(rng); });
    const Eigen::MatrixXd x = Eigen::MatrixXd::NullaryExpr(widths.front(), 3, [&] { return n(rng); });
    const Eigen::MatrixXd coeff = Eigen::MatrixXd::NullaryExpr(widths.back(), 3, [&] { return n(rng); });
    Tape tape;
    net.forward_batch(x, &tape);
    Gradients g = net.zero_gradients();
    net.backward(tape, coeff, g);
    std::vector<double> analytic;
    for (std::size_t i = 0; i < g.w.size(); ++i) {
      for (int r = 0; r < g.w[i].rows(); ++r)
        for (int c = 0; c < g.w[i].cols(); ++c) analytic.push_back(g.w[i](r, c));
      for (int r = 0; r < g.b[i].size(); ++r) analytic.push_back(g.b[i](r));
    }
    auto p = net.flat_parameters();
    // Every bias plus a random subset of weights in every layer.
    std::uniform_int_distribution<std::size_t> any(0, p.size() - 1);
    std::set<std::size_t> idx;
    while (idx.size() < std::min<std::size_t>(400, p.size())) idx.insert(any(rng));
    std::size_t offset = 0;
    for (const auto& l : net.layers()) {
      offset += static_cast<std::size_t>(l.w.size());
      for (Eigen::Index b = 0; b < l.b.size(); ++b) idx.insert(offset + static_cast<std::size_t>(b));
      offset += static_cast<std::size_t>(l.b.size());
    }
    const double h = 1e-6;
    for (std::size_t k : idx) {
      const double keep = p[k];
      p[k] = keep + h;
      net.set_flat_parameters(p);
      const double up = probe_loss(net, x, coeff);
      p[k] = keep - h;
      net.set_flat_parameters(p);
      const double down = probe_loss(net, x, coeff);
      p[k] = keep;
      net.set_flat_parameters(p);
      const double fd = (up - down) / (2 * h);
      const double rel = std::abs(fd - analytic[k]) / std::max({std::abs(fd), std::abs(analytic[k]), 1e-2});
      worst = std::max(worst, rel);
      ++params;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0, std::to_string(shapes.size()) + " shapes, " + std::to_string(params) +
                                           " parameters, max relative error " + fmt(worst) + ", " + fmt(secs, 3) +
                                           " s"};
}

Dataset toy_dataset() {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Dataset d;
  d.policy_id = "abr-bba";
  d.normalization = {{0, 0, 0}, {1, 1, 1}, {false, false, false}};
  for (int i = 0; i < 32; ++i) {
    RolloutSample s;
    s.features.values.resize(18);
    for (double& v : s.features.values) v = u(rng);
    s.action = Action::discrete(i % 5);
    s.action_encoding = encode_action(s.action, d.env.action_space());
    const auto& f = s.features.values;
    s.target.values = {0.5 + 0.4 * (f[0] - f[1]), 0.2 * s.action.index, std::min(1.0, f[2] * f[3] + 0.1)};
    s.trace_id = "toy";
    s.anchor = 5 * i;
    d.samples.push_back(std::move(s));
  }
  return d;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome overfit() {
  const Dataset d = toy_dataset();
  TrainConfig c;
  c.stage1_epochs = 200;
  c.stage2_epochs = 0;
  c.batch_size = 8;
  c.seed = 4;
  const PredictorModel a = train(d, c);
  const PredictorModel b = train(d, c);
  double se = 0.0;
  std::size_t count = 0;
  for (const auto& s : d.samples) {
    std::vector<double> mean, sd;
    a.predict_normalized(s.features.values, s.action, mean, sd);
    for (std::size_t k = 0; k < mean.size(); ++k, ++count) se += std::pow(mean[k] - s.target.values[k], 2);
  }
  const fs::path dir = fs::temp_directory_path() / "qx_acceptance_overfit";
  fs::create_directories(dir);
  save_model(a, dir / "a.json");
  save_model(b, dir / "b.json");
  const bool same = read_bytes(dir / "a.json") == read_bytes(dir / "b.json");
  fs::remove_all(dir);
  const double mse = se / static_cast<double>(count);
  return {mse < 0.01 && same, "MSE " + fmt(mse) + " after 200 epochs, checkpoints " +
                                  (same ? "byte-identical" : "differ")};
}

struct DeskEval {
  std::map<std::string, EvaluationResult> results;  // "<flavor>/<method>"
  std::vector<std::string> components;
};

DeskEval evaluate_desk(const DeskRun& run) {
  DeskEval out;
  out.components = run.model.components.names;
  const PredictorEstimator pred(run.model);
  const NaiveEstimator naive(*run.policy, run.pool, run.config.sampler);
  const DistAwareEstimator dist(*run.policy, run.clusters, run.pool, run.config.sampler);
  const ThresholdSpec thr = default_thresholds(run.factory.kind);
  for (QueryFlavor fl : {QueryFlavor::factual, QueryFlavor::counterfactual}) {
    const auto queries = build_queries(run.holdout_traces, *run.policy, run.factory, fl, run.config.rollout);
    for (const ReturnEstimator* m : std::initializer_list<const ReturnEstimator*>{&pred, &naive, &dist})
      out.results.emplace(to_string(fl) + "/" + m->id(),
                          evaluate_method(*m, queries, fl, run.model.normalization, run.model.components, thr));
  }
  return out;
}

Outcome fidelity_ordering(const std::map<EnvKind, DeskEval>& evals, double secs) {
  bool ok = true;
  std::ostringstream detail;
  for (const auto& [kind, ev] : evals) {
    for (const char* fl : {"factual", "counterfactual"}) {
      const auto& p = ev.results.at(std::string(fl) + "/predictor");
      const auto& n = ev.results.at(std::string(fl) + "/naive");
      const auto& d = ev.results.at(std::string(fl) + "/dist-aware");
      int dist_wins = 0;
      detail << "\n    " << to_string(kind) << " " << fl << " (" << p.records.size() << " queries)";
      for (std::size_t c = 0; c < ev.components.size(); ++c) {
        const double mp = p.quantiles[c].p50, mn = n.quantiles[c].p50, md = d.quantiles[c].p50;
        const bool pred_best = mp <= mn && mp <= md;
        ok = ok && pred_best;
        dist_wins += md <= mn;
        detail << "\n      " << ev.components[c] << ": predictor " << fmt(mp, 3) << ", naive " << fmt(mn, 3)
               << ", dist-aware " << fmt(md, 3) << (pred_best ? "" : "  <- predictor not lowest");
      }
      if (dist_wins < 2) {
        ok = false;
        detail << "\n      dist-aware <= naive on only " << dist_wins << " components";
      }
    }
  }
  ok = ok && secs < 1800.0;
  return {ok, "medians of squared error, " + fmt(secs, 4) + " s" + detail.str()};
}

Outcome latency(const DeskRun& run) {
  const auto queries =
      build_queries(run.holdout_traces, *run.policy, run.factory, QueryFlavor::factual, run.config.rollout);
  SamplerConfig sc = run.config.sampler;
  sc.n_samples = 20;
  const PredictorEstimator pred(run.model);
  const NaiveEstimator naive(*run.policy, run.pool, sc);
  const DistAwareEstimator dist(*run.policy, run.clusters, run.pool, sc);
  auto bench = [&](const ReturnEstimator& m, std::size_t n) {
    return latency_benchmark([&](std::size_t i) { (void)m.estimate(queries[i % queries.size()], i); }, n);
  };
  const LatencyStats p = bench(pred, 500), nv = bench(naive, 100), da = bench(dist, 100);
  const bool ok = p.p50_ms < 10.0 && nv.p50_ms > p.p50_ms && da.p50_ms > p.p50_ms;
  return {ok, "p50 predictor " + fmt(p.p50_ms) + " ms, naive " + fmt(nv.p50_ms) + " ms, dist-aware " +
                  fmt(da.p50_ms) + " ms (20 futures each)"};
}

Outcome event_detection(const DeskRun& abr_run) {
  // Fixture: scaled returns (quality, quality_change, stalling) with flags
  // known by construction against the default thresholds.
  const ThresholdSpec thr = default_thresholds(EnvKind::abr);
  const std::vector<std::vector<double>> truth{{0.9, 0.0, -0.5}, {0.2, 0.0, -0.3},  {0.7, -0.2, 0.0},
                                               {0.6, 0.0, -0.25}, {0.1, -0.5, -1.0}, {0.9, 0.0, 0.0}};
  const std::vector<std::vector<double>> pred{{0.9, 0.0, -0.4}, {0.7, 0.0, -0.1}, {0.7, 0.0, -0.3},
                                              {0.5, 0.0, -0.26}, {0.1, -0.5, -1.0}, {0.9, -0.3, 0.0}};
  // Hand counts per component (tp, fp, tn, fn).
  const std::size_t expect[3][4] = {{1, 1, 3, 1}, {1, 1, 3, 1}, {2, 2, 1, 1}};
  bool fixture_ok = true;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<bool> pf, tf;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      pf.push_back(detect_events(pred[i], thr)[c]);
      tf.push_back(detect_events(truth[i], thr)[c]);
    }
    const EventMetrics m = event_metrics(pf, tf);
    const auto& e = expect[c];
    const double recall = static_cast<double>(e[0]) / static_cast<double>(e[0] + e[3]);
    const double fpr = static_cast<double>(e[1]) / static_cast<double>(e[1] + e[2]);
    fixture_ok = fixture_ok && m.tp == e[0] && m.fp == e[1] && m.tn == e[2] && m.fn == e[3] && m.recall == recall &&
                 m.fpr == fpr;
  }

  // Guaranteed stall: at a constant 0.3 Mbps the reference controller
  // climbs to level 1 once its buffer builds, and a 2.5 Mb chunk takes
  // 8.3 s to fetch against 4 s of playback, so it stalls on every window.
  Trace t;
  t.id = "slow";
  t.kind = TraceKind::abr;
  for (int s = 0; s < 400; ++s) t.samples.push_back({static_cast<double>(s), 0.3});
  TraceSet holdout{TraceKind::abr, Provenance::synthetic, {t}};
  std::shared_ptr<const Policy> pol = make_policy(abr_run.model.policy_id, abr_run.factory);
  const SessionStore store = build_session(abr_run.factory, pol, abr_run.model, holdout, TraceSet{}, std::nullopt,
                                           abr_run.config.rollout, abr_run.config.sampler);
  const ApiResponse r = handle_request(store, "GET", "/api/alerts", {}, "");
  std::set<std::string> alerted;
  for (const auto& a : r.body.at("alerts"))
    for (const auto& e : a.at("events"))
      if (e == "stalling") alerted.insert(a.at("id").get<std::string>());

  // Ground truth along the same trajectory.
  const auto queries = build_queries(holdout, *pol, abr_run.factory, QueryFlavor::factual, abr_run.config.rollout);
  const std::size_t stall = 2;
  std::size_t true_stalls = 0, hits = 0, false_alarms = 0;
  for (const auto& q : queries) {
    const bool truth = detect_events(scale_for_events(q.truth.values, q.truth.gamma, q.truth.t_max), thr)[stall];
    const bool flagged = alerted.count(t.id + "@" + std::to_string(q.anchor)) > 0;
    true_stalls += truth;
    hits += truth && flagged;
    false_alarms += !truth && flagged;
  }
  const bool ok = fixture_ok && r.status == 200 && true_stalls > 0 && 2 * hits >= true_stalls;
  return {ok, std::string("fixture confusion counts ") + (fixture_ok ? "match" : "MISMATCH") +
                  "; slow-link scenario: " + std::to_string(hits) + "/" + std::to_string(true_stalls) +
                  " truly stalling anchors raise a stalling alert, " + std::to_string(false_alarms) +
                  " false alarms, " + std::to_string(queries.size()) + " anchors"};
}

Outcome reward_design() {
  const auto t0 = Clock::now();
  DeskConfig d = desk_config(EnvKind::abr);
  const TraceSet all = synthesize_traces(EnvKind::abr, d.traces, d.n_traces, d.seed);
  auto [train_set, holdout] = split_holdout(all, d.holdout_fraction, d.seed);
  RewardDesignConfig rc;
  rc.rollout.seed = d.seed;
  rc.train.seed = d.seed;
  const auto rows = reward_design_sweep(train_set, holdout, AbrConfig{}, rc);
  bool drops_ok = true, share_ok = true;
  std::ostringstream detail;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    detail << (i ? "; " : "") << "w_s=" << fmt(r.stall_weight) << ": " << r.drop_states << " drops, stalling share "
           << fmt(r.stalling_share(), 3);
    if (i > 0) {
      drops_ok = drops_ok && r.drop_states <= rows[i - 1].drop_states;
      share_ok = share_ok && r.stalling_share() <= rows[i - 1].stalling_share();
    }
  }
  const double secs = seconds_since(t0);
  return {drops_ok && share_ok && secs < 1800.0,
          std::string("(a) drops ") + (drops_ok ? "non-increasing" : "NOT non-increasing") + ", (b) share " +
              (share_ok ? "non-increasing" : "NOT non-increasing") + "; " + detail.str() + "; " + fmt(secs, 3) +
              " s"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qexplain acceptance suite"};
  std::vector<std::string> expect_fail;
  std::vector<std::string> only;
  app.add_option("--expect-fail", expect_fail, "Criteria known to be red; they do not affect the exit code");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);

  const auto wanted = [&](const std::string& name) {
    return only.empty() || std::find(only.begin(), only.end(), name) != only.end();
  };
  int unexpected = 0;
  const auto report = [&](const std::string& name, const Outcome& o) {
    const bool known = std::find(expect_fail.begin(), expect_fail.end(), name) != expect_fail.end();
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail
              << (!o.pass && known ? "  [known]" : "") << std::endl;
    if (!o.pass && !known) ++unexpected;
  };
  const auto run = [&](const std::string& name, const std::function<Outcome()>& fn) {
    if (!wanted(name)) return;
    try {
      report(name, fn());
    } catch (const std::exception& e) {
      report(name, {false, std::string("exception: ") + e.what()});
    }
  };

  run("decomposition-identity", decomposition_identity);
  run("rollout-oracle", rollout_oracle);
  run("gradient-check", gradient_check);
  run("overfit-determinism", overfit);

  const bool need_desk = wanted("fidelity-ordering") || wanted("latency-ordering") || wanted("event-detection");
  std::map<EnvKind, DeskRun> runs;
  std::map<EnvKind, DeskEval> evals;
  double desk_secs = 0.0;
  if (need_desk) {
    const auto t0 = Clock::now();
    try {
      for (EnvKind kind : {EnvKind::abr, EnvKind::cc}) {
        runs.emplace(kind, prepare_desk_run(desk_config(kind)));
        if (wanted("fidelity-ordering")) evals.emplace(kind, evaluate_desk(runs.at(kind)));
      }
    } catch (const std::exception& e) {
      std::cerr << "desk run failed: " << e.what() << '\n';
    }
    desk_secs = seconds_since(t0);
  }
  run("fidelity-ordering", [&] {
    if (evals.size() != 2) return Outcome{false, "desk run did not complete"};
    return fidelity_ordering(evals, desk_secs);
  });
  run("latency-ordering", [&] {
    if (!runs.count(EnvKind::abr)) return Outcome{false, "desk run did not complete"};
    return latency(runs.at(EnvKind::abr));
  });
  run("event-detection", [&] {
    if (!runs.count(EnvKind::abr)) return Outcome{false, "desk run did not complete"};
    return event_detection(runs.at(EnvKind::abr));
  });
  run("reward-design", reward_design);
  return unexpected == 0 ? 0 : 1;
}
