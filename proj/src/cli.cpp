#include "qexplain/cli.hpp"

#include <algorithm>
#include <cmath>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "qexplain/error.hpp"
#include "qexplain/evalsuite.hpp"
#include "qexplain/hash.hpp"
#include "qexplain/pipeline.hpp"
#include "qexplain/service.hpp"

namespace qx {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

TraceKind trace_kind(EnvKind k) { return k == EnvKind::abr ? TraceKind::abr : TraceKind::cc; }

EnvFactory factory_for(EnvKind kind, const std::string& config_path) {
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw UserError("cannot open env config " + config_path);
    json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw UserError("env config " + config_path + ": " + e.what());
    }
    EnvFactory f = EnvFactory::from_json(j);
    if (f.kind != kind) throw UserError("env config " + config_path + " is for " + to_string(f.kind));
    return f;
  }
  EnvFactory f;
  f.kind = kind;
  return f;
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

std::unique_ptr<Policy> policy_for(const std::string& id, const EnvFactory& env, const std::string& path) {
  return make_policy(id.empty() ? default_policy_id(env.kind) : id, env, path);
}

RolloutConfig rollout_for(const PredictorModel& m, int spacing, std::uint64_t seed) {
  RolloutConfig r;
  r.gamma = m.gamma;
  r.t_max = m.t_max;
  r.spacing = spacing;
  r.seed = seed;
  r.mode = m.mode;
  r.validate();
  return r;
}

// Log-spaced bins for squared errors: an exact-zero bin, then decades.
struct HistBin {
  std::string label;
  double lo, hi;
};

std::vector<HistBin> error_bins() {
  std::vector<HistBin> bins{{"0", 0.0, 0.0}};
  double lo = 0.0;
  for (int e = -8; e <= 0; ++e) {
    const double hi = std::pow(10.0, e);
    bins.push_back({"<1e" + std::to_string(e), lo, hi});
    lo = hi;
  }
  bins.push_back({">=1", 1.0, std::numeric_limits<double>::infinity()});
  return bins;
}

std::size_t bin_of(double v, const std::vector<HistBin>& bins) {
  if (v == 0.0) return 0;
  for (std::size_t b = 1; b < bins.size(); ++b)
    if (v < bins[b].hi) return b;
  return bins.size() - 1;
}

void write_fidelity_tables(const fs::path& dir, const std::vector<EvaluationResult>& results) {
  fs::create_directories(dir);
  const auto bins = error_bins();
  std::ofstream hist(dir / "fidelity_hist.tsv");
  hist << "method\tflavor\tcomponent\tbin\tcount\tfraction\n";
  std::ofstream ev(dir / "events.tsv");
  ev << "method\tflavor\tcomponent\trecall\tfpr\ttp\tfp\ttn\tfn\n";
  for (const auto& r : results) {
    for (std::size_t c = 0; c < r.components.size(); ++c) {
      std::vector<std::size_t> counts(bins.size(), 0);
      for (const auto& rec : r.records) ++counts[bin_of(rec.sq_error[c], bins)];
      for (std::size_t b = 0; b < bins.size(); ++b)
        hist << r.method << '\t' << to_string(r.flavor) << '\t' << r.components[c] << '\t' << bins[b].label << '\t'
             << counts[b] << '\t' << fmt(static_cast<double>(counts[b]) / static_cast<double>(r.records.size()))
             << '\n';
      const auto& e = r.events[c];
      ev << r.method << '\t' << to_string(r.flavor) << '\t' << r.components[c] << '\t' << fmt(e.recall) << '\t'
         << fmt(e.fpr) << '\t' << e.tp << '\t' << e.fp << '\t' << e.tn << '\t' << e.fn << '\n';
    }
  }
}

void print_result_table(std::ostream& out, const EvaluationResult& r) {
  out << r.method << " / " << to_string(r.flavor) << " (" << r.records.size() << " queries, " << fmt(r.seconds, 3)
      << " s)\n";
  out << "  component         p25          p50          p75          p95          recall  fpr\n";
  for (std::size_t c = 0; c < r.components.size(); ++c) {
    const auto& q = r.quantiles[c];
    out << "  " << std::left << std::setw(16) << r.components[c] << std::right;
    for (double v : {q.p25, q.p50, q.p75, q.p95}) out << ' ' << std::setw(12) << fmt(v, 4);
    out << "  " << std::setw(6) << fmt(r.events[c].recall, 3) << "  " << fmt(r.events[c].fpr, 3);
    if (r.excluded[c]) out << "  (degenerate, excluded)";
    out << '\n';
  }
}

// Everything estimator-related that evaluate, bench and serve share.
struct Methods {
  PredictorModel model;
  std::unique_ptr<Policy> policy;
  TraceSet train;
  TracePool pool;
  std::optional<ClusterModel> clusters;
  SamplerConfig sampler;
};

Methods load_methods(const std::string& model_path, const std::string& train_path, const std::string& policy_id,
                     const std::string& policy_path, int n_clusters, int n_samples, std::uint64_t seed) {
  Methods m;
  m.model = load_model(model_path);
  m.policy = policy_for(policy_id.empty() ? m.model.policy_id : policy_id, m.model.env, policy_path);
  if (!train_path.empty()) {
    m.train = load_traces(train_path, trace_kind(m.model.env.kind));
    m.pool = make_pool(m.train);
    if (n_clusters > 0)
      m.clusters = fit_clusters(m.train, std::min<int>(n_clusters, static_cast<int>(m.train.size())), seed);
  }
  m.sampler.n_samples = n_samples;
  m.sampler.gamma = m.model.gamma;
  m.sampler.t_max = m.model.t_max;
  m.sampler.seed = seed;
  return m;
}

std::unique_ptr<ReturnEstimator> estimator_for(const std::string& method, const Methods& m) {
  if (method == "predictor") return std::make_unique<PredictorEstimator>(m.model);
  if (method == "naive" || method == "dist-aware") {
    if (m.pool.empty()) throw UserError(method + " needs --train traces to sample futures from");
    if (method == "naive") return std::make_unique<NaiveEstimator>(*m.policy, m.pool, m.sampler);
    if (!m.clusters) throw UserError("dist-aware needs --clusters > 0");
    return std::make_unique<DistAwareEstimator>(*m.policy, *m.clusters, m.pool, m.sampler);
  }
  throw UserError("unknown method " + method + " (predictor, naive, dist-aware, all)");
}

std::vector<std::string> methods_list(const std::string& method) {
  if (method == "all") return {"predictor", "naive", "dist-aware"};
  return {method};
}

Action parse_action_text(const std::string& text, const ActionSpace& space) {
  try {
    std::size_t used = 0;
    Action a;
    if (space.kind == ActionKind::discrete) {
      a = Action::discrete(std::stoi(text, &used));
    } else {
      a = Action::continuous(std::stod(text, &used));
    }
    if (used != text.size()) throw std::invalid_argument(text);
    if (!space.contains(a)) throw UserError("action " + text + " is outside the action space");
    return a;
  } catch (const std::logic_error&) {
    throw UserError("cannot parse action '" + text + "'");
  }
}

Service* g_service = nullptr;
void on_signal(int) {
  if (g_service) g_service->stop();
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"qexplain: decomposed future-return explanations for network controllers", "qexplain"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  std::uint64_t seed = 1;
  bool as_json = false;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Random seed")->capture_default_str();
    sub->add_flag("--json", as_json, "Machine-readable output");
  };

  // gen-traces
  std::string kind_s = "cc", out_path;
  std::size_t n = 200;
  double duration = 0.0, mean_min = 0.0, mean_max = 0.0;
  auto* gen = app.add_subcommand("gen-traces", "Synthesize a trace set");
  gen->add_option("--kind", kind_s, "abr or cc")->check(CLI::IsMember({"abr", "cc"}))->capture_default_str();
  gen->add_option("--n", n, "Number of traces")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("-o,--out", out_path, "Output JSONL")->required();
  gen->add_option("--duration", duration, "Seconds per trace (default per kind)");
  gen->add_option("--mean-min", mean_min, "Lower bound of per-trace mean Mbps");
  gen->add_option("--mean-max", mean_max, "Upper bound of per-trace mean Mbps");
  common(gen);

  // split
  std::string traces_path, train_out, holdout_out;
  double holdout_fraction = 0.2;
  auto* split = app.add_subcommand("split", "Split traces into training and held-out sets");
  split->add_option("--traces", traces_path, "Input JSONL")->required();
  split->add_option("--kind", kind_s, "abr or cc")->check(CLI::IsMember({"abr", "cc"}))->capture_default_str();
  split->add_option("--holdout", holdout_fraction, "Held-out fraction")->capture_default_str();
  split->add_option("--train-out", train_out, "Training JSONL")->required();
  split->add_option("--holdout-out", holdout_out, "Held-out JSONL")->required();
  common(split);

  // rollout
  std::string policy_id, policy_path, env_config, features = "raw";
  RolloutConfig rcfg;
  auto* roll = app.add_subcommand("rollout", "Collect decomposed-return samples");
  roll->add_option("--traces", traces_path, "Training traces JSONL")->required();
  roll->add_option("--env", kind_s, "abr or cc")->check(CLI::IsMember({"abr", "cc"}))->capture_default_str();
  roll->add_option("--policy", policy_id, "abr-bba, abr-mpc, cc-aimd or external");
  roll->add_option("--policy-path", policy_path, "Network for --policy external");
  roll->add_option("--env-config", env_config, "EnvFactory JSON overriding defaults");
  roll->add_option("--gamma", rcfg.gamma)->capture_default_str();
  roll->add_option("--t-max", rcfg.t_max)->capture_default_str();
  roll->add_option("--spacing", rcfg.spacing)->capture_default_str();
  roll->add_option("--exploratory-fraction", rcfg.exploratory_fraction)->capture_default_str();
  roll->add_option("--features", features)->check(CLI::IsMember({"raw", "embedding"}))->capture_default_str();
  roll->add_option("-o,--out", out_path, "Dataset JSONL")->required();
  common(roll);

  // train
  std::string data_path, train_config_path;
  TrainConfig tcfg;
  auto* tr = app.add_subcommand("train", "Train the return predictor");
  tr->add_option("--data", data_path, "Dataset JSONL")->required();
  tr->add_option("-o,--out", out_path, "Checkpoint path")->required();
  tr->add_option("--config", train_config_path, "TrainConfig JSON");
  tr->add_option("--epochs", tcfg.stage1_epochs, "Stage 1 epochs")->capture_default_str();
  tr->add_option("--stage2-epochs", tcfg.stage2_epochs)->capture_default_str();
  tr->add_option("--lr", tcfg.stage1_lr, "Stage 1 learning rate")->capture_default_str();
  tr->add_option("--stage2-lr", tcfg.stage2_lr)->capture_default_str();
  tr->add_option("--batch", tcfg.batch_size)->capture_default_str();
  common(tr);

  // evaluate
  std::string model_path, holdout_path, train_path, method = "predictor", flavor_s = "factual", csv_path,
                                                     summary_path, tables_dir;
  int spacing = 5, n_clusters = 8, n_samples = 20;
  auto* ev = app.add_subcommand("evaluate", "Fidelity and event detection on held-out traces");
  ev->add_option("--model", model_path, "Checkpoint")->required();
  ev->add_option("--holdout", holdout_path, "Held-out traces JSONL")->required();
  ev->add_option("--train", train_path, "Training traces (futures for the samplers)");
  ev->add_option("--method", method, "predictor, naive, dist-aware or all")
      ->check(CLI::IsMember({"predictor", "naive", "dist-aware", "all"}))
      ->capture_default_str();
  ev->add_option("--flavor", flavor_s, "factual, counterfactual or both")
      ->check(CLI::IsMember({"factual", "counterfactual", "both"}))
      ->capture_default_str();
  ev->add_option("--policy", policy_id, "Policy (default: the one the model was trained for)");
  ev->add_option("--policy-path", policy_path);
  ev->add_option("--spacing", spacing)->capture_default_str();
  ev->add_option("--clusters", n_clusters, "k for dist-aware")->capture_default_str();
  ev->add_option("--samples", n_samples, "Futures per sampler estimate")->capture_default_str();
  ev->add_option("--csv", csv_path, "Per-record CSV (default: stdout)");
  ev->add_option("--summary", summary_path, "JSON summary path");
  ev->add_option("--tables", tables_dir, "Directory for histogram tables");
  common(ev);

  // explain
  std::string state_id, action_s;
  auto* ex = app.add_subcommand("explain", "Explain one held-out state");
  ex->add_option("--model", model_path, "Checkpoint")->required();
  ex->add_option("--holdout", holdout_path, "Traces holding the state")->required();
  ex->add_option("--state", state_id, "State id <trace>@<step>")->required();
  ex->add_option("--action", action_s, "Action (default: the policy's)");
  ex->add_option("--method", method)->check(CLI::IsMember({"predictor", "naive", "dist-aware"}))->capture_default_str();
  ex->add_option("--train", train_path, "Training traces (samplers)");
  ex->add_option("--policy", policy_id);
  ex->add_option("--policy-path", policy_path);
  ex->add_option("--spacing", spacing)->capture_default_str();
  ex->add_option("--clusters", n_clusters)->capture_default_str();
  ex->add_option("--samples", n_samples)->capture_default_str();
  common(ex);

  // bench
  std::size_t bench_n = 100;
  auto* bench = app.add_subcommand("bench", "Per-query latency of each method");
  bench->add_option("--model", model_path, "Checkpoint")->required();
  bench->add_option("--holdout", holdout_path, "Held-out traces JSONL")->required();
  bench->add_option("--train", train_path, "Training traces (samplers)");
  bench->add_option("--n", bench_n, "Timed queries per method")->capture_default_str();
  bench->add_option("--policy", policy_id);
  bench->add_option("--policy-path", policy_path);
  bench->add_option("--spacing", spacing)->capture_default_str();
  bench->add_option("--clusters", n_clusters)->capture_default_str();
  bench->add_option("--samples", n_samples)->capture_default_str();
  common(bench);

  // serve
  std::string host = "127.0.0.1", static_dir;
  int port = 8080;
  auto* srv = app.add_subcommand("serve", "JSON service over held-out states");
  srv->add_option("--model", model_path, "Checkpoint")->required();
  srv->add_option("--holdout", holdout_path, "Held-out traces JSONL")->required();
  srv->add_option("--train", train_path, "Training traces (samplers)");
  srv->add_option("--policy", policy_id);
  srv->add_option("--policy-path", policy_path);
  srv->add_option("--spacing", spacing)->capture_default_str();
  srv->add_option("--clusters", n_clusters)->capture_default_str();
  srv->add_option("--samples", n_samples)->capture_default_str();
  srv->add_option("--host", host)->capture_default_str();
  srv->add_option("--port", port)->capture_default_str();
  srv->add_option("--static", static_dir, "Directory served at /");
  common(srv);

  // reward-design
  std::vector<double> weights{16.0, 4.0, 1.0};
  int epochs = 0;
  auto* rd = app.add_subcommand("reward-design", "Stall-weight sweep: dominant components on bitrate drops");
  rd->add_option("--weights", weights, "Stall weights, high to low")->delimiter(',')->capture_default_str();
  rd->add_option("--n", n, "Synthetic traces")->capture_default_str()->check(CLI::PositiveNumber);
  rd->add_option("--epochs", epochs, "Stage 1 epochs (default: trainer default)");
  rd->add_option("--tables", tables_dir, "Directory for the dominance table");
  common(rd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success)) {
      app.exit(e, out, err);
      return 0;
    }
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (gen->parsed()) {
      const EnvKind kind = env_kind_from_string(kind_s);
      DeskConfig d = desk_config(kind);
      if (duration > 0.0) d.traces.duration = duration;
      if (mean_min > 0.0) d.traces.mean_mbps.min = mean_min;
      if (mean_max > 0.0) d.traces.mean_mbps.max = mean_max;
      const TraceSet set = synthesize_traces(kind, d.traces, n, seed);
      ensure_parent(out_path);
      save_traces(set, out_path);
      if (as_json)
        out << json{{"path", out_path}, {"kind", kind_s}, {"n", set.size()}}.dump() << '\n';
      else
        out << "wrote " << set.size() << ' ' << kind_s << " traces to " << out_path << '\n';
      return 0;
    }
    if (split->parsed()) {
      const TraceSet set = load_traces(traces_path, trace_kind(env_kind_from_string(kind_s)));
      auto [a, b] = split_holdout(set, holdout_fraction, seed);
      ensure_parent(train_out);
      ensure_parent(holdout_out);
      save_traces(a, train_out);
      save_traces(b, holdout_out);
      if (as_json)
        out << json{{"train", a.size()}, {"holdout", b.size()}}.dump() << '\n';
      else
        out << "train " << a.size() << ", holdout " << b.size() << '\n';
      return 0;
    }
    if (roll->parsed()) {
      const EnvFactory f = factory_for(env_kind_from_string(kind_s), env_config);
      const TraceSet set = load_traces(traces_path, trace_kind(f.kind));
      const auto policy = policy_for(policy_id, f, policy_path);
      rcfg.seed = seed;
      rcfg.mode = features == "embedding" ? FeatureMode::embedding : FeatureMode::raw;
      const Dataset data = build_dataset(set, *policy, f, rcfg);
      ensure_parent(out_path);
      save_dataset(data, out_path);
      std::size_t expl = 0;
      for (const auto& s : data.samples) expl += s.flavor == Flavor::exploratory;
      if (as_json)
        out << json{{"path", out_path}, {"samples", data.samples.size()}, {"exploratory", expl},
                    {"normalization", data.normalization.to_json()}}
                   .dump()
            << '\n';
      else
        out << "wrote " << data.samples.size() << " samples (" << expl << " exploratory) to " << out_path << '\n';
      return 0;
    }
    if (tr->parsed()) {
      TrainConfig cfg = tcfg;
      if (!train_config_path.empty()) {
        std::ifstream in(train_config_path);
        if (!in) throw UserError("cannot open train config " + train_config_path);
        json j;
        try {
          in >> j;
        } catch (const std::exception& e) {
          throw UserError("train config " + train_config_path + ": " + e.what());
        }
        cfg = TrainConfig::from_json(j);
      }
      cfg.seed = seed;
      const Dataset data = load_dataset(data_path);
      TrainReport report;
      const PredictorModel model = train(data, cfg, &report, [&](int stage, int epoch, double loss) {
        if (!as_json && (epoch % 10 == 0)) err << "stage " << stage << " epoch " << epoch << " loss " << loss << '\n';
      });
      ensure_parent(out_path);
      save_model(model, out_path);
      std::ifstream in(out_path, std::ios::binary);
      const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      const std::string digest = hex64(fnv1a(bytes));
      if (as_json)
        out << json{{"path", out_path},
                    {"digest", digest},
                    {"stage1_final_loss", report.stage1_loss.empty() ? 0.0 : report.stage1_loss.back()},
                    {"stage2_final_loss", report.stage2_loss.empty() ? 0.0 : report.stage2_loss.back()}}
                   .dump()
            << '\n';
      else
        out << "wrote " << out_path << " (digest " << digest << ")\n";
      return 0;
    }
    if (ev->parsed()) {
      const Methods m = load_methods(model_path, train_path, policy_id, policy_path, n_clusters, n_samples, seed);
      const TraceSet holdout = load_traces(holdout_path, trace_kind(m.model.env.kind));
      const RolloutConfig r = rollout_for(m.model, spacing, seed);
      const ThresholdSpec thr = default_thresholds(m.model.env.kind);
      std::vector<QueryFlavor> flavors;
      if (flavor_s != "counterfactual") flavors.push_back(QueryFlavor::factual);
      if (flavor_s != "factual") flavors.push_back(QueryFlavor::counterfactual);

      std::vector<EvaluationResult> results;
      for (QueryFlavor fl : flavors) {
        const auto queries = build_queries(holdout, *m.policy, m.model.env, fl, r);
        for (const auto& name : methods_list(method)) {
          const auto est = estimator_for(name, m);
          results.push_back(evaluate_method(*est, queries, fl, m.model.normalization, m.model.components, thr));
        }
      }
      std::ofstream csv_file;
      std::ostream* csv = &out;
      if (!csv_path.empty()) {
        ensure_parent(csv_path);
        csv_file.open(csv_path);
        if (!csv_file) throw UserError("cannot write " + csv_path);
        csv = &csv_file;
      }
      json summary = json::array();
      for (std::size_t i = 0; i < results.size(); ++i) {
        if (!csv_path.empty() || !as_json) write_fidelity_csv(*csv, results[i], i == 0);
        summary.push_back(results[i].summary_json());
      }
      if (!summary_path.empty()) {
        ensure_parent(summary_path);
        std::ofstream(summary_path) << summary.dump(2) << '\n';
      }
      if (!tables_dir.empty()) write_fidelity_tables(tables_dir, results);
      if (as_json) {
        out << summary.dump() << '\n';
      } else if (!csv_path.empty()) {
        for (const auto& res : results) print_result_table(out, res);
      }
      return 0;
    }
    if (ex->parsed()) {
      const Methods m = load_methods(model_path, train_path, policy_id, policy_path, n_clusters, n_samples, seed);
      const TraceSet all = load_traces(holdout_path, trace_kind(m.model.env.kind));
      const auto at = state_id.rfind('@');
      if (at == std::string::npos) throw UserError("state id must look like <trace>@<step>");
      const Trace* t = all.find(state_id.substr(0, at));
      if (!t) throw UserError("no trace " + state_id.substr(0, at) + " in " + holdout_path);
      TraceSet one{all.kind, all.provenance, {*t}};
      std::shared_ptr<const Policy> pol(policy_for(policy_id.empty() ? m.model.policy_id : policy_id, m.model.env,
                                                   policy_path));
      const SessionStore store = build_session(m.model.env, pol, m.model, one, m.train, m.clusters,
                                               rollout_for(m.model, spacing, seed), m.sampler);
      const StateEntry* s = store.find(state_id);
      if (!s) throw UserError("no anchor state " + state_id + " (anchors every " + std::to_string(spacing) + " steps)");
      const Action a = action_s.empty() ? s->policy_action : parse_action_text(action_s, store.env.action_space());
      json res;
      try {
        res = explain_state(store, *s, a, method);
      } catch (const ApiError& e) {
        throw UserError(e.message);
      }
      if (as_json) {
        out << res.dump() << '\n';
      } else {
        out << "state " << s->id << "  action " << to_string(a) << "  method " << method << "  policy action "
            << to_string(s->policy_action) << '\n';
        for (const auto& c : res.at("components"))
          out << "  " << std::left << std::setw(16) << c.at("name").get<std::string>() << std::right << std::setw(12)
              << fmt(c.at("mean").get<double>(), 5) << " +- " << fmt(c.at("std").get<double>(), 4) << '\n';
        out << "  total " << fmt(res.at("total").get<double>(), 6) << "  events " << res.at("events").dump()
            << "  latency " << fmt(res.at("latency_ms").get<double>(), 3) << " ms\n";
      }
      return 0;
    }
    if (bench->parsed()) {
      const Methods m = load_methods(model_path, train_path, policy_id, policy_path, n_clusters, n_samples, seed);
      const TraceSet holdout = load_traces(holdout_path, trace_kind(m.model.env.kind));
      const auto queries =
          build_queries(holdout, *m.policy, m.model.env, QueryFlavor::factual, rollout_for(m.model, spacing, seed));
      if (queries.empty()) throw UserError("bench: no queries");
      json rows = json::array();
      std::vector<std::string> names{"predictor"};
      if (!m.pool.empty()) names.push_back("naive");
      if (m.clusters) names.push_back("dist-aware");
      for (const auto& name : names) {
        const auto est = estimator_for(name, m);
        const LatencyStats st = latency_benchmark(
            [&](std::size_t i) { (void)est->estimate(queries[i % queries.size()], i); }, bench_n);
        rows.push_back({{"method", name}, {"p50_ms", st.p50_ms}, {"p95_ms", st.p95_ms}, {"mean_ms", st.mean_ms},
                        {"n", st.n}});
      }
      if (as_json) {
        out << rows.dump() << '\n';
      } else {
        out << "method        p50_ms      p95_ms      mean_ms\n";
        for (const auto& r : rows)
          out << std::left << std::setw(12) << r.at("method").get<std::string>() << std::right << std::setw(10)
              << fmt(r.at("p50_ms").get<double>(), 4) << std::setw(12) << fmt(r.at("p95_ms").get<double>(), 4)
              << std::setw(12) << fmt(r.at("mean_ms").get<double>(), 4) << '\n';
      }
      return 0;
    }
    if (srv->parsed()) {
      Methods m = load_methods(model_path, train_path, policy_id, policy_path, n_clusters, n_samples, seed);
      const TraceSet holdout = load_traces(holdout_path, trace_kind(m.model.env.kind));
      std::shared_ptr<const Policy> pol(std::move(m.policy));
      const SessionStore store = build_session(m.model.env, pol, m.model, holdout, m.train, m.clusters,
                                               rollout_for(m.model, spacing, seed), m.sampler);
      Service service(store, static_dir);
      if (!service.bind(host, port)) throw UserError("cannot bind " + host + ":" + std::to_string(port));
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      if (as_json)
        out << json{{"host", host}, {"port", service.port()}, {"states", store.states.size()}}.dump() << std::endl;
      else
        out << "serving " << store.states.size() << " states on http://" << host << ':' << service.port() << std::endl;
      service.run();
      g_service = nullptr;
      return 0;
    }
    if (rd->parsed()) {
      DeskConfig d = desk_config(EnvKind::abr);
      d.n_traces = n;
      d.seed = seed;
      const TraceSet all = synthesize_traces(EnvKind::abr, d.traces, d.n_traces, seed);
      auto [train_set, holdout] = split_holdout(all, d.holdout_fraction, seed);
      RewardDesignConfig rc;
      rc.stall_weights = weights;
      rc.rollout.seed = seed;
      rc.train.seed = seed;
      if (epochs > 0) rc.train.stage1_epochs = epochs;
      const auto rows = reward_design_sweep(train_set, holdout, AbrConfig{}, rc);
      const std::vector<std::string> names{"quality", "quality_change", "stalling"};
      json j = json::array();
      for (const auto& r : rows)
        j.push_back({{"stall_weight", r.stall_weight},
                     {"states", r.states},
                     {"drop_states", r.drop_states},
                     {"dominant", {{names[0], r.dominant_counts[0]},
                                   {names[1], r.dominant_counts[1]},
                                   {names[2], r.dominant_counts[2]}}},
                     {"stalling_share", r.stalling_share()}});
      if (!tables_dir.empty()) {
        fs::create_directories(tables_dir);
        std::ofstream t(fs::path(tables_dir) / "dominance.tsv");
        t << "stall_weight\tcomponent\tcount\tfraction\n";
        for (const auto& r : rows)
          for (std::size_t c = 0; c < 3; ++c)
            t << fmt(r.stall_weight) << '\t' << names[c] << '\t' << r.dominant_counts[c] << '\t'
              << fmt(r.drop_states ? static_cast<double>(r.dominant_counts[c]) / r.drop_states : 0.0) << '\n';
      }
      if (as_json) {
        out << j.dump() << '\n';
      } else {
        out << "stall_w  states  drops  quality  q_change  stalling  stall_share\n";
        for (const auto& r : rows)
          out << std::setw(7) << fmt(r.stall_weight) << std::setw(8) << r.states << std::setw(7) << r.drop_states
              << std::setw(9) << r.dominant_counts[0] << std::setw(10) << r.dominant_counts[1] << std::setw(10)
              << r.dominant_counts[2] << std::setw(13) << fmt(r.stalling_share(), 3) << '\n';
      }
      return 0;
    }
    err << app.help();
    return 1;
  } catch (const UserError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace qx
