#include "qexplain/rollout.hpp"

#include <cmath>
#include <fstream>

#include "qexplain/error.hpp"
#include "qexplain/parallel.hpp"

namespace qx {

using nlohmann::json;

DecomposedReturn truncated_decomposed_return(const std::vector<std::vector<double>>& rewards, double gamma,
                                             int t_max) {
  if (rewards.empty()) throw UserError("truncated return of an empty reward sequence");
  if (t_max < 1) throw UserError("t_max must be >= 1");
  DecomposedReturn out;
  out.gamma = gamma;
  out.t_max = t_max;
  out.values.assign(rewards.front().size(), 0.0);
  const std::size_t n = std::min<std::size_t>(rewards.size(), static_cast<std::size_t>(t_max));
  double discount = 1.0;
  for (std::size_t dt = 0; dt < n; ++dt) {
    if (rewards[dt].size() != out.values.size()) throw UserError("reward vectors differ in length");
    for (std::size_t c = 0; c < out.values.size(); ++c) out.values[c] += discount * rewards[dt][c];
    discount *= gamma;
  }
  return out;
}

double discount_mass(double gamma, int n) {
  double mass = 0.0;
  double d = 1.0;
  for (int i = 0; i < n; ++i) {
    mass += d;
    d *= gamma;
  }
  return mass;
}

std::string to_string(Flavor f) { return f == Flavor::onpolicy ? "onpolicy" : "exploratory"; }

Flavor flavor_from_string(const std::string& s) {
  if (s == "onpolicy") return Flavor::onpolicy;
  if (s == "exploratory") return Flavor::exploratory;
  throw UserError("unknown rollout flavor '" + s + "'");
}

void RolloutConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw UserError("rollout: gamma must be in [0,1]");
  if (t_max < 1) throw UserError("rollout: t_max must be >= 1");
  if (spacing < t_max) throw UserError("rollout: spacing must be >= t_max");
  if (!(exploratory_fraction >= 0.0 && exploratory_fraction <= 1.0))
    throw UserError("rollout: exploratory_fraction must be in [0,1]");
}

json RolloutConfig::to_json() const {
  return {{"gamma", gamma},
          {"t_max", t_max},
          {"spacing", spacing},
          {"exploratory_fraction", exploratory_fraction},
          {"seed", seed},
          {"mode", mode == FeatureMode::raw ? "raw" : "embedding"}};
}

RolloutConfig RolloutConfig::from_json(const json& j) {
  RolloutConfig c;
  c.gamma = j.value("gamma", c.gamma);
  c.t_max = j.value("t_max", c.t_max);
  c.spacing = j.value("spacing", c.spacing);
  c.exploratory_fraction = j.value("exploratory_fraction", c.exploratory_fraction);
  c.seed = j.value("seed", c.seed);
  c.mode = j.value("mode", std::string("raw")) == "embedding" ? FeatureMode::embedding : FeatureMode::raw;
  c.validate();
  return c;
}

std::vector<double> NormalizationSpec::normalize(const std::vector<double>& v) const {
  if (v.size() != size()) throw UserError("normalize: component count mismatch");
  std::vector<double> out(v.size());
  for (std::size_t c = 0; c < v.size(); ++c)
    out[c] = degenerate[c] ? 0.5 : (v[c] - min[c]) / (max[c] - min[c]);
  return out;
}

std::vector<double> NormalizationSpec::denormalize(const std::vector<double>& v) const {
  if (v.size() != size()) throw UserError("denormalize: component count mismatch");
  std::vector<double> out(v.size());
  for (std::size_t c = 0; c < v.size(); ++c)
    out[c] = degenerate[c] ? min[c] : min[c] + v[c] * (max[c] - min[c]);
  return out;
}

json NormalizationSpec::to_json() const {
  return {{"min", min}, {"max", max}, {"degenerate", degenerate}};
}

NormalizationSpec NormalizationSpec::from_json(const json& j) {
  NormalizationSpec s;
  s.min = j.at("min").get<std::vector<double>>();
  s.max = j.at("max").get<std::vector<double>>();
  s.degenerate = j.at("degenerate").get<std::vector<bool>>();
  if (s.max.size() != s.min.size() || s.degenerate.size() != s.min.size())
    throw UserError("normalization: inconsistent lengths");
  for (std::size_t c = 0; c < s.min.size(); ++c)
    if (!(s.min[c] <= s.max[c])) throw UserError("normalization: min > max");
  return s;
}

std::vector<double> encode_action(const Action& a, const ActionSpace& space) {
  if (!space.contains(a)) throw UserError("action " + to_string(a) + " is not in the action space");
  if (space.kind == ActionKind::discrete) {
    std::vector<double> one_hot(static_cast<std::size_t>(space.levels), 0.0);
    one_hot[static_cast<std::size_t>(a.index)] = 1.0;
    return one_hot;
  }
  return {a.value};
}

ActionSampler default_action_sampler(const ActionSpace& space) {
  if (space.kind == ActionKind::discrete) {
    return [levels = space.levels](const Observation&, std::mt19937_64& rng) {
      return Action::discrete(std::uniform_int_distribution<int>(0, levels - 1)(rng));
    };
  }
  return [lo = space.lo, hi = space.hi](const Observation&, std::mt19937_64& rng) {
    static constexpr double kGrid[] = {-0.5, 0.0, 0.5};
    if (std::uniform_int_distribution<int>(0, 1)(rng) == 0)
      return Action::continuous(kGrid[std::uniform_int_distribution<int>(0, 2)(rng)]);
    return Action::continuous(std::uniform_real_distribution<double>(lo, hi)(rng));
  };
}

std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

namespace {

std::vector<RolloutSample> rollout_trace(const Trace& trace, const Policy& policy, const EnvFactory& factory,
                                         const RolloutConfig& config, const ActionSampler& sampler,
                                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution explore(config.exploratory_fraction);
  auto env = factory.make(std::make_shared<const Trace>(trace));
  const auto space = env->action_space();

  std::vector<RolloutSample> out;
  int step = 0;
  while (!env->done()) {
    if (step % config.spacing != 0) {
      env->step(policy.act(env->observation()));
      ++step;
      continue;
    }
    RolloutSample sample;
    const Observation obs = env->observation();
    sample.features = featurize(obs, config.mode, factory, &policy);
    sample.flavor = explore(rng) ? Flavor::exploratory : Flavor::onpolicy;
    sample.action = sample.flavor == Flavor::exploratory ? sampler(obs, rng) : policy.act(obs);
    sample.action_encoding = encode_action(sample.action, space);
    sample.trace_id = trace.id;
    sample.anchor = step;

    std::vector<std::vector<double>> rewards;
    Action next = sample.action;
    for (int k = 0; k < config.t_max && !env->done(); ++k) {
      rewards.push_back(env->step(next).components);
      ++step;
      if (!env->done()) next = policy.act(env->observation());
    }
    sample.target = truncated_decomposed_return(rewards, config.gamma, config.t_max);
    sample.window = static_cast<int>(rewards.size());
    out.push_back(std::move(sample));
  }
  return out;
}

}  // namespace

std::vector<RolloutSample> collect_rollouts(const TraceSet& traces, const Policy& policy, const EnvFactory& env,
                                            const RolloutConfig& config, const ActionSampler& sampler) {
  config.validate();
  const ActionSampler pick = sampler ? sampler : default_action_sampler(env.action_space());
  std::vector<std::vector<RolloutSample>> per_trace(traces.size());
  parallel_for(traces.size(), [&](std::size_t i) {
    per_trace[i] = rollout_trace(traces.traces[i], policy, env, config, pick, substream_seed(config.seed, i));
  });
  std::vector<RolloutSample> out;
  for (auto& v : per_trace) std::move(v.begin(), v.end(), std::back_inserter(out));
  return out;
}

std::vector<RolloutSample> collect_onpolicy(const TraceSet& traces, const Policy& policy, const EnvFactory& env,
                                            RolloutConfig config) {
  config.exploratory_fraction = 0.0;
  return collect_rollouts(traces, policy, env, config);
}

std::vector<RolloutSample> collect_exploratory(const TraceSet& traces, const Policy& policy,
                                               const EnvFactory& env, RolloutConfig config,
                                               const ActionSampler& sampler) {
  config.exploratory_fraction = 1.0;
  return collect_rollouts(traces, policy, env, config, sampler);
}

std::pair<std::vector<RolloutSample>, NormalizationSpec> normalize_returns(std::vector<RolloutSample> samples) {
  if (samples.empty()) throw UserError("normalize_returns: no samples");
  const std::size_t n = samples.front().target.values.size();
  NormalizationSpec spec;
  spec.min.assign(n, std::numeric_limits<double>::infinity());
  spec.max.assign(n, -std::numeric_limits<double>::infinity());
  for (const auto& s : samples) {
    if (s.target.values.size() != n) throw UserError("normalize_returns: component count mismatch");
    for (std::size_t c = 0; c < n; ++c) {
      spec.min[c] = std::min(spec.min[c], s.target.values[c]);
      spec.max[c] = std::max(spec.max[c], s.target.values[c]);
    }
  }
  spec.degenerate.resize(n);
  for (std::size_t c = 0; c < n; ++c) spec.degenerate[c] = spec.max[c] == spec.min[c];
  for (auto& s : samples) s.target.values = spec.normalize(s.target.values);
  return {std::move(samples), std::move(spec)};
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw UserError("cannot write " + path.string());
  json header = {{"env", data.env.to_json()},
                 {"policy", data.policy_id},
                 {"rollout", data.config.to_json()},
                 {"normalization", data.normalization.to_json()},
                 {"components", data.env.components().names}};
  out << json{{"header", header}}.dump() << '\n';
  for (const auto& s : data.samples) {
    json j = {{"features", s.features.values}, {"action", s.action_encoding}, {"target", s.target.values},
              {"flavor", to_string(s.flavor)},  {"trace", s.trace_id},        {"anchor", s.anchor}};
    out << j.dump() << '\n';
  }
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw UserError(path.string() + ": empty dataset");
  Dataset data;
  try {
    const json h = json::parse(line).at("header");
    data.env = EnvFactory::from_json(h.at("env"));
    data.policy_id = h.at("policy").get<std::string>();
    data.config = RolloutConfig::from_json(h.at("rollout"));
    data.normalization = NormalizationSpec::from_json(h.at("normalization"));
  } catch (const UserError&) {
    throw;
  } catch (const std::exception& e) {
    throw UserError(path.string() + ":1: bad header: " + e.what());
  }
  const auto space = data.env.action_space();
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      RolloutSample s;
      s.features.values = j.at("features").get<std::vector<double>>();
      s.features.mode = data.config.mode;
      s.action_encoding = j.at("action").get<std::vector<double>>();
      if (space.kind == ActionKind::discrete) {
        const auto it = std::max_element(s.action_encoding.begin(), s.action_encoding.end());
        s.action = Action::discrete(static_cast<int>(it - s.action_encoding.begin()));
      } else {
        s.action = Action::continuous(s.action_encoding.at(0));
      }
      s.target.values = j.at("target").get<std::vector<double>>();
      s.target.gamma = data.config.gamma;
      s.target.t_max = data.config.t_max;
      s.flavor = flavor_from_string(j.at("flavor").get<std::string>());
      s.trace_id = j.at("trace").get<std::string>();
      s.anchor = j.at("anchor").get<int>();
      data.samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw UserError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return data;
}

}  // namespace qx
