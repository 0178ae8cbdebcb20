#include "qexplain/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "qexplain/error.hpp"

namespace qx {

std::vector<double> Policy::embed(const Observation&) const {
  throw UserError("policy " + id() + " does not expose an embedding");
}

namespace {

const AbrState& as_abr(const Observation& obs) {
  if (const auto* s = std::get_if<AbrState>(&obs)) return *s;
  throw UserError("policy expects an ABR state");
}

const CcState& as_cc(const Observation& obs) {
  if (const auto* s = std::get_if<CcState>(&obs)) return *s;
  throw UserError("policy expects a CC state");
}

}  // namespace

AbrBufferPolicy::AbrBufferPolicy(int levels, double reservoir_s, double cushion_s)
    : levels_(levels), reservoir_(reservoir_s), cushion_(cushion_s) {
  if (levels_ < 2 || !(cushion_ > reservoir_)) throw UserError("abr-bba: invalid parameters");
}

Action AbrBufferPolicy::act(const Observation& obs) const {
  const double buffer = as_abr(obs).buffer_s;
  if (buffer <= reservoir_) return Action::discrete(0);
  if (buffer >= cushion_) return Action::discrete(levels_ - 1);
  const double frac = (buffer - reservoir_) / (cushion_ - reservoir_);
  const int idx = static_cast<int>(std::floor(frac * (levels_ - 1)));
  return Action::discrete(std::clamp(idx, 0, levels_ - 1));
}

AbrLookaheadPolicy::AbrLookaheadPolicy(AbrConfig config, int window, int horizon)
    : config_(std::move(config)), window_(window), horizon_(horizon) {
  config_.validate();
  if (window_ < 1) throw UserError("abr-mpc: window must be >= 1");
  if (horizon_ < 1) throw UserError("abr-mpc: horizon must be >= 1");
}

Action AbrLookaheadPolicy::act(const Observation& obs) const {
  const auto& s = as_abr(obs);
  double inv_sum = 0.0;
  int n = 0;
  for (std::size_t i = s.chunk_mb.size(); i-- > 0 && n < window_;) {
    if (s.transmit_s[i] <= 0.0) break;
    inv_sum += s.transmit_s[i] / s.chunk_mb[i];
    ++n;
  }
  if (n == 0) return Action::discrete(0);
  const double estimate = n / inv_sum;
  const double q_last = config_.quality(s.last_quality);
  int best = 0;
  double best_score = -1e300;
  // Hold level a for `horizon_` chunks at the harmonic-mean throughput.
  for (int a = 0; a < config_.levels; ++a) {
    const double download = config_.chunk_mb[a] / estimate;
    const double q = config_.quality(a);
    double buffer = s.buffer_s;
    double score = -config_.weights[1] * std::abs(q - q_last);
    for (int k = 0; k < horizon_; ++k) {
      const double stall = std::max(0.0, download - buffer);
      buffer = std::min(std::max(buffer - download, 0.0) + config_.chunk_seconds, config_.max_buffer_s);
      score += config_.weights[0] * q - config_.weights[2] * stall;
    }
    if (score > best_score) {
      best_score = score;
      best = a;
    }
  }
  return Action::discrete(best);
}

CcAimdPolicy::CcAimdPolicy(double loss_tolerance, double latency_tolerance)
    : loss_tolerance_(loss_tolerance), latency_tolerance_(latency_tolerance) {}

Action CcAimdPolicy::act(const Observation& obs) const {
  const auto& s = as_cc(obs);
  const double loss = s.loss.back();
  const double ratio = s.latency_ratio.back();
  if (loss > loss_tolerance_ || ratio > latency_tolerance_) return Action::continuous(-0.3);
  return Action::continuous(0.1);
}

ExternalPolicy::ExternalPolicy(EnvFactory env, DenseNet net) : env_(std::move(env)), net_(std::move(net)) {
  if (net_.input_size() != raw_feature_size(env_))
    throw UserError("external policy: network input does not match the raw feature size");
  const auto space = env_.action_space();
  const std::size_t outputs = space.kind == ActionKind::discrete ? space.levels : 1;
  if (net_.output_size() != outputs) throw UserError("external policy: network output size mismatch");
}

std::unique_ptr<ExternalPolicy> ExternalPolicy::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open policy file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw UserError("policy file " + path.string() + ": " + e.what());
  }
  if (j.value("magic", "") != "qxpolicy1") throw UserError("policy file: bad magic");
  EnvFactory env = EnvFactory::from_json(j);
  return std::make_unique<ExternalPolicy>(std::move(env), DenseNet::from_json(j.at("net")));
}

Action ExternalPolicy::act(const Observation& obs) const {
  const auto features = featurize(obs, FeatureMode::raw, env_);
  const auto out = net_.forward(std::span<const double>(features.values));
  if (env_.kind == EnvKind::abr) {
    const auto it = std::max_element(out.begin(), out.end());
    return Action::discrete(static_cast<int>(it - out.begin()));
  }
  return Action::continuous(std::tanh(out.front()));
}

std::vector<double> ExternalPolicy::embed(const Observation& obs) const {
  const auto features = featurize(obs, FeatureMode::raw, env_);
  Eigen::VectorXd h = Eigen::Map<const Eigen::VectorXd>(features.values.data(),
                                                        static_cast<Eigen::Index>(features.values.size()));
  const auto& layers = net_.layers();
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    Eigen::VectorXd z = layers[i].w * h + layers[i].b;
    if (layers[i].act == Activation::relu) z = z.cwiseMax(0.0);
    h = std::move(z);
  }
  return {h.data(), h.data() + h.size()};
}

std::unique_ptr<Policy> make_policy(const std::string& id, const EnvFactory& env,
                                    const std::filesystem::path& external_path) {
  if (id == "abr-bba") {
    if (env.kind != EnvKind::abr) throw UserError("policy abr-bba needs the abr environment");
    return std::make_unique<AbrBufferPolicy>(env.abr.levels);
  }
  if (id == "abr-mpc") {
    if (env.kind != EnvKind::abr) throw UserError("policy abr-mpc needs the abr environment");
    return std::make_unique<AbrLookaheadPolicy>(env.abr);
  }
  if (id == "cc-aimd") {
    if (env.kind != EnvKind::cc) throw UserError("policy cc-aimd needs the cc environment");
    return std::make_unique<CcAimdPolicy>();
  }
  if (id == "external") {
    if (external_path.empty()) throw UserError("policy external needs a policy file");
    auto p = ExternalPolicy::load(external_path);
    if (p->action_space().kind != env.action_space().kind)
      throw UserError("external policy was built for a different environment");
    return p;
  }
  throw UserError("unknown policy '" + id + "'");
}

std::size_t raw_feature_size(const EnvFactory& env) {
  if (env.kind == EnvKind::abr) return 2 * static_cast<std::size_t>(env.abr.history) + 2;
  return 4 * static_cast<std::size_t>(env.cc.history) + 1;
}

FeatureVector featurize(const Observation& obs, FeatureMode mode, const EnvFactory& env,
                        const Policy* policy) {
  FeatureVector fv;
  fv.mode = mode;
  if (mode == FeatureMode::embedding) {
    if (!policy || !policy->has_embedding())
      throw UserError("embedding features requested but the policy has no embedding");
    fv.values = policy->embed(obs);
    return fv;
  }
  if (env.kind == EnvKind::abr) {
    const auto& s = as_abr(obs);
    const auto& c = env.abr;
    fv.values.reserve(raw_feature_size(env));
    for (double v : s.chunk_mb) fv.values.push_back(v / 16.0);
    for (double v : s.transmit_s) fv.values.push_back(std::min(v / 10.0, 1.0));
    fv.values.push_back(s.buffer_s / c.max_buffer_s);
    fv.values.push_back(static_cast<double>(s.last_quality) / (c.levels - 1));
  } else {
    const auto& s = as_cc(obs);
    const double rmax = env.cc.max_rate_mbps;
    fv.values.reserve(raw_feature_size(env));
    for (double v : s.sent_mbps) fv.values.push_back(v / rmax);
    for (double v : s.delivered_mbps) fv.values.push_back(v / rmax);
    for (double v : s.latency_ratio) fv.values.push_back((std::clamp(v, 1.0, 5.0) - 1.0) / 4.0);
    for (double v : s.loss) fv.values.push_back(v);
    fv.values.push_back(s.rate_mbps / rmax);
  }
  return fv;
}

}  // namespace qx
